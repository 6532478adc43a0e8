"""Data-harvesting trajectory simulation and sample-path gradient optimization.

Mobile agents travel parametric closed curves at unit speed, drain fluid
data queues at fixed targets within range, and deliver onboard contents
near a base. The hybrid sample path yields exact cost derivatives with
respect to the curve parameters, which drive gradient descent over
elliptical and Fourier-series trajectory families.
"""

from .flowdyn import ConnectionMap, HybridState, assign_connections, proximity_rate, queue_flow_rates
from .hybridsim import EventRecord, SimulationError, Trace, simulate
from .ipa import (
    IpaResult,
    SensitivityState,
    TangentialCrossing,
    apply_event_jump,
    event_time_derivative,
    proximity_partial,
    run_ipa,
)
from .objective import CostBreakdown, idling, sample_cost, sample_gradient
from .optimizer import (
    OptimizationHistory,
    OptimizerConfig,
    armijo_step,
    default_trajectories,
    optimize,
    segment_search,
)
from .scenario import (
    ArrivalProcess,
    Scenario,
    ScenarioFormatError,
    ScenarioValidationError,
    Target,
    Violation,
    export_scenario,
    load_scenario,
    validate_scenario,
)
from .trajectory import (
    DegenerateTrajectory,
    EllipseParams,
    FourierParams,
    SegmentedTrajectory,
    active_segment,
    ellipse_base_penalty,
    param_partials,
    phase_rate,
    position,
    velocity,
)

__version__ = "0.1.0"
