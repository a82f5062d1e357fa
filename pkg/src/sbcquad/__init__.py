"""Safety barrier certificates for teams of differentially flat quadrotors."""

from .barrier import (
    BarrierConstraint,
    DegenerateGeometryError,
    EtaVector,
    InitialConditionReport,
    SafetyGeometry,
    assemble_certificates,
    barrier_value,
    check_initial_conditions,
    constraint_row,
    eta,
)
from .flatness import (
    AuditReport,
    ControlInput,
    FlatSample,
    FlatnessSingularityError,
    FullState,
    VehicleParams,
    actuator_audit,
    flat_to_input,
    flat_to_state,
)
from .lindyn import ChainMatrices, GainRow, IntegratorState, euler_step, place_poles
from .qp import (
    InfeasibleProblemError,
    RectificationProblem,
    RectifiedControl,
    RectifierFault,
    feasibility_probe,
    solve,
)
from .reference import (
    ReferenceTrajectory,
    VirtualClock,
    bezier_interp,
    circle_ref,
    clock_step,
    eval_parameterized,
    hover_ref,
)

__version__ = "0.1.0"
