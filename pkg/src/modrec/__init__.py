"""modrec: sparse nonlinear ODE model recovery and kernel cost estimation.

The package recovers the coefficients and sparsity structure of polynomial
ODE systems from sampled trajectories.  A GRU encoder reads measurement
windows, a dense head emits coefficient estimates, a differentiable
fixed-step Runge-Kutta solve reconstructs each window, and the mean squared
reconstruction error drives training; all gradients are exact reverse-mode
derivatives of the unrolled computation.  A companion module estimates the
latency and resource footprint of the pipelined hardware kernel for the same
architecture, calibrated against reference synthesis measurements.
"""

__version__ = "0.1.0"

from .dynamics import (
    DynamicalSystem,
    IdentifiabilityReport,
    Trajectory,
    add_noise,
    builtin_systems,
    get_system,
    identifiability_check,
    load_system_config,
    read_trajectory_csv,
    simulate,
    write_trajectory_csv,
)
from .errors import (
    CalibrationError,
    CapacityError,
    ContractError,
    DataFormatError,
    DivergedError,
    InfeasibleIIError,
    InsufficientDataError,
    ModrecError,
    TrainingDivergedError,
    UnknownSystemError,
)
from .fpga_cost import (
    CalibrationParams,
    CostReport,
    KernelGraph,
    LoopNest,
    OptimizationConfig,
    build_kernel_graph,
    calibrate,
    estimate,
    estimate_cycles,
    estimate_resources,
    speedup_report,
)
from .library import (
    Monomial,
    SparseModel,
    TermLibrary,
    build_library,
    evaluate,
    evaluate_jacobian,
    rhs,
)
from .network import (
    DenseParams,
    GruParams,
    NetworkOutput,
    NetworkParams,
    apply_shifts,
    dense_forward,
    gru_forward,
    init_params,
    network_backward,
    network_forward,
    ode_loss,
    sparsify,
)
from .solver import SolveTape, backprop_solve, solve
from .training import (
    EvalReport,
    RecoveredModel,
    TrainConfig,
    evaluate as evaluate_recovery,
    make_batches,
    train,
)

__all__ = [name for name in dir() if not name.startswith("_")]
