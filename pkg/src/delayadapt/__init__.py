"""Delay-adaptive backstepping control of a 2x2 hyperbolic PDE-ODE system."""

from .adaptation import AdaptationState, IdentifierAccumulators, identify, trigger_check, window_start
from .controller import (
    ControlGains,
    LyapunovParams,
    NormConstants,
    adaptive_control,
    build_gains,
    lyapunov_feasibility,
    nominal_control,
    norm_constants,
)
from .core import ConfigurationError, Grid, PlantParams, SystemState, make_grid, validate_assumptions
from .dcv import DcvParams, cable_energy, dcv_initial_state, dcv_to_plant
from .kernels import (
    KernelCache,
    Stage1Kernels,
    Stage2Kernels,
    Stage3Kernels,
    TargetState,
    forward_transform,
    inverse_transform,
    solve_stage1,
    solve_stage2,
    solve_stage3,
)
from .simulator import SimConfig, TrajectoryLog, omega, run_closed_loop, step

__all__ = [name for name in dir() if not name.startswith("_")]
