"""Mixed-autonomy traffic on a road stretch: two-class ARZ dynamics with
Markov-jumping AV spacing, nominal backstepping boundary control, and
numerical stability checks."""

__version__ = "0.1.0"

from .params import ConfigError, TrafficParams, SpacingModeSet, load_config, paper_config  # noqa: E402
from .model import ModeLinearization, ModelError, Regime, equilibrium, linearize  # noqa: E402
from .backstepping import KernelGrid, KernelError, build_controller, solve_kernels  # noqa: E402
from .markov import ChainSpec, ModePath, kolmogorov_forward, sample_path  # noqa: E402
from .sim import Scenario, Simulator, Trace, run, scenario_from_config  # noqa: E402

__all__ = [
    "ConfigError", "TrafficParams", "SpacingModeSet", "load_config", "paper_config",
    "ModeLinearization", "ModelError", "Regime", "equilibrium", "linearize",
    "KernelGrid", "KernelError", "build_controller", "solve_kernels",
    "ChainSpec", "ModePath", "kolmogorov_forward", "sample_path",
    "Scenario", "Simulator", "Trace", "run", "scenario_from_config",
]
