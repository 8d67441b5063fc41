"""Domain adversarial reinforcement learning for partial domain adaptation."""
from .adversarial import AdvNets, make_adv_nets
from .orchestrator import DarlConfig, RunMetrics, run_ablation, run_darl
from .synthdata import DaTask, ShiftSpec, generate_task

__version__ = "0.1.0"

__all__ = [
    "AdvNets",
    "DaTask",
    "DarlConfig",
    "RunMetrics",
    "ShiftSpec",
    "generate_task",
    "make_adv_nets",
    "run_ablation",
    "run_darl",
]
