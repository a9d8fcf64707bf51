"""Sound symbolic-interval analysis, robust training and attacks for small ReLU networks."""

__version__ = "0.1.0"

from .analysis import Box, propagate, verifiable_robust_loss, worst_case_logits  # noqa: E402
from .attack import AttackConfig, interval_attack, pgd  # noqa: E402
from .data_io import Dataset, InputDomain  # noqa: E402
from .model import Network, forward  # noqa: E402
from .train import TrainConfig, train  # noqa: E402
from .verify import RobustnessSpec, metrics, parallel_verify, verify_input  # noqa: E402

__all__ = [
    "Box", "propagate", "verifiable_robust_loss", "worst_case_logits", "AttackConfig",
    "interval_attack", "pgd", "Dataset", "InputDomain", "Network", "forward", "TrainConfig",
    "train", "RobustnessSpec", "metrics", "parallel_verify", "verify_input",
]
