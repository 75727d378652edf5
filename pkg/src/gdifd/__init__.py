"""Channel-gated domain-invariant feature disentanglement for a toy anchor-free detector."""

__version__ = "0.1.0"

from .estimator import GDIFDDetector
from .harness import TrainConfig
from .synthdata import BenchmarkConfig, make_splits

__all__ = ["GDIFDDetector", "TrainConfig", "BenchmarkConfig", "make_splits", "__version__"]
