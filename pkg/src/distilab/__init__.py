"""Progressive dataset distillation for two-layer ReLU networks on multi-index targets."""

from . import construction, distillation, network, oracle, task_model, tensor_hermite, training

__version__ = "0.1.0"

__all__ = [
    "construction",
    "distillation",
    "network",
    "oracle",
    "task_model",
    "tensor_hermite",
    "training",
    "__version__",
]
