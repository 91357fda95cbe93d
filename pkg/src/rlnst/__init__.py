"""rlnst: step-wise neural style transfer driven by a maximum-entropy
actor-critic over 2D latent actions, on a self-contained numpy autodiff core.
"""

from .autodiff import Tensor, backward, finite_diff_gradient, no_grad, tape
from .losses import LossWeights, StyleTarget
from .nets import Model, ParamRegistry, build_model
from .rng import Rng
from .training import ReplayPool, TrainConfig, Transition, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "finite_diff_gradient", "no_grad", "tape",
    "LossWeights", "StyleTarget", "Model", "ParamRegistry", "build_model",
    "Rng", "ReplayPool", "TrainConfig", "Transition", "train", "__version__",
]
