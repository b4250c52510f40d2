"""Audio-visual speech enhancement: a numpy autodiff kernel, the masking network, metrics and tooling."""

from .config import ModelConfig, RunConfig, TrainConfig, preset
from .kernel import Tensor, gradcheck, make_rng, no_grad
from .model import AVSEModel

__all__ = ["AVSEModel", "ModelConfig", "RunConfig", "TrainConfig", "Tensor", "gradcheck", "make_rng", "no_grad",
           "preset"]
__version__ = "0.1.0"
