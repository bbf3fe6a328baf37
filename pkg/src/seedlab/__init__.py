"""seedlab: a desk-scale lab for instruction-editing flow models.

Synthetic block-structured editing tasks with analytically known ground
truth, a small autodiff engine, rectified-flow training with gated
preservation rewards, guidance and few-step distillation, and post-training
quantization with an arithmetic cost model.
"""

__version__ = "0.1.0"

from .autodiff import Graph, Tensor, backward
from .rng import Rng, RngState

__all__ = ["Graph", "Tensor", "backward", "Rng", "RngState", "__version__"]
