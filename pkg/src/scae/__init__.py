"""Structured sparsity for convolutional autoencoders.

Weight projections onto l1, l1,1 and l1,inf balls, a small reverse-mode
autodiff engine, a convolutional autoencoder with a range-coded latent, and
the two-phase (dense, then masked) training driver.
"""

from .errors import (
    AlgorithmError,
    ConfigError,
    ContractError,
    DecodeError,
    DimensionError,
    NumericError,
    ParseError,
    ScaeError,
)
from .model import Cae, CaeConfig, LatentCode, entropy_estimate, total_loss
from .optim import AdamState, adam_step, double_descent, mask_from_weights, masked_grad
from .projections import flatten_weight, proj_l1, proj_l11, proj_l1inf, project, sparsity
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
