"""advlab: desk-scale adversarial robustness laboratory.

Gradient-based attacks, a per-class dual-latent variational autoencoder
defense trained by a minimax game, an adversarial-input detector, and a
reproducible evaluation harness, all on a self-contained float64 autodiff
engine.
"""

__version__ = "0.1.0"

from .errors import (
    AdvlabError,
    ContractError,
    DimensionError,
    DomainError,
    FormatError,
    NumericError,
    ParseError,
)
from .tensor import Tape, Tensor, backward

__all__ = [
    "AdvlabError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "NumericError",
    "ParseError",
    "Tape",
    "Tensor",
    "backward",
    "__version__",
]
