"""Parameter-efficient fine-tuning lab for gridded weather-like fields.

A small numpy autodiff engine drives a toy vision transformer over gridded
fields, a set of fine-tuning strategies (prompt generation from the patch
embedding, Fisher-guided sparse updates, LoRA, SSF, AdaptFormer, visual
prompts, bias and head tuning), three synthetic tasks and their
verification metrics.
"""

from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    FormatError,
    GridPeftError,
    NumericError,
    RankError,
    UndefinedValueError,
)
from .tensor import GradientSession, Tensor, backward

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "GridPeftError",
    "NumericError",
    "RankError",
    "UndefinedValueError",
    "GradientSession",
    "Tensor",
    "backward",
]
