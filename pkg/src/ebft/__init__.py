"""Toolkit for pruning toy transformers and recovering them with block-wise
reconstruction-error fine-tuning."""

from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     EbftError, FormatError, NumericError, VocabularyError)
from .tensor import Tape, Tensor, backward

__all__ = [
    "ConfigError", "ContractError", "DataError", "DimensionError",
    "EbftError", "FormatError", "NumericError", "VocabularyError",
    "Tape", "Tensor", "backward",
]
