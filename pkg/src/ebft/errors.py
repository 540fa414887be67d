"""Exception hierarchy shared across the package.

Each class maps to one failure family; the CLI translates them to exit codes.
"""


class EbftError(Exception):
    """Base class for all package errors."""


class DimensionError(EbftError):
    """Tensor shapes are incompatible for the requested operation."""

    def __init__(self, msg, *shapes):
        if shapes:
            msg = f"{msg}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(msg)


class ContractError(EbftError):
    """An operation was called outside its documented contract."""


class VocabularyError(EbftError):
    """Token id outside the model vocabulary."""


class FormatError(EbftError):
    """Malformed checkpoint file; message names the offending entry."""


class ConfigError(EbftError):
    """Invalid or unknown configuration value."""


class DataError(EbftError):
    """Corpus or calibration data cannot satisfy the request."""


class NumericError(EbftError):
    """Training aborted on a non-finite loss; carries diagnostics."""

    def __init__(self, msg, block=None, epoch=None, lr=None):
        self.block = block
        self.epoch = epoch
        self.lr = lr
        detail = ", ".join(
            f"{k}={v}" for k, v in (("block", block), ("epoch", epoch), ("lr", lr)) if v is not None
        )
        super().__init__(f"{msg} ({detail})" if detail else msg)
