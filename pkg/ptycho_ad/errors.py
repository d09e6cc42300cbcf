
class PtychoError(Exception):
    """Base class for every error raised by ptycho_ad."""


class DimensionError(PtychoError):
    pass


class TapeStateError(PtychoError):
    pass


class NumericError(PtychoError):
    pass


class ConfigError(PtychoError):
    pass


class DatasetError(PtychoError):
    pass


class DatasetFormatError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


class DatasetShapeError(DatasetError):
    pass


class DatasetChecksumError(DatasetError):
    pass


class ReconstructionDivergedError(PtychoError):
    """
    Raised when the loss becomes non-finite. `state` holds the last finite
    ReconstructionState (the one from before the failing step).
    """

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


class ParameterError(PtychoError):
    pass
