"""Exception hierarchy shared by every module of the simulator."""


class FedWCAError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FedWCAError, ValueError):
    """Invalid shapes, hyperparameters or config file contents."""


class DataError(FedWCAError, ValueError):
    """Malformed or inconsistent data (labels out of range, bad IDX files)."""


class ProtocolError(FedWCAError, RuntimeError):
    """A federated-protocol precondition was violated."""


class CheckpointFormatError(FedWCAError, ValueError):
    """A checkpoint file does not follow the FWCA binary layout."""
