class FedVfdaError(Exception):
    """Base class for all fedvfda errors."""

    pass


class FedVfdaWarning(RuntimeWarning):
    """Base class for all fedvfda warnings."""

    pass


class ShapeError(FedVfdaError):
    """Raised when tensor shapes do not satisfy an operation's contract."""

    pass


class GradientCacheError(FedVfdaError):
    """Raised when a backward pass is given a missing or mismatched cache."""

    pass


class ConfigError(FedVfdaError):
    """Raised when an experiment configuration is invalid, carries the key path."""

    def __init__(self, key_path: str, message: str) -> None:
        self.key_path = key_path
        super().__init__(f"{key_path}: {message}" if key_path else message)


class MessageError(FedVfdaError):
    """Raised when a protocol message cannot be encoded or decoded."""

    pass


class MessageMagicError(MessageError):
    """Raised when a protocol message does not start with the expected magic bytes."""

    pass


class MessageVersionError(MessageError):
    """Raised when a protocol message has an unsupported version."""

    pass


class MessageTruncatedError(MessageError):
    """Raised when a protocol message is shorter than its header declares."""

    pass


class VolumeFormatError(FedVfdaError):
    """Raised when a volume file cannot be read or written."""

    pass


class VolumeMagicError(VolumeFormatError):
    """Raised when a volume file does not start with the expected magic bytes."""

    pass


class VolumeDimensionError(VolumeFormatError):
    """Raised when a volume file declares an unsupported volume size."""

    pass


class VolumeTruncatedError(VolumeFormatError):
    """Raised when a volume file is shorter than its header declares."""

    pass


class ModelFormatError(FedVfdaError):
    """Raised when a saved model file is malformed or incompatible."""

    pass


class FederationError(FedVfdaError):
    """Raised when a federated round cannot be completed."""

    pass


class TransportError(FedVfdaError):
    """Raised when a message transport fails to deliver or collect messages."""

    pass
