"""Exception hierarchy shared across the package."""


class HVTError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(HVTError, ValueError):
    """Operands have non-conforming shapes."""


class ConfigError(HVTError, ValueError):
    """An invalid hyperparameter or configuration value."""


class ContractError(HVTError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class InputError(HVTError, ValueError):
    """Bad user-supplied data: files, datasets, prediction sets."""


class CheckpointError(InputError):
    """A checkpoint file could not be loaded."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the checkpoint magic."""


class CheckpointVersionError(CheckpointError):
    """The checkpoint format version is unsupported."""


class CheckpointCRCError(CheckpointError):
    """The payload checksum does not match the stored CRC."""


class CheckpointManifestError(CheckpointError):
    """The tensor manifest does not match the requested model."""


class ContainerFormatError(InputError):
    """An image container file is malformed."""
