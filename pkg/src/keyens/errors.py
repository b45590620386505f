"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class KeyensError(Exception):
    exit_code = 4


class ConfigError(KeyensError, ValueError):
    exit_code = 2


class DataError(KeyensError, ValueError):
    exit_code = 3


class ShapeMismatch(KeyensError, ValueError):
    pass


class InvalidDimensions(KeyensError, ValueError):
    pass


class InvalidLabel(KeyensError, ValueError):
    pass


class FormatError(DataError):
    """Bad magic, unsupported version or truncated binary file."""


class MalformedRecord(DataError):
    pass


class EnsembleError(KeyensError, ValueError):
    """Invalid N or S, duplicate seeds, or a member/key mismatch."""


class RoutingError(KeyensError):
    """A ciphertext reached a sub-model bound to a different key."""


class GradientUnavailable(KeyensError, TypeError):
    pass


class InvalidTarget(KeyensError, ValueError):
    pass
