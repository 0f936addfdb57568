"""Exception hierarchy shared by all SegTransVAE modules.
"""


class SegTransVAEError(Exception):
    """Base class for errors."""
    pass


class ShapeError(SegTransVAEError):
    """Raised when tensor extents are incompatible with an operation."""
    pass


class DomainError(SegTransVAEError):
    """Raised when a value lies outside the domain of an operation."""
    pass


class DegenerateInputError(DomainError):
    """Raised for inputs with zero variance where normalization needs a spread."""
    pass


class ContractError(SegTransVAEError):
    """Raised when a caller breaks a documented precondition."""
    pass


class ConfigError(SegTransVAEError):
    """Raised for invalid configuration values.

    Arguments:
        message (`str`): Description of the problem.
        errors (`dict`, optional): The cerberus error dictionary, if any.
    """
    def __init__(self, message, errors=None):
        super(ConfigError, self).__init__(message)
        self.errors = errors or {}

    def __str__(self):
        if self.errors:
            return 'Error: {}: {}'.format(self.args[0], self.errors)
        return 'Error: {}'.format(self.args[0])


class ConfigMismatchError(ConfigError):
    """Raised when a stored configuration differs from the requested one."""
    pass


class FormatError(SegTransVAEError):
    """Raised for malformed binary files.

    Arguments:
        message (`str`): Description of the problem.
        offset (`int`): Byte offset at which the problem was detected.
    """
    def __init__(self, message, offset):
        super(FormatError, self).__init__(message)
        self.offset = offset

    def __str__(self):
        return 'Error at byte offset {}: {}'.format(self.offset, self.args[0])


class VersionError(FormatError):
    """Raised for an unsupported format version."""
    pass


class TruncationError(FormatError):
    """Raised when a file is shorter than its header declares."""
    pass


class DivergenceError(SegTransVAEError):
    """Raised when training produces non-finite values.

    Arguments:
        message (`str`): Description of the problem.
        name (`str`, optional): Name of the offending parameter or loss term.
        checkpoint (`Checkpoint`, optional): Last checkpoint taken before the failure.
    """
    def __init__(self, message, name=None, checkpoint=None):
        super(DivergenceError, self).__init__(message)
        self.name = name
        self.checkpoint = checkpoint

    def __str__(self):
        if self.name is not None:
            return 'Error: {} ({})'.format(self.args[0], self.name)
        return 'Error: {}'.format(self.args[0])
