"""Exception hierarchy. Every error raised on purpose derives from `ParalmError`."""


class ParalmError(Exception):
    pass


class ShapeError(ParalmError, ValueError):
    """Operand or parameter shapes do not line up."""


class KernelError(ParalmError, ArithmeticError):
    """A kernel produced or received a non-finite value."""


class CacheOverflowError(ParalmError):
    """A session would grow past ``max_seq_len``."""


class EmptyPromptError(ParalmError, ValueError):
    """The pooler needs at least one prompt token."""


class FormatError(ParalmError, ValueError):
    """A weight or adapter file could not be decoded."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class MethodMismatchError(FormatError):
    pass


class ConfigMismatchError(FormatError):
    """An adapter was built for different model dimensions."""

    def __init__(self, field, expected, found):
        self.field = field
        self.expected = expected
        self.found = found
        super().__init__(f"{field} mismatch: backbone has {expected}, adapter has {found}")


class UnknownTenantError(ParalmError, KeyError):
    pass


class DuplicateTenantError(ParalmError, ValueError):
    pass


class DivergenceError(ParalmError, ArithmeticError):
    """Training produced a non-finite loss."""


class UnknownMethodError(ParalmError, ValueError):
    pass
