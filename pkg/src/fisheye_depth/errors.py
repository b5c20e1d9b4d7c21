"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An input violates an operation's precondition."""


class DomainError(ContractViolation):
    """A scalar argument lies outside the domain of a function."""


class FormatError(OSError):
    """A file or config does not follow the expected format."""


class DivergenceError(RuntimeError):
    """The optimizer produced a non-finite loss."""
