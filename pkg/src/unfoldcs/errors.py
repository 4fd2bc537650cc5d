"""Exception types shared across the package."""


class UnfoldCSError(Exception):
    """Base class for all package errors."""


class DomainError(UnfoldCSError, ValueError):
    """An argument is outside the domain an operation is defined on."""


class ConfigError(UnfoldCSError, ValueError):
    """A configuration document is malformed or inconsistent."""


class StateError(UnfoldCSError, RuntimeError):
    """An operation was invoked before its required state was set up."""


class NumericError(UnfoldCSError, ArithmeticError):
    """A non-finite value appeared during computation.

    ``stage_index`` identifies the unrolled stage that produced it, or is
    None when the failure happened outside the stage loop.
    """

    def __init__(self, message, stage_index=None):
        super().__init__(message)
        self.stage_index = stage_index
