"""Exception types shared across the package."""


class ForensicsError(Exception):
    """Base class for all package errors."""


class SpecError(ForensicsError, ValueError):
    """A topology or scenario specification is malformed."""


class PairingError(SpecError):
    """Servers cannot be arranged into HA pairs."""


class ConfigError(ForensicsError, ValueError):
    """Inconsistent configuration (mismatched topology, bad parameters)."""


class NotFoundError(ForensicsError, KeyError):
    """A component id does not exist in the topology."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "not found"


class InfeasibleError(ForensicsError):
    """No monitor placement within budget satisfies identifiability.

    ``witness`` holds the smallest (component, failure set) pair that is
    not covered by the best placement found.
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class InsufficientDataError(ForensicsError, ValueError):
    """Too few points for the requested neighbourhood size."""


class EmptyWindowError(ForensicsError, ValueError):
    """A report was requested for a window without probe records."""


class ConvergenceWarning(UserWarning):
    """MCMC chains did not reach the configured R-hat bound."""
