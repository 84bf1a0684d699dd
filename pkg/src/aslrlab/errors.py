"""Exception types shared across the lab."""


class LabError(Exception):
    pass


class ConfigError(LabError, ValueError):
    """Invalid scenario, profile or run configuration."""


class DomainError(LabError, ValueError):
    """An operation was given an address or argument outside its domain."""


class MaskedOpFault(LabError):
    """An unmasked vector element touched an invalid or inaccessible page."""

    def __init__(self, addr: int, reason: str):
        super().__init__(f"fault at {addr:#x}: {reason}")
        self.addr = addr
        self.reason = reason


class CapabilityError(LabError, RuntimeError):
    """The requested backend cannot run on this machine."""


class BackendError(LabError, RuntimeError):
    pass


class UsageError(LabError, ValueError):
    """A primitive or campaign was called without its preconditions."""
