"""Exception hierarchy shared by all simulator components."""


class SimError(Exception):
    """Base class for every error raised by the simulator."""


class ValueOutOfRange(SimError, ValueError):
    pass


class ConfigError(SimError):
    pass


class InvariantViolation(SimError):
    """A model invariant failed during a run (liveness, integrity, bounds)."""


# memory model
class OverlapError(SimError):
    pass


class NotMappedError(SimError):
    pass


class SegFault(SimError):
    """Access to an address that is not part of the address space."""

    def __init__(self, va: int):
        super().__init__(f"segmentation fault at {va:#x}")
        self.va = va


class PinLimitExceeded(SimError):
    pass


class NotPinnedError(SimError):
    pass


# iommu
class BankBusy(SimError):
    pass


class BankDisabled(SimError):
    pass


class NoActiveFault(SimError):
    pass


class UnknownToken(SimError):
    pass


# engine
class ChannelBusy(SimError):
    pass


class TooManyOutstanding(SimError):
    pass


class ChannelNotAllocated(SimError):
    pass


class EmptyFifo(SimError):
    pass


class ProtocolViolation(SimError):
    pass


# driver / codecs
class FieldOverflow(SimError, ValueError):
    pass


class BadLength(SimError, ValueError):
    pass


class BadDigit(SimError, ValueError):
    pass


class UnboundDomain(SimError):
    pass


class ProcessKilled(SimError):
    """A simulated process died on an unabsorbed segmentation fault."""


class Unsatisfiable(SimError):
    pass
