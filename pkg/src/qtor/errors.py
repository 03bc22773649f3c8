"""Exception types shared across the simulator."""


class QtorError(Exception):
    """Base class for all simulator errors."""


class EmptySession(QtorError):
    """A QKD session was started with zero pulses."""


class ProtocolViolation(QtorError):
    """An operation was invoked outside its protocol contract."""


class InsufficientKey(QtorError):
    """Not enough key material survived to finish the operation."""


class ReconciliationFailed(QtorError):
    """The post-reconciliation verification hash did not match."""


class KeyTooShort(QtorError):
    """Key material too short to store even one block."""


class UnknownKey(QtorError):
    """No block with this key ID is stored locally (cannot decrypt)."""


class KeyExhausted(QtorError):
    """The requested range runs past the unconsumed key material."""


class ReuseViolation(QtorError):
    """A one-time-pad range was released twice; hard failure, never silent."""


class CannotUnlock(QtorError):
    """This principal does not hold the key needed to unlock a token."""


class CannotDecrypt(QtorError):
    """This node does not hold the key for the visible onion layer."""


class IntegrityFailure(QtorError):
    """An onion layer's integrity tag did not verify."""


class MalformedIdentity(QtorError):
    """Decrypted identity bytes do not name any registered node."""


class SchedulingError(QtorError):
    """An event was scheduled in the simulation's past."""


class RunawayScenario(QtorError):
    """The event loop exceeded its step cap without going idle."""


class ConfigError(QtorError):
    """A scenario configuration failed validation."""


class TraceError(QtorError):
    """A trace is malformed or missing fields the auditor needs."""
