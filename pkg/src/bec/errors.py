"""Exception types shared across the package."""


class BECError(Exception):
    pass


class DanglingPredecessor(BECError):
    """insert_batch was handed a message whose predecessor cannot be resolved."""

    def __init__(self, message_id: bytes, missing: bytes):
        super().__init__(f"message {message_id.hex()[:12]} references unknown {missing.hex()[:12]}")
        self.message_id = message_id
        self.missing = missing


class CycleDetected(BECError):
    """A set of messages could not be topologically ordered.

    With a collision-resistant hash this can only happen after a collision,
    so callers should treat it as fatal.
    """


class MalformedFilter(BECError):
    pass


class MalformedWire(BECError):
    pass


class MalformedValue(BECError):
    """A broadcast value does not decode as an update set."""


class UnknownRelation(BECError):
    def __init__(self, rel: str):
        super().__init__(f"unknown relation {rel!r}")
        self.rel = rel


class UnsafeUpdate(BECError):
    """A correct replica refused to originate an update that fails the safety check."""


class StaleDelete(BECError):
    """A transaction tried to delete a tuple that is not in the local state."""


class ConfigError(BECError):
    pass


class PropertyViolation(BECError):
    def __init__(self, prop: str, replica: str, message: bytes | None = None, detail: str = ""):
        where = f" message {message.hex()[:12]}" if message else ""
        super().__init__(f"{prop} violated at {replica}{where}: {detail}".rstrip(": "))
        self.prop = prop
        self.replica = replica
        self.message = message
        self.detail = detail
