"""Exception types shared across the runtime."""


class MrpcError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(MrpcError):
    """Schema text failed to parse or validate.

    Carries a 1-based source position when one is known.
    """

    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        if line is not None:
            message = f"{message} (line {line}, col {col})"
        super().__init__(message)


class WireError(MrpcError):
    """Malformed frame or descriptor on the wire or in a queue."""


class BadMagic(WireError):
    pass


class FrameTooLarge(WireError):
    pass


class TruncatedFrame(WireError):
    pass


class HeapError(MrpcError):
    """Shared-heap allocation or bookkeeping failure."""


class HeapExhausted(HeapError):
    """Heap cannot grow further; caller should back off and retry."""


class BadBlock(HeapError):
    """A block reference does not match any live allocation."""


class RegionError(MrpcError):
    """Shared-memory region creation or attach failure."""


class AccessDenied(RegionError):
    """Attach credentials did not match the region owner's token."""


class ConnectionRejected(MrpcError):
    """The remote service refused the connection during handshake."""

    def __init__(self, reason):
        self.reason = reason
        super().__init__(f"connection rejected: {reason}")


class RpcError(MrpcError):
    """A call completed with an error status."""

    def __init__(self, status, detail=""):
        self.status = status
        super().__init__(f"rpc failed: {status}" + (f" ({detail})" if detail else ""))


class ControlError(MrpcError):
    """Control-plane command failed."""


class EngineFault(MrpcError):
    """An engine raised during do_work; its connection is torn down."""
