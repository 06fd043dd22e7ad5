"""Managed RPC runtime.

A per-host service owns marshalling, policy enforcement, and transport on
behalf of local applications.  Applications talk to the service over shared
memory: argument bytes live in per-app heaps, control records flow through
lock-free queues, and the service moves bytes onto the network with exactly
one marshal on the send side and one unmarshal on the receive side.

The public application surface is :mod:`mrpc.client`; the service side is
:mod:`mrpc.service`.  Everything else is plumbing shared by both.
"""

from .errors import (
    MrpcError,
    SchemaError,
    WireError,
    HeapError,
    ConnectionRejected,
    RpcError,
    ControlError,
)
from .schema import parse_schema, schema_digest, SchemaDescriptor
from .wire import RpcDescriptor, BlockRef, Direction, Status

# importing these fills the engine registry
from . import policy as _policy  # noqa: F401
from . import transport as _transport  # noqa: F401

__all__ = [
    "MrpcError",
    "SchemaError",
    "WireError",
    "HeapError",
    "ConnectionRejected",
    "RpcError",
    "ControlError",
    "parse_schema",
    "schema_digest",
    "SchemaDescriptor",
    "RpcDescriptor",
    "BlockRef",
    "Direction",
    "Status",
]
