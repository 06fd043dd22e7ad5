"""Application library: talk to the local RPC service over shared memory.

An :class:`AppSession` is one app's attachment to the service.  Opening it
performs the session handshake on the service's unix socket, maps the two
control rings and the receive heap the service created, creates the send
heap this app will allocate from, and receives the doorbell fds.

From there, everything on the hot path is shared memory:

    call():  build the argument blocks on the send heap, mark them
             sent-pending, push one descriptor record, ring the doorbell.
    pump():  pop delivery and completion records from the service ring,
             wake waiters, reclaim completed blocks, acknowledge consumed
             deliveries so the service can free them.

The library decodes a delivery into plain python values before returning
it, then acks; holders of the session can also read fields in place through
``heaps.view`` if they want to avoid even that copy.

One lock serializes the session's shared state.  Any waiting thread pumps;
parked waiters sit on the service doorbell fd, so an idle app burns no cpu.
"""

from __future__ import annotations

import logging
import os
import secrets
import select
import socket
import threading
import time
from collections import deque

from .errors import MrpcError, ConnectionRejected, RpcError
from .shmipc import (
    ControlRing,
    ConnHeaps,
    Region,
    RegionMap,
    SlabHeap,
    Wakeup,
    pack_bye_record,
    pack_ids_record,
    pack_new_region_record,
    pack_rpc_record,
    parse_record,
    region_path,
    RK_ACK,
    MAX_IDS,
    REGION_KIND_HEAP,
)
from .schema import parse_schema, schema_digest, MarshalPlan
from .service import runtime_dir, _LineReader, _send_line
from .wire import (
    Direction,
    HEAP_RECV,
    HEAP_SEND,
    RpcDescriptor,
    Status,
    build_value,
    read_value,
    walk_blocks,
)

_log = logging.getLogger("mrpc.client")

DEFAULT_TIMEOUT = 30.0
_PUSH_RETRY_S = 0.0002
_WAIT_SLICE_S = 0.01


class _Call:
    __slots__ = ("event", "desc", "error")

    def __init__(self):
        self.event = threading.Event()
        self.desc = None
        self.error = None


class AppSession:
    """One app's attachment to the local service."""

    def __init__(self, instance: str = None, socket_path: str = None):
        from .shmipc import DEFAULT_INSTANCE

        self.instance = instance or DEFAULT_INSTANCE
        path = socket_path or os.path.join(runtime_dir(self.instance), "app.sock")
        self._sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        self._sock.connect(path)
        self._reader = _LineReader(self._sock)
        self._lock = threading.Lock()
        self._closed = False

        reply = self._request({"op": "hello"})
        fds = self._reader.take_fds()
        if len(fds) != 2:
            raise MrpcError(f"expected 2 doorbell fds, got {len(fds)}")
        self.app_id = reply["app_id"]
        self._wake_out = Wakeup(fd=fds[0])  # ring when we push to a2s
        self._wake_in = Wakeup(fd=fds[1])  # readable when s2a has news

        def attach(name, token):
            return Region.attach(os.path.join(_shm_dir(), name), bytes.fromhex(token))

        self._ring_out = ControlRing(
            attach(reply["rings"]["a2s"]["name"], reply["rings"]["a2s"]["token"]),
            producer=True,
            nslots=reply["ring_slots"],
            spill=reply["ring_spill"],
        )
        self._ring_in = ControlRing(
            attach(reply["rings"]["s2a"]["name"], reply["rings"]["s2a"]["token"]),
            producer=False,
            nslots=reply["ring_slots"],
            spill=reply["ring_spill"],
        )
        self._recv_map = RegionMap(HEAP_RECV)
        r0 = reply["recv_region"]
        self._recv_map.add(r0["index"], attach(r0["name"], r0["token"]))

        self._send_heap = SlabHeap(
            HEAP_SEND,
            self._make_send_region,
            reply["heap_region"],
            reply["heap_cap"],
            on_grow=self._announce_send_region,
        )
        self.heaps = ConnHeaps(send=self._send_heap, recv=self._recv_map)
        # region 0 was created before the announce path existed; tell the
        # service about it now, before any descriptor can reference it
        first = self._send_heap.regions[0]
        self._push_record(pack_new_region_record(HEAP_SEND, 0, first.capacity, first.token), b"")

        self._pending: dict[tuple, _Call] = {}
        self._sent: dict[tuple, list] = {}
        self._acks: dict[int, list] = {}
        self._inbox: deque = deque()  # inbound requests not yet routed
        self._bindings: dict[str, Binding] = {}
        self._conn_binding: dict[int, Binding] = {}
        self._channels: dict[int, Channel] = {}

    # --- session plumbing --------------------------------------------------

    def _request(self, msg: dict) -> dict:
        _send_line(self._sock, msg)
        reply = self._reader.read(timeout=30.0)
        if reply is None:
            raise MrpcError("service closed the session socket")
        if not reply.get("ok"):
            if reply.get("error") == "rejected":
                raise ConnectionRejected(reply.get("reason", "rejected"))
            raise MrpcError(f"{reply.get('error')}: {reply.get('detail', '')}")
        return reply

    def _make_send_region(self, idx: int, capacity: int):
        path = region_path(self.instance, self.app_id, f"s{idx}")
        return Region.create(path, capacity, REGION_KIND_HEAP, token=secrets.token_bytes(16))

    def _announce_send_region(self, idx: int, region) -> None:
        self._push_record(pack_new_region_record(HEAP_SEND, idx, region.capacity, region.token), b"")

    def _push_record(self, record: bytes, spill: bytes) -> None:
        """Push one record, waiting out ring backpressure."""
        deadline = time.monotonic() + DEFAULT_TIMEOUT
        while True:
            res = self._ring_out.try_push(record, spill)
            if res != ControlRing.PUSH_FULL:
                if res == ControlRing.PUSH_WAS_EMPTY:
                    self._wake_out.ring()
                return
            if time.monotonic() > deadline:
                raise MrpcError("service is not draining the submit ring")
            time.sleep(_PUSH_RETRY_S)

    # --- the pump ------------------------------------------------------------

    def _pump_locked(self) -> int:
        n = 0
        while True:
            item = self._ring_in.try_pop()
            if item is None:
                break
            n += 1
            rec = parse_record(*item)
            tag = rec[0]
            if tag == "rpc":
                self._on_delivery(rec[1])
            elif tag == "complete":
                _tag, conn_id, ids = rec
                for call_id in ids:
                    refs = self._sent.pop((conn_id, call_id), None)
                    if refs:
                        for ref in refs:
                            self._send_heap.complete_sent(ref)
            elif tag == "new_region":
                _tag, heap, index, capacity, token = rec
                if heap == HEAP_RECV:
                    path = region_path(self.instance, self.app_id, f"r{index}")
                    self._recv_map.add(index, Region.attach(path, token))
        self._flush_acks_locked()
        return n

    def _on_delivery(self, desc: RpcDescriptor) -> None:
        if desc.direction == Direction.RESPONSE:
            call = self._pending.pop((desc.conn_id, desc.call_id), None)
            if call is None:
                # waiter gave up; free the service-side blocks anyway
                if desc.blocks:
                    self._queue_ack(desc.conn_id, desc.call_id)
                return
            call.desc = desc
            call.event.set()
        else:
            self._inbox.append(desc)

    def _queue_ack(self, conn_id: int, call_id: int) -> None:
        self._acks.setdefault(conn_id, []).append(call_id)

    def _flush_acks_locked(self) -> None:
        for conn_id, ids in list(self._acks.items()):
            for i in range(0, len(ids), MAX_IDS):
                self._push_record(pack_ids_record(RK_ACK, conn_id, ids[i : i + MAX_IDS]), b"")
            del self._acks[conn_id]

    def _wait(self, call: _Call, key: tuple, timeout: float):
        deadline = time.monotonic() + timeout
        while not call.event.is_set():
            with self._lock:
                self._pump_locked()
            if call.event.is_set():
                break
            remain = deadline - time.monotonic()
            if remain <= 0:
                with self._lock:
                    self._pending.pop(key, None)
                if call.event.is_set():
                    break  # response landed in the final instant
                raise RpcError(Status.CANCELLED, "timed out")
            try:
                ready, _, _ = select.select([self._wake_in.fd], [], [], min(_WAIT_SLICE_S, remain))
            except OSError:
                ready = []
            if ready:
                with self._lock:
                    self._wake_in.drain()
        return call.desc

    # --- connections -----------------------------------------------------------

    def connect(
        self,
        schema: str,
        remote: str,
        policies: list | None = None,
        transport_config: dict | None = None,
        transport_version: int | None = None,
        timeout: float = DEFAULT_TIMEOUT,
    ) -> "Channel":
        desc = parse_schema(schema)
        digest = schema_digest(desc)
        msg = {
            "op": "connect",
            "remote": remote,
            "schema": schema,
            "digest": digest.hex(),
            "policies": policies or [],
            "transport_config": transport_config or {},
        }
        if transport_version is not None:
            msg["transport_version"] = transport_version
        with self._lock:
            reply = self._request(msg)
            chan = Channel(self, reply["conn_id"], MarshalPlan(desc))
            self._channels[chan.conn_id] = chan
        return chan

    def bind(
        self,
        schema: str,
        listen: str,
        policies: list | None = None,
        transport_config: dict | None = None,
        transport_version: int | None = None,
    ) -> "Binding":
        desc = parse_schema(schema)
        msg = {
            "op": "bind",
            "listen": listen,
            "schema": schema,
            "digest": schema_digest(desc).hex(),
            "policies": policies or [],
            "transport_config": transport_config or {},
        }
        if transport_version is not None:
            msg["transport_version"] = transport_version
        with self._lock:
            reply = self._request(msg)
            binding = Binding(self, reply["listen"], MarshalPlan(desc))
            self._bindings[binding.listen] = binding
        return binding

    def _binding_for(self, conn_id: int) -> "Binding | None":
        # called with the lock held; resolves which binding a conn belongs to
        binding = self._conn_binding.get(conn_id)
        if binding is not None:
            return binding
        try:
            reply = self._request({"op": "whois", "conn": conn_id})
        except MrpcError:
            return None
        binding = self._bindings.get(reply.get("bound_to") or "")
        if binding is not None:
            self._conn_binding[conn_id] = binding
        return binding

    def _route_inbox_locked(self) -> None:
        while self._inbox:
            desc = self._inbox.popleft()
            binding = self._binding_for(desc.conn_id)
            if binding is None:
                _log.warning("request for unknown binding, conn %d", desc.conn_id)
                if desc.blocks:
                    self._queue_ack(desc.conn_id, desc.call_id)
                continue
            binding.queue.append(desc)

    # --- submission --------------------------------------------------------------

    def _submit(self, conn_id: int, call_id: int, method_index: int, direction: int,
                status: int, plan: MarshalPlan, msg_name: str, value) -> None:
        with self._lock:
            if value is not None:
                root = build_value(self.heaps, HEAP_SEND, plan, msg_name, value)
                blocks = walk_blocks(self.heaps, plan, msg_name, root)
                for ref in blocks:
                    self._send_heap.mark_sent(ref)
                self._sent[(conn_id, call_id)] = blocks
            else:
                blocks = []
            desc = RpcDescriptor(
                conn_id=conn_id,
                call_id=call_id,
                method_index=method_index,
                direction=direction,
                status=status,
                blocks=blocks,
            )
            rec, spill = pack_rpc_record(desc)
            self._push_record(rec, spill)

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._closed = True
            try:
                self._push_record(pack_bye_record(), b"")
            except MrpcError:
                pass
            try:
                self._sock.close()
            except OSError:
                pass
            for ring in (self._ring_out, self._ring_in):
                ring.region.close()
            self._recv_map.close()
            for region in self._send_heap.regions:
                region.close()
            for w in (self._wake_out, self._wake_in):
                w.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _shm_dir():
    from .shmipc import shm_dir

    return shm_dir()


class PendingCall:
    """Handle for an in-flight call; ``wait`` returns the decoded reply."""

    def __init__(self, channel: "Channel", key: tuple, call: _Call, response_msg: str):
        self._channel = channel
        self._key = key
        self._call = call
        self._response_msg = response_msg

    def wait(self, timeout: float = DEFAULT_TIMEOUT):
        session = self._channel.session
        desc = session._wait(self._call, self._key, timeout)
        with session._lock:
            if desc.status != Status.OK:
                if desc.blocks:
                    session._queue_ack(desc.conn_id, desc.call_id)
                    session._flush_acks_locked()
                raise RpcError(desc.status, Status.name(desc.status))
            value = read_value(session.heaps, self._channel.plan, self._response_msg, desc.root())
            session._queue_ack(desc.conn_id, desc.call_id)
            session._flush_acks_locked()
        return value


class Channel:
    """Client end of one connection."""

    def __init__(self, session: AppSession, conn_id: int, plan: MarshalPlan):
        self.session = session
        self.conn_id = conn_id
        self.plan = plan
        self._next_call = 0
        self._closed = False

    def _method(self, name: str):
        for m in self.plan.methods:
            if m.name == name or f"{m.service}.{m.name}" == name:
                return m
        raise MrpcError(f"no method {name!r}")

    def call_async(self, method: str, value: dict | None = None) -> PendingCall:
        if self._closed:
            raise MrpcError("channel closed")
        m = self._method(method)
        session = self.session
        with session._lock:
            self._next_call += 1
            call_id = self._next_call
            key = (self.conn_id, call_id)
            call = _Call()
            session._pending[key] = call
        try:
            session._submit(
                self.conn_id, call_id, m.index, Direction.REQUEST, Status.OK,
                self.plan, m.request, value or {},
            )
        except BaseException:
            with session._lock:
                session._pending.pop(key, None)
            raise
        return PendingCall(self, key, call, m.response)

    def call(self, method: str, value: dict | None = None, timeout: float = DEFAULT_TIMEOUT):
        return self.call_async(method, value).wait(timeout)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        with self.session._lock:
            self.session._channels.pop(self.conn_id, None)
            try:
                self.session._request({"op": "disconnect", "conn": self.conn_id})
            except MrpcError:
                pass


class Binding:
    """Server end of one listen address: poll deliveries, send replies."""

    def __init__(self, session: AppSession, listen: str, plan: MarshalPlan):
        self.session = session
        self.listen = listen
        self.plan = plan
        self.queue: deque = deque()
        self.served = 0

    def poll(self, handler, timeout: float = 0.0) -> int:
        """Handle one queued request; returns 1 if one was served, else 0.

        ``handler(method_name, request_dict)`` returns the response dict.
        A handler exception turns into an error response to the caller.
        """
        session = self.session
        deadline = time.monotonic() + timeout
        while True:
            with session._lock:
                session._pump_locked()
                session._route_inbox_locked()
                desc = self.queue.popleft() if self.queue else None
                if desc is not None:
                    m = self.plan.method(desc.method_index)
                    request = read_value(session.heaps, self.plan, m.request, desc.root())
                    session._queue_ack(desc.conn_id, desc.call_id)
                    session._flush_acks_locked()
            if desc is None:
                remain = deadline - time.monotonic()
                if remain <= 0:
                    return 0
                try:
                    ready, _, _ = select.select([session._wake_in.fd], [], [], min(_WAIT_SLICE_S, remain))
                except OSError:
                    ready = []
                if ready:
                    with session._lock:
                        session._wake_in.drain()
                continue
            try:
                reply = handler(m.name, request)
                session._submit(
                    desc.conn_id, desc.call_id, desc.method_index,
                    Direction.RESPONSE, Status.OK, self.plan, m.response, reply or {},
                )
            except Exception:
                _log.exception("handler failed for %s", m.name)
                session._submit(
                    desc.conn_id, desc.call_id, desc.method_index,
                    Direction.RESPONSE, Status.INTERNAL, self.plan, m.response, None,
                )
            self.served += 1
            return 1

    def serve(self, handler, stop: threading.Event) -> int:
        """Serve until ``stop`` is set; returns the number handled."""
        n = 0
        while not stop.is_set():
            n += self.poll(handler, timeout=0.05)
        return n
