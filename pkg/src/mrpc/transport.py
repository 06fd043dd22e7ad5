"""Transport engines: TCP scatter-gather and a simulated SG device.

Both transports marshal exactly once on the way out (frame header plus
zero-copy views of heap blocks) and unmarshal exactly once on the way in
(blocks land in the destination heap).  What differs is how the element
list reaches the wire.

TCP hands the element list to sendmsg as an iovec, resuming after partial
writes, and reassembles frames from the byte stream on the receive side.

The simulated transport models an SG-capable device with a per-operation
cost and an optional shared egress link of bounded byte rate.  Each submit
is one device operation carrying up to ``element_limit`` elements; version
2 first runs the fuse pass, which coalesces adjacent small elements into
staging blocks of at most ``fuse_bound`` bytes so one operation replaces
many.  Elements at or above the bound pass through unfused and uncopied;
fusing never splits an element.
"""

from __future__ import annotations

import errno
import socket
import threading
import time
from collections import deque

from .errors import MrpcError, WireError
from .engine import Engine, TxDone, register_engine
from .wire import (
    FRAME_RPC,
    HEAP_PRIVATE,
    HEAP_RECV,
    FrameAssembler,
    RpcDescriptor,
    marshal,
    unmarshal,
)

FUSE_BOUND = 16384
ELEMENT_LIMIT = 16
_IOV_CHUNK = 64
_RECV_CHUNK = 65536


class TransportClosed(MrpcError):
    pass


def fuse(elements, bound: int = FUSE_BOUND):
    """Coalesce adjacent small elements into staging blocks.

    Greedy left to right: runs of consecutive elements whose combined size
    fits in ``bound`` merge into one staged copy; an element of ``bound``
    bytes or more always passes through as-is.  A run of one is passed
    through rather than copied.  Returns (fused elements, copied bytes).

    The concatenation of the output always equals the concatenation of the
    input; elements are never reordered or split.
    """
    out = []
    run: list = []
    run_len = 0
    copied = 0

    def flush():
        nonlocal run, run_len, copied
        if not run:
            return
        if len(run) == 1:
            out.append(run[0])
        else:
            staged = b"".join(bytes(b) for b in run)
            copied += len(staged)
            out.append(staged)
        run = []
        run_len = 0

    for el in elements:
        n = len(el)
        if n >= bound:
            flush()
            out.append(el)
            continue
        if run_len + n > bound:
            flush()
        run.append(el)
        run_len += n
    flush()
    return out, copied


# --------------------------------------------------------------------------
# TCP


def tcp_listen(host: str, port: int) -> socket.socket:
    s = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    s.bind((host, port))
    s.listen(64)
    return s

def tcp_dial(host: str, port: int, timeout: float = 5.0) -> socket.socket:
    s = socket.create_connection((host, port), timeout=timeout)
    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    s.settimeout(None)
    return s


@register_engine
class TcpTransport(Engine):
    """Frames RPCs onto a stream socket with scatter-gather writes.

    The socket plus any bytes read past the handshake live on the
    connection record.  Receive-side heap exhaustion parks the pending
    frame and stops reading, letting TCP flow control push back on the
    sender until the app acknowledges deliveries.
    """

    kind = "transport.tcp"
    version = 1

    def __init__(self, ctx):
        super().__init__(ctx)
        self.sock: socket.socket = ctx.conn.transport_sock
        self.sock.setblocking(False)
        self.assembler = FrameAssembler()
        initial = getattr(ctx.conn, "initial_rx_bytes", b"")
        if initial:
            self.assembler.feed(initial)
            ctx.conn.initial_rx_bytes = b""
        self.dest_heap = HEAP_PRIVATE if ctx.conn.land_private else HEAP_RECV
        self._tx_desc = None
        self._tx_bufs: list = []
        self._tx_pos = 0  # (buffer index, intra-buffer offset) flattened below
        self._tx_off = 0
        self._rx_parked = None  # (header, payload) awaiting heap space
        self._eof = False

    # --- tx ---------------------------------------------------------------

    def _start_frame(self, desc: RpcDescriptor) -> None:
        ctx = self.ctx
        bufs, payload = marshal(ctx.heaps, desc)
        ctx.counters.marshal_count += 1
        ctx.counters.marshal_bytes += payload
        ctx.datapath.emit_debug("marshalled", desc)
        self._tx_desc = desc
        self._tx_bufs = bufs
        self._tx_pos = 0
        self._tx_off = 0

    def _pump_tx(self, budget: int) -> int:
        ctx = self.ctx
        sent_frames = 0
        while sent_frames < budget:
            if self._tx_desc is None:
                if not self.tx_in:
                    break
                item = self.tx_in.popleft()
                if not isinstance(item, RpcDescriptor):
                    self.rx_out.append(item)
                    continue
                self._start_frame(item)
            iov = []
            for i in range(self._tx_pos, len(self._tx_bufs)):
                buf = self._tx_bufs[i]
                if i == self._tx_pos and self._tx_off:
                    buf = memoryview(buf)[self._tx_off :]
                iov.append(buf)
                if len(iov) >= _IOV_CHUNK:
                    break
            try:
                n = self.sock.sendmsg(iov)
            except (BlockingIOError, InterruptedError):
                break
            except OSError as exc:
                raise TransportClosed(f"send failed: {exc}") from exc
            self.ctx.counters.transport_ops += 1
            # advance over the buffers the kernel accepted
            while n:
                cur = self._tx_bufs[self._tx_pos]
                avail = len(cur) - self._tx_off
                if n >= avail:
                    n -= avail
                    self._tx_pos += 1
                    self._tx_off = 0
                else:
                    self._tx_off += n
                    n = 0
            if self._tx_pos >= len(self._tx_bufs):
                desc = self._tx_desc
                self._tx_desc = None
                self._tx_bufs = []
                ctx.counters.tx_frames += 1
                had_blocks = bool(desc.blocks)
                for ref in desc.blocks:
                    if ref.heap == HEAP_PRIVATE:
                        ctx.heaps.free(ref)
                if had_blocks:
                    # app-originated frame: let the app reclaim its blocks
                    self.rx_out.append(TxDone(desc.conn_id, [desc.call_id]))
                ctx.datapath.emit_debug("transmitted", desc)
                sent_frames += 1
            # partial write: loop tries again; kernel buffer was full if
            # sendmsg returned short, so usually we exit via EAGAIN next
        return sent_frames

    # --- rx ---------------------------------------------------------------

    def _deliver(self, hdr, payload) -> bool:
        """False when the receive heap is out of space."""
        from .errors import HeapExhausted

        ctx = self.ctx
        try:
            desc, copied = unmarshal(ctx.heaps, ctx.plan, hdr, payload, self.dest_heap)
        except HeapExhausted:
            return False
        ctx.counters.unmarshal_count += 1
        ctx.counters.unmarshal_bytes += copied
        ctx.counters.rx_frames += 1
        self.rx_out.append(desc)
        return True

    def _pump_rx(self, budget: int) -> int:
        got = 0
        if self._rx_parked is not None:
            hdr, payload = self._rx_parked
            if not self._deliver(hdr, payload):
                return 0
            self._rx_parked = None
            got += 1
        for hdr, payload in self.assembler:
            if hdr.kind != FRAME_RPC:
                raise WireError(f"unexpected frame kind {hdr.kind} after handshake")
            if not self._deliver(hdr, payload):
                self._rx_parked = (hdr, payload)
                return got
            got += 1
            if got >= budget:
                return got
        if self._eof:
            raise TransportClosed("peer closed connection")
        reads = 0
        while reads < 4:
            try:
                chunk = self.sock.recv(_RECV_CHUNK)
            except (BlockingIOError, InterruptedError):
                break
            except OSError as exc:
                raise TransportClosed(f"recv failed: {exc}") from exc
            reads += 1
            if not chunk:
                self._eof = True
                break
            self.assembler.feed(chunk)
            if len(chunk) < _RECV_CHUNK:
                break
        if reads:
            for hdr, payload in self.assembler:
                if hdr.kind != FRAME_RPC:
                    raise WireError(f"unexpected frame kind {hdr.kind} after handshake")
                if not self._deliver(hdr, payload):
                    self._rx_parked = (hdr, payload)
                    return got
                got += 1
                if got >= budget:
                    return got
            if self._eof and self.assembler.pending_bytes() == 0 and self._rx_parked is None:
                raise TransportClosed("peer closed connection")
        return got

    def do_work(self, budget: int) -> int:
        return self._pump_tx(budget) + self._pump_rx(budget)

    def poll_fds(self):
        return [self.sock.fileno()]

    def poll_write_fds(self):
        return [self.sock.fileno()] if self._tx_desc is not None or self.tx_in else []

    def needs_busy_poll(self):
        # parked on heap space: progress comes from app acks, no fd involved
        return self._rx_parked is not None

    def decompose(self):
        return {
            "rx_buf": bytes(self.assembler._buf),
            "parked": self._rx_parked,
            "tx_desc": self._tx_desc,
            "tx_sent_bytes": self._sent_bytes(),
        }

    def _sent_bytes(self) -> int:
        if self._tx_desc is None:
            return 0
        n = sum(len(self._tx_bufs[i]) for i in range(self._tx_pos))
        return n + self._tx_off

    def apply_state(self, state):
        self.assembler = FrameAssembler()
        self.assembler.feed(state.get("rx_buf", b""))
        self._rx_parked = state.get("parked")
        desc = state.get("tx_desc")
        if desc is not None:
            # re-marshal the same blocks (sent-pending, hence unchanged)
            # and skip what the wire already took
            self._start_frame(desc)
            self.ctx.counters.marshal_count -= 1  # same logical step resumed
            skip = state.get("tx_sent_bytes", 0)
            while skip:
                cur = self._tx_bufs[self._tx_pos]
                avail = len(cur) - self._tx_off
                step = min(skip, avail)
                self._tx_off += step
                skip -= step
                if self._tx_off == len(cur):
                    self._tx_pos += 1
                    self._tx_off = 0


# --------------------------------------------------------------------------
# Simulated SG device
#
# An in-process stand-in for an SG-capable NIC.  Submitting an operation
# costs ``op_cost`` seconds of device time and the bytes drain through the
# link at ``rate`` bytes per second; both default to instantaneous.  Links
# may be private to one channel or shared by name, in which case every
# sharing channel contends for the same FIFO, which is how egress
# contention and queueing delay are modeled.
#
# Completion semantics mirror a DMA engine: element memory is read at
# delivery time, so sender blocks must stay put until the completion
# arrives, exactly like the real zero-copy contract.


class SimLink:
    """FIFO pacer: ops clear in order, each taking op_cost + bytes/rate."""

    def __init__(self, name="", rate=None, op_cost=0.0):
        self.name = name
        self.rate = rate
        self.op_cost = op_cost
        self._lock = threading.Lock()
        self._ready_t = 0.0
        self._queue: deque = deque()
        self._queued_bytes = 0
        self.delivered_ops = 0
        self.delivered_bytes = 0

    def submit(self, inbox, buffers, done_cb=None) -> None:
        nbytes = sum(len(b) for b in buffers)
        now = time.monotonic()
        with self._lock:
            start = max(now, self._ready_t)
            fin = start + self.op_cost
            if self.rate:
                fin += nbytes / self.rate
            self._ready_t = fin
            self._queue.append((fin, inbox, tuple(buffers), nbytes, done_cb))
            self._queued_bytes += nbytes

    def pump(self) -> int:
        now = time.monotonic()
        delivered = 0
        while True:
            with self._lock:
                if not self._queue or self._queue[0][0] > now:
                    break
                fin, inbox, buffers, nbytes, done_cb = self._queue.popleft()
                self._queued_bytes -= nbytes
                self.delivered_ops += 1
                self.delivered_bytes += nbytes
            chunks = [bytes(b) for b in buffers]  # the device read happens here
            inbox.append(chunks)
            if done_cb is not None:
                done_cb()
            delivered += 1
        return delivered

    def depth_bytes(self) -> int:
        return self._queued_bytes

    def pending_ops(self) -> int:
        return len(self._queue)


class SimEndpoint:
    """One side of a simulated connection."""

    def __init__(self, link: SimLink):
        self.link = link  # egress pacer
        self.ingress_link: SimLink | None = None  # peer's egress
        self.peer: "SimEndpoint | None" = None
        self.inbox: deque = deque()  # delivered ops: lists of byte chunks
        self.completions: deque = deque()  # descs whose last op delivered
        self.closed = False
        self.ops_sent = 0
        self.bytes_sent = 0

    def send_op(self, buffers, done_desc=None) -> None:
        if self.peer is None or self.peer.closed:
            raise TransportClosed("peer gone")
        self.ops_sent += 1
        self.bytes_sent += sum(len(b) for b in buffers)
        cb = None
        if done_desc is not None:
            cb = lambda d=done_desc: self.completions.append(d)
        self.link.submit(self.peer.inbox, buffers, cb)

    def close(self) -> None:
        self.closed = True


class SimNetwork:
    """Process-wide registry of simulated listeners and named links."""

    def __init__(self):
        self._lock = threading.Lock()
        self._listeners: dict = {}
        self._links: dict = {}

    def reset(self) -> None:
        with self._lock:
            self._listeners.clear()
            self._links.clear()

    def listen(self, name: str, on_connect) -> None:
        with self._lock:
            if name in self._listeners:
                raise MrpcError(f"sim address {name!r} already bound")
            self._listeners[name] = on_connect

    def unlisten(self, name: str) -> None:
        with self._lock:
            self._listeners.pop(name, None)

    def link(self, name: str, rate=None, op_cost=0.0) -> SimLink:
        with self._lock:
            lk = self._links.get(name)
            if lk is None:
                lk = SimLink(name, rate, op_cost)
                self._links[name] = lk
            return lk

    def find_link(self, name: str):
        with self._lock:
            return self._links.get(name)

    def dial(self, name: str, client_link: SimLink) -> SimEndpoint:
        with self._lock:
            on_connect = self._listeners.get(name)
        if on_connect is None:
            raise MrpcError(f"no sim listener at {name!r}")
        server_link = SimLink(f"{name}.reply")
        client_end = SimEndpoint(client_link)
        server_end = SimEndpoint(server_link)
        client_end.peer = server_end
        server_end.peer = client_end
        client_end.ingress_link = server_link
        server_end.ingress_link = client_link
        on_connect(server_end)
        return client_end


SIM_NETWORK = SimNetwork()

_SIM_QUEUE_CAP = 256


class _SimTransportBase(Engine):
    """Shared machinery of the simulated transports.

    Subclasses define ``plan_ops(buffers)`` mapping one frame's element
    list to a list of device operations (each a list of elements).
    """

    def __init__(self, ctx):
        super().__init__(ctx)
        self.endpoint: SimEndpoint = ctx.conn.sim_endpoint
        self.assembler = FrameAssembler()
        initial = getattr(ctx.conn, "initial_rx_bytes", b"")
        if initial:
            self.assembler.feed(initial)
            ctx.conn.initial_rx_bytes = b""
        self.dest_heap = HEAP_PRIVATE if ctx.conn.land_private else HEAP_RECV
        self._rx_parked = None

    def plan_ops(self, buffers):
        raise NotImplementedError

    def _pump_tx(self, budget: int) -> int:
        ctx = self.ctx
        done = 0
        while done < budget and self.tx_in:
            if self.endpoint.link.pending_ops() >= _SIM_QUEUE_CAP:
                break  # device queue full: backpressure
            item = self.tx_in.popleft()
            if not isinstance(item, RpcDescriptor):
                self.rx_out.append(item)
                continue
            bufs, payload = marshal(ctx.heaps, item)
            ctx.counters.marshal_count += 1
            ctx.counters.marshal_bytes += payload
            ctx.datapath.emit_debug("marshalled", item)
            ops = self.plan_ops(bufs)
            for i, op in enumerate(ops):
                last = i == len(ops) - 1
                self.endpoint.send_op(op, done_desc=item if last else None)
            ctx.counters.transport_ops += len(ops)
            ctx.counters.tx_frames += 1
            ctx.datapath.emit_debug("transmitted", item)
            done += 1
        # transmit completions: the device has read the memory
        while self.endpoint.completions:
            desc = self.endpoint.completions.popleft()
            had_blocks = bool(desc.blocks)
            for ref in desc.blocks:
                if ref.heap == HEAP_PRIVATE:
                    ctx.heaps.free(ref)
            if had_blocks:
                self.rx_out.append(TxDone(desc.conn_id, [desc.call_id]))
            done += 1
        return done

    def _deliver(self, hdr, payload) -> bool:
        from .errors import HeapExhausted

        ctx = self.ctx
        try:
            desc, copied = unmarshal(ctx.heaps, ctx.plan, hdr, payload, self.dest_heap)
        except HeapExhausted:
            return False
        ctx.counters.unmarshal_count += 1
        ctx.counters.unmarshal_bytes += copied
        ctx.counters.rx_frames += 1
        self.rx_out.append(desc)
        return True

    def _pump_rx(self, budget: int) -> int:
        got = 0
        if self._rx_parked is not None:
            hdr, payload = self._rx_parked
            if not self._deliver(hdr, payload):
                return 0
            self._rx_parked = None
            got += 1
        # deliver paced ops whose time has come, then consume them
        self.endpoint.ingress_link.pump()
        self.endpoint.link.pump()  # our own egress: fires completions
        while got < budget and self.endpoint.inbox:
            chunks = self.endpoint.inbox.popleft()
            for c in chunks:
                self.assembler.feed(c)
            for hdr, payload in self.assembler:
                if hdr.kind != FRAME_RPC:
                    raise WireError(f"unexpected frame kind {hdr.kind} after handshake")
                if not self._deliver(hdr, payload):
                    self._rx_parked = (hdr, payload)
                    return got
                got += 1
        if (
            self.endpoint.peer is not None
            and self.endpoint.peer.closed
            and not self.endpoint.inbox
            and self.endpoint.ingress_link.pending_ops() == 0
        ):
            raise TransportClosed("peer closed connection")
        return got

    def do_work(self, budget: int) -> int:
        return self._pump_tx(budget) + self._pump_rx(budget)

    def needs_busy_poll(self):
        # the device has no fd; progress is time-driven
        return True

    def decompose(self):
        return {
            "rx_buf": bytes(self.assembler._buf),
            "parked": self._rx_parked,
            "inbox": list(self.endpoint.inbox),
        }

    def apply_state(self, state):
        self.assembler = FrameAssembler()
        self.assembler.feed(state.get("rx_buf", b""))
        self._rx_parked = state.get("parked")
        # endpoint identity carries over via ctx.conn; inbox entries stay
        # in the endpoint deque, nothing to reinject


@register_engine
class SimTransportV1(_SimTransportBase):
    """One device operation per frame element; no fusing, no batching."""

    kind = "transport.sim"
    version = 1

    def plan_ops(self, buffers):
        return [[b] for b in buffers]


@register_engine
class SimTransportV2(_SimTransportBase):
    """Fused scatter-gather submission.

    Adjacent small elements coalesce into staging blocks of at most
    ``fuse_bound`` bytes, then elements pack into operations of at most
    ``element_limit`` elements each.
    """

    kind = "transport.sim"
    version = 2

    def __init__(self, ctx):
        super().__init__(ctx)
        cfg = ctx.config
        self.fuse_bound = cfg.get("fuse_bound", FUSE_BOUND)
        self.element_limit = cfg.get("element_limit", ELEMENT_LIMIT)
        self.fuse_enabled = cfg.get("fuse", True)

    def plan_ops(self, buffers):
        if self.fuse_enabled:
            elements, copied = fuse(buffers, self.fuse_bound)
            self.ctx.counters.fuse_copy_bytes += copied
        else:
            elements = list(buffers)
        lim = self.element_limit
        return [elements[i : i + lim] for i in range(0, len(elements), lim)]
