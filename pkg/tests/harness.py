"""Engine-level test rig.

Builds connection datapaths directly — head engine, policies, transport —
and drives them either by manual stepping (deterministic, single thread) or
on real runtimes.  The head engines stand in for the app plus session
frontend: CallPump issues calls and collects completions, EchoResponder
answers or drains them.  Everything below the head is production code.
"""

from __future__ import annotations

import socket
import time
from contextlib import contextmanager

from mrpc.engine import Counters, Datapath, Engine, EngineCtx, TxDone, lookup_engine
from mrpc.schema import MarshalPlan, parse_schema
from mrpc.shmipc import ConnHeaps, MemBacking, SlabHeap
from mrpc.transport import SimEndpoint, SimLink, tcp_dial, tcp_listen
from mrpc.wire import (
    HEAP_PRIVATE,
    HEAP_RECV,
    HEAP_SEND,
    Direction,
    RpcDescriptor,
    Status,
    build_value,
    free_tree,
    read_value,
    walk_blocks,
)

# mrpc.policy and mrpc.transport register their engines on import
import mrpc.policy  # noqa: F401
import mrpc.transport  # noqa: F401


def mem_region_factory(_idx, capacity):
    return MemBacking(capacity)


class PoisonHeap(SlabHeap):
    """Slab heap that fills blocks with 0xDD on free.

    Any reader still holding a reference to a freed block sees poison, so
    premature reuse shows up as corrupted payload bytes instead of silent
    sharing.
    """

    POISON = 0xDD

    def free(self, ref):
        self.view(ref)[:] = bytes([self.POISON]) * ref.length
        super().free(ref)


def make_heaps(region=1 << 20, cap=64 << 20, send_cls=SlabHeap, recv_cls=SlabHeap,
               private_cls=SlabHeap):
    return ConnHeaps(
        send=send_cls(HEAP_SEND, mem_region_factory, region, cap),
        recv=recv_cls(HEAP_RECV, mem_region_factory, region, cap),
        private=private_cls(HEAP_PRIVATE, mem_region_factory, region, cap),
    )


class FakeConn:
    def __init__(self, conn_id):
        self.conn_id = conn_id
        self.land_private = False
        self.transport_sock = None
        self.sim_endpoint = None
        self.initial_rx_bytes = b""


class FakeService:
    def __init__(self, sim_network=None):
        self.sim_network = sim_network


# --------------------------------------------------------------------------
# head engines


class CallPump(Engine):
    """Chain head that issues calls and accounts for their completions.

    Config:
        total         calls to issue
        window        issued-but-incomplete bound
        build         callable(call_id) -> request value dict
        method_index  wire method (default 0)
        one_way       count transmit-complete notices as completion
        pace          issue rate in calls/s (None = as fast as the window allows)
    """

    kind = "test.pump"

    def __init__(self, ctx):
        super().__init__(ctx)
        cfg = ctx.config
        self.total = cfg.get("total", 0)
        self.window = cfg.get("window", 1)
        self.build = cfg.get("build") or (lambda cid: {})
        self.method_index = cfg.get("method_index", 0)
        self.one_way = cfg.get("one_way", False)
        self.pace = cfg.get("pace")
        self.request_msg = ctx.plan.method(self.method_index).request
        self.response_msg = ctx.plan.method(self.method_index).response
        self.issued = 0
        self.tx_done = 0
        self.responses: dict[int, int] = {}  # call_id -> status
        self.latencies_ns: list[int] = []
        self.read_responses = cfg.get("read_responses", False)
        self.response_values: dict[int, dict] = {}
        self._issue_ts: dict[int, int] = {}
        self._sent: dict[int, list] = {}
        self._t0 = time.monotonic()

    def in_flight(self) -> int:
        if self.one_way:
            return self.issued - self.tx_done
        return self.issued - len(self.responses)

    def done(self) -> bool:
        if self.issued < self.total:
            return False
        if self.one_way:
            return self.tx_done >= self.total
        return len(self.responses) >= self.total

    def _issue_one(self) -> None:
        self.issued += 1
        cid = self.issued
        value = self.build(cid)
        root = build_value(self.ctx.heaps, HEAP_SEND, self.ctx.plan, self.request_msg, value)
        blocks = walk_blocks(self.ctx.heaps, self.ctx.plan, self.request_msg, root)
        self._sent[cid] = list(blocks)
        desc = RpcDescriptor(
            conn_id=self.ctx.conn.conn_id,
            call_id=cid,
            method_index=self.method_index,
            direction=Direction.REQUEST,
            blocks=blocks,
        )
        self._issue_ts[cid] = time.perf_counter_ns()
        self.tx_out.append(desc)

    def do_work(self, budget):
        done = 0
        while done < budget and self.rx_in:
            item = self.rx_in.popleft()
            done += 1
            if isinstance(item, TxDone):
                for cid in item.call_ids:
                    for ref in self._sent.pop(cid, ()):
                        self.ctx.heaps.free(ref)
                    self.tx_done += 1
                    if self.one_way and cid in self._issue_ts:
                        self.latencies_ns.append(time.perf_counter_ns() - self._issue_ts.pop(cid))
            elif isinstance(item, RpcDescriptor):
                cid = item.call_id
                if cid in self._issue_ts:
                    self.latencies_ns.append(time.perf_counter_ns() - self._issue_ts.pop(cid))
                self.responses[cid] = item.status
                if item.blocks:
                    if self.read_responses:
                        self.response_values[cid] = read_value(
                            self.ctx.heaps, self.ctx.plan, self.response_msg, item.root()
                        )
                    free_tree(self.ctx.heaps, item.blocks)
        room = min(self.total - self.issued, self.window - self.in_flight())
        if self.pace is not None:
            allowed = int((time.monotonic() - self._t0) * self.pace) - self.issued
            room = min(room, allowed)
        while room > 0 and done < budget:
            self._issue_one()
            room -= 1
            done += 1
        return done


class EchoResponder(Engine):
    """Chain head on the serving side: consumes requests, optionally replies.

    Config:
        reply     callable(call_id, request value) -> response value dict;
                  None drains requests without responding
        read      decode the request before freeing it (default True)
        verify    callable(call_id, value or None, desc) on each arrival
        hold      callable(call_id) -> int; free the request's blocks only
                  after that many further arrivals (ack-delay model)
    """

    kind = "test.echo"

    def __init__(self, ctx):
        super().__init__(ctx)
        cfg = ctx.config
        self.reply = cfg.get("reply")
        self.read = cfg.get("read", True)
        self.verify = cfg.get("verify")
        self.hold = cfg.get("hold")
        self.seen: list[int] = []
        self.arrival_ts: list[float] = []
        self._sent: dict[int, list] = {}
        self._held: list[tuple[int, object]] = []  # (release_seq, desc)

    def _release_held(self) -> None:
        seq = len(self.seen)
        while self._held and self._held[0][0] <= seq:
            _at, desc = self._held.pop(0)
            self._consume(desc)

    def _consume(self, desc) -> None:
        meth = self.ctx.plan.method(desc.method_index)
        value = None
        if self.read:
            value = read_value(self.ctx.heaps, self.ctx.plan, meth.request, desc.root())
        if self.verify is not None:
            self.verify(desc.call_id, value, desc)
        free_tree(self.ctx.heaps, desc.blocks)
        if self.reply is not None:
            rv = self.reply(desc.call_id, value)
            root = build_value(self.ctx.heaps, HEAP_SEND, self.ctx.plan, meth.response, rv)
            blocks = walk_blocks(self.ctx.heaps, self.ctx.plan, meth.response, root)
            self._sent[desc.call_id] = list(blocks)
            self.tx_out.append(
                RpcDescriptor(
                    conn_id=desc.conn_id,
                    call_id=desc.call_id,
                    method_index=desc.method_index,
                    direction=Direction.RESPONSE,
                    blocks=blocks,
                )
            )

    def do_work(self, budget):
        done = 0
        while done < budget and self.rx_in:
            item = self.rx_in.popleft()
            done += 1
            if isinstance(item, TxDone):
                for cid in item.call_ids:
                    for ref in self._sent.pop(cid, ()):
                        self.ctx.heaps.free(ref)
            elif isinstance(item, RpcDescriptor) and item.direction == Direction.REQUEST:
                self.seen.append(item.call_id)
                self.arrival_ts.append(time.monotonic())
                if self.hold is not None:
                    self._held.append((len(self.seen) + self.hold(item.call_id), item))
                else:
                    self._consume(item)
        self._release_held()
        return done

    def drain_held(self) -> None:
        while self._held:
            _at, desc = self._held.pop(0)
            self._consume(desc)


class FloodSource(Engine):
    """Appends a prototype request descriptor at a target offered rate.

    The descriptor carries no blocks; this measures admission and queueing
    behavior, not payload movement.  The outbound queue is deliberately
    unbounded so downstream backpressure never caps the offered count.
    """

    kind = "test.flood"

    def __init__(self, ctx):
        super().__init__(ctx)
        cfg = ctx.config
        self.pace = cfg.get("pace")  # descriptors per second, None = max
        self.proto = RpcDescriptor(conn_id=1, call_id=0, method_index=0,
                                   direction=Direction.REQUEST)
        self.offered = 0
        self._t0 = time.monotonic()

    def do_work(self, budget):
        n = budget
        if self.pace is not None:
            allowed = int((time.monotonic() - self._t0) * self.pace) - self.offered
            n = min(n, max(0, allowed))
        for _ in range(n):
            self.tx_out.append(self.proto)
        self.offered += n
        # consume anything flowing back (error responses, notices)
        drained = 0
        while self.rx_in and drained < budget:
            self.rx_in.popleft()
            drained += 1
        return n + drained


class CountingSink(Engine):
    """Chain tail that swallows and counts whatever reaches it."""

    kind = "test.sink"

    def __init__(self, ctx):
        super().__init__(ctx)
        self.count = 0

    def do_work(self, budget):
        done = 0
        while done < budget and self.tx_in:
            self.tx_in.popleft()
            done += 1
        self.count += done
        return done


# --------------------------------------------------------------------------
# side / pair builders


class Side:
    """One connection end: heaps, counters, datapath, and its head engine."""

    def __init__(self, plan, head_cls, head_cfg, policies=(), transport=None,
                 conn_id=1, heaps=None, service=None):
        self.plan = plan
        self.heaps = heaps if heaps is not None else make_heaps()
        self.counters = Counters()
        self.conn = FakeConn(conn_id)
        self.dp = Datapath(conn_id, self.counters)

        def ctx(config):
            return EngineCtx(
                datapath=self.dp,
                conn=self.conn,
                heaps=self.heaps,
                plan=plan,
                counters=self.counters,
                service=service,
                config=config,
            )

        self._ctx = ctx
        engines = [head_cls(ctx(dict(head_cfg)))]
        specs = list(policies)
        if any(p.get("side") == "recv" for p in specs):
            self.conn.land_private = True
        if transport is not None:
            kind, version, tcfg, wire = transport
            if kind == "transport.sim":
                self.conn.sim_endpoint = wire
            else:
                self.conn.transport_sock = wire
        if self.conn.land_private:
            engines.append(lookup_engine("policy.recv_gate")(ctx({})))
        for p in specs:
            cls = lookup_engine(p["kind"], p.get("version"))
            cfg = {k: v for k, v in p.items() if k not in ("kind", "version")}
            engines.append(cls(ctx(cfg)))
        if transport is not None:
            kind, version, tcfg, wire = transport
            engines.append(lookup_engine(kind, version)(ctx(dict(tcfg or {}))))
        self.dp.build(engines)
        self.head = engines[0]
        self.transport = engines[-1] if transport is not None else None

    def engine(self, kind):
        return self.dp.engines[self.dp.index_of(kind)]


def sim_endpoints(client_link=None, server_link=None):
    ep_c = SimEndpoint(client_link or SimLink())
    ep_s = SimEndpoint(server_link or SimLink())
    ep_c.peer = ep_s
    ep_s.peer = ep_c
    ep_c.ingress_link = ep_s.link
    ep_s.ingress_link = ep_c.link
    return ep_c, ep_s


def sim_pair(schema_text, pump_cfg, echo_cfg, client_policies=(), server_policies=(),
             client_version=None, server_version=None, client_link=None,
             server_link=None, client_heaps=None, server_heaps=None,
             client_service=None, transport_cfg=None):
    """Client CallPump side and server EchoResponder side over a simulated
    connection.  Returns (client Side, server Side)."""
    plan = MarshalPlan(parse_schema(schema_text))
    ep_c, ep_s = sim_endpoints(client_link, server_link)
    client = Side(plan, CallPump, pump_cfg, client_policies,
                  ("transport.sim", client_version, transport_cfg, ep_c),
                  conn_id=1, heaps=client_heaps, service=client_service)
    server = Side(plan, EchoResponder, echo_cfg, server_policies,
                  ("transport.sim", server_version, transport_cfg, ep_s),
                  conn_id=1, heaps=server_heaps)
    return client, server


def tcp_socket_pair():
    srv = tcp_listen("127.0.0.1", 0)
    port = srv.getsockname()[1]
    c = tcp_dial("127.0.0.1", port)
    s, _ = srv.accept()
    s.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    srv.close()
    return c, s


def tcp_pair(schema_text, pump_cfg, echo_cfg, client_policies=(), server_policies=(),
             client_heaps=None, server_heaps=None):
    """Same shape as sim_pair but over a real loopback TCP connection."""
    plan = MarshalPlan(parse_schema(schema_text))
    sock_c, sock_s = tcp_socket_pair()
    client = Side(plan, CallPump, pump_cfg, client_policies,
                  ("transport.tcp", None, None, sock_c), conn_id=1, heaps=client_heaps)
    server = Side(plan, EchoResponder, echo_cfg, server_policies,
                  ("transport.tcp", None, None, sock_s), conn_id=1, heaps=server_heaps)
    return client, server


# --------------------------------------------------------------------------
# drivers


def step(*sides, budget=64):
    """One cooperative pass over every engine of every side."""
    progress = 0
    for side in sides:
        for engine in side.dp.engines:
            progress += engine.do_work(budget)
    return progress


def run_until(cond, *sides, timeout=30.0, budget=64, settle=0):
    """Step all sides until ``cond()`` holds; raises on timeout.

    ``settle`` extra full passes run after the condition holds, letting
    trailing notices (transmit completions, acks) drain.
    """
    deadline = time.monotonic() + timeout
    while not cond():
        step(*sides, budget=budget)
        if time.monotonic() > deadline:
            raise AssertionError(
                "condition not reached; queues: "
                + repr([s.dp.queue_depths() for s in sides])
            )
    for _ in range(settle):
        step(*sides, budget=budget)


def drain(*sides, budget=64, quiet_passes=3):
    """Step until several consecutive passes make no progress."""
    quiet = 0
    while quiet < quiet_passes:
        if step(*sides, budget=budget) == 0:
            quiet += 1
        else:
            quiet = 0


@contextmanager
def running(*runtimes):
    for rt in runtimes:
        rt.start()
    try:
        yield
    finally:
        for rt in runtimes:
            rt.stop()
        for rt in runtimes:
            rt.join(timeout=5)


def attach_side(runtime, side):
    for engine in side.dp.engines:
        runtime.attach_engine(engine)


# --------------------------------------------------------------------------
# measurement helpers


def percentile(samples, p):
    if not samples:
        raise ValueError("no samples")
    ordered = sorted(samples)
    idx = min(len(ordered) - 1, int(round((p / 100.0) * (len(ordered) - 1))))
    return ordered[idx]


def scan_regions(heap, needle: bytes) -> bool:
    """True when ``needle`` occurs anywhere in the heap's backing regions."""
    for region in heap.regions:
        if bytes(region.payload).find(needle) >= 0:
            return True
    return False


def heap_leaks(*heaps_objs) -> dict:
    """Live block counts per heap, for end-of-test conservation checks."""
    out = {}
    for name, ch in heaps_objs:
        for hid, label in ((HEAP_SEND, "send"), (HEAP_RECV, "recv"), (HEAP_PRIVATE, "private")):
            h = ch._h.get(hid)
            if isinstance(h, SlabHeap):
                out[f"{name}.{label}"] = h.live_blocks()
    return out
