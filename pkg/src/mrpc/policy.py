"""Policy engines: per-RPC enforcement stages in the datapath.

Policies operate on descriptors, not packets: by the time an engine here
sees an RPC it has a method index, a typed value in heap blocks, and a
connection identity.  Enforcement happens before marshalling on the send
side and before app delivery on the receive side, so a decision to drop
costs no wire traffic and no app wakeup.

Content checks never trust shared-heap bytes: the inspected field and its
parental chain are first copied into the service-private heap (the
descriptor is then flagged content-stabilized) and both the check and the
eventual transmit read the copy.  A sender that rewrites its shared heap
after submission changes nothing downstream.
"""

from __future__ import annotations

import time
from collections import deque

from .engine import Engine, TxDone, register_engine
from .wire import (
    HEAP_PRIVATE,
    FLAG_STABILIZED,
    Direction,
    RpcDescriptor,
    Status,
    copy_tree,
    read_field,
    stabilize_field,
    walk_blocks,
)

RATE_BUFFER_BOUND = 4096


def _request_message(ctx, desc):
    meth = ctx.plan.method(desc.method_index)
    return meth.request if desc.direction == Direction.REQUEST else meth.response


def _error_response(desc, status):
    return RpcDescriptor(
        conn_id=desc.conn_id,
        call_id=desc.call_id,
        method_index=desc.method_index,
        direction=Direction.RESPONSE,
        status=status,
        blocks=[],
    )


def _free_private(heaps, blocks):
    for ref in blocks:
        if ref.heap == HEAP_PRIVATE:
            heaps.free(ref)


@register_engine
class NullPolicy(Engine):
    """Forwards everything; measures the cost of a policy hop."""

    kind = "policy.null"
    version = 1

    def __init__(self, ctx):
        super().__init__(ctx)
        self.evals = 0

    def do_work(self, budget):
        done = 0
        while done < budget and self.tx_in:
            item = self.tx_in.popleft()
            if isinstance(item, RpcDescriptor):
                self.evals += 1
            self.tx_out.append(item)
            done += 1
        while done < budget and self.rx_in:
            self.rx_out.append(self.rx_in.popleft())
            done += 1
        return done

    def decompose(self):
        return {"evals": self.evals}

    def apply_state(self, state):
        self.evals = state.get("evals", 0)


class TokenBucket:
    """Classic token bucket; ``rate`` of None admits everything.

    ``clock`` is injectable so admission sequences can be checked against
    a reference trace at fixed timestamps.
    """

    def __init__(self, rate, burst, clock=time.monotonic):
        self.rate = rate
        self.burst = max(1.0, float(burst))
        self.tokens = self.burst
        self.clock = clock
        self.last = clock()

    def take(self) -> bool:
        if self.rate is None:
            return True
        now = self.clock()
        self.tokens = min(self.burst, self.tokens + (now - self.last) * self.rate)
        self.last = now
        if self.tokens >= 1.0:
            self.tokens -= 1.0
            return True
        return False


@register_engine
class RateLimitPolicy(Engine):
    """Token-bucket admission on outbound requests.

    Over-rate RPCs queue in a bounded buffer; when the buffer fills the
    engine stops consuming its inbound queue, which backpressures through
    the ring to the app.  Responses and notices are never delayed.
    Rate and burst are live-settable.
    """

    kind = "policy.rate_limit"
    version = 1

    def __init__(self, ctx):
        super().__init__(ctx)
        cfg = ctx.config
        self.bucket = TokenBucket(cfg.get("rate"), cfg.get("burst", 32))
        self.buffer: deque = deque()
        self.admitted = 0

    def set_params(self, rate, burst=None) -> None:
        b = self.bucket
        self.bucket = TokenBucket(rate, burst if burst is not None else b.burst)

    def update_config(self, config):
        self.set_params(config.get("rate", self.bucket.rate), config.get("burst"))

    def do_work(self, budget):
        done = 0
        while done < budget and self.tx_in and len(self.buffer) < RATE_BUFFER_BOUND:
            item = self.tx_in.popleft()
            if isinstance(item, RpcDescriptor) and item.direction == Direction.REQUEST:
                self.buffer.append(item)
            else:
                self.tx_out.append(item)
            done += 1
        while self.buffer and self.bucket.take():
            self.tx_out.append(self.buffer.popleft())
            self.admitted += 1
            done += 1
        while done < budget and self.rx_in:
            self.rx_out.append(self.rx_in.popleft())
            done += 1
        return done

    def needs_busy_poll(self):
        return bool(self.buffer)

    def flush_buffered(self):
        out = list(self.buffer)
        self.buffer.clear()
        return out, []

    def decompose(self):
        return {
            "rate": self.bucket.rate,
            "burst": self.bucket.burst,
            "tokens": self.bucket.tokens,
            "buffer": list(self.buffer),
            "admitted": self.admitted,
        }

    def apply_state(self, state):
        self.bucket = TokenBucket(state.get("rate"), state.get("burst", 32))
        self.bucket.tokens = state.get("tokens", self.bucket.burst)
        self.buffer = deque(state.get("buffer", ()))
        self.admitted = state.get("admitted", 0)


@register_engine
class AclPolicy(Engine):
    """Content ACL over one string or bytes field of one method.

    Config:
        method       method name the rule applies to (others pass)
        field        dotted path of the inspected field
        deny_values  iterable of exact matches to reject
        deny_prefix  optional prefix match to reject
        side         "send" (default) checks outbound requests;
                     "recv" checks inbound requests before the gate

    Send side stabilizes the inspected chain into the private heap before
    evaluating.  Receive side runs on blocks that already live in the
    private landing area, upstream of the receive gate.
    """

    kind = "policy.acl"
    version = 1

    def __init__(self, ctx):
        super().__init__(ctx)
        cfg = ctx.config
        self.method = cfg.get("method")
        self.field = cfg.get("field", "")
        deny = cfg.get("deny_values", ())
        self.deny_values = {v.encode() if isinstance(v, str) else bytes(v) for v in deny}
        prefix = cfg.get("deny_prefix")
        self.deny_prefix = prefix.encode() if isinstance(prefix, str) else prefix
        self.side = cfg.get("side", "send")
        self.checked = 0
        self.denied = 0

    def _applies(self, desc) -> bool:
        if desc.direction != Direction.REQUEST or desc.status != Status.OK:
            return False
        if not desc.blocks:
            return False
        meth = self.ctx.plan.method(desc.method_index)
        return self.method is None or meth.name == self.method

    def _denies(self, value) -> bool:
        raw = value.encode() if isinstance(value, str) else bytes(value or b"")
        if raw in self.deny_values:
            return True
        return bool(self.deny_prefix) and raw.startswith(self.deny_prefix)

    def _check_send(self, desc) -> bool:
        """Stabilize, evaluate, and either forward or reject. True=pass."""
        ctx = self.ctx
        msg = _request_message(ctx, desc)
        new_root, copied = stabilize_field(
            ctx.heaps, ctx.plan, msg, desc.root(), self.field, HEAP_PRIVATE
        )
        ctx.counters.stabilize_copy_bytes += copied
        desc.blocks = walk_blocks(ctx.heaps, ctx.plan, msg, new_root)
        desc.flags |= FLAG_STABILIZED
        ctx.datapath.emit_debug("stabilized", desc)
        value = read_field(ctx.heaps, ctx.plan, msg, new_root, self.field)
        self.checked += 1
        verdict = not self._denies(value)
        ctx.datapath.emit_debug("policy-decided", desc)
        return verdict

    def _check_recv(self, desc) -> bool:
        ctx = self.ctx
        msg = _request_message(ctx, desc)
        value = read_field(ctx.heaps, ctx.plan, msg, desc.root(), self.field)
        self.checked += 1
        return not self._denies(value)

    def do_work(self, budget):
        done = 0
        ctx = self.ctx
        while done < budget and self.tx_in:
            item = self.tx_in.popleft()
            done += 1
            if self.side == "send" and isinstance(item, RpcDescriptor) and self._applies(item):
                if self._check_send(item):
                    self.tx_out.append(item)
                else:
                    self.denied += 1
                    ctx.counters.policy_drops += 1
                    _free_private(ctx.heaps, item.blocks)
                    self.rx_out.append(TxDone(item.conn_id, [item.call_id]))
                    self.rx_out.append(_error_response(item, Status.PERMISSION_DENIED))
            else:
                self.tx_out.append(item)
        while done < budget and self.rx_in:
            item = self.rx_in.popleft()
            done += 1
            if self.side == "recv" and isinstance(item, RpcDescriptor) and self._applies(item):
                if self._check_recv(item):
                    self.rx_out.append(item)
                else:
                    self.denied += 1
                    ctx.counters.policy_drops += 1
                    for ref in item.blocks:
                        ctx.heaps.free(ref)
                    self.tx_out.append(_error_response(item, Status.PERMISSION_DENIED))
            else:
                self.rx_out.append(item)
        return done

    def decompose(self):
        return {"checked": self.checked, "denied": self.denied}

    def apply_state(self, state):
        self.checked = state.get("checked", 0)
        self.denied = state.get("denied", 0)


@register_engine
class ReceiveGatePolicy(Engine):
    """Moves surviving inbound RPCs from the private landing heap into the
    app-visible receive heap.

    When any receive-side policy is attached, unmarshal lands blocks in
    service-private memory; only RPCs that pass every check are copied
    where the app can see them.  Dropped payloads therefore never touch
    shared memory.
    """

    kind = "policy.recv_gate"
    version = 1

    def __init__(self, ctx):
        super().__init__(ctx)
        from .wire import HEAP_RECV

        self.dest_heap = HEAP_RECV

    def do_work(self, budget):
        done = 0
        ctx = self.ctx
        while done < budget and self.tx_in:
            self.tx_out.append(self.tx_in.popleft())
            done += 1
        while done < budget and self.rx_in:
            item = self.rx_in.popleft()
            done += 1
            if isinstance(item, RpcDescriptor) and item.blocks:
                meth = ctx.plan.method(item.method_index)
                msg = meth.request if item.direction == Direction.REQUEST else meth.response
                new_root, copied = copy_tree(ctx.heaps, ctx.plan, msg, item.root(), self.dest_heap)
                ctx.counters.gate_copy_bytes += copied
                for ref in item.blocks:
                    ctx.heaps.free(ref)
                item.blocks = walk_blocks(ctx.heaps, ctx.plan, msg, new_root)
            self.rx_out.append(item)
        return done


class QosGroup:
    """Runtime-local shared state for one QoS scheduler group.

    Holds the class queues for every member engine on this runtime and an
    emission log (class, call id) that tests consult.  All access happens
    on the owning runtime thread.
    """

    def __init__(self, credit_bytes, window):
        self.credit_bytes = credit_bytes
        self.window = window
        self.small: deque = deque()
        self.large: deque = deque()
        self.link = None
        self.log: list = []
        self.emitted_small = 0
        self.emitted_large = 0

    def pending(self) -> int:
        return len(self.small) + len(self.large)

    def enqueue(self, engine, desc, is_small: bool) -> None:
        (self.small if is_small else self.large).append((engine, desc))

    def rebind(self, old_engine, new_engine) -> None:
        for q in (self.small, self.large):
            for i, (eng, desc) in enumerate(q):
                if eng is old_engine:
                    q[i] = (new_engine, desc)

    def _credit_open(self, engine) -> bool:
        if self.link is not None:
            return self.link.depth_bytes() < self.credit_bytes
        return len(engine.tx_out) < self.window

    def pump(self) -> int:
        emitted = 0
        while True:
            q = self.small if self.small else self.large
            if not q:
                break
            engine, desc = q[0]
            if not self._credit_open(engine):
                break
            q.popleft()
            is_small = q is self.small
            engine.tx_out.append(desc)
            self.log.append(("small" if is_small else "large", desc.call_id))
            if is_small:
                self.emitted_small += 1
            else:
                self.emitted_large += 1
            emitted += 1
        return emitted


@register_engine
class QosPolicy(Engine):
    """Strict small-RPC-first scheduling onto a shared egress.

    RPCs whose payload does not exceed ``small_threshold`` bytes form the
    small class.  Emission is gated on egress credit: while the link (or
    the downstream queue, absent a link) holds fewer than ``credit_bytes``
    queued bytes, the group emits pending smalls before any large, FIFO
    within each class.  Scheduler state is runtime-local: engines of the
    same group on one runtime share queues; other runtimes run their own.
    """

    kind = "policy.qos"
    version = 1

    def __init__(self, ctx):
        super().__init__(ctx)
        cfg = ctx.config
        self.group_name = cfg.get("group", "default")
        self.small_threshold = cfg.get("small_threshold", 1024)
        self.credit_bytes = cfg.get("credit_bytes", 128 << 10)
        self.window = cfg.get("window", 4)
        self.link_name = cfg.get("link")
        self.group: QosGroup | None = None

    def on_attach(self, runtime):
        super().on_attach(runtime)
        key = ("policy.qos", self.group_name)
        group = runtime.local_state.get(key)
        if group is None:
            group = QosGroup(self.credit_bytes, self.window)
            runtime.local_state[key] = group
        if self.link_name and group.link is None and self.ctx.service is not None:
            group.link = self.ctx.service.sim_network.find_link(self.link_name)
        self.group = group
        old = getattr(self, "_pending_rebind", None)
        if old is not None:
            group.rebind(old, self)
            self._pending_rebind = None

    def do_work(self, budget):
        done = 0
        group = self.group
        while done < budget and self.tx_in:
            item = self.tx_in.popleft()
            done += 1
            if isinstance(item, RpcDescriptor):
                size = sum(ref.length for ref in item.blocks)
                group.enqueue(self, item, size <= self.small_threshold)
            else:
                self.tx_out.append(item)
        done += group.pump()
        while done < budget and self.rx_in:
            self.rx_out.append(self.rx_in.popleft())
            done += 1
        return done

    def needs_busy_poll(self):
        return self.group is not None and self.group.pending() > 0

    def flush_buffered(self):
        mine = []
        for q in (self.group.small, self.group.large):
            rest = deque()
            for eng, desc in q:
                if eng is self:
                    mine.append(desc)
                else:
                    rest.append((eng, desc))
            q.clear()
            q.extend(rest)
        return mine, []

    def decompose(self):
        return {"group": self.group_name, "old_engine": self}

    @classmethod
    def restore(cls, state, ctx):
        eng = cls(ctx)
        eng._pending_rebind = state.get("old_engine")
        return eng
