"""Engine framework: chains, the runtime, faults, and live updates."""

import time
from collections import deque

import pytest

from mrpc.engine import (
    Counters,
    Datapath,
    Engine,
    EngineCtx,
    PassThroughEngine,
    Runtime,
    insert_engine,
    lookup_engine,
    register_engine,
    registered_engines,
    remove_engine,
    upgrade_engine,
)
from mrpc.errors import ControlError


def ctx(**kw):
    base = dict(datapath=None, conn=None, heaps=None, plan=None,
                counters=Counters(), service=None, config={})
    base.update(kw)
    return EngineCtx(**base)


def chain(*engines, dp=None):
    """Build a datapath and give the open ends external queues."""
    dp = dp or Datapath(1)
    dp.build(list(engines))
    engines[0].tx_in = deque()
    engines[0].rx_out = deque()
    engines[-1].tx_out = deque()
    engines[-1].rx_in = deque()
    return dp


class Holder(Engine):
    """Consumes inbound items into an internal buffer until opened."""

    kind = "test.holder"
    version = 1

    def __init__(self, ctx):
        super().__init__(ctx)
        self.held = deque()
        self.seen = 0
        self.open = ctx.config.get("open", False)

    def do_work(self, budget):
        done = 0
        if self.open:
            while self.held and done < budget:
                self.tx_out.append(self.held.popleft())
                done += 1
        while done < budget and self.tx_in:
            item = self.tx_in.popleft()
            self.seen += 1
            done += 1
            if self.open and not self.held:
                self.tx_out.append(item)
            else:
                self.held.append(item)
        while done < budget and self.rx_in:
            self.rx_out.append(self.rx_in.popleft())
            done += 1
        return done

    def decompose(self):
        return {"held": list(self.held), "seen": self.seen, "open": self.open}

    @classmethod
    def restore(cls, state, ctx):
        eng = cls(ctx)
        eng.held = deque(state["held"])
        eng.seen = state["seen"]
        eng.open = state["open"]
        return eng

    def flush_buffered(self):
        out, self.held = list(self.held), deque()
        return out, []

    def update_config(self, config):
        if "open" in config:
            self.open = bool(config["open"])


class HolderV2(Holder):
    version = 2


class Exploder(Engine):
    kind = "test.exploder"

    def do_work(self, budget):
        raise RuntimeError("boom")


class TestDatapathBuild:
    def test_queues_are_shared(self):
        a, b, c = (PassThroughEngine(ctx()) for _ in range(3))
        dp = Datapath(1)
        dp.build([a, b, c])
        assert a.tx_out is b.tx_in
        assert b.tx_out is c.tx_in
        assert c.rx_out is b.rx_in
        assert b.rx_out is a.rx_in
        assert a.tx_in is None and c.tx_out is None

    def test_items_flow_both_ways(self):
        a, b, c = (PassThroughEngine(ctx()) for _ in range(3))
        dp = chain(a, b, c)
        a.tx_in.extend(range(5))
        c.rx_in.extend("xyz")
        for _ in range(3):
            for e in dp.engines:
                e.do_work(64)
        assert list(c.tx_out) == [0, 1, 2, 3, 4]
        assert list(a.rx_out) == ["x", "y", "z"]

    def test_budget_bounds_one_pass(self):
        a = PassThroughEngine(ctx())
        dp = chain(a)
        a.tx_in.extend(range(100))
        assert a.do_work(10) == 10
        assert len(a.tx_out) == 10

    def test_index_of(self):
        a = PassThroughEngine(ctx())
        h = Holder(ctx())
        dp = chain(a, h)
        assert dp.index_of("test.holder") == 1
        with pytest.raises(ControlError):
            dp.index_of("nope")

    def test_queue_depths_shape(self):
        a, b = PassThroughEngine(ctx()), PassThroughEngine(ctx())
        dp = chain(a, b)
        a.tx_in.extend(range(3))
        rows = dp.queue_depths()
        assert rows[0]["engine"] == "passthrough@1"
        assert rows[0]["tx_in"] == 3

    def test_debug_hook(self):
        dp = Datapath(1)
        stages = []
        dp.debug_hook = lambda stage, desc: stages.append((stage, desc))
        dp.emit_debug("checked", "d1")
        dp.debug_hook = None
        dp.emit_debug("checked", "d2")  # silently dropped
        assert stages == [("checked", "d1")]


class TestRegistry:
    def test_known_kinds_present(self):
        kinds = {k for k, _v in registered_engines()}
        assert {"policy.null", "policy.rate_limit", "policy.acl",
                "policy.recv_gate", "policy.qos", "transport.tcp",
                "transport.sim"} <= kinds

    def test_latest_version_wins(self):
        assert lookup_engine("transport.sim").version == 2
        assert lookup_engine("transport.sim", 1).version == 1

    def test_unknown_rejected(self):
        with pytest.raises(ControlError):
            lookup_engine("no.such.engine")
        with pytest.raises(ControlError):
            lookup_engine("transport.sim", 99)

    def test_register_and_override(self):
        class Custom(Engine):
            kind = "test.custom"
            version = 7

            def do_work(self, budget):
                return 0

        register_engine(Custom)
        assert lookup_engine("test.custom") is Custom
        assert lookup_engine("test.custom", 7) is Custom


class TestRuntime:
    def test_submit_runs_on_thread(self):
        rt = Runtime("t0")
        rt.start()
        try:
            import threading

            tname = rt.submit(lambda: threading.current_thread().name)
            assert tname == "mrpc-rt-t0"
            # nested submit executes inline instead of deadlocking
            assert rt.submit(lambda: rt.submit(lambda: 42)) == 42
        finally:
            rt.stop()
            rt.join(timeout=5)

    def test_submit_propagates_exceptions(self):
        rt = Runtime("t1")
        rt.start()
        try:
            with pytest.raises(ZeroDivisionError):
                rt.submit(lambda: 1 // 0)
        finally:
            rt.stop()
            rt.join(timeout=5)

    def test_submit_to_stopped_runtime(self):
        rt = Runtime("t2")
        with pytest.raises(ControlError):
            rt.submit(lambda: 1)

    def test_engines_make_progress(self):
        rt = Runtime("t3")
        a, b = PassThroughEngine(ctx()), PassThroughEngine(ctx())
        chain(a, b)
        rt.start()
        try:
            rt.attach_engine(a)
            rt.attach_engine(b)
            a.tx_in.extend(range(50))
            deadline = time.monotonic() + 5
            while len(b.tx_out) < 50 and time.monotonic() < deadline:
                time.sleep(0.005)
            assert list(b.tx_out) == list(range(50))
            assert rt.passes > 0
            rt.detach_engine(a)
            rt.detach_engine(b)
            assert rt.engines == []
        finally:
            rt.stop()
            rt.join(timeout=5)

    def test_adaptive_mode_parks_when_idle(self):
        rt = Runtime("t4")
        rt.start()
        try:
            deadline = time.monotonic() + 5
            while rt.parks == 0 and time.monotonic() < deadline:
                time.sleep(0.01)
            assert rt.parks > 0
        finally:
            rt.stop()
            rt.join(timeout=5)

    def test_fault_without_handler_drops_engine(self):
        rt = Runtime("t5")
        dp = Datapath(1)
        bad = Exploder(ctx(datapath=dp))
        ok = PassThroughEngine(ctx())
        chain(ok)
        rt.start()
        try:
            rt.attach_engine(bad)
            rt.attach_engine(ok)
            deadline = time.monotonic() + 5
            while bad in rt.engines and time.monotonic() < deadline:
                time.sleep(0.005)
            assert bad not in rt.engines
            assert dp.failed
            # the healthy engine keeps working
            ok.tx_in.append("ping")
            while not ok.tx_out and time.monotonic() < deadline:
                time.sleep(0.005)
            assert list(ok.tx_out) == ["ping"]
        finally:
            rt.stop()
            rt.join(timeout=5)

    def test_fault_handler_called_once(self):
        rt = Runtime("t6")
        dp = Datapath(1)
        faults = []
        dp.on_fault = lambda d, e, exc: faults.append((e.kind, str(exc)))
        bad = Exploder(ctx(datapath=dp))
        rt.start()
        try:
            rt.attach_engine(bad)
            deadline = time.monotonic() + 5
            while not faults and time.monotonic() < deadline:
                time.sleep(0.005)
            # handler owns recovery; the engine stays attached and later
            # faults on the already-failed datapath stay silent
            time.sleep(0.05)
            assert faults == [("test.exploder", "boom")]
            assert dp.failed
        finally:
            rt.stop()
            rt.join(timeout=5)


def hosted_chain(rt, *engines):
    dp = chain(*engines)
    for e in engines:
        rt.attach_engine(e)
    return dp


class TestLiveUpdates:
    @pytest.fixture
    def rt(self):
        rt = Runtime("live")
        rt.start()
        yield rt
        rt.stop()
        rt.join(timeout=5)

    def test_upgrade_preserves_queues_and_state(self, rt):
        head, tail = PassThroughEngine(ctx()), PassThroughEngine(ctx())
        mid = Holder(ctx())
        dp = hosted_chain(rt, head, mid, tail)
        head.tx_in.extend(range(6))
        deadline = time.monotonic() + 5
        while mid.seen < 6 and time.monotonic() < deadline:
            time.sleep(0.005)
        # some items buffered inside mid, none emitted
        assert len(tail.tx_out) == 0
        new = upgrade_engine(dp, 1, HolderV2)
        assert dp.engines[1] is new
        assert new.version == 2
        assert new.seen == 6
        assert mid not in rt.engines and new in rt.engines
        # same queue objects, nothing lost
        assert new.tx_in is head.tx_out
        head.tx_in.extend([6, 7])
        rt.submit(lambda: new.update_config({"open": True}))
        while len(tail.tx_out) < 8 and time.monotonic() < deadline:
            time.sleep(0.005)
        assert list(tail.tx_out) == list(range(8))

    def test_upgrade_rejects_kind_change(self, rt):
        head, mid, tail = (PassThroughEngine(ctx()) for _ in range(3))
        dp = hosted_chain(rt, head, mid, tail)
        with pytest.raises(ControlError):
            upgrade_engine(dp, 1, Holder)

    def test_upgrade_needs_single_runtime(self, rt):
        other = Runtime("live-b")
        other.start()
        try:
            head, mid, tail = (PassThroughEngine(ctx()) for _ in range(3))
            dp = chain(head, mid, tail)
            rt.attach_engine(head)
            rt.attach_engine(mid)
            other.attach_engine(tail)
            with pytest.raises(ControlError):
                upgrade_engine(dp, 1, PassThroughEngine)
        finally:
            other.stop()
            other.join(timeout=5)

    def test_insert_preserves_order(self, rt):
        head, tail = PassThroughEngine(ctx()), PassThroughEngine(ctx())
        dp = hosted_chain(rt, head, tail)
        head.tx_in.extend(range(200))
        # splice a stage in mid-stream while items are flowing
        mid = Holder(ctx(config={"open": True}))
        insert_engine(dp, 1, mid)
        head.tx_in.extend(range(200, 400))
        deadline = time.monotonic() + 10
        while len(tail.tx_out) < 400 and time.monotonic() < deadline:
            time.sleep(0.005)
        assert list(tail.tx_out) == list(range(400))
        assert dp.engines == [head, mid, tail]
        assert mid.runtime is rt

    def test_insert_bounds(self, rt):
        head, tail = PassThroughEngine(ctx()), PassThroughEngine(ctx())
        dp = hosted_chain(rt, head, tail)
        with pytest.raises(ControlError):
            insert_engine(dp, 0, Holder(ctx()))
        with pytest.raises(ControlError):
            insert_engine(dp, 2, Holder(ctx()))

    def test_remove_flushes_buffered_in_order(self, rt):
        head, tail = PassThroughEngine(ctx()), PassThroughEngine(ctx())
        mid = Holder(ctx())  # closed: buffers everything it consumes
        dp = hosted_chain(rt, head, mid, tail)
        head.tx_in.extend(range(10))
        deadline = time.monotonic() + 5
        while mid.seen < 10 and time.monotonic() < deadline:
            time.sleep(0.005)
        # jam more items into the queue it has not consumed yet, then remove
        state = rt.submit(lambda: (head.tx_out.extend(range(10, 14)),
                                   remove_engine(dp, 1))[1])
        assert state["seen"] == 10
        while len(tail.tx_out) < 14 and time.monotonic() < deadline:
            time.sleep(0.005)
        # buffered items drain ahead of the unconsumed ones, order intact
        assert list(tail.tx_out) == list(range(14))
        assert dp.engines == [head, tail]
        assert head.tx_out is tail.tx_in

    def test_remove_bounds(self, rt):
        head, mid, tail = (PassThroughEngine(ctx()) for _ in range(3))
        dp = hosted_chain(rt, head, mid, tail)
        with pytest.raises(ControlError):
            remove_engine(dp, 0)
        with pytest.raises(ControlError):
            remove_engine(dp, 2)

    def test_base_update_config_rejects(self, rt):
        head, mid, tail = (PassThroughEngine(ctx()) for _ in range(3))
        hosted_chain(rt, head, mid, tail)
        with pytest.raises(ControlError):
            rt.submit(lambda: mid.update_config({"x": 1}))
