"""Engine framework: schedulable datapath stages and their runtimes.

A datapath is an ordered chain of engines serving one connection:

    [session frontend] <-> [policy engines ...] <-> [transport]

Adjacent engines share two plain deques: ``tx`` items flow toward the wire,
``rx`` items flow toward the app.  Queue objects are the splice points for
live reconfiguration: upgrading, inserting, or removing an engine rebinds
deques without touching the items in them, so nothing in flight is lost.

Engines are cooperatively scheduled.  A runtime is one thread that calls
``do_work(budget)`` on each of its engines in a loop; when no engine makes
progress an adaptive runtime parks on the union of the engines' poll fds,
while a busy runtime keeps polling with a short sleep to stay responsive to
fd-less event sources.  Control commands (attach, upgrade, stats snapshots)
run on the runtime thread between passes, so engine state never needs locks
against its own reconfiguration.

Engine classes register under a (kind, version) key.  Upgrade swaps the
implementation in place: the old engine decomposes into a state dict, the
new class restores from it, and the queues rebind.  The RPCs buffered in
the queues and in the decomposed state ride across the swap.
"""

from __future__ import annotations

import logging
import select
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .errors import ControlError
from .shmipc import Wakeup

_log = logging.getLogger("mrpc.engine")

DEFAULT_BUDGET = 32
QUEUE_BOUND = 1024
_PARK_MAX_S = 0.1
_BUSY_SLEEP_S = 0.00002


@dataclass
class TxDone:
    """Transmit-complete notice flowing app-ward; frees sent-pending blocks."""

    conn_id: int
    call_ids: list


@dataclass
class Counters:
    """Per-connection datapath counters.

    Single-writer discipline: only the owning runtime mutates these during
    normal operation; readers take snapshots via a runtime-safepoint command
    or tolerate a slightly stale view.
    """

    issued: int = 0
    completed: int = 0
    failed: int = 0
    in_flight: int = 0
    delivered: int = 0
    marshal_count: int = 0
    unmarshal_count: int = 0
    marshal_bytes: int = 0
    unmarshal_bytes: int = 0
    stabilize_copy_bytes: int = 0
    gate_copy_bytes: int = 0
    fuse_copy_bytes: int = 0
    policy_drops: int = 0
    tx_frames: int = 0
    rx_frames: int = 0
    transport_ops: int = 0

    def snapshot(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EngineCtx:
    """Everything an engine needs from its surroundings.

    One ctx per connection side, shared by the engines of that datapath:
    the connection record, its heaps, the marshalling plan, the counters,
    the owning service, and the engine-specific config dict.
    """

    datapath: object = None
    conn: object = None
    heaps: object = None
    plan: object = None
    counters: object = None
    service: object = None
    config: dict = field(default_factory=dict)


class Engine:
    """Base class for datapath stages.

    Subclasses implement ``do_work`` and usually the decompose/restore
    pair.  ``kind`` and ``version`` key the registry; upgrades may only
    cross versions of the same kind.
    """

    kind = "engine"
    version = 1

    def __init__(self, ctx):
        self.ctx = ctx
        self.tx_in: deque | None = None
        self.tx_out: deque | None = None
        self.rx_in: deque | None = None
        self.rx_out: deque | None = None
        self.runtime: Runtime | None = None

    # --- scheduling -----------------------------------------------------

    def do_work(self, budget: int) -> int:
        """Process up to ``budget`` items; return the number processed.

        Zero means idle: the runtime may park until one of ``poll_fds``
        becomes readable.
        """
        raise NotImplementedError

    def poll_fds(self) -> list:
        """Fds whose readability can mean new work for this engine."""
        return []

    def needs_busy_poll(self) -> bool:
        """True when the engine has event sources no fd can report."""
        return False

    # --- lifecycle ------------------------------------------------------

    def on_attach(self, runtime: "Runtime") -> None:
        self.runtime = runtime

    def on_detach(self) -> None:
        self.runtime = None

    def decompose(self) -> dict:
        """Extract migratable state before an upgrade or removal."""
        return {}

    @classmethod
    def restore(cls, state: dict, ctx) -> "Engine":
        """Rebuild from a decomposed state dict."""
        eng = cls(ctx)
        eng.apply_state(state)
        return eng

    def apply_state(self, state: dict) -> None:
        pass

    def flush_buffered(self) -> tuple[list, list]:
        """Internal buffers to reinject on removal: (tx items, rx items)."""
        return [], []

    def update_config(self, config: dict) -> None:
        """Apply new settings live; runs at a runtime safepoint."""
        raise ControlError(f"{self.kind} has no runtime-settable config")


class PassThroughEngine(Engine):
    """Moves items through unchanged; the no-op policy and test stages."""

    kind = "passthrough"

    def do_work(self, budget: int) -> int:
        done = 0
        while done < budget and self.tx_in and len(self.tx_out) < QUEUE_BOUND:
            self.tx_out.append(self.tx_in.popleft())
            done += 1
        while done < budget and self.rx_in and len(self.rx_out) < QUEUE_BOUND:
            self.rx_out.append(self.rx_in.popleft())
            done += 1
        return done


# --------------------------------------------------------------------------
# Registry

_REGISTRY: dict[tuple[str, int], type] = {}


def register_engine(cls):
    """Class decorator: make ``cls`` loadable by (kind, version)."""
    key = (cls.kind, cls.version)
    _REGISTRY[key] = cls
    return cls


def lookup_engine(kind: str, version: int | None = None) -> type:
    if version is not None:
        try:
            return _REGISTRY[(kind, version)]
        except KeyError:
            raise ControlError(f"no engine {kind} v{version}")
    versions = [v for (k, v) in _REGISTRY if k == kind]
    if not versions:
        raise ControlError(f"no engine kind {kind!r}")
    return _REGISTRY[(kind, max(versions))]


def registered_engines() -> list[tuple[str, int]]:
    return sorted(_REGISTRY.keys())


# --------------------------------------------------------------------------
# Datapath


class Datapath:
    """The engine chain and queues for one connection."""

    def __init__(self, conn_id: int, counters: Counters | None = None):
        self.conn_id = conn_id
        self.engines: list[Engine] = []
        self.counters = counters or Counters()
        self.failed = False
        self.on_fault = None  # callable(datapath, engine, exc)
        self.debug_hook = None  # callable(stage, desc), test instrumentation

    def build(self, engines: list[Engine]) -> None:
        """Assemble the chain, creating the shared queues."""
        self.engines = engines
        for left, right in zip(engines, engines[1:]):
            tx = deque()
            rx = deque()
            left.tx_out = tx
            right.tx_in = tx
            right.rx_out = rx
            left.rx_in = rx

    def index_of(self, kind: str) -> int:
        for i, e in enumerate(self.engines):
            if e.kind == kind:
                return i
        raise ControlError(f"datapath {self.conn_id}: no engine of kind {kind!r}")

    def emit_debug(self, stage: str, desc) -> None:
        if self.debug_hook is not None:
            self.debug_hook(stage, desc)

    def queue_depths(self) -> list:
        out = []
        for e in self.engines:
            out.append(
                {
                    "engine": f"{e.kind}@{e.version}",
                    "tx_in": len(e.tx_in) if e.tx_in is not None else None,
                    "rx_in": len(e.rx_in) if e.rx_in is not None else None,
                }
            )
        return out


# --------------------------------------------------------------------------
# Runtime


class Runtime(threading.Thread):
    """One scheduling thread hosting any number of engines.

    ``mode`` picks the idle strategy: "adaptive" parks on poll fds,
    "busy" never parks longer than a micro sleep.  Engines that report
    ``needs_busy_poll`` force the busy strategy while attached.

    ``submit`` runs a callable on this thread between engine passes and
    returns its result through a small future; every reconfiguration and
    stats snapshot goes through it, which is what makes engine state
    single-threaded.
    """

    def __init__(self, name: str, mode: str = "adaptive", budget: int = DEFAULT_BUDGET):
        super().__init__(name=f"mrpc-rt-{name}", daemon=True)
        self.rt_name = name
        self.mode = mode
        self.budget = budget
        self.engines: list[Engine] = []
        self.local_state: dict = {}  # runtime-local policy group instances
        self._cmds: deque = deque()
        self._cmd_wakeup = Wakeup()
        self._stop_flag = False
        self.cpu_ns = 0
        self.passes = 0
        self.parks = 0
        self._started_evt = threading.Event()

    # --- command plane ---------------------------------------------------

    def submit(self, fn, timeout: float = 5.0):
        """Run ``fn()`` on the runtime thread; return its result."""
        if threading.current_thread() is self:
            return fn()
        if not self.is_alive():
            raise ControlError(f"runtime {self.rt_name} not running")
        done = threading.Event()
        box = {}

        def run():
            try:
                box["value"] = fn()
            except BaseException as exc:  # propagate to caller
                box["error"] = exc
            finally:
                done.set()

        self._cmds.append(run)
        self._cmd_wakeup.ring()
        if not done.wait(timeout):
            raise ControlError(f"runtime {self.rt_name} command timed out")
        if "error" in box:
            raise box["error"]
        return box["value"]

    def attach_engine(self, engine: Engine) -> None:
        def do():
            self.engines.append(engine)
            engine.on_attach(self)

        self.submit(do)

    def detach_engine(self, engine: Engine) -> None:
        def do():
            self.engines.remove(engine)
            engine.on_detach()

        self.submit(do)

    def stop(self) -> None:
        self._stop_flag = True
        self._cmd_wakeup.ring()

    def wake(self) -> None:
        self._cmd_wakeup.ring()

    # --- main loop --------------------------------------------------------

    def run(self) -> None:
        self._started_evt.set()
        last_cpu = time.thread_time_ns()
        try:
            while not self._stop_flag:
                while self._cmds:
                    self._cmds.popleft()()
                progress = 0
                for engine in list(self.engines):
                    try:
                        progress += engine.do_work(self.budget)
                    except Exception as exc:
                        self._fault(engine, exc)
                self.passes += 1
                now_cpu = time.thread_time_ns()
                self.cpu_ns += now_cpu - last_cpu
                if progress == 0:
                    self._idle()
                    last_cpu = time.thread_time_ns()  # parked time is not cpu time
                else:
                    last_cpu = now_cpu
        finally:
            self._cmd_wakeup.close()

    def _idle(self) -> None:
        busy = self.mode == "busy" or any(e.needs_busy_poll() for e in self.engines)
        if busy:
            time.sleep(_BUSY_SLEEP_S)
            return
        fds = [self._cmd_wakeup.fd]
        for e in self.engines:
            fds.extend(e.poll_fds())
        self.parks += 1
        try:
            ready, _, _ = select.select(fds, [], [], _PARK_MAX_S)
        except OSError:
            return  # an fd closed under us; next pass re-collects
        if self._cmd_wakeup.fd in ready:
            self._cmd_wakeup.drain()

    def _fault(self, engine: Engine, exc: Exception) -> None:
        dp = getattr(engine.ctx, "datapath", None)
        if dp is not None and not dp.failed:
            dp.failed = True
            if dp.on_fault is not None:
                try:
                    dp.on_fault(dp, engine, exc)
                    return
                except Exception:
                    _log.exception("fault handler for %s failed", engine.kind)
        # no handler: drop the engine so one fault cannot wedge the runtime
        if engine in self.engines:
            self.engines.remove(engine)
        _log.error("engine %s@%s faulted: %r", engine.kind, engine.version, exc)


# --------------------------------------------------------------------------
# Live reconfiguration
#
# All three operations run at a runtime safepoint and rebind queues so that
# in-flight items stay exactly where they were.  They require the datapath
# to be hosted whole on one runtime.


def _runtime_of(datapath: Datapath) -> Runtime:
    rts = {e.runtime for e in datapath.engines}
    if len(rts) != 1 or None in rts:
        raise ControlError("datapath engines are not on a single runtime")
    return rts.pop()


def upgrade_engine(datapath: Datapath, index: int, new_cls, ctx=None) -> Engine:
    """Swap engines[index] for ``new_cls`` without losing in-flight RPCs.

    The old engine decomposes, the replacement restores from that state,
    and the four queue bindings carry over unchanged.
    """
    rt = _runtime_of(datapath)
    old = datapath.engines[index]
    if new_cls.kind != old.kind:
        raise ControlError(f"cannot upgrade {old.kind} to {new_cls.kind}")

    def do():
        state = old.decompose()
        new = new_cls.restore(state, ctx if ctx is not None else old.ctx)
        new.tx_in, new.tx_out = old.tx_in, old.tx_out
        new.rx_in, new.rx_out = old.rx_in, old.rx_out
        old.on_detach()
        datapath.engines[index] = new
        self_idx = rt.engines.index(old)
        rt.engines[self_idx] = new
        new.on_attach(rt)
        return new

    return rt.submit(do)


def insert_engine(datapath: Datapath, index: int, engine: Engine) -> Engine:
    """Splice a new engine in front of engines[index]."""
    rt = _runtime_of(datapath)
    if not 1 <= index <= len(datapath.engines) - 1:
        raise ControlError("insert position must be between existing engines")

    def do():
        succ = datapath.engines[index]
        pred = datapath.engines[index - 1]
        new_tx = deque()
        new_rx = deque()
        engine.tx_in = pred.tx_out
        engine.tx_out = new_tx
        succ.tx_in = new_tx
        engine.rx_in = new_rx
        succ.rx_out = new_rx
        engine.rx_out = pred.rx_in
        datapath.engines.insert(index, engine)
        rt.engines.append(engine)
        engine.on_attach(rt)
        return engine

    return rt.submit(do)


def remove_engine(datapath: Datapath, index: int) -> dict:
    """Unsplice engines[index], flushing anything it buffered downstream.

    Items the engine had accepted but not yet emitted are reinjected ahead
    of the items still waiting in its inbound queue, preserving submission
    order end to end.
    """
    rt = _runtime_of(datapath)
    if not 1 <= index <= len(datapath.engines) - 2:
        raise ControlError("cannot remove a chain endpoint")

    def do():
        eng = datapath.engines[index]
        pred = datapath.engines[index - 1]
        succ = datapath.engines[index + 1]
        buf_tx, buf_rx = eng.flush_buffered()
        # successor keeps its inbound queue; order: already-emitted, then
        # buffered, then not-yet-consumed
        succ.tx_in.extend(buf_tx)
        succ.tx_in.extend(eng.tx_in)
        pred.tx_out = succ.tx_in
        pred.rx_in.extend(buf_rx)
        pred.rx_in.extend(eng.rx_in)
        succ.rx_out = pred.rx_in
        datapath.engines.pop(index)
        rt.engines.remove(eng)
        eng.on_detach()
        return eng.decompose()

    return rt.submit(do)
