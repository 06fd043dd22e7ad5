"""The per-host RPC service.

One ServiceInstance owns every connection's datapath on this host: apps
hand it descriptors over shared-memory rings, and the service does the
marshalling, policy enforcement, and transport work on their behalf.

Apps reach the service over a unix session socket (JSON lines, with the
two doorbell eventfds passed as ancillary rights).  Operators reach it over
a separate control socket speaking the same line protocol; `mrpcctl` is a
thin client for it.

Connection bring-up is a digest handshake: the dialing service sends a
hello frame carrying its schema digest, the listening service compares
against the digest its app bound, and only on exact match does either side
build a datapath.  The marshalling plan itself is digest-keyed in a cache,
so reconnects and sibling connections reuse it without a rebuild.

Layout of one app session:

    app process                      service process
    -----------                      ---------------
    send heap  (app allocates)  -->  attached read-only view
    recv heap  (attached view)  <--  service allocates deliveries
    a2s ring   (app produces)   -->  session frontend consumes
    s2a ring   (frontend fills) <--  app library consumes
    doorbell eventfds in both directions

Each connection then contributes a chain of policy engines plus a
transport, spliced between the session frontend and the wire.
"""

from __future__ import annotations

import glob
import json
import logging
import os
import secrets
import socket
import threading
import time
from collections import deque

from .errors import (
    BadBlock,
    ConnectionRejected,
    ControlError,
    HeapError,
    HeapExhausted,
    MrpcError,
    SchemaError,
)
from .engine import (
    Counters,
    Datapath,
    Engine,
    EngineCtx,
    PassThroughEngine,
    Runtime,
    TxDone,
    insert_engine,
    lookup_engine,
    registered_engines,
    remove_engine,
    upgrade_engine,
)
from .schema import PlanCache, parse_schema, schema_digest
from .shmipc import (
    ControlRing,
    ConnHeaps,
    MemBacking,
    Region,
    RegionMap,
    SlabHeap,
    Wakeup,
    pack_ids_record,
    pack_new_region_record,
    pack_rpc_record,
    parse_record,
    region_path,
    ring_region_size,
    DEFAULT_INSTANCE,
    REGION_KIND_HEAP,
    REGION_KIND_RING,
    RK_COMPLETE,
    MAX_IDS,
)
from .transport import (
    SIM_NETWORK,
    SimLink,
    TransportClosed,
    tcp_dial,
    tcp_listen,
)
from .wire import (
    FRAME_HELLO,
    FRAME_HELLO_OK,
    FRAME_HELLO_REJECT,
    HEAP_RECV,
    HEAP_SEND,
    Direction,
    RpcDescriptor,
    Status,
    pack_header,
)

_log = logging.getLogger("mrpc.service")

HANDSHAKE_TIMEOUT = 10.0


def runtime_dir(instance: str) -> str:
    return os.environ.get("MRPC_RUN_DIR", f"/tmp/mrpc-{instance}")


class ServiceConfig:
    """Tunables for one service instance; plain attributes, JSON-loadable."""

    def __init__(self, instance: str = None, **kw):
        self.instance = instance or DEFAULT_INSTANCE
        self.ring_slots = kw.get("ring_slots", 1024)
        self.ring_spill = kw.get("ring_spill", 64 << 10)
        self.heap_region = kw.get("heap_region", 1 << 20)
        self.heap_cap = kw.get("heap_cap", 64 << 20)
        self.budget = kw.get("budget", 32)
        self.run_dir = kw.get("run_dir") or runtime_dir(self.instance)

    @classmethod
    def from_file(cls, path: str) -> "ServiceConfig":
        with open(path) as f:
            data = json.load(f)
        return cls(**data)


def _send_line(sock: socket.socket, obj: dict, fds=()) -> None:
    data = (json.dumps(obj) + "\n").encode()
    if fds:
        socket.send_fds(sock, [data], list(fds))
    else:
        sock.sendall(data)


class _LineReader:
    """Newline-delimited JSON with optional ancillary fds."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.buf = bytearray()
        self.fds: list = []

    def read(self, timeout=None):
        self.sock.settimeout(timeout)
        while True:
            nl = self.buf.find(b"\n")
            if nl >= 0:
                line = bytes(self.buf[:nl])
                del self.buf[: nl + 1]
                if not line.strip():
                    continue
                return json.loads(line)
            data, fds, _flags, _addr = socket.recv_fds(self.sock, 65536, 8)
            if fds:
                self.fds.extend(fds)
            if not data:
                return None
            self.buf += data

    def take_fds(self) -> list:
        fds, self.fds = self.fds, []
        return fds


class Connection:
    """Service-side record of one RPC connection.

    ``conn_id`` is the wire identity both ends share; ``lid`` is this
    instance's local handle for control operations, needed because one
    instance can host both ends of a loopback connection.
    """

    def __init__(self, conn_id: int, role: str, session: "AppSession", remote: str):
        self.conn_id = conn_id
        self.lid = 0  # assigned at registration
        self.role = role  # "client" or "server"
        self.session = session
        self.remote = remote
        self.plan = None
        self.digest = b""
        self.datapath: Datapath | None = None
        self.entry_tx: deque = deque()
        self.exit_rx: deque = deque()
        self.delivered: dict[int, list] = {}  # call_id -> recv blocks awaiting ack
        self.outstanding: set = set()  # client role: call ids in flight
        self.bound_to: str | None = None  # server role: the listen address
        self.transport_sock: socket.socket | None = None
        self.sim_endpoint = None
        self.initial_rx_bytes = b""
        self.land_private = False
        self.counters = Counters()
        self.runtime: Runtime | None = None
        self.state = "open"
        self.transport_kind = "transport.tcp"
        self.transport_config: dict = {}

    def describe(self) -> dict:
        return {
            "lid": self.lid,
            "conn_id": self.conn_id,
            "role": self.role,
            "remote": self.remote,
            "digest": self.digest.hex(),
            "state": self.state,
            "runtime": self.runtime.rt_name if self.runtime else None,
            "engines": [f"{e.kind}@{e.version}" for e in self.datapath.engines]
            if self.datapath
            else [],
        }


class AppSession:
    """Service-side half of one app's shared-memory attachment."""

    def __init__(self, service: "ServiceInstance", app_id: str, sock: socket.socket):
        self.service = service
        self.app_id = app_id
        self.sock = sock
        self.conns: dict[int, Connection] = {}
        self.send_map = RegionMap(HEAP_SEND)
        self.recv_heap: SlabHeap | None = None
        self.private_heap = SlabHeap(
            2, lambda idx, cap: MemBacking(cap), service.config.heap_region, service.config.heap_cap
        )
        self.heaps: ConnHeaps | None = None
        self.ring_a2s: ControlRing | None = None
        self.ring_s2a: ControlRing | None = None
        self.wake_a2s: Wakeup | None = None  # app -> service doorbell
        self.wake_s2a: Wakeup | None = None  # service -> app doorbell
        self.frontend: SessionFrontend | None = None
        self.runtime: Runtime | None = None
        self.regions: list[Region] = []  # service-created regions (rings, recv)
        self.closed = False

    def materialize(self) -> dict:
        """Create rings, recv heap, and doorbells; returns attach info."""
        svc = self.service
        cfg = svc.config
        inst = cfg.instance
        ring_cap = ring_region_size(cfg.ring_slots, cfg.ring_spill)
        reg_a2s = Region.create(region_path(inst, self.app_id, "qa"), ring_cap, REGION_KIND_RING)
        reg_s2a = Region.create(region_path(inst, self.app_id, "qb"), ring_cap, REGION_KIND_RING)
        self.regions += [reg_a2s, reg_s2a]
        self.ring_a2s = ControlRing(reg_a2s, producer=False, nslots=cfg.ring_slots, spill=cfg.ring_spill, init=True)
        self.ring_s2a = ControlRing(reg_s2a, producer=True, nslots=cfg.ring_slots, spill=cfg.ring_spill, init=True)

        def recv_factory(idx: int, cap: int):
            reg = Region.create(region_path(inst, self.app_id, f"r{idx}"), cap, REGION_KIND_HEAP)
            self.regions.append(reg)
            return reg

        self.recv_heap = SlabHeap(
            HEAP_RECV,
            recv_factory,
            cfg.heap_region,
            cfg.heap_cap,
            on_grow=self._announce_recv_region,
        )
        self.heaps = ConnHeaps(send=self.send_map, recv=self.recv_heap, private=self.private_heap)
        self.wake_a2s = Wakeup()
        self.wake_s2a = Wakeup()
        self.frontend = SessionFrontend(self)
        self.runtime = svc.default_runtime
        self.runtime.attach_engine(self.frontend)
        r0 = self.recv_heap.regions[0]
        return {
            "app_id": self.app_id,
            "instance": inst,
            "ring_slots": cfg.ring_slots,
            "ring_spill": cfg.ring_spill,
            "rings": {
                "a2s": {"name": os.path.basename(reg_a2s.path), "token": reg_a2s.token.hex()},
                "s2a": {"name": os.path.basename(reg_s2a.path), "token": reg_s2a.token.hex()},
            },
            "recv_region": {
                "index": 0,
                "name": os.path.basename(r0.path),
                "token": r0.token.hex(),
                "capacity": r0.capacity,
            },
            "heap_region": cfg.heap_region,
            "heap_cap": cfg.heap_cap,
        }

    def _announce_recv_region(self, index: int, region) -> None:
        rec = pack_new_region_record(HEAP_RECV, index, region.capacity, region.token)
        # alloc happens on the frontend's runtime; retry until the ring drains
        deadline = time.monotonic() + 5.0
        while True:
            res = self.ring_s2a.try_push(rec)
            if res != ControlRing.PUSH_FULL:
                if res == ControlRing.PUSH_WAS_EMPTY:
                    self.wake_s2a.ring()
                return
            if time.monotonic() > deadline:
                raise HeapExhausted("app not draining its ring during heap growth")
            time.sleep(0.0005)


class ConnEntry(PassThroughEngine):
    """Fixed head of every connection chain.

    It exists so live reconfiguration has a stable splice point: policies
    insert and remove between the entry and the transport, and the session
    frontend keeps feeding the same two queues throughout.
    """

    kind = "entry"


class SessionFrontend(Engine):
    """Per-app engine bridging the rings and the per-connection chains.

    Consumes the app-to-service ring (descriptor submissions, acks, region
    announcements), routes descriptors into the right connection's chain,
    and drains every chain's app-bound queue into the service-to-app ring
    (deliveries, transmit completions).
    """

    kind = "frontend.session"
    version = 1

    def __init__(self, session: AppSession):
        super().__init__(EngineCtx())
        self.session = session
        self._pending_out: deque = deque()  # records that hit a full ring

    # --- app -> service ---------------------------------------------------

    def _reject_to_app(self, desc: RpcDescriptor, status: int) -> None:
        err = RpcDescriptor(
            conn_id=desc.conn_id,
            call_id=desc.call_id,
            method_index=desc.method_index,
            direction=Direction.RESPONSE,
            status=status,
            blocks=[],
        )
        self._queue_out(pack_rpc_record(err))
        self._queue_out((pack_ids_record(RK_COMPLETE, desc.conn_id, [desc.call_id]), b""))

    def _handle_rpc(self, desc: RpcDescriptor) -> None:
        sess = self.session
        conn = sess.conns.get(desc.conn_id)
        if conn is None or conn.state != "open":
            self._reject_to_app(desc, Status.UNAVAILABLE)
            return
        # validate refs before anything downstream touches them
        try:
            for ref in desc.blocks:
                if ref.heap != HEAP_SEND:
                    raise BadBlock(f"submission references heap {ref.heap}")
                sess.heaps.view(ref)
        except (BadBlock, HeapError):
            self._reject_to_app(desc, Status.DECODE_ERROR)
            return
        if desc.direction == Direction.REQUEST:
            conn.counters.issued += 1
            conn.counters.in_flight += 1
            conn.outstanding.add(desc.call_id)
        if len(conn.entry_tx) >= 4096:
            # should not happen: ring pacing bounds this, but never grow unbounded
            self._reject_to_app(desc, Status.RESOURCE_EXHAUSTED)
            return
        conn.entry_tx.append(desc)

    def _handle_ack(self, conn_id: int, ids) -> None:
        conn = self.session.conns.get(conn_id)
        if conn is None:
            return
        for call_id in ids:
            blocks = conn.delivered.pop(call_id, None)
            if blocks:
                for ref in blocks:
                    self.session.recv_heap.free(ref)

    def _handle_new_region(self, heap: int, index: int, capacity: int, token: bytes) -> None:
        if heap != HEAP_SEND:
            raise BadBlock("app announced a region for a heap it does not own")
        sess = self.session
        path = region_path(sess.service.config.instance, sess.app_id, f"s{index}")
        sess.send_map.add(index, Region.attach(path, token))

    def _drain_ring(self, budget: int) -> int:
        sess = self.session
        done = 0
        while done < budget:
            item = sess.ring_a2s.try_pop()
            if item is None:
                break
            done += 1
            try:
                rec = parse_record(*item)
                tag = rec[0]
                if tag == "rpc":
                    self._handle_rpc(rec[1])
                elif tag == "ack":
                    self._handle_ack(rec[1], rec[2])
                elif tag == "new_region":
                    self._handle_new_region(rec[1], rec[2], rec[3], rec[4])
                elif tag == "bye":
                    sess.service._retire_session(sess, reason="bye")
                    break
                # apps do not send completes; ignore if one shows up
            except MrpcError as exc:
                # a garbage record must not take the whole session down
                _log.warning("app %s sent a bad record: %s", sess.app_id, exc)
        return done

    # --- service -> app ---------------------------------------------------

    def _queue_out(self, packed) -> None:
        self._pending_out.append(packed)

    def _flush_out(self) -> int:
        sess = self.session
        pushed = 0
        rang = False
        while self._pending_out:
            rec, spill = self._pending_out[0]
            res = sess.ring_s2a.try_push(rec, spill)
            if res == ControlRing.PUSH_FULL:
                break
            if res == ControlRing.PUSH_WAS_EMPTY:
                rang = True
            self._pending_out.popleft()
            pushed += 1
        if rang:
            sess.wake_s2a.ring()
        return pushed

    def _collect_conn(self, conn: Connection, budget: int) -> int:
        done = 0
        while done < budget and conn.exit_rx and len(self._pending_out) < 256:
            item = conn.exit_rx.popleft()
            if isinstance(item, TxDone):
                for i in range(0, len(item.call_ids), MAX_IDS):
                    self._queue_out(
                        (pack_ids_record(RK_COMPLETE, conn.conn_id, item.call_ids[i : i + MAX_IDS]), b"")
                    )
            elif isinstance(item, RpcDescriptor):
                if item.blocks:
                    conn.delivered[item.call_id] = list(item.blocks)
                if item.direction == Direction.RESPONSE and conn.role == "client":
                    if item.call_id in conn.outstanding:
                        conn.outstanding.discard(item.call_id)
                        conn.counters.in_flight -= 1
                        if item.status == Status.OK:
                            conn.counters.completed += 1
                        else:
                            conn.counters.failed += 1
                conn.counters.delivered += 1
                self._queue_out(pack_rpc_record(item))
            done += 1
        return done

    def do_work(self, budget: int) -> int:
        sess = self.session
        sess.wake_a2s.drain()
        done = self._flush_out()
        done += self._drain_ring(budget)
        for conn in list(sess.conns.values()):
            done += self._collect_conn(conn, budget)
        done += self._flush_out()
        return done

    def poll_fds(self):
        return [self.session.wake_a2s.fd]

    def needs_busy_poll(self):
        return bool(self._pending_out)


class _TcpListener:
    def __init__(self, sock, host, port, session, bind_cfg):
        self.sock = sock
        self.host = host
        self.port = port
        self.session = session
        self.bind_cfg = bind_cfg
        self.thread: threading.Thread | None = None
        self.closed = False


class ServiceInstance:
    """One per-host service: sessions, connections, runtimes, control."""

    def __init__(self, config: ServiceConfig | None = None):
        self.config = config or ServiceConfig()
        self.plan_cache = PlanCache()
        self.sim_network = SIM_NETWORK
        self.runtimes: dict[str, Runtime] = {}
        self.default_runtime: Runtime | None = None
        self._apps: dict[str, AppSession] = {}
        self._conns: dict[int, Connection] = {}
        self._tcp_listeners: dict = {}
        self._sim_listeners: dict = {}
        self._sim_accepts: deque = deque()
        self._sim_accept_evt = threading.Event()
        self._lock = threading.RLock()
        self._app_seq = 0
        self._conn_seq = 0
        self._lid_seq = 0
        self._nonce = secrets.randbits(24)
        self._threads: list[threading.Thread] = []
        self._app_srv: socket.socket | None = None
        self._ctl_srv: socket.socket | None = None
        self._stopping = False
        self._stop_lock = threading.Lock()
        self._stopped_evt = threading.Event()
        self.on_stop = None  # called once, after teardown completes

    # --- lifecycle ---------------------------------------------------------

    @property
    def app_socket_path(self) -> str:
        return os.path.join(self.config.run_dir, "app.sock")

    @property
    def control_socket_path(self) -> str:
        return os.path.join(self.config.run_dir, "control.sock")

    def start(self) -> "ServiceInstance":
        os.makedirs(self.config.run_dir, mode=0o700, exist_ok=True)
        rt = Runtime("shared0", mode="adaptive", budget=self.config.budget)
        rt.start()
        self.runtimes["shared0"] = rt
        self.default_runtime = rt
        self._app_srv = self._unix_server(self.app_socket_path)
        self._ctl_srv = self._unix_server(self.control_socket_path)
        self._spawn(self._accept_loop, self._app_srv, self._app_session_thread, name="app-accept")
        self._spawn(self._accept_loop, self._ctl_srv, self._control_thread, name="ctl-accept")
        self._spawn(self._sim_accept_loop, name="sim-accept")
        return self

    def _unix_server(self, path: str) -> socket.socket:
        try:
            os.unlink(path)
        except FileNotFoundError:
            pass
        s = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        s.bind(path)
        os.chmod(path, 0o600)
        s.listen(32)
        return s

    def _spawn(self, fn, *args, name: str) -> None:
        t = threading.Thread(target=fn, args=args, daemon=True, name=f"mrpc-{name}")
        t.start()
        self._threads.append(t)

    def _accept_loop(self, srv: socket.socket, handler) -> None:
        while not self._stopping:
            try:
                sock, _ = srv.accept()
            except OSError:
                return
            self._spawn(handler, sock, name="conn")

    def stop(self) -> None:
        with self._stop_lock:
            if self._stopped_evt.is_set():
                return
            self._stopping = True
            for srv in (self._app_srv, self._ctl_srv):
                if srv is not None:
                    try:
                        srv.close()
                    except OSError:
                        pass
            self._sim_accept_evt.set()
            with self._lock:
                sessions = list(self._apps.values())
                listeners = list(self._tcp_listeners.values())
            for lst in listeners:
                lst.closed = True
                try:
                    lst.sock.close()
                except OSError:
                    pass
            for name in list(self._sim_listeners):
                self.sim_network.unlisten(name)
            for sess in sessions:
                self._retire_session(sess, reason="shutdown")
            for rt in self.runtimes.values():
                rt.stop()
            for rt in self.runtimes.values():
                rt.join(timeout=2.0)
            self._stopped_evt.set()
        if self.on_stop is not None:
            self.on_stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # --- app sessions -------------------------------------------------------

    def _app_session_thread(self, sock: socket.socket) -> None:
        reader = _LineReader(sock)
        session: AppSession | None = None
        try:
            while not self._stopping:
                try:
                    msg = reader.read()
                except (OSError, ValueError):
                    break
                if msg is None:
                    break
                op = msg.get("op")
                try:
                    if op == "hello":
                        session = self._open_session(sock)
                        info = session.materialize()
                        # app writes the a2s doorbell and reads the s2a one
                        _send_line(
                            sock,
                            {"ok": True, **info},
                            fds=[session.wake_a2s.write_fd, session.wake_s2a.fd],
                        )
                    elif op == "connect":
                        if session is None:
                            raise MrpcError("hello required before connect")
                        reply = self._connect_out(session, msg)
                        _send_line(sock, {"ok": True, **reply})
                    elif op == "bind":
                        if session is None:
                            raise MrpcError("hello required before bind")
                        reply = self._bind(session, msg)
                        _send_line(sock, {"ok": True, **reply})
                    elif op == "disconnect":
                        conn = session.conns.get(int(msg["conn"])) if session else None
                        if conn is not None:
                            self._teardown_conn(conn, notify_app=False, reason="app disconnect")
                        _send_line(sock, {"ok": True})
                    elif op == "whois":
                        conn = session.conns.get(int(msg["conn"])) if session else None
                        if conn is None:
                            raise MrpcError(f"no connection {msg.get('conn')}")
                        _send_line(
                            sock,
                            {"ok": True, "role": conn.role, "bound_to": conn.bound_to, "remote": conn.remote},
                        )
                    elif op == "close":
                        break
                    else:
                        raise MrpcError(f"unknown op {op!r}")
                except ConnectionRejected as exc:
                    _send_line(sock, {"ok": False, "error": "rejected", "reason": exc.reason})
                except (MrpcError, SchemaError, OSError) as exc:
                    _send_line(sock, {"ok": False, "error": type(exc).__name__, "detail": str(exc)})
        finally:
            if session is not None:
                self._retire_session(session, reason="socket closed")
            try:
                sock.close()
            except OSError:
                pass

    def _open_session(self, sock) -> AppSession:
        with self._lock:
            self._app_seq += 1
            app_id = f"a{self._app_seq}"
            session = AppSession(self, app_id, sock)
            self._apps[app_id] = session
        return session

    def _retire_session(self, session: AppSession, reason: str) -> None:
        with self._lock:
            if session.closed:
                return
            session.closed = True
            self._apps.pop(session.app_id, None)
            conns = list(session.conns.values())
        for conn in conns:
            self._teardown_conn(conn, notify_app=False, reason=reason)
        if session.frontend is not None and session.runtime is not None:
            try:
                session.runtime.detach_engine(session.frontend)
            except (ControlError, ValueError):
                pass
        for reg in session.regions:
            reg.close()
        session.send_map.close()
        # the app owns its send regions but may have died; sweep by name
        inst = self.config.instance
        for path in glob.glob(region_path(inst, session.app_id, "*")):
            try:
                os.unlink(path)
            except OSError:
                pass
        for w in (session.wake_a2s, session.wake_s2a):
            if w is not None:
                w.close()

    # --- outbound connections ------------------------------------------------

    def _next_conn_id(self) -> int:
        with self._lock:
            self._conn_seq += 1
            return (self._nonce << 32) | self._conn_seq

    def _register_conn(self, conn: Connection) -> None:
        with self._lock:
            self._lid_seq += 1
            conn.lid = self._lid_seq
            self._conns[conn.lid] = conn
        conn.session.conns[conn.conn_id] = conn

    def _load_plan(self, msg: dict, owner):
        schema_text = msg.get("schema")
        digest_hex = msg.get("digest")
        if schema_text:
            desc = parse_schema(schema_text)
            digest = schema_digest(desc)
            if digest_hex and bytes.fromhex(digest_hex) != digest:
                raise SchemaError("schema text does not match the claimed digest")
        elif digest_hex:
            desc = None
            digest = bytes.fromhex(digest_hex)
        else:
            raise MrpcError("connect needs schema text or a digest")
        plan = self.plan_cache.load(digest, desc, owner=owner)
        return plan, digest

    def _connect_out(self, session: AppSession, msg: dict) -> dict:
        remote = msg["remote"]
        conn_id = self._next_conn_id()
        conn = Connection(conn_id, "client", session, remote)
        plan, digest = self._load_plan(msg, owner=f"conn{conn_id}")
        conn.plan = plan
        conn.digest = digest
        conn.transport_config = msg.get("transport_config", {})
        policies = msg.get("policies", [])
        hello = {
            "digest": digest.hex(),
            "conn_id": conn_id,
            "schema": msg.get("schema", ""),
        }
        if remote.startswith("sim:"):
            conn.transport_kind = "transport.sim"
            self._dial_sim(conn, remote[4:], hello)
        else:
            conn.transport_kind = "transport.tcp"
            host, _, port = remote.rpartition(":")
            self._dial_tcp(conn, host, int(port), hello)
        version = msg.get("transport_version")
        self._build_datapath(conn, policies, version)
        self._register_conn(conn)
        return {"conn_id": conn_id, "lid": conn.lid, "methods": [p.name for p in plan.methods]}

    def _dial_tcp(self, conn: Connection, host: str, port: int, hello: dict) -> None:
        sock = tcp_dial(host, port)
        payload = json.dumps(hello).encode()
        desc = RpcDescriptor(conn.conn_id, 0, 0, Direction.REQUEST)
        sock.sendall(pack_header(FRAME_HELLO, desc, [len(payload)]) + payload)
        hdr, body, extra = _read_one_frame_blocking(sock, HANDSHAKE_TIMEOUT)
        if hdr.kind == FRAME_HELLO_REJECT:
            sock.close()
            raise ConnectionRejected(json.loads(body).get("reason", "rejected"))
        if hdr.kind != FRAME_HELLO_OK:
            sock.close()
            raise MrpcError(f"unexpected handshake frame kind {hdr.kind}")
        conn.transport_sock = sock
        conn.initial_rx_bytes = extra

    def _dial_sim(self, conn: Connection, name: str, hello: dict) -> None:
        tc = conn.transport_config
        if tc.get("link"):
            link = self.sim_network.link(tc["link"], tc.get("rate"), tc.get("op_cost", 0.0))
        else:
            link = SimLink("", tc.get("rate"), tc.get("op_cost", 0.0))
        endpoint = self.sim_network.dial(name, link)
        payload = json.dumps(hello).encode()
        desc = RpcDescriptor(conn.conn_id, 0, 0, Direction.REQUEST)
        endpoint.send_op([pack_header(FRAME_HELLO, desc, [len(payload)]) + payload])
        hdr, body, extra = _read_sim_frame_blocking(endpoint, HANDSHAKE_TIMEOUT)
        if hdr.kind == FRAME_HELLO_REJECT:
            endpoint.close()
            raise ConnectionRejected(json.loads(body).get("reason", "rejected"))
        if hdr.kind != FRAME_HELLO_OK:
            endpoint.close()
            raise MrpcError(f"unexpected handshake frame kind {hdr.kind}")
        conn.sim_endpoint = endpoint
        conn.initial_rx_bytes = extra

    # --- listeners ------------------------------------------------------------

    def _bind(self, session: AppSession, msg: dict) -> dict:
        listen = msg["listen"]
        plan, digest = self._load_plan(msg, owner=f"bind:{listen}")
        bind_cfg = {
            "plan": plan,
            "digest": digest,
            "policies": msg.get("policies", []),
            "transport_config": msg.get("transport_config", {}),
            "transport_version": msg.get("transport_version"),
        }
        if listen.startswith("sim:"):
            name = listen[4:]
            self.sim_network.listen(name, lambda ep: self._enqueue_sim_accept(name, ep))
            with self._lock:
                self._sim_listeners[name] = (session, bind_cfg)
        else:
            host, _, port = listen.rpartition(":")
            sock = tcp_listen(host, int(port))
            port = sock.getsockname()[1]
            lst = _TcpListener(sock, host, port, session, bind_cfg)
            bind_cfg["bound_to"] = f"{host}:{port}"
            with self._lock:
                self._tcp_listeners[(host, port)] = lst
            t = threading.Thread(target=self._tcp_accept_loop, args=(lst,), daemon=True, name="mrpc-tcp-accept")
            lst.thread = t
            t.start()
            return {"listen": f"{host}:{port}", "digest": digest.hex()}
        bind_cfg["bound_to"] = listen
        return {"listen": listen, "digest": digest.hex()}

    def _tcp_accept_loop(self, lst: _TcpListener) -> None:
        while not lst.closed and not self._stopping:
            try:
                sock, _addr = lst.sock.accept()
            except OSError:
                return
            try:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._accept_handshake_tcp(sock, lst.session, lst.bind_cfg)
            except (MrpcError, OSError, ValueError) as exc:
                _log.warning("handshake failed: %s", exc)
                try:
                    sock.close()
                except OSError:
                    pass

    def _accept_handshake_tcp(self, sock, session: AppSession, bind_cfg: dict) -> None:
        hdr, body, extra = _read_one_frame_blocking(sock, HANDSHAKE_TIMEOUT)
        if hdr.kind != FRAME_HELLO:
            raise MrpcError(f"expected hello, got frame kind {hdr.kind}")
        hello = json.loads(body)
        reply_desc = RpcDescriptor(hello.get("conn_id", 0), 0, 0, Direction.RESPONSE)
        if bytes.fromhex(hello["digest"]) != bind_cfg["digest"]:
            payload = json.dumps({"reason": "schema-mismatch"}).encode()
            sock.sendall(pack_header(FRAME_HELLO_REJECT, reply_desc, [len(payload)]) + payload)
            sock.close()
            return
        conn_id = hello["conn_id"]
        conn = Connection(conn_id, "server", session, "tcp-peer")
        conn.bound_to = bind_cfg.get("bound_to")
        conn.plan = bind_cfg["plan"]
        conn.digest = bind_cfg["digest"]
        conn.transport_kind = "transport.tcp"
        conn.transport_config = bind_cfg.get("transport_config", {})
        conn.transport_sock = sock
        conn.initial_rx_bytes = extra
        payload = json.dumps({"conn_id": conn_id}).encode()
        sock.sendall(pack_header(FRAME_HELLO_OK, reply_desc, [len(payload)]) + payload)
        self._build_datapath(conn, bind_cfg["policies"], bind_cfg.get("transport_version"))
        self._register_conn(conn)

    def _enqueue_sim_accept(self, name: str, endpoint) -> None:
        self._sim_accepts.append((name, endpoint))
        self._sim_accept_evt.set()

    def _sim_accept_loop(self) -> None:
        while not self._stopping:
            self._sim_accept_evt.wait(timeout=0.2)
            self._sim_accept_evt.clear()
            while self._sim_accepts:
                name, endpoint = self._sim_accepts.popleft()
                try:
                    self._accept_handshake_sim(name, endpoint)
                except (MrpcError, ValueError, KeyError) as exc:
                    _log.warning("sim handshake failed: %s", exc)
                    endpoint.close()

    def _accept_handshake_sim(self, name: str, endpoint) -> None:
        with self._lock:
            entry = self._sim_listeners.get(name)
        if entry is None:
            raise MrpcError(f"no bound app at sim:{name}")
        session, bind_cfg = entry
        hdr, body, extra = _read_sim_frame_blocking(endpoint, HANDSHAKE_TIMEOUT)
        if hdr.kind != FRAME_HELLO:
            raise MrpcError(f"expected hello, got frame kind {hdr.kind}")
        hello = json.loads(body)
        reply_desc = RpcDescriptor(hello.get("conn_id", 0), 0, 0, Direction.RESPONSE)
        if bytes.fromhex(hello["digest"]) != bind_cfg["digest"]:
            payload = json.dumps({"reason": "schema-mismatch"}).encode()
            endpoint.send_op([pack_header(FRAME_HELLO_REJECT, reply_desc, [len(payload)]) + payload])
            return
        conn_id = hello["conn_id"]
        conn = Connection(conn_id, "server", session, f"sim:{name}")
        conn.bound_to = bind_cfg.get("bound_to")
        conn.plan = bind_cfg["plan"]
        conn.digest = bind_cfg["digest"]
        conn.transport_kind = "transport.sim"
        conn.transport_config = bind_cfg.get("transport_config", {})
        conn.sim_endpoint = endpoint
        conn.initial_rx_bytes = extra
        payload = json.dumps({"conn_id": conn_id}).encode()
        endpoint.send_op([pack_header(FRAME_HELLO_OK, reply_desc, [len(payload)]) + payload])
        self._build_datapath(conn, bind_cfg["policies"], bind_cfg.get("transport_version"))
        self._register_conn(conn)

    # --- datapath assembly ------------------------------------------------------

    def _build_datapath(self, conn: Connection, policies: list, transport_version=None) -> None:
        session = conn.session
        dp = Datapath(conn.conn_id, conn.counters)
        conn.datapath = dp
        ctx_base = dict(
            datapath=dp,
            conn=conn,
            heaps=session.heaps,
            plan=conn.plan,
            counters=conn.counters,
            service=self,
        )
        engines: list[Engine] = [ConnEntry(EngineCtx(**ctx_base, config={}))]
        recv_side = any(p.get("side") == "recv" for p in policies)
        if recv_side:
            # frames land on the private heap; the gate copies survivors in
            conn.land_private = True
            engines.append(lookup_engine("policy.recv_gate")(EngineCtx(**ctx_base, config={})))
        for p in policies:
            cls = lookup_engine(p["kind"], p.get("version"))
            cfg = {k: v for k, v in p.items() if k not in ("kind", "version")}
            engines.append(cls(EngineCtx(**ctx_base, config=cfg)))
        tcls = lookup_engine(conn.transport_kind, transport_version)
        engines.append(tcls(EngineCtx(**ctx_base, config=dict(conn.transport_config))))
        dp.build(engines)
        engines[0].tx_in = conn.entry_tx
        engines[0].rx_out = conn.exit_rx
        dp.owner_conn = conn
        dp.on_fault = self._on_datapath_fault
        conn.runtime = session.runtime
        rt = conn.runtime
        for e in engines:
            rt.attach_engine(e)

    def _on_datapath_fault(self, dp: Datapath, engine: Engine, exc: Exception) -> None:
        conn = getattr(dp, "owner_conn", None)
        if conn is None:
            return
        if not isinstance(exc, TransportClosed):
            _log.warning("conn %d engine %s fault: %r", conn.conn_id, engine.kind, exc)
        self._teardown_conn(conn, notify_app=True, reason=str(exc))

    def _teardown_conn(self, conn: Connection, notify_app: bool, reason: str) -> None:
        with self._lock:
            if conn.state == "closed":
                return
            conn.state = "closed"
            self._conns.pop(conn.lid, None)
        conn.session.conns.pop(conn.conn_id, None)

        def detach():
            rt = conn.runtime
            for e in conn.datapath.engines:
                if e in rt.engines:
                    rt.engines.remove(e)
                    e.on_detach()

        if conn.runtime is not None and conn.datapath is not None:
            if threading.current_thread() is conn.runtime:
                detach()
            else:
                try:
                    conn.runtime.submit(detach)
                except ControlError:
                    detach()
        if conn.transport_sock is not None:
            try:
                conn.transport_sock.close()
            except OSError:
                pass
        if conn.sim_endpoint is not None:
            conn.sim_endpoint.close()
        if notify_app and not conn.session.closed and conn.session.frontend is not None:
            fe = conn.session.frontend
            for call_id in sorted(conn.outstanding):
                err = RpcDescriptor(
                    conn_id=conn.conn_id,
                    call_id=call_id,
                    method_index=0,
                    direction=Direction.RESPONSE,
                    status=Status.UNAVAILABLE,
                    blocks=[],
                )
                conn.counters.failed += 1
                conn.counters.in_flight -= 1
                fe._queue_out((pack_ids_record(RK_COMPLETE, conn.conn_id, [call_id]), b""))
                fe._queue_out(pack_rpc_record(err))
            conn.outstanding.clear()
        self.plan_cache.release(conn.digest, f"conn{conn.conn_id}")

    # --- control plane -------------------------------------------------------

    def _control_thread(self, sock: socket.socket) -> None:
        reader = _LineReader(sock)
        try:
            while not self._stopping:
                try:
                    msg = reader.read()
                except (OSError, ValueError):
                    break
                if msg is None:
                    break
                try:
                    reply = self._control_dispatch(msg)
                    _send_line(sock, {"ok": True, **(reply or {})})
                except (MrpcError, SchemaError, KeyError, ValueError) as exc:
                    _send_line(sock, {"ok": False, "error": type(exc).__name__, "detail": str(exc)})
        finally:
            try:
                sock.close()
            except OSError:
                pass

    def _conn_for_ctl(self, msg: dict) -> Connection:
        conn = self._conns.get(int(msg["conn"]))
        if conn is None:
            raise ControlError(f"no connection {msg.get('conn')}")
        return conn

    def _control_dispatch(self, msg: dict) -> dict:
        op = msg.get("op")
        if op == "list":
            with self._lock:
                return {
                    "instance": self.config.instance,
                    "apps": sorted(self._apps),
                    "conns": [c.describe() for c in self._conns.values()],
                    "engines": [f"{k}@{v}" for k, v in registered_engines()],
                }
        if op == "stats":
            return self.stats(int(msg["conn"]) if "conn" in msg else None)
        if op == "submit-schema":
            desc = parse_schema(msg["schema"])
            digest = schema_digest(desc)
            self.plan_cache.load(digest, desc, owner="prefetch")
            return {"digest": digest.hex()}
        if op == "attach":
            conn = self._conn_for_ctl(msg)
            spec = msg["engine"]
            cls = lookup_engine(spec["kind"], spec.get("version"))
            cfg = {k: v for k, v in spec.items() if k not in ("kind", "version")}
            ctx = EngineCtx(
                datapath=conn.datapath,
                conn=conn,
                heaps=conn.session.heaps,
                plan=conn.plan,
                counters=conn.counters,
                service=self,
                config=cfg,
            )
            index = msg.get("index", len(conn.datapath.engines) - 1)
            insert_engine(conn.datapath, index, cls(ctx))
            return {"engines": [f"{e.kind}@{e.version}" for e in conn.datapath.engines]}
        if op == "detach":
            conn = self._conn_for_ctl(msg)
            index = conn.datapath.index_of(msg["kind"])
            remove_engine(conn.datapath, index)
            return {"engines": [f"{e.kind}@{e.version}" for e in conn.datapath.engines]}
        if op == "upgrade":
            conn = self._conn_for_ctl(msg)
            kind = msg["kind"]
            cls = lookup_engine(kind, msg.get("version"))
            index = conn.datapath.index_of(kind)
            upgrade_engine(conn.datapath, index, cls)
            return {"engines": [f"{e.kind}@{e.version}" for e in conn.datapath.engines]}
        if op == "set":
            conn = self._conn_for_ctl(msg)
            index = conn.datapath.index_of(msg["kind"])
            engine = conn.datapath.engines[index]
            cfg = msg.get("config", {})

            def apply():
                engine.update_config(cfg)

            conn.runtime.submit(apply)
            return {}
        if op == "shutdown":
            threading.Thread(target=self.stop, daemon=True).start()
            return {}
        raise ControlError(f"unknown control op {op!r}")

    def stats(self, lid: int | None = None) -> dict:
        if lid is not None:
            conn = self._conns.get(lid)
            if conn is None:
                raise ControlError(f"no connection {lid}")
            return {"conns": {str(lid): self._conn_stats(conn)}}
        with self._lock:
            conns = dict(self._conns)
            apps = dict(self._apps)
        out = {
            "plan_cache": self.plan_cache.stats(),
            "runtimes": {
                name: {"cpu_ms": rt.cpu_ns // 1_000_000, "passes": rt.passes, "parks": rt.parks, "mode": rt.mode}
                for name, rt in self.runtimes.items()
            },
            "conns": {str(cid): self._conn_stats(c) for cid, c in conns.items()},
            "apps": {
                aid: {
                    "recv_heap_used": s.recv_heap.used_bytes if s.recv_heap else 0,
                    "recv_heap_hwm": s.recv_heap.hwm_bytes if s.recv_heap else 0,
                    "private_heap_used": s.private_heap.used_bytes,
                    "conns": sorted(s.conns),
                }
                for aid, s in apps.items()
            },
        }
        return out

    def _conn_stats(self, conn: Connection) -> dict:
        def snap():
            s = conn.counters.snapshot()
            s["queues"] = conn.datapath.queue_depths() if conn.datapath else []
            return s

        if conn.runtime is not None and conn.runtime.is_alive():
            try:
                return conn.runtime.submit(snap)
            except ControlError:
                pass
        return snap()


# --------------------------------------------------------------------------
# handshake helpers


def _read_one_frame_blocking(sock: socket.socket, timeout: float):
    """Read exactly one frame; returns (header, payload, extra bytes)."""
    from .wire import parse_header
    from .errors import TruncatedFrame

    sock.settimeout(timeout)
    buf = bytearray()
    try:
        while True:
            try:
                hdr, hsize = parse_header(buf)
                need = hsize + hdr.payload_len
                if len(buf) >= need:
                    body = bytes(buf[hsize:need])
                    return hdr, body, bytes(buf[need:])
            except TruncatedFrame:
                pass
            chunk = sock.recv(65536)
            if not chunk:
                raise MrpcError("connection closed during handshake")
            buf += chunk
    finally:
        sock.settimeout(None)  # transport engine flips to nonblocking itself


def _read_sim_frame_blocking(endpoint, timeout: float):
    from .wire import parse_header
    from .errors import TruncatedFrame

    buf = bytearray()
    deadline = time.monotonic() + timeout
    while True:
        endpoint.ingress_link.pump()
        while endpoint.inbox:
            for chunk in endpoint.inbox.popleft():
                buf += chunk
        try:
            hdr, hsize = parse_header(buf)
            need = hsize + hdr.payload_len
            if len(buf) >= need:
                return hdr, bytes(buf[hsize:need]), bytes(buf[need:])
        except TruncatedFrame:
            pass
        if time.monotonic() > deadline:
            raise MrpcError("handshake timed out")
        time.sleep(0.0005)
