"""mrpc-bench: throughput, latency, and marshalling-step measurements.

Scenarios:

    pingpong    sequential calls through a live service over TCP loopback
    pipelined   many calls in flight at once through a live service
    emulation   the serialize/reserialize pipeline a sidecar deployment
                performs for the same value, measured in-process

``emulation`` exists as the comparison baseline: with per-process proxies
an RPC is serialized by the app, re-parsed and re-serialized by the proxy
on each host, and parsed by the receiver, six marshalling steps each way.
The managed service does one marshal at the sender and one unmarshal at
the receiver.  The ``steps_per_rt`` figures make that 12-vs-4 difference
measurable rather than asserted.
"""

import argparse
import json
import os
import sys
import threading
import time

from ..schema import MarshalPlan, parse_schema
from ..wire import (
    Direction,
    RpcDescriptor,
    Status,
    build_value,
    decode_full,
    encode_full,
    free_tree,
    walk_blocks,
    HEAP_PRIVATE,
)

BENCH_SCHEMA = """
package bench;

message Req {
  string key = 1;
  bytes blob = 2;
  i64 seq = 3;
}

message Rep {
  string key = 1;
  bytes blob = 2;
  i64 seq = 3;
}

service Bench {
  rpc Echo (Req) returns (Rep);
}
"""


def _sample_value(payload: int) -> dict:
    return {"key": "bench-key", "blob": b"\x5a" * payload, "seq": 1}


# --------------------------------------------------------------------------
# emulation: the sidecar pipeline, in-process


class _Scratch:
    """Minimal allocator satisfying the heap interface for local values."""

    def __init__(self):
        from ..wire import make_offset, BlockRef

        self._mk = make_offset
        self._BlockRef = BlockRef
        self._blocks = {}
        self._next = 16

    def alloc(self, heap_id, size):
        off = self._mk(heap_id, 0, self._next)
        self._next += max(16, (size + 15) & ~15)
        self._blocks[off] = bytearray(size)
        return self._BlockRef(heap_id, off, size)

    def view(self, ref):
        return memoryview(self._blocks[ref.offset])[: ref.length]

    def free(self, ref):
        del self._blocks[ref.offset]


def _one_way_steps(plan: MarshalPlan, value: dict) -> tuple[int, bytes]:
    """App -> proxy -> wire -> proxy -> app for one message; returns
    (marshalling steps performed, final wire bytes)."""
    steps = 0

    def marshal_value(val) -> bytes:
        nonlocal steps
        heaps = _Scratch()
        root = build_value(heaps, HEAP_PRIVATE, plan, "Req", val)
        blocks = walk_blocks(heaps, plan, "Req", root)
        desc = RpcDescriptor(1, 1, 0, Direction.REQUEST, Status.OK, 0, blocks)
        data = encode_full(heaps, plan, desc)
        steps += 1
        free_tree(heaps, blocks)
        return data

    def unmarshal_value(data: bytes) -> dict:
        nonlocal steps
        _hdr, val = decode_full(plan, data)
        steps += 1
        return val

    wire = marshal_value(value)  # app serializes
    val = unmarshal_value(wire)  # local proxy parses to apply policy
    wire = marshal_value(val)  # local proxy re-serializes
    val = unmarshal_value(wire)  # remote proxy parses
    wire = marshal_value(val)  # remote proxy re-serializes
    _ = unmarshal_value(wire)  # receiving app parses
    return steps, wire


def run_emulation(count: int, payload: int) -> dict:
    plan = MarshalPlan(parse_schema(BENCH_SCHEMA))
    value = _sample_value(payload)
    steps, wire = _one_way_steps(plan, value)
    t0 = time.perf_counter()
    for _ in range(count):
        _one_way_steps(plan, value)
    dt = time.perf_counter() - t0
    return {
        "scenario": "emulation",
        "count": count,
        "payload_bytes": payload,
        "wire_bytes": len(wire),
        "steps_per_one_way": steps,
        "steps_per_rt": steps * 2,
        "seconds": round(dt, 6),
        "msgs_per_sec": round(count / dt, 1),
    }


# --------------------------------------------------------------------------
# live service scenarios


def _managed_setup(instance: str, payload: int):
    from ..client import AppSession
    from ..service import ServiceConfig, ServiceInstance

    svc = ServiceInstance(ServiceConfig(instance=instance, run_dir=f"/tmp/mrpc-{instance}")).start()
    server = AppSession(instance=instance)
    binding = server.bind(BENCH_SCHEMA, "127.0.0.1:0")
    stop = threading.Event()

    def handler(_method, req):
        return req

    t = threading.Thread(target=binding.serve, args=(handler, stop), daemon=True)
    t.start()
    client = AppSession(instance=instance)
    chan = client.connect(BENCH_SCHEMA, binding.listen)
    return svc, server, client, chan, stop, t


def _steps_per_rt(svc, before: dict, count: int) -> float:
    after = svc.stats()["conns"]
    steps = 0
    for lid, stats in after.items():
        prev = before.get(lid, {})
        steps += stats["marshal_count"] - prev.get("marshal_count", 0)
        steps += stats["unmarshal_count"] - prev.get("unmarshal_count", 0)
    return steps / count


def run_pingpong(count: int, payload: int) -> dict:
    instance = f"bench{os.getpid()}"
    svc, server, client, chan, stop, t = _managed_setup(instance, payload)
    try:
        value = _sample_value(payload)
        chan.call("Echo", value, timeout=10)
        before = svc.stats()["conns"]
        lat = []
        t0 = time.perf_counter()
        for i in range(count):
            c0 = time.perf_counter()
            chan.call("Echo", value, timeout=10)
            lat.append(time.perf_counter() - c0)
        dt = time.perf_counter() - t0
        steps = _steps_per_rt(svc, before, count)
        lat.sort()
        return {
            "scenario": "pingpong",
            "count": count,
            "payload_bytes": payload,
            "seconds": round(dt, 6),
            "rpc_per_sec": round(count / dt, 1),
            "p50_us": round(lat[len(lat) // 2] * 1e6, 1),
            "p99_us": round(lat[int(len(lat) * 0.99)] * 1e6, 1),
            "steps_per_rt": steps,
        }
    finally:
        stop.set()
        t.join(timeout=2)
        chan.close()
        client.close()
        server.close()
        svc.stop()


def run_pipelined(count: int, payload: int, window: int) -> dict:
    instance = f"bench{os.getpid()}"
    svc, server, client, chan, stop, t = _managed_setup(instance, payload)
    try:
        value = _sample_value(payload)
        chan.call("Echo", value, timeout=10)
        before = svc.stats()["conns"]
        t0 = time.perf_counter()
        pending = []
        sent = 0
        while sent < count or pending:
            while sent < count and len(pending) < window:
                pending.append(chan.call_async("Echo", value))
                sent += 1
            pending.pop(0).wait(timeout=30)
        dt = time.perf_counter() - t0
        steps = _steps_per_rt(svc, before, count)
        return {
            "scenario": "pipelined",
            "count": count,
            "window": window,
            "payload_bytes": payload,
            "seconds": round(dt, 6),
            "rpc_per_sec": round(count / dt, 1),
            "steps_per_rt": steps,
        }
    finally:
        stop.set()
        t.join(timeout=2)
        chan.close()
        client.close()
        server.close()
        svc.stop()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mrpc-bench")
    ap.add_argument("scenario", choices=["pingpong", "pipelined", "emulation", "all"])
    ap.add_argument("-n", "--count", type=int, default=2000)
    ap.add_argument("--payload", type=int, default=256, help="blob bytes per message")
    ap.add_argument("--window", type=int, default=32, help="in-flight calls for pipelined")
    ap.add_argument("--tsv", action="store_true", help="tab-separated instead of JSON")
    args = ap.parse_args(argv)

    runs = []
    if args.scenario in ("emulation", "all"):
        runs.append(run_emulation(args.count, args.payload))
    if args.scenario in ("pingpong", "all"):
        runs.append(run_pingpong(args.count, args.payload))
    if args.scenario in ("pipelined", "all"):
        runs.append(run_pipelined(args.count, args.payload, args.window))

    if args.tsv:
        for r in runs:
            keys = sorted(r)
            print("\t".join(keys))
            print("\t".join(str(r[k]) for k in keys))
    else:
        json.dump(runs if len(runs) > 1 else runs[0], sys.stdout, indent=2)
        print()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
