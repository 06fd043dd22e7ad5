"""Transport engines: the fuse pass, TCP scatter-gather, simulated SG device."""

import socket
import time
from collections import deque
from contextlib import contextmanager

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrpc.errors import MrpcError
from mrpc.shmipc import HEAP_RECV
from mrpc.transport import (
    SimLink,
    SimNetwork,
    TcpTransport,
    TransportClosed,
    fuse,
)
from mrpc.wire import Status

from conftest import ECHO_SCHEMA
from harness import (
    CallPump,
    EchoResponder,
    PoisonHeap,
    Side,
    drain,
    heap_leaks,
    make_heaps,
    run_until,
    sim_pair,
    step,
    tcp_pair,
    tcp_socket_pair,
)
from mrpc.schema import MarshalPlan, parse_schema

# Request frame shape for ECHO_SCHEMA with key and blob both present:
# 3 blocks (root, key leaf, blob leaf), so the header is 36 + 4*3 bytes
# and marshal emits 4 buffers.
ECHO_HDR = 48
ECHO_BUFS = 4
ECHO_ROOT = 40


def no_leaks(*named_heaps):
    leaks = heap_leaks(*named_heaps)
    assert set(leaks.values()) == {0}, leaks


# --------------------------------------------------------------------------
# fuse


def test_fuse_frozen_example():
    elements = [b"a" * 10, b"b" * 20, b"c" * 16384, b"d" * 5]
    out, copied = fuse(elements)
    assert [len(o) for o in out] == [30, 16384, 5]
    assert copied == 30
    assert bytes(out[0]) == b"a" * 10 + b"b" * 20
    # at-or-above-bound elements and trailing runs of one pass through as-is
    assert out[1] is elements[2]
    assert out[2] is elements[3]


def test_fuse_run_of_one_is_not_copied():
    elements = [b"x" * 100, b"y" * 16500, b"z" * 200]
    out, copied = fuse(elements)
    assert copied == 0
    assert all(o is e for o, e in zip(out, elements))


def test_fuse_element_at_bound_passes_through():
    elements = [b"a" * 3, b"b" * 100, b"c" * 3]
    out, copied = fuse(elements, bound=100)
    assert copied == 0
    assert all(o is e for o, e in zip(out, elements))


def test_fuse_run_fills_bound_exactly():
    out, copied = fuse([b"a" * 60, b"b" * 40], bound=100)
    assert [len(o) for o in out] == [100]
    assert copied == 100
    assert bytes(out[0]) == b"a" * 60 + b"b" * 40


def test_fuse_splits_runs_that_would_overflow():
    out, copied = fuse([b"a" * 40, b"b" * 50, b"c" * 30], bound=100)
    assert [len(o) for o in out] == [90, 30]
    assert copied == 90


def test_fuse_empty_input():
    assert fuse([]) == ([], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.binary(min_size=1, max_size=96), max_size=30))
def test_fuse_output_invariants(elements):
    bound = 64
    out, copied = fuse(elements, bound)
    assert b"".join(bytes(o) for o in out) == b"".join(elements)
    pos = 0
    staged_total = 0
    for o in out:
        if any(o is e for e in elements):
            # passthrough: the input element itself, in order
            assert o is elements[pos]
            pos += 1
            continue
        # staged run: a copy of two or more consecutive whole inputs
        run_len = 0
        n = 0
        while run_len < len(o):
            run_len += len(elements[pos + n])
            n += 1
        assert run_len == len(o)  # never splits an element
        assert bytes(o) == b"".join(elements[pos : pos + n])
        assert n >= 2
        assert len(o) <= bound
        staged_total += len(o)
        pos += n
    assert pos == len(elements)
    assert copied == staged_total


# --------------------------------------------------------------------------
# TCP


@contextmanager
def tcp_sides(*args, **kw):
    client, server = tcp_pair(*args, **kw)
    try:
        yield client, server
    finally:
        for side in (client, server):
            try:
                side.transport.sock.close()
            except OSError:
                pass


def test_tcp_echo_round_trips():
    sent = {}

    def build(cid):
        v = {"key": f"k{cid}", "blob": bytes([cid % 251]) * (cid * 37 % 2000), "seq": cid}
        sent[cid] = v
        return v

    def reply(cid, v):
        return {"key": v["key"], "blob": v["blob"], "seq": -v["seq"]}

    with tcp_sides(
        ECHO_SCHEMA,
        {"total": 50, "window": 8, "build": build, "read_responses": True},
        {"reply": reply},
    ) as (client, server):
        run_until(client.head.done, client, server, settle=8)
        assert client.head.responses == {cid: Status.OK for cid in range(1, 51)}
        for cid, v in client.head.response_values.items():
            assert v == {"key": sent[cid]["key"], "blob": sent[cid]["blob"], "seq": -cid}
        assert client.counters.marshal_count == 50 == client.counters.unmarshal_count
        assert server.counters.marshal_count == 50 == server.counters.unmarshal_count
        assert client.counters.tx_frames == 50 == client.counters.rx_frames
        assert server.counters.tx_frames == 50 == server.counters.rx_frames
        # byte conservation across the stream, each direction
        assert client.counters.marshal_bytes == server.counters.unmarshal_bytes
        assert server.counters.marshal_bytes == client.counters.unmarshal_bytes
        no_leaks(("client", client.heaps), ("server", server.heaps))


def test_tcp_partial_writes_resume_mid_frame():
    blob = bytes(range(256)) * 4096  # 1 MiB, patterned so misalignment shows

    with tcp_sides(
        ECHO_SCHEMA,
        {"total": 1, "window": 1, "read_responses": True,
         "build": lambda cid: {"key": "big", "blob": blob, "seq": cid}},
        {"reply": lambda cid, v: {"key": v["key"], "blob": v["blob"], "seq": v["seq"]}},
    ) as (client, server):
        # a tiny send buffer forces many short sendmsg returns
        client.transport.sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 8192)
        run_until(client.head.done, client, server, settle=8)
        assert client.head.responses == {1: Status.OK}
        assert client.head.response_values[1]["blob"] == blob
        assert client.counters.transport_ops > 4
        assert client.counters.tx_frames == 1
        no_leaks(("client", client.heaps), ("server", server.heaps))


BULK_SCHEMA = """
package lab;

message Parts {
  repeated bytes chunks = 1;
  i64 n = 2;
}

message Total {
  i64 n = 1;
}

service Bulk {
  rpc Put (Parts) returns (Total);
}
"""


def test_tcp_frame_with_more_buffers_than_one_iovec():
    # 80 leaves + root + array block = 82 blocks, 83 buffers: more than one
    # sendmsg call can carry, so the frame must span several iovec batches.
    chunks = [bytes([i]) * (17 + i % 23) for i in range(80)]

    def verify(cid, v, desc):
        assert v["chunks"] == chunks
        assert v["n"] == 80

    with tcp_sides(
        BULK_SCHEMA,
        {"total": 1, "window": 1, "read_responses": True,
         "build": lambda cid: {"chunks": chunks, "n": len(chunks)}},
        {"verify": verify, "reply": lambda cid, v: {"n": v["n"]}},
    ) as (client, server):
        run_until(client.head.done, client, server, settle=8)
        assert client.head.response_values[1] == {"n": 80}
        assert client.counters.transport_ops >= 2
        assert client.counters.tx_frames == 1
        no_leaks(("client", client.heaps), ("server", server.heaps))


def test_tcp_rx_parks_on_heap_exhaustion_and_resumes():
    # The server's receive heap only fits a few requests.  The responder
    # holds every delivery, so the transport must park without losing the
    # pending frame and pick it back up once the app frees blocks.
    with tcp_sides(
        ECHO_SCHEMA,
        {"total": 20, "window": 20, "one_way": True,
         "build": lambda cid: {"key": f"k{cid}", "blob": bytes([cid]) * 1024, "seq": cid}},
        {"reply": None, "hold": lambda cid: 10 ** 9},
        server_heaps=make_heaps(region=2048, cap=8192),
    ) as (client, server):
        run_until(lambda: server.transport._rx_parked is not None, client, server)
        assert server.transport.needs_busy_poll()
        delivered = server.counters.unmarshal_count
        assert 0 < delivered < 20
        while len(server.head.seen) < 20:
            server.head.drain_held()
            step(client, server)
        server.head.drain_held()
        drain(client, server)
        assert not server.transport.needs_busy_poll()
        assert server.counters.unmarshal_count == 20
        assert client.head.tx_done == 20
        no_leaks(("client", client.heaps), ("server", server.heaps))


def test_tcp_eof_raises_transport_closed():
    with tcp_sides(
        ECHO_SCHEMA,
        {"total": 3, "window": 3, "build": lambda cid: {"key": "k", "blob": b"x", "seq": cid}},
        {"reply": lambda cid, v: {"key": v["key"], "blob": v["blob"], "seq": v["seq"]}},
    ) as (client, server):
        run_until(client.head.done, client, server, settle=8)
        server.transport.sock.close()
        with pytest.raises(TransportClosed):
            deadline = time.monotonic() + 5
            while time.monotonic() < deadline:
                step(client)
                time.sleep(0.001)


def test_tcp_transport_swaps_mid_frame_without_corruption():
    # Upgrade-shaped swap while a frame is partially written: the new engine
    # restores from decomposed state and the byte stream continues exactly
    # where the old one stopped.
    blob = bytes(range(256)) * 4096

    with tcp_sides(
        ECHO_SCHEMA,
        {"total": 1, "window": 1, "read_responses": True,
         "build": lambda cid: {"key": "swap", "blob": blob, "seq": cid}},
        {"reply": lambda cid, v: {"key": v["key"], "blob": v["blob"], "seq": v["seq"]}},
    ) as (client, server):
        client.transport.sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 8192)
        # run only the client until the frame is mid-flight
        run_until(lambda: client.transport._tx_desc is not None
                  and client.transport._sent_bytes() > 0, client)
        old = client.transport
        state = old.decompose()
        assert state["tx_sent_bytes"] > 0
        new = TcpTransport.restore(state, old.ctx)
        new.tx_in, new.tx_out = old.tx_in, old.tx_out
        new.rx_in, new.rx_out = old.rx_in, old.rx_out
        client.dp.engines[client.dp.index_of("transport.tcp")] = new
        client.transport = new

        run_until(client.head.done, client, server, settle=8)
        assert client.head.response_values[1]["blob"] == blob
        # the resumed marshal is the same logical step, not a second one
        assert client.counters.marshal_count == 1
        assert client.counters.tx_frames == 1
        no_leaks(("client", client.heaps), ("server", server.heaps))


# --------------------------------------------------------------------------
# simulated device


def test_sim_echo_round_trips():
    sent = {}

    def build(cid):
        v = {"key": f"k{cid}", "blob": bytes([cid % 251]) * (cid % 300), "seq": cid}
        sent[cid] = v
        return v

    def reply(cid, v):
        return {"key": v["key"], "blob": v["blob"], "seq": -v["seq"]}

    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": 300, "window": 16, "build": build, "read_responses": True},
        {"reply": reply},
    )
    run_until(client.head.done, client, server, settle=8)
    assert len(client.head.responses) == 300
    assert set(client.head.responses.values()) == {Status.OK}
    for cid, v in client.head.response_values.items():
        assert v["blob"] == sent[cid]["blob"] and v["seq"] == -cid
    assert client.counters.marshal_count == 300 == client.counters.unmarshal_count
    assert server.counters.marshal_count == 300 == server.counters.unmarshal_count
    assert client.counters.marshal_bytes == server.counters.unmarshal_bytes
    no_leaks(("client", client.heaps), ("server", server.heaps))


def test_sim_v1_submits_one_op_per_element():
    n = 25
    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": n, "window": n, "one_way": True,
         "build": lambda cid: {"key": f"k{cid}", "blob": b"p" * 64, "seq": cid}},
        {"reply": None},
        client_version=1, server_version=1,
    )
    run_until(lambda: client.head.done() and len(server.head.seen) == n,
              client, server, settle=4)
    assert client.transport.endpoint.ops_sent == ECHO_BUFS * n
    assert client.counters.transport_ops == ECHO_BUFS * n
    assert server.counters.transport_ops == 0
    no_leaks(("client", client.heaps), ("server", server.heaps))


def test_sim_v2_fuses_each_small_frame_into_one_op():
    n = 25
    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": n, "window": n, "one_way": True,
         "build": lambda cid: {"key": f"k{cid}", "blob": b"p" * 64, "seq": cid}},
        {"reply": None},
        client_version=2, server_version=2,
    )
    run_until(lambda: client.head.done() and len(server.head.seen) == n,
              client, server, settle=4)
    assert client.transport.endpoint.ops_sent == n
    assert client.counters.transport_ops == n
    # every buffer of every frame went through a staging copy
    assert client.counters.fuse_copy_bytes == client.counters.marshal_bytes + ECHO_HDR * n
    no_leaks(("client", client.heaps), ("server", server.heaps))


def test_sim_v2_bound_sized_elements_stay_zero_copy():
    # Large payloads must ride unfused: only header, root, and the short key
    # are staged, the 20000-byte blob is handed to the device as-is.
    n = 10
    blob = b"z" * 20000
    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": n, "window": n, "one_way": True,
         "build": lambda cid: {"key": "k", "blob": blob, "seq": cid}},
        {"reply": None},
        client_version=2, server_version=2,
    )
    run_until(lambda: client.head.done() and len(server.head.seen) == n,
              client, server, settle=4)
    assert client.transport.endpoint.ops_sent == n
    assert client.counters.fuse_copy_bytes == n * (ECHO_HDR + ECHO_ROOT + 1)
    assert client.counters.marshal_bytes == n * (ECHO_ROOT + 1 + len(blob))
    no_leaks(("client", client.heaps), ("server", server.heaps))


def test_sim_v2_packs_ops_by_element_limit():
    n = 12
    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": n, "window": n, "one_way": True,
         "build": lambda cid: {"key": f"k{cid}", "blob": b"p" * 64, "seq": cid}},
        {"reply": None},
        client_version=2, server_version=2,
        transport_cfg={"fuse": False, "element_limit": 3},
    )
    run_until(lambda: client.head.done() and len(server.head.seen) == n,
              client, server, settle=4)
    # 4 buffers per frame, 3 elements per op
    assert client.transport.endpoint.ops_sent == 2 * n
    assert client.counters.fuse_copy_bytes == 0
    no_leaks(("client", client.heaps), ("server", server.heaps))


def test_sim_device_queue_cap_backpressures_tx():
    # An op that never clears: the transport must stop consuming frames once
    # the device queue is full instead of growing it without bound.
    client, _server = sim_pair(
        ECHO_SCHEMA,
        {"total": 400, "window": 400, "one_way": True,
         "build": lambda cid: {"key": "k", "blob": b"x", "seq": cid}},
        {"reply": None},
        client_version=1, server_version=1,
        client_link=SimLink(op_cost=60.0),
    )
    for _ in range(20):
        step(client)
    assert client.head.issued == 400
    assert client.transport.endpoint.link.pending_ops() == 256
    assert len(client.transport.tx_in) == 400 - 256 // ECHO_BUFS


def test_sim_sender_memory_pinned_until_device_read():
    # The device reads element memory at delivery time.  Freeing before the
    # transmit completion would let poisoned bytes reach the peer.
    n = 20

    def verify(cid, v, desc):
        assert v["blob"] == bytes([cid]) * 512
        assert v["key"] == f"k{cid}"

    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": n, "window": n, "one_way": True,
         "build": lambda cid: {"key": f"k{cid}", "blob": bytes([cid]) * 512, "seq": cid}},
        {"reply": None, "verify": verify},
        client_link=SimLink(op_cost=0.002),
        client_heaps=make_heaps(send_cls=PoisonHeap),
    )
    run_until(lambda: len(server.head.seen) == n and client.head.done(),
              client, server, settle=4)
    no_leaks(("client", client.heaps), ("server", server.heaps))


def test_sim_rx_parks_on_heap_exhaustion_without_leaking():
    # Receive-side exhaustion must park the frame and leave the heap holding
    # exactly the blocks of delivered requests: a failed placement attempt
    # contributes nothing.
    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": 20, "window": 20, "one_way": True,
         "build": lambda cid: {"key": f"k{cid}", "blob": bytes([cid]) * 1024, "seq": cid}},
        {"reply": None, "hold": lambda cid: 10 ** 9},
        server_heaps=make_heaps(region=2048, cap=8192),
    )
    run_until(lambda: server.transport._rx_parked is not None, client, server)
    assert server.transport.needs_busy_poll()
    delivered = server.counters.unmarshal_count
    assert 0 < delivered < 20
    recv = server.heaps.heap(HEAP_RECV)
    # three blocks per delivered request (root, key, blob), nothing more
    assert recv.live_blocks() == 3 * delivered
    recv.assert_consistency()

    while len(server.head.seen) < 20:
        server.head.drain_held()
        step(client, server)
    server.head.drain_held()
    drain(client, server)
    assert server.counters.unmarshal_count == 20
    assert client.head.tx_done == 20
    no_leaks(("client", client.heaps), ("server", server.heaps))


def test_sim_link_op_cost_paces_delivery():
    n = 10
    op_cost = 0.005
    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": n, "window": n, "one_way": True,
         "build": lambda cid: {"key": "k", "blob": b"x", "seq": cid}},
        {"reply": None},
        client_link=SimLink(op_cost=op_cost),
    )
    t0 = time.monotonic()
    run_until(lambda: len(server.head.seen) == n, client, server)
    elapsed = time.monotonic() - t0
    # ops clear strictly in sequence, one op_cost apart
    assert elapsed >= n * op_cost - 0.001


def test_sim_link_rate_paces_delivery():
    blob = b"r" * 150_000
    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": 1, "window": 1, "one_way": True,
         "build": lambda cid: {"key": "k", "blob": blob, "seq": cid}},
        {"reply": None},
        client_link=SimLink(rate=2_000_000),
    )
    t0 = time.monotonic()
    run_until(lambda: len(server.head.seen) == 1, client, server)
    elapsed = time.monotonic() - t0
    assert elapsed >= len(blob) / 2_000_000 - 0.001


def test_sim_link_fifo_accounting():
    link = SimLink()
    inbox = deque()
    link.submit(inbox, [b"ab", b"cd"])
    link.submit(inbox, [b"efg"])
    assert link.pending_ops() == 2
    assert link.depth_bytes() == 7
    assert link.pump() == 2
    assert list(inbox) == [[b"ab", b"cd"], [b"efg"]]
    assert link.delivered_ops == 2
    assert link.delivered_bytes == 7
    assert link.depth_bytes() == 0


def test_sim_transport_closed_when_peer_closes():
    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": 3, "window": 3,
         "build": lambda cid: {"key": "k", "blob": b"x", "seq": cid}},
        {"reply": lambda cid, v: {"key": v["key"], "blob": v["blob"], "seq": v["seq"]}},
    )
    run_until(client.head.done, client, server, settle=8)
    server.transport.endpoint.close()
    with pytest.raises(TransportClosed):
        for _ in range(10):
            step(client)


def test_sim_send_to_closed_peer_raises():
    client, server = sim_pair(
        ECHO_SCHEMA,
        {"total": 1, "window": 1,
         "build": lambda cid: {"key": "k", "blob": b"x", "seq": cid}},
        {"reply": None},
    )
    server.transport.endpoint.close()
    with pytest.raises(TransportClosed):
        for _ in range(10):
            step(client)


def test_sim_network_listen_and_dial():
    net = SimNetwork()
    accepted = []
    net.listen("svc.a", accepted.append)
    client_link = SimLink("client")
    ep = net.dial("svc.a", client_link)
    assert len(accepted) == 1
    srv = accepted[0]
    assert ep.peer is srv and srv.peer is ep
    assert ep.ingress_link is srv.link
    assert srv.ingress_link is client_link

    ep.send_op([b"ping"])
    ep.link.pump()
    assert list(srv.inbox) == [[b"ping"]]
    srv.send_op([b"pong"])
    srv.link.pump()
    assert list(ep.inbox) == [[b"pong"]]

    with pytest.raises(MrpcError):
        net.listen("svc.a", accepted.append)
    with pytest.raises(MrpcError):
        net.dial("nowhere", SimLink())
    net.unlisten("svc.a")
    with pytest.raises(MrpcError):
        net.dial("svc.a", SimLink())


def test_sim_network_shared_links_dedupe_by_name():
    net = SimNetwork()
    lk = net.link("rack0", rate=5.0)
    assert net.link("rack0") is lk
    assert lk.rate == 5.0
    assert net.find_link("rack0") is lk
    assert net.find_link("rack1") is None
