"""Shared-memory IPC: regions, heaps, control rings, wakeups.

Apps and the service exchange RPC payloads through named shared-memory
regions and fixed-slot SPSC control rings.  Everything here is built on
plain files under /dev/shm mapped with mmap; no cross-process locks are
used anywhere.

Design notes
------------

Regions.  A region is one file named ``mrpc.<instance>.<app>.<rid>``,
created mode 0600, with a 64-byte header holding a magic, a capacity, and a
16-byte random access token.  Attaching requires presenting the token, which
travels only over the app's private session socket; a process that merely
guesses region names cannot attach.  The payload area follows the header.

Heaps.  A heap is a slab allocator over one or more regions.  Size classes
are powers of two from 16 bytes to 64 KiB; larger blocks round up to 4 KiB
multiples and recycle through exact-size lists.  When a heap runs out it
grows by adding a region of twice the previous capacity until a configured
cap, after which allocation reports exhaustion and the caller backpressures.
Block addresses are virtual offsets that encode heap id, region index, and
local offset, so offsets remain stable across growth and offset 0 is never
a valid block.  Only the owning side allocates and frees; the peer attaches
the same regions read-mostly and validates plain bounds before touching
memory, so a corrupt or hostile peer cannot direct it outside the mapping.

Send-heap blocks move live -> sent-pending at RPC submission and return to
the free lists only when the service reports transmit completion, which is
what makes zero-copy sends safe: bytes stay put until the wire is done with
them.  Receive-heap blocks stay live from unmarshal until the app
acknowledges consumption.

Rings.  A control ring is a single-producer single-consumer queue of
256-byte slots living inside one region, with head and tail counters on
separate cache lines.  Records that need more than eight block references
spill the overflow into a FIFO byte arena in the same region; the record
carries the arena position.  Pushing into an empty ring reports the
transition so the producer can raise the peer's doorbell; consumers in
adaptive mode park on that eventfd, busy consumers just poll.  Slot bytes
are fully written before the tail counter is advanced; on CPython the GIL
plus the total store order of x86-64 make that store the publish fence.
"""

from __future__ import annotations

import mmap
import os
import secrets
import struct
import threading

from .errors import (
    AccessDenied,
    BadBlock,
    HeapError,
    HeapExhausted,
    RegionError,
    WireError,
)
from .wire import (
    HEAP_PRIVATE,
    HEAP_RECV,
    HEAP_SEND,
    BlockRef,
    RpcDescriptor,
    make_offset,
    offset_heap,
    offset_local,
    offset_region,
)

DEFAULT_INSTANCE = os.environ.get("MRPC_INSTANCE", "default")

REGION_HEADER = 64
_REGION_MAGIC = b"MRPCSHM1"
_REGION_HDR = struct.Struct("<8sHBxIQ")  # magic, version, kind, capacity @16
REGION_KIND_HEAP = 1
REGION_KIND_RING = 2

TOKEN_LEN = 16
_TOKEN_OFF = 24

# heap sizing
MIN_CLASS = 16
MAX_CLASS = 65536
LARGE_QUANTUM = 4096
DEFAULT_HEAP_REGION = 1 << 20
DEFAULT_HEAP_CAP = 64 << 20

# block states
ST_LIVE = 1
ST_SENT = 2


def shm_dir() -> str:
    d = os.environ.get("MRPC_SHM_DIR", "/dev/shm")
    return d if os.path.isdir(d) else "/tmp"


def region_name(instance: str, app: str, rid: str) -> str:
    return f"mrpc.{instance}.{app}.{rid}"


def region_path(instance: str, app: str, rid: str) -> str:
    return os.path.join(shm_dir(), region_name(instance, app, rid))


class Region:
    """One mmapped shared file with a token-checked header."""

    def __init__(self, path, mm, fd, capacity, token, owner):
        self.path = path
        self._mm = mm
        self._fd = fd
        self.capacity = capacity
        self.token = token
        self.owner = owner
        self.payload = memoryview(mm)[REGION_HEADER : REGION_HEADER + capacity]

    @classmethod
    def create(cls, path: str, capacity: int, kind: int, token: bytes | None = None) -> "Region":
        token = token or secrets.token_bytes(TOKEN_LEN)
        size = REGION_HEADER + capacity
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_RDWR, 0o600)
        try:
            os.ftruncate(fd, size)
            mm = mmap.mmap(fd, size)
        except BaseException:
            os.close(fd)
            os.unlink(path)
            raise
        _REGION_HDR.pack_into(mm, 0, _REGION_MAGIC, 1, kind, 0, capacity)
        mm[_TOKEN_OFF : _TOKEN_OFF + TOKEN_LEN] = token
        return cls(path, mm, fd, capacity, token, owner=True)

    @classmethod
    def attach(cls, path: str, token: bytes) -> "Region":
        try:
            fd = os.open(path, os.O_RDWR)
        except FileNotFoundError:
            raise RegionError(f"no such region {path}")
        size = os.fstat(fd).st_size
        mm = mmap.mmap(fd, size)
        magic, _ver, _kind, _pad, capacity = _REGION_HDR.unpack_from(mm, 0)
        if magic != _REGION_MAGIC:
            mm.close()
            os.close(fd)
            raise RegionError(f"{path} is not a region")
        if bytes(mm[_TOKEN_OFF : _TOKEN_OFF + TOKEN_LEN]) != token:
            mm.close()
            os.close(fd)
            raise AccessDenied(f"token mismatch for {path}")
        return cls(path, mm, fd, capacity, token, owner=False)

    def close(self) -> None:
        if self._mm is None:
            return
        mm, self._mm = self._mm, None
        try:
            self.payload.release()
        except BufferError:
            pass
        try:
            mm.close()
        except BufferError:
            pass  # exported views still alive; the map dies with them
        os.close(self._fd)
        if self.owner:
            try:
                os.unlink(self.path)
            except FileNotFoundError:
                pass


class MemBacking:
    """Region stand-in over a private bytearray (service-local heaps)."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.payload = memoryview(bytearray(capacity))
        self.token = b""
        self.path = "<private>"

    def close(self) -> None:
        pass


def _size_class(size: int) -> int:
    if size <= MIN_CLASS:
        return MIN_CLASS
    if size <= MAX_CLASS:
        return 1 << (size - 1).bit_length()
    return (size + LARGE_QUANTUM - 1) & ~(LARGE_QUANTUM - 1)


class SlabHeap:
    """Owning side of one heap: allocator, block table, state machine.

    ``region_factory(index, capacity)`` returns a Region or MemBacking for a
    new region; ``on_grow(index, backing)`` lets the owner announce fresh
    regions to the peer.
    """

    def __init__(
        self,
        heap_id: int,
        region_factory,
        initial_capacity: int = DEFAULT_HEAP_REGION,
        max_total: int = DEFAULT_HEAP_CAP,
        on_grow=None,
    ):
        self.heap_id = heap_id
        self._factory = region_factory
        self._on_grow = on_grow
        self.max_total = max_total
        self._lock = threading.Lock()
        self.regions: list = []
        self._free: dict[int, list[int]] = {}
        self._table: dict[int, tuple[int, int, int]] = {}  # off -> (store, len, state)
        self._bump = 16  # burn the first 16 bytes so offset 0 stays null
        self.used_bytes = 0
        self.hwm_bytes = 0
        self.alloc_count = 0
        self.free_count = 0
        self.grow_count = 0
        self._add_region(initial_capacity)

    def _add_region(self, capacity: int) -> None:
        total = sum(r.capacity for r in self.regions)
        if total + capacity > self.max_total:
            capacity = self.max_total - total
        if capacity <= 0:
            raise HeapExhausted(f"heap {self.heap_id} at cap {self.max_total}")
        idx = len(self.regions)
        backing = self._factory(idx, capacity)
        self.regions.append(backing)
        prev_bump = self._bump
        if idx > 0:
            self._bump = 0
        self.grow_count += 1
        if self._on_grow is not None and idx > 0:
            try:
                self._on_grow(idx, backing)
            except BaseException:
                # peer never learned of the region; it must not be used
                self.regions.pop()
                self._bump = prev_bump
                backing.close()
                raise

    def alloc(self, size: int) -> BlockRef:
        if size <= 0:
            raise HeapError("zero-size allocation")
        store = _size_class(size)
        with self._lock:
            lst = self._free.get(store)
            if lst:
                off = lst.pop()
            else:
                region = len(self.regions) - 1
                cap = self.regions[region].capacity
                if self._bump + store > cap:
                    last = self.regions[region].capacity
                    self._add_region(max(last * 2, store + 16))
                    region = len(self.regions) - 1
                off = make_offset(self.heap_id, region, self._bump)
                self._bump += store
            self._table[off] = (store, size, ST_LIVE)
            self.used_bytes += store
            if self.used_bytes > self.hwm_bytes:
                self.hwm_bytes = self.used_bytes
            self.alloc_count += 1
        return BlockRef(self.heap_id, off, size)

    def _entry(self, ref: BlockRef):
        ent = self._table.get(ref.offset)
        if ent is None:
            raise BadBlock(f"no block at {ref.offset:#x}")
        if ref.length > ent[1]:
            raise BadBlock(f"length {ref.length} exceeds block {ent[1]}")
        return ent

    def view(self, ref: BlockRef):
        with self._lock:
            self._entry(ref)
        region = self.regions[offset_region(ref.offset)]
        local = offset_local(ref.offset)
        return region.payload[local : local + ref.length]

    def mark_sent(self, ref: BlockRef) -> None:
        with self._lock:
            store, length, state = self._entry(ref)
            if state != ST_LIVE:
                raise BadBlock(f"block {ref.offset:#x} not live")
            self._table[ref.offset] = (store, length, ST_SENT)

    def complete_sent(self, ref: BlockRef) -> None:
        with self._lock:
            store, _length, state = self._entry(ref)
            if state != ST_SENT:
                raise BadBlock(f"block {ref.offset:#x} not sent-pending")
            del self._table[ref.offset]
            self._free.setdefault(store, []).append(ref.offset)
            self.used_bytes -= store
            self.free_count += 1

    def free(self, ref: BlockRef) -> None:
        with self._lock:
            store, _length, state = self._entry(ref)
            if state != ST_LIVE:
                raise BadBlock(f"block {ref.offset:#x} not live")
            del self._table[ref.offset]
            self._free.setdefault(store, []).append(ref.offset)
            self.used_bytes -= store
            self.free_count += 1

    def live_blocks(self) -> int:
        with self._lock:
            return len(self._table)

    def state_of(self, ref: BlockRef) -> int | None:
        with self._lock:
            ent = self._table.get(ref.offset)
            return ent[2] if ent else None

    def assert_consistency(self) -> None:
        """Invariant check used by tests: no overlap, sane accounting."""
        with self._lock:
            spans = []
            for off, (store, length, _state) in self._table.items():
                assert length <= store
                spans.append((off, store))
            for store, offs in self._free.items():
                for off in offs:
                    assert off not in self._table
                    spans.append((off, store))
            per_region: dict[int, list] = {}
            for off, store in spans:
                per_region.setdefault(offset_region(off), []).append((offset_local(off), store))
            for region, items in per_region.items():
                items.sort()
                end = 0
                for local, store in items:
                    assert local >= end, f"overlap in region {region} at {local:#x}"
                    end = local + store
                assert end <= self.regions[region].capacity
            assert self.used_bytes == sum(s for _o, (s, _l, _st) in self._table.items())


class RegionMap:
    """Non-owning side of a heap: resolves views with bounds checks only."""

    def __init__(self, heap_id: int):
        self.heap_id = heap_id
        self.regions: dict[int, Region] = {}

    def add(self, index: int, region) -> None:
        self.regions[index] = region

    def view(self, ref: BlockRef):
        region = self.regions.get(offset_region(ref.offset))
        if region is None:
            raise BadBlock(f"unknown region {offset_region(ref.offset)} in heap {self.heap_id}")
        local = offset_local(ref.offset)
        if ref.length <= 0 or local + ref.length > region.capacity:
            raise BadBlock(f"ref {ref.offset:#x}+{ref.length} outside region")
        return region.payload[local : local + ref.length]

    def close(self) -> None:
        for r in self.regions.values():
            r.close()
        self.regions.clear()


class ConnHeaps:
    """Per-connection heap accessor dispatching on the heap id bits.

    Each of send/recv/private slots may be a SlabHeap (owning side), a
    RegionMap (peer side), or None.  Allocation and free on a non-owned
    heap is a programming error and raises.
    """

    def __init__(self, send=None, recv=None, private=None):
        self._h = {HEAP_SEND: send, HEAP_RECV: recv, HEAP_PRIVATE: private}

    def heap(self, heap_id: int):
        h = self._h.get(heap_id)
        if h is None:
            raise HeapError(f"heap {heap_id} not mapped")
        return h

    def alloc(self, heap_id: int, size: int) -> BlockRef:
        h = self.heap(heap_id)
        if not isinstance(h, SlabHeap):
            raise HeapError(f"heap {heap_id} is not owned on this side")
        return h.alloc(size)

    def view(self, ref: BlockRef):
        return self.heap(ref.heap).view(ref)

    def free(self, ref: BlockRef) -> None:
        h = self.heap(ref.heap)
        if not isinstance(h, SlabHeap):
            raise HeapError(f"heap {ref.heap} is not owned on this side")
        h.free(ref)


# --------------------------------------------------------------------------
# Control rings

SLOT_SIZE = 256
DEFAULT_SLOTS = 1024
DEFAULT_SPILL = 64 << 10
INLINE_REFS = 8

_RING_HDR = struct.Struct("<HHIQ")  # slot_size, inline pad, nslots, spill_cap
_RING_META_OFF = 0  # within payload
_HEAD_OFF = 64
_TAIL_OFF = 128
_SPILL_HEAD_OFF = 192
_SPILL_TAIL_OFF = 256
_SLOTS_OFF = 320

_U64 = struct.Struct("<Q")

# record kinds
RK_RPC = 1
RK_COMPLETE = 2
RK_ACK = 3
RK_NEW_REGION = 4
RK_BYE = 5

RFLAG_SPILLED = 0x80  # ring-local bit in the descriptor flags byte

# Descriptor record layout (owner: this module):
#   0  kind u8, direction u8, status u8, flags u8
#   4  method_index u32
#   8  spill_off u64      (valid when flags & RFLAG_SPILLED)
#   16 spill_len u32
#   20 block_count u32
#   24 conn_id u64
#   32 call_id u64
#   40 inline refs, block_count x 16 bytes, when not spilled
_RPC_FIX = struct.Struct("<BBBBIQIIQQ")
_REF = struct.Struct("<BxxxIQ")  # heap u8, length u32, offset u64
_IDS_HDR = struct.Struct("<BxxxIQ")  # kind, count, conn_id
_NEWREG = struct.Struct("<BBxxIQ16s")

MAX_IDS = (SLOT_SIZE - 16) // 8


def ring_region_size(nslots: int = DEFAULT_SLOTS, spill: int = DEFAULT_SPILL) -> int:
    return _SLOTS_OFF + nslots * SLOT_SIZE + spill


class ControlRing:
    """SPSC ring of 256-byte records with a FIFO spill arena.

    Exactly one producer thread and one consumer thread; which side is
    which is fixed when the ring is created.  ``try_push`` returns
    ``PUSH_FULL`` for backpressure, ``PUSH_OK`` or ``PUSH_WAS_EMPTY`` on
    success; the latter tells the producer to ring the peer's doorbell.
    """

    PUSH_FULL = -1
    PUSH_OK = 0
    PUSH_WAS_EMPTY = 1

    def __init__(self, region, producer: bool, nslots: int = DEFAULT_SLOTS, spill: int = DEFAULT_SPILL, init: bool = False):
        self.region = region
        self.buf = region.payload
        self.producer = producer
        if init:
            _RING_HDR.pack_into(self.buf, _RING_META_OFF, SLOT_SIZE, 0, nslots, spill)
            for off in (_HEAD_OFF, _TAIL_OFF, _SPILL_HEAD_OFF, _SPILL_TAIL_OFF):
                _U64.pack_into(self.buf, off, 0)
        slot_size, _pad, self.nslots, self.spill_cap = _RING_HDR.unpack_from(self.buf, _RING_META_OFF)
        if slot_size != SLOT_SIZE:
            raise WireError(f"ring slot size {slot_size}")
        self._spill_base = _SLOTS_OFF + self.nslots * SLOT_SIZE

    # counter accessors; each u64 has a single writer
    def _get(self, off: int) -> int:
        return _U64.unpack_from(self.buf, off)[0]

    def _set(self, off: int, val: int) -> None:
        _U64.pack_into(self.buf, off, val)

    def depth(self) -> int:
        return self._get(_TAIL_OFF) - self._get(_HEAD_OFF)

    def try_push(self, record: bytes, spill: bytes = b"") -> int:
        assert self.producer
        assert len(record) <= SLOT_SIZE
        head = self._get(_HEAD_OFF)
        tail = self._get(_TAIL_OFF)
        if tail - head >= self.nslots:
            return self.PUSH_FULL
        if spill:
            pos = self._spill_reserve(len(spill))
            if pos is None:
                return self.PUSH_FULL
            record = bytearray(record)
            record[3] |= RFLAG_SPILLED
            _U64.pack_into(record, 8, pos)
            struct.pack_into("<I", record, 16, len(spill))
            start = self._spill_base + (pos % self.spill_cap)
            self.buf[start : start + len(spill)] = spill
            self._set(_SPILL_TAIL_OFF, pos + len(spill))
        slot = _SLOTS_OFF + (tail % self.nslots) * SLOT_SIZE
        self.buf[slot : slot + len(record)] = record
        if len(record) < SLOT_SIZE:
            self.buf[slot + len(record) : slot + SLOT_SIZE] = bytes(SLOT_SIZE - len(record))
        self._set(_TAIL_OFF, tail + 1)
        return self.PUSH_WAS_EMPTY if tail == head else self.PUSH_OK

    def _spill_reserve(self, size: int) -> int | None:
        if size > self.spill_cap:
            return None
        head = self._get(_SPILL_HEAD_OFF)
        tail = self._get(_SPILL_TAIL_OFF)
        pos = tail
        # keep each payload contiguous: skip the wrap remainder if needed
        rem = self.spill_cap - (pos % self.spill_cap)
        if rem < size:
            pos += rem
        if pos + size - head > self.spill_cap:
            return None
        return pos

    def try_pop(self):
        """Returns (record bytes, spill bytes or b"") or None when empty."""
        assert not self.producer
        head = self._get(_HEAD_OFF)
        tail = self._get(_TAIL_OFF)
        if head == tail:
            return None
        slot = _SLOTS_OFF + (head % self.nslots) * SLOT_SIZE
        record = bytes(self.buf[slot : slot + SLOT_SIZE])
        spill = b""
        if record[0] == RK_RPC and record[3] & RFLAG_SPILLED:
            pos = _U64.unpack_from(record, 8)[0]
            (slen,) = struct.unpack_from("<I", record, 16)
            start = self._spill_base + (pos % self.spill_cap)
            spill = bytes(self.buf[start : start + slen])
            self._set(_SPILL_HEAD_OFF, pos + slen)
        self._set(_HEAD_OFF, head + 1)
        return record, spill


# record codecs


def pack_rpc_record(desc: RpcDescriptor) -> tuple[bytes, bytes]:
    """Returns (record, spill).  The ring fills the spill fields in."""
    refs = desc.blocks
    head = bytearray(
        _RPC_FIX.pack(
            RK_RPC,
            desc.direction,
            desc.status,
            desc.flags & ~RFLAG_SPILLED,
            desc.method_index,
            0,
            0,
            len(refs),
            desc.conn_id,
            desc.call_id,
        )
    )
    packed = b"".join(_REF.pack(r.heap, r.length, r.offset) for r in refs)
    if len(refs) <= INLINE_REFS:
        return bytes(head) + packed, b""
    return bytes(head), packed


def parse_record(record: bytes, spill: bytes):
    """Decode one ring record into a tagged tuple."""
    kind = record[0]
    if kind == RK_RPC:
        (_k, direction, status, flags, method, _soff, _slen, nblocks, conn_id, call_id) = _RPC_FIX.unpack_from(record, 0)
        spilled = bool(flags & RFLAG_SPILLED)
        flags &= ~RFLAG_SPILLED
        if spilled:
            src = spill
        else:
            src = record[40 : 40 + 16 * nblocks]
        if len(src) < 16 * nblocks:
            raise WireError(f"descriptor record truncated: {nblocks} refs")
        refs = []
        for i in range(nblocks):
            heap, length, offset = _REF.unpack_from(src, 16 * i)
            if offset_heap(offset) != heap:
                raise WireError("block ref heap bits disagree")
            refs.append(BlockRef(heap, offset, length))
        return (
            "rpc",
            RpcDescriptor(
                conn_id=conn_id,
                call_id=call_id,
                method_index=method,
                direction=direction,
                status=status,
                flags=flags,
                blocks=refs,
            ),
        )
    if kind in (RK_COMPLETE, RK_ACK):
        _k, count, conn_id = _IDS_HDR.unpack_from(record, 0)
        if count > MAX_IDS:
            raise WireError(f"id record count {count}")
        ids = list(struct.unpack_from(f"<{count}Q", record, 16))
        return ("complete" if kind == RK_COMPLETE else "ack", conn_id, ids)
    if kind == RK_NEW_REGION:
        _k, heap, index, capacity, token = _NEWREG.unpack_from(record, 0)
        return ("new_region", heap, index, capacity, token)
    if kind == RK_BYE:
        return ("bye",)
    raise WireError(f"unknown record kind {kind}")


def pack_ids_record(kind: int, conn_id: int, ids) -> bytes:
    assert len(ids) <= MAX_IDS
    return _IDS_HDR.pack(kind, len(ids), conn_id) + struct.pack(f"<{len(ids)}Q", *ids)


def pack_new_region_record(heap: int, index: int, capacity: int, token: bytes) -> bytes:
    return _NEWREG.pack(RK_NEW_REGION, heap, index, capacity, token)


def pack_bye_record() -> bytes:
    return bytes([RK_BYE])


# --------------------------------------------------------------------------
# Wakeups


class Wakeup:
    """Edge-style doorbell over an eventfd (pipe fallback).

    ``ring`` is async-signal cheap; ``drain`` resets; ``fd`` polls readable
    while signaled.
    """

    def __init__(self, fd=None):
        self._closed = False
        if fd is not None:
            self._rfd = self._wfd = fd
            self._eventfd = True
        elif hasattr(os, "eventfd"):
            self._rfd = self._wfd = os.eventfd(0, os.EFD_NONBLOCK)
            self._eventfd = True
        else:
            r, w = os.pipe()
            os.set_blocking(r, False)
            os.set_blocking(w, False)
            self._rfd, self._wfd = r, w
            self._eventfd = False

    @property
    def fd(self) -> int:
        return self._rfd

    @property
    def write_fd(self) -> int:
        return self._wfd

    def ring(self) -> None:
        if self._closed:
            return
        try:
            if self._eventfd:
                os.eventfd_write(self._wfd, 1)
            else:
                os.write(self._wfd, b"\x01")
        except BlockingIOError:
            pass

    def drain(self) -> None:
        if self._closed:
            return
        try:
            if self._eventfd:
                os.eventfd_read(self._rfd)
            else:
                while os.read(self._rfd, 4096):
                    pass
        except BlockingIOError:
            pass

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        os.close(self._rfd)
        if self._wfd != self._rfd:
            os.close(self._wfd)
