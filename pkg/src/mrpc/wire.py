"""Wire format, RPC descriptors, and the value layer.

Values live in heaps as trees of blocks.  A descriptor names a value by its
block list; marshalling walks that list and emits a frame header plus the
block bytes as a scatter-gather sequence, copying nothing.  Unmarshalling
performs the single receive-side copy: block bytes land in the destination
heap and pointer slots are rewritten to destination offsets.

Frame layout (all integers little-endian):

    offset  size  field
    0       4     magic "mRPC"
    4       2     version (currently 1)
    6       1     frame kind (0 rpc, 1 hello, 2 hello-ok, 3 hello-reject)
    7       1     direction (0 request, 1 response)
    8       1     status
    9       1     flags
    10      2     reserved, zero
    12      4     method index
    16      8     connection id
    24      8     call id
    32      4     block count
    36      4*n   per-block byte lengths
    36+4n   ...   payload: block bytes, concatenated in walk order

Pointer slots inside payload blocks carry sender-local virtual offsets; the
receiver rewrites every pointer during unmarshal, so those values are opaque
padding on the wire.

Virtual block offsets pack the owning heap into the address itself:
bits 63-62 heap id, bits 61-40 region index, bits 39-0 local offset.
Offset 0 is never allocated and doubles as the null pointer.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import BadMagic, TruncatedFrame, FrameTooLarge, WireError
from . import schema as _schema
from .schema import (
    K_BOOL,
    K_I32,
    K_I64,
    K_U32,
    K_U64,
    K_F64,
    K_STRING,
    K_BYTES,
    K_MESSAGE,
    _SCALAR_FMT,
    MarshalPlan,
    MessageLayout,
)

MAGIC = b"mRPC"
WIRE_VERSION = 1

# frame kinds
FRAME_RPC = 0
FRAME_HELLO = 1
FRAME_HELLO_OK = 2
FRAME_HELLO_REJECT = 3

# heap ids (bits 63-62 of a virtual offset)
HEAP_SEND = 0
HEAP_RECV = 1
HEAP_PRIVATE = 2

HEAP_SHIFT = 62
REGION_SHIFT = 40
REGION_MASK = (1 << 22) - 1
LOCAL_MASK = (1 << 40) - 1

MAX_BLOCKS = 65536
MAX_FRAME = 1 << 28  # 256 MiB sanity bound


def make_offset(heap: int, region: int, local: int) -> int:
    return (heap << HEAP_SHIFT) | (region << REGION_SHIFT) | local


def offset_heap(off: int) -> int:
    return off >> HEAP_SHIFT


def offset_region(off: int) -> int:
    return (off >> REGION_SHIFT) & REGION_MASK


def offset_local(off: int) -> int:
    return off & LOCAL_MASK


class Direction:
    REQUEST = 0
    RESPONSE = 1


class Status:
    OK = 0
    PERMISSION_DENIED = 1
    UNAVAILABLE = 2
    INTERNAL = 3
    CANCELLED = 4
    UNIMPLEMENTED = 5
    RESOURCE_EXHAUSTED = 6
    DECODE_ERROR = 7

    _NAMES = {
        0: "ok",
        1: "permission-denied",
        2: "unavailable",
        3: "internal",
        4: "cancelled",
        5: "unimplemented",
        6: "resource-exhausted",
        7: "decode-error",
    }

    @classmethod
    def name(cls, code: int) -> str:
        return cls._NAMES.get(code, f"status-{code}")


# descriptor flags
FLAG_STABILIZED = 0x01


@dataclass(frozen=True)
class BlockRef:
    """Reference to one heap block: virtual offset plus byte length.

    ``heap`` duplicates the top bits of ``offset`` for readability in
    records and logs; the two always agree.
    """

    heap: int
    offset: int
    length: int

    def __post_init__(self):
        if self.offset and offset_heap(self.offset) != self.heap:
            raise WireError(f"heap bits of offset {self.offset:#x} disagree with heap {self.heap}")


def ref_at(offset: int, length: int) -> BlockRef:
    return BlockRef(offset_heap(offset), offset, length)


@dataclass
class RpcDescriptor:
    """One RPC moving through a datapath.

    ``blocks`` lists the value's blocks in canonical walk order; the root
    block is always first.  An error response carries no blocks.
    """

    conn_id: int
    call_id: int
    method_index: int
    direction: int
    status: int = Status.OK
    flags: int = 0
    blocks: list = field(default_factory=list)

    def root(self) -> BlockRef:
        return self.blocks[0]


_HDR = struct.Struct("<4sHBBBBHIQQI")
HEADER_BASE = _HDR.size  # 36
_LEN = struct.Struct("<I")


def pack_header(kind: int, desc: RpcDescriptor, lengths) -> bytes:
    out = bytearray(
        _HDR.pack(
            MAGIC,
            WIRE_VERSION,
            kind,
            desc.direction,
            desc.status,
            desc.flags,
            0,
            desc.method_index,
            desc.conn_id,
            desc.call_id,
            len(lengths),
        )
    )
    for n in lengths:
        out += _LEN.pack(n)
    return bytes(out)


@dataclass
class FrameHeader:
    kind: int
    direction: int
    status: int
    flags: int
    method_index: int
    conn_id: int
    call_id: int
    lengths: tuple

    @property
    def payload_len(self) -> int:
        return sum(self.lengths)


def parse_header(buf) -> tuple[FrameHeader, int]:
    """Parse a frame header from ``buf``; returns (header, header_size).

    Raises TruncatedFrame when more bytes are needed.
    """
    if len(buf) < HEADER_BASE:
        raise TruncatedFrame("short header")
    magic, ver, kind, direction, status, flags, _res, midx, conn, call, nblocks = _HDR.unpack_from(
        buf, 0
    )
    if magic != MAGIC:
        raise BadMagic(f"bad frame magic {bytes(magic)!r}")
    if ver != WIRE_VERSION:
        raise WireError(f"unsupported wire version {ver}")
    if nblocks > MAX_BLOCKS:
        raise FrameTooLarge(f"block count {nblocks}")
    hsize = HEADER_BASE + 4 * nblocks
    if len(buf) < hsize:
        raise TruncatedFrame("short length table")
    lengths = struct.unpack_from(f"<{nblocks}I", buf, HEADER_BASE) if nblocks else ()
    total = sum(lengths)
    if total > MAX_FRAME:
        raise FrameTooLarge(f"payload {total} bytes")
    hdr = FrameHeader(kind, direction, status, flags, midx, conn, call, lengths)
    return hdr, hsize


class FrameAssembler:
    """Reassembles frames from an arbitrary chunking of the byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk) -> None:
        self._buf += chunk

    def __iter__(self):
        return self

    def __next__(self):
        try:
            hdr, hsize = parse_header(self._buf)
        except TruncatedFrame:
            raise StopIteration
        need = hsize + hdr.payload_len
        if len(self._buf) < need:
            raise StopIteration
        payload = bytes(self._buf[hsize:need])
        del self._buf[:need]
        return hdr, payload

    def pending_bytes(self) -> int:
        return len(self._buf)


# --------------------------------------------------------------------------
# Value layer
#
# The functions below interpret MessageLayout slot tables against a heap
# accessor.  The accessor contract (implemented by shmipc.ConnHeaps):
#
#   alloc(heap_id, size) -> BlockRef      new live block, 8-byte aligned
#   view(ref) -> memoryview               writable view of a live block
#   free(ref) -> None                     release a live block

_PTRLEN = struct.Struct("<QI4x")  # offset, byte length, pad
_PTR = struct.Struct("<Q")
_ARR = struct.Struct("<QI4x")  # array block offset, element count, pad


def _leaf_bytes(value, kind) -> bytes:
    if kind == K_STRING:
        return value.encode("utf-8") if isinstance(value, str) else bytes(value)
    return bytes(value)


def build_value(heaps, heap_id: int, plan: MarshalPlan, msg: str, obj) -> BlockRef:
    """Materialize a python dict as a block tree on ``heap_id``.

    Missing keys get default values (proto3-style: zero, empty, unset).
    Returns the root block reference.
    """
    layout = plan.layout(msg)
    root = heaps.alloc(heap_id, layout.size)
    buf = bytearray(layout.size)
    obj = obj or {}
    for slot in layout.slots:
        val = obj.get(slot.name)
        if slot.repeated:
            items = val or []
            if not items:
                continue
            if slot.kind in (K_STRING, K_BYTES):
                arr = heaps.alloc(heap_id, 16 * len(items))
                abuf = bytearray(16 * len(items))
                for i, item in enumerate(items):
                    data = _leaf_bytes(item, slot.kind)
                    if data:
                        leaf = heaps.alloc(heap_id, len(data))
                        heaps.view(leaf)[:] = data
                        _PTRLEN.pack_into(abuf, 16 * i, leaf.offset, len(data))
                heaps.view(arr)[:] = abuf
            elif slot.kind == K_MESSAGE:
                arr = heaps.alloc(heap_id, 8 * len(items))
                abuf = bytearray(8 * len(items))
                for i, item in enumerate(items):
                    child = build_value(heaps, heap_id, plan, slot.message, item)
                    _PTR.pack_into(abuf, 8 * i, child.offset)
                heaps.view(arr)[:] = abuf
            else:
                fmt = _SCALAR_FMT[slot.kind]
                arr = heaps.alloc(heap_id, fmt.size * len(items))
                abuf = bytearray(fmt.size * len(items))
                for i, item in enumerate(items):
                    fmt.pack_into(abuf, fmt.size * i, item)
                heaps.view(arr)[:] = abuf
            _ARR.pack_into(buf, slot.offset, arr.offset, len(items))
        elif slot.kind in (K_STRING, K_BYTES):
            data = _leaf_bytes(val, slot.kind) if val else b""
            if data:
                leaf = heaps.alloc(heap_id, len(data))
                heaps.view(leaf)[:] = data
                _PTRLEN.pack_into(buf, slot.offset, leaf.offset, len(data))
        elif slot.kind == K_MESSAGE:
            if val is not None:
                child = build_value(heaps, heap_id, plan, slot.message, val)
                _PTR.pack_into(buf, slot.offset, child.offset)
        else:
            fmt = _SCALAR_FMT[slot.kind]
            if slot.kind == K_F64:
                fmt.pack_into(buf, slot.offset, float(val) if val is not None else 0.0)
            else:
                fmt.pack_into(buf, slot.offset, int(val) if val is not None else 0)
    heaps.view(root)[:] = buf
    return root


def read_value(heaps, plan: MarshalPlan, msg: str, root: BlockRef):
    """Decode a block tree back into a python dict."""
    layout = plan.layout(msg)
    view = heaps.view(root)
    out = {}
    for slot in layout.slots:
        if slot.repeated:
            aoff, count = _ARR.unpack_from(view, slot.offset)[:2]
            items = []
            if count:
                aview = heaps.view(ref_at(aoff, _arr_len(slot, count)))
                for i in range(count):
                    if slot.kind in (K_STRING, K_BYTES):
                        loff, llen = _PTRLEN.unpack_from(aview, 16 * i)
                        data = bytes(heaps.view(ref_at(loff, llen))) if llen else b""
                        items.append(data.decode("utf-8") if slot.kind == K_STRING else data)
                    elif slot.kind == K_MESSAGE:
                        (coff,) = _PTR.unpack_from(aview, 8 * i)
                        child_size = plan.layout(slot.message).size
                        items.append(read_value(heaps, plan, slot.message, ref_at(coff, child_size)))
                    else:
                        fmt = _SCALAR_FMT[slot.kind]
                        items.append(fmt.unpack_from(aview, fmt.size * i)[0])
            out[slot.name] = items
        elif slot.kind in (K_STRING, K_BYTES):
            loff, llen = _PTRLEN.unpack_from(view, slot.offset)
            data = bytes(heaps.view(ref_at(loff, llen))) if llen else b""
            out[slot.name] = data.decode("utf-8") if slot.kind == K_STRING else data
        elif slot.kind == K_MESSAGE:
            (coff,) = _PTR.unpack_from(view, slot.offset)
            if coff:
                child_size = plan.layout(slot.message).size
                out[slot.name] = read_value(heaps, plan, slot.message, ref_at(coff, child_size))
            else:
                out[slot.name] = None
        else:
            fmt = _SCALAR_FMT[slot.kind]
            val = fmt.unpack_from(view, slot.offset)[0]
            out[slot.name] = bool(val) if slot.kind == K_BOOL else val
    return out


def _arr_len(slot, count: int) -> int:
    if slot.kind in (K_STRING, K_BYTES):
        return 16 * count
    if slot.kind == K_MESSAGE:
        return 8 * count
    return _SCALAR_FMT[slot.kind].size * count


def walk_blocks(heaps, plan: MarshalPlan, msg: str, root: BlockRef) -> list:
    """Canonical block order for a value: root first, then children depth
    first in field declaration order.  This order is the wire order and the
    order descriptors carry."""
    layout = plan.layout(msg)
    blocks = [root]
    view = heaps.view(root)
    for slot in layout.slots:
        if slot.repeated:
            aoff, count = _ARR.unpack_from(view, slot.offset)[:2]
            if not count:
                continue
            arr = ref_at(aoff, _arr_len(slot, count))
            blocks.append(arr)
            aview = heaps.view(arr)
            if slot.kind in (K_STRING, K_BYTES):
                for i in range(count):
                    loff, llen = _PTRLEN.unpack_from(aview, 16 * i)
                    if llen:
                        blocks.append(ref_at(loff, llen))
            elif slot.kind == K_MESSAGE:
                child_size = plan.layout(slot.message).size
                for i in range(count):
                    (coff,) = _PTR.unpack_from(aview, 8 * i)
                    blocks.extend(walk_blocks(heaps, plan, slot.message, ref_at(coff, child_size)))
        elif slot.kind in (K_STRING, K_BYTES):
            loff, llen = _PTRLEN.unpack_from(view, slot.offset)
            if llen:
                blocks.append(ref_at(loff, llen))
        elif slot.kind == K_MESSAGE:
            (coff,) = _PTR.unpack_from(view, slot.offset)
            if coff:
                blocks.extend(walk_blocks(heaps, plan, slot.message, ref_at(coff, plan.layout(slot.message).size)))
    return blocks


def read_field(heaps, plan: MarshalPlan, msg: str, root: BlockRef, path: str):
    """Read one field by dotted path, e.g. ``"key"`` or ``"req.key"``."""
    layout = plan.layout(msg)
    view = heaps.view(root)
    head, _, rest = path.partition(".")
    slot = layout.slot(head)
    if rest:
        if slot.kind != K_MESSAGE or slot.repeated:
            raise WireError(f"cannot traverse into field {head!r}")
        (coff,) = _PTR.unpack_from(view, slot.offset)
        if not coff:
            return None
        child = ref_at(coff, plan.layout(slot.message).size)
        return read_field(heaps, plan, slot.message, child, rest)
    if slot.repeated:
        raise WireError(f"cannot read repeated field {head!r} as a scalar")
    if slot.kind in (K_STRING, K_BYTES):
        loff, llen = _PTRLEN.unpack_from(view, slot.offset)
        data = bytes(heaps.view(ref_at(loff, llen))) if llen else b""
        return data.decode("utf-8") if slot.kind == K_STRING else data
    if slot.kind == K_MESSAGE:
        (coff,) = _PTR.unpack_from(view, slot.offset)
        return ref_at(coff, plan.layout(slot.message).size) if coff else None
    fmt = _SCALAR_FMT[slot.kind]
    val = fmt.unpack_from(view, slot.offset)[0]
    return bool(val) if slot.kind == K_BOOL else val


def stabilize_field(heaps, plan: MarshalPlan, msg: str, root: BlockRef, path: str,
                    dest_heap: int = HEAP_PRIVATE):
    """Copy the root block and the blocks along ``path`` to ``dest_heap``.

    This is the time-of-check snapshot: the policy inspects (and the wire
    later carries) the copies, so the sender rewriting the originals after
    the check changes nothing downstream.  Only the parental chain and the
    target leaf are copied; sibling fields keep their shared-heap blocks.

    Returns (new_root, bytes_copied).
    """
    copied = 0

    def copy_block(ref: BlockRef) -> BlockRef:
        nonlocal copied
        dup = heaps.alloc(dest_heap, ref.length)
        heaps.view(dup)[:] = heaps.view(ref)
        copied += ref.length
        return dup

    def descend(msg_name: str, ref: BlockRef, path_: str) -> BlockRef:
        nonlocal copied
        layout = plan.layout(msg_name)
        new_ref = copy_block(ref)
        view = heaps.view(new_ref)
        head, _, rest = path_.partition(".")
        slot = layout.slot(head)
        if slot.repeated:
            raise WireError("cannot stabilize a repeated field")
        if slot.kind == K_MESSAGE:
            (coff,) = _PTR.unpack_from(view, slot.offset)
            if coff:
                child = ref_at(coff, plan.layout(slot.message).size)
                if rest:
                    new_child = descend(slot.message, child, rest)
                else:
                    new_child, sub = _copy_subtree(heaps, plan, slot.message, child, dest_heap)
                    copied += sub
                _PTR.pack_into(view, slot.offset, new_child.offset)
        elif slot.kind in (K_STRING, K_BYTES):
            loff, llen = _PTRLEN.unpack_from(view, slot.offset)
            if llen:
                leaf = copy_block(ref_at(loff, llen))
                _PTRLEN.pack_into(view, slot.offset, leaf.offset, llen)
        # fixed-width scalars live in the root block, already copied
        return new_ref

    new_root = descend(msg, root, path)
    return new_root, copied


def _copy_subtree(heaps, plan, msg, root, dest_heap):
    copied = 0
    layout = plan.layout(msg)
    new_root = heaps.alloc(dest_heap, root.length)
    view = bytearray(heaps.view(root))
    copied += root.length
    for slot in layout.slots:
        if slot.repeated:
            aoff, count = _ARR.unpack_from(view, slot.offset)[:2]
            if not count:
                continue
            arr = ref_at(aoff, _arr_len(slot, count))
            new_arr = heaps.alloc(dest_heap, arr.length)
            abuf = bytearray(heaps.view(arr))
            copied += arr.length
            if slot.kind in (K_STRING, K_BYTES):
                for i in range(count):
                    loff, llen = _PTRLEN.unpack_from(abuf, 16 * i)
                    if llen:
                        leaf = heaps.alloc(dest_heap, llen)
                        heaps.view(leaf)[:] = heaps.view(ref_at(loff, llen))
                        copied += llen
                        _PTRLEN.pack_into(abuf, 16 * i, leaf.offset, llen)
            elif slot.kind == K_MESSAGE:
                child_size = plan.layout(slot.message).size
                for i in range(count):
                    (coff,) = _PTR.unpack_from(abuf, 8 * i)
                    child, sub = _copy_subtree(heaps, plan, slot.message, ref_at(coff, child_size), dest_heap)
                    copied += sub
                    _PTR.pack_into(abuf, 8 * i, child.offset)
            heaps.view(new_arr)[:] = abuf
            _ARR.pack_into(view, slot.offset, new_arr.offset, count)
        elif slot.kind in (K_STRING, K_BYTES):
            loff, llen = _PTRLEN.unpack_from(view, slot.offset)
            if llen:
                leaf = heaps.alloc(dest_heap, llen)
                heaps.view(leaf)[:] = heaps.view(ref_at(loff, llen))
                copied += llen
                _PTRLEN.pack_into(view, slot.offset, leaf.offset, llen)
        elif slot.kind == K_MESSAGE:
            (coff,) = _PTR.unpack_from(view, slot.offset)
            if coff:
                child_size = plan.layout(slot.message).size
                child, sub = _copy_subtree(heaps, plan, slot.message, ref_at(coff, child_size), dest_heap)
                copied += sub
                _PTR.pack_into(view, slot.offset, child.offset)
    heaps.view(new_root)[:] = view
    return new_root, copied


def copy_tree(heaps, plan: MarshalPlan, msg: str, root: BlockRef, dest_heap: int):
    """Deep-copy a whole value tree onto ``dest_heap``.

    Used by the receive gate to move surviving RPCs from the service's
    private landing heap into the app-visible receive heap.
    Returns (new_root, bytes_copied).
    """
    return _copy_subtree(heaps, plan, msg, root, dest_heap)


def free_tree(heaps, blocks) -> None:
    for ref in blocks:
        heaps.free(ref)


# --------------------------------------------------------------------------
# Marshal / unmarshal


def marshal(heaps, desc: RpcDescriptor):
    """The single send-side marshal step.

    Emits the frame as a header plus zero-copy views of the value blocks.
    Returns (buffers, payload_bytes): buffers[0] is the header bytes object,
    the rest are memoryviews into the heaps.
    """
    views = [heaps.view(ref) for ref in desc.blocks]
    lengths = [ref.length for ref in desc.blocks]
    header = pack_header(FRAME_RPC, desc, lengths)
    return [header] + views, sum(lengths)


def unmarshal(heaps, plan: MarshalPlan, hdr: FrameHeader, payload, dest_heap: int):
    """The single receive-side unmarshal step.

    Copies block bytes from ``payload`` into ``dest_heap`` and rewrites
    pointer slots to the new offsets.  Returns (descriptor, bytes_copied).
    Raises WireError subclasses on any structural mismatch.
    """
    if hdr.method_index >= len(plan.methods):
        raise WireError(f"method index {hdr.method_index} out of range")
    meth = plan.method(hdr.method_index)
    msg = meth.request if hdr.direction == Direction.REQUEST else meth.response
    desc = RpcDescriptor(
        conn_id=hdr.conn_id,
        call_id=hdr.call_id,
        method_index=hdr.method_index,
        direction=hdr.direction,
        status=hdr.status,
        flags=hdr.flags & ~FLAG_STABILIZED,
    )
    if hdr.status != Status.OK and not hdr.lengths:
        return desc, 0  # error responses carry no value
    if not hdr.lengths:
        raise WireError("rpc frame with no blocks for a method with arguments")

    mv = memoryview(payload)
    cursor = 0
    raw = []
    for n in hdr.lengths:
        raw.append(mv[cursor : cursor + n])
        cursor += n
    if cursor != len(payload):
        raise TruncatedFrame("payload shorter than length table")

    pos = 0

    def take(expect_len=None):
        nonlocal pos
        if pos >= len(raw):
            raise WireError("frame block list shorter than schema requires")
        chunk = raw[pos]
        pos += 1
        if expect_len is not None and len(chunk) != expect_len:
            raise WireError(f"block length {len(chunk)} does not match layout {expect_len}")
        return chunk

    copied = 0
    allocated: list = []  # rolled back if the frame cannot be placed whole

    def place(chunk) -> BlockRef:
        nonlocal copied
        ref = heaps.alloc(dest_heap, len(chunk))
        allocated.append(ref)
        heaps.view(ref)[:] = chunk
        copied += len(chunk)
        return ref

    def rebuild(msg_name: str) -> BlockRef:
        layout = plan.layout(msg_name)
        root_bytes = bytearray(take(layout.size))
        ref = heaps.alloc(dest_heap, layout.size)
        allocated.append(ref)
        nonlocal copied
        copied += layout.size
        for slot in layout.slots:
            if slot.repeated:
                aoff, count = _ARR.unpack_from(root_bytes, slot.offset)[:2]
                if count > MAX_BLOCKS:
                    raise WireError(f"repeated count {count} too large")
                if not count:
                    _ARR.pack_into(root_bytes, slot.offset, 0, 0)
                    continue
                abuf = bytearray(take(_arr_len(slot, count)))
                if slot.kind in (K_STRING, K_BYTES):
                    for i in range(count):
                        loff, llen = _PTRLEN.unpack_from(abuf, 16 * i)
                        if llen:
                            leaf = place(take(llen))
                            _PTRLEN.pack_into(abuf, 16 * i, leaf.offset, llen)
                        else:
                            _PTRLEN.pack_into(abuf, 16 * i, 0, 0)
                elif slot.kind == K_MESSAGE:
                    for i in range(count):
                        child = rebuild(slot.message)
                        _PTR.pack_into(abuf, 8 * i, child.offset)
                arr_ref = heaps.alloc(dest_heap, len(abuf))
                allocated.append(arr_ref)
                heaps.view(arr_ref)[:] = abuf
                copied += len(abuf)
                _ARR.pack_into(root_bytes, slot.offset, arr_ref.offset, count)
            elif slot.kind in (K_STRING, K_BYTES):
                loff, llen = _PTRLEN.unpack_from(root_bytes, slot.offset)
                if llen:
                    leaf = place(take(llen))
                    _PTRLEN.pack_into(root_bytes, slot.offset, leaf.offset, llen)
                else:
                    _PTRLEN.pack_into(root_bytes, slot.offset, 0, 0)
            elif slot.kind == K_MESSAGE:
                (coff,) = _PTR.unpack_from(root_bytes, slot.offset)
                if coff:
                    child = rebuild(slot.message)
                    _PTR.pack_into(root_bytes, slot.offset, child.offset)
        heaps.view(ref)[:] = root_bytes
        return ref

    try:
        root = rebuild(msg)
        if pos != len(raw):
            raise WireError(f"frame carries {len(raw) - pos} extra blocks")
        desc.blocks = walk_blocks(heaps, plan, msg, root)
    except BaseException:
        # A half-placed frame must not pin heap space: the caller will park
        # and retry the same bytes, so leaked partials would starve it.
        for ref in allocated:
            heaps.free(ref)
        raise
    return desc, copied


# --------------------------------------------------------------------------
# Contiguous encode/decode
#
# The copy-heavy path: serialize a whole value into one owned buffer, or
# deserialize from one.  The runtime itself never calls these for data
# movement; they exist for tooling and for emulating the conventional
# marshal-at-every-hop pipeline in benchmarks.


def encode_full(heaps, plan: MarshalPlan, desc: RpcDescriptor) -> bytes:
    """Serialize descriptor and value into one contiguous frame buffer."""
    buffers, _ = marshal(heaps, desc)
    return b"".join(bytes(b) for b in buffers)


def decode_full(plan: MarshalPlan, data: bytes):
    """Parse a contiguous frame into (header, python value dict)."""
    hdr, hsize = parse_header(data)
    payload = data[hsize : hsize + hdr.payload_len]
    if len(payload) < hdr.payload_len:
        raise TruncatedFrame("short payload")
    heaps = _ScratchHeaps()
    desc, _ = unmarshal(heaps, plan, hdr, payload, HEAP_PRIVATE)
    if desc.status != Status.OK and not desc.blocks:
        return hdr, None
    meth = plan.method(hdr.method_index)
    msg = meth.request if hdr.direction == Direction.REQUEST else meth.response
    return hdr, read_value(heaps, plan, msg, desc.root())


class _ScratchHeaps:
    """Throwaway heap accessor over plain bytearrays, for decode_full."""

    def __init__(self):
        self._blocks = {}
        self._next = 16

    def alloc(self, heap_id, size):
        off = make_offset(heap_id, 0, self._next)
        self._next += max(8, (size + 7) & ~7)
        self._blocks[off] = bytearray(size)
        return BlockRef(heap_id, off, size)

    def view(self, ref):
        return memoryview(self._blocks[ref.offset])[: ref.length]

    def free(self, ref):
        self._blocks.pop(ref.offset, None)
