"""Schema parsing, canonical digests, and marshalling plans.

The schema language is a small proto-like text format: an optional package
declaration, message definitions with scalar / string / bytes / message-typed
fields (optionally ``repeated``), and services with unary methods.  There are
no imports, oneofs, or maps.

Two derived artifacts matter to the rest of the runtime:

* the schema digest, a SHA-256 over a canonical binary serialization of the
  parsed form, used as the cache key for marshalling plans and as the
  compatibility check during connection handshake; and
* the marshalling plan, a per-message value layout plus a per-method request
  and response binding that the data path interprets to walk, copy, and fix
  up argument blocks.

Whitespace, comments, and declaration order of *fields within a message* do
not survive into the canonical form beyond what the grammar requires, so two
textually different schemas with the same meaning hash identically only when
they declare the same things in the same order.  Field order is meaningful:
it determines value layout.
"""

from __future__ import annotations

import hashlib
import struct
import threading
from dataclasses import dataclass, field

from .errors import SchemaError

# Field kind codes.  These appear in the canonical serialization, so their
# numeric values are frozen.
K_BOOL = 1
K_I32 = 2
K_I64 = 3
K_U32 = 4
K_U64 = 5
K_F64 = 6
K_STRING = 7
K_BYTES = 8
K_MESSAGE = 9

SCALAR_KINDS = {
    "bool": K_BOOL,
    "i32": K_I32,
    "i64": K_I64,
    "u32": K_U32,
    "u64": K_U64,
    "f64": K_F64,
    "string": K_STRING,
    "bytes": K_BYTES,
}
KIND_NAMES = {v: k for k, v in SCALAR_KINDS.items()}
KIND_NAMES[K_MESSAGE] = "message"

_CANON_MAGIC = b"MRPCSCH1"


@dataclass(frozen=True)
class FieldDef:
    name: str
    tag: int
    kind: int
    repeated: bool = False
    message: str = ""  # referenced message name when kind == K_MESSAGE


@dataclass(frozen=True)
class MessageDef:
    name: str
    fields: tuple[FieldDef, ...]


@dataclass(frozen=True)
class MethodDef:
    name: str
    request: str
    response: str


@dataclass(frozen=True)
class ServiceDef:
    name: str
    methods: tuple[MethodDef, ...]


@dataclass(frozen=True)
class SchemaDescriptor:
    package: str
    messages: tuple[MessageDef, ...]
    services: tuple[ServiceDef, ...]

    def message(self, name: str) -> MessageDef:
        for m in self.messages:
            if m.name == name:
                return m
        raise KeyError(name)

    def method_table(self) -> tuple[tuple[str, MethodDef], ...]:
        """Flattened (service, method) pairs in declaration order.

        A method's position in this table is its wire method index.
        """
        out = []
        for svc in self.services:
            for meth in svc.methods:
                out.append((svc.name, meth))
        return tuple(out)


# --------------------------------------------------------------------------
# Tokenizer / parser


class _Tok:
    __slots__ = ("kind", "text", "line", "col")

    def __init__(self, kind, text, line, col):
        self.kind = kind
        self.text = text
        self.line = line
        self.col = col


_SYMBOLS = "{}()=;.,"


def _tokenize(text: str):
    toks = []
    i, line, col = 0, 1, 1
    n = len(text)
    while i < n:
        c = text[i]
        if c in " \t\r":
            i += 1
            col += 1
            continue
        if c == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if c == "/" and i + 1 < n and text[i + 1] == "/":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if c == "/" and i + 1 < n and text[i + 1] == "*":
            end = text.find("*/", i + 2)
            if end < 0:
                raise SchemaError("unterminated block comment", line, col)
            skipped = text[i : end + 2]
            line += skipped.count("\n")
            col = 1 if "\n" in skipped else col + len(skipped)
            i = end + 2
            continue
        if c in _SYMBOLS:
            toks.append(_Tok("sym", c, line, col))
            i += 1
            col += 1
            continue
        if c.isdigit():
            j = i
            while j < n and text[j].isdigit():
                j += 1
            toks.append(_Tok("int", text[i:j], line, col))
            col += j - i
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            toks.append(_Tok("ident", text[i:j], line, col))
            col += j - i
            i = j
            continue
        raise SchemaError(f"unexpected character {c!r}", line, col)
    toks.append(_Tok("eof", "", line, col))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def next(self) -> _Tok:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def expect(self, kind, text=None) -> _Tok:
        t = self.next()
        if t.kind != kind or (text is not None and t.text != text):
            want = text if text is not None else kind
            raise SchemaError(f"expected {want!r}, got {t.text!r}", t.line, t.col)
        return t

    def parse(self) -> SchemaDescriptor:
        package = ""
        messages: list[MessageDef] = []
        services: list[ServiceDef] = []
        t = self.peek()
        if t.kind == "ident" and t.text == "package":
            self.next()
            parts = [self.expect("ident").text]
            while self.peek().text == ".":
                self.next()
                parts.append(self.expect("ident").text)
            self.expect("sym", ";")
            package = ".".join(parts)
        while True:
            t = self.peek()
            if t.kind == "eof":
                break
            if t.kind == "ident" and t.text == "message":
                messages.append(self._message())
            elif t.kind == "ident" and t.text == "service":
                services.append(self._service())
            else:
                raise SchemaError(
                    f"expected 'message' or 'service', got {t.text!r}", t.line, t.col
                )
        desc = SchemaDescriptor(package, tuple(messages), tuple(services))
        _validate(desc)
        return desc

    def _message(self) -> MessageDef:
        self.expect("ident", "message")
        name = self.expect("ident").text
        self.expect("sym", "{")
        fields: list[FieldDef] = []
        while self.peek().text != "}":
            fields.append(self._field())
        self.expect("sym", "}")
        return MessageDef(name, tuple(fields))

    def _field(self) -> FieldDef:
        repeated = False
        t = self.peek()
        if t.kind == "ident" and t.text == "repeated":
            self.next()
            repeated = True
        tname = self.expect("ident")
        fname = self.expect("ident").text
        self.expect("sym", "=")
        tag_tok = self.expect("int")
        tag = int(tag_tok.text)
        if not 1 <= tag <= 536870911:
            raise SchemaError(f"field tag {tag} out of range", tag_tok.line, tag_tok.col)
        self.expect("sym", ";")
        if tname.text in SCALAR_KINDS:
            return FieldDef(fname, tag, SCALAR_KINDS[tname.text], repeated)
        return FieldDef(fname, tag, K_MESSAGE, repeated, message=tname.text)

    def _service(self) -> ServiceDef:
        self.expect("ident", "service")
        name = self.expect("ident").text
        self.expect("sym", "{")
        methods: list[MethodDef] = []
        while self.peek().text != "}":
            self.expect("ident", "rpc")
            mname = self.expect("ident").text
            self.expect("sym", "(")
            req = self.expect("ident").text
            self.expect("sym", ")")
            self.expect("ident", "returns")
            self.expect("sym", "(")
            resp = self.expect("ident").text
            self.expect("sym", ")")
            self.expect("sym", ";")
            methods.append(MethodDef(mname, req, resp))
        self.expect("sym", "}")
        return ServiceDef(name, tuple(methods))


def _validate(desc: SchemaDescriptor) -> None:
    names = set()
    for m in desc.messages:
        if m.name in names:
            raise SchemaError(f"duplicate message {m.name!r}")
        names.add(m.name)
        tags, fnames = set(), set()
        for f in m.fields:
            if f.name in fnames:
                raise SchemaError(f"duplicate field {m.name}.{f.name}")
            if f.tag in tags:
                raise SchemaError(f"duplicate tag {f.tag} in {m.name}")
            fnames.add(f.name)
            tags.add(f.tag)
            if f.kind == K_MESSAGE and f.message not in {x.name for x in desc.messages}:
                raise SchemaError(f"unknown message type {f.message!r} in {m.name}.{f.name}")
    snames = set()
    for s in desc.services:
        if s.name in snames:
            raise SchemaError(f"duplicate service {s.name!r}")
        snames.add(s.name)
        mnames = set()
        for meth in s.methods:
            if meth.name in mnames:
                raise SchemaError(f"duplicate method {s.name}.{meth.name}")
            mnames.add(meth.name)
            for ref in (meth.request, meth.response):
                if ref not in names:
                    raise SchemaError(f"unknown message {ref!r} in {s.name}.{meth.name}")


def parse_schema(text: str) -> SchemaDescriptor:
    return _Parser(text).parse()


# --------------------------------------------------------------------------
# Canonical serialization and digest

_U32 = struct.Struct("<I")


def _c_str(out: list, s: str) -> None:
    b = s.encode("utf-8")
    out.append(_U32.pack(len(b)))
    out.append(b)


def canonical_bytes(desc: SchemaDescriptor) -> bytes:
    """Deterministic binary form of a schema, hashed for the digest.

    Layout (all integers little-endian):
    magic "MRPCSCH1", package string, u32 message count then messages, u32
    service count then services.  A string is u32 length plus UTF-8 bytes.
    A field is name, u32 tag, u8 kind code, u8 repeated flag, and for
    message-typed fields the referenced message name.  A method is name,
    request message name, response message name.
    """
    out: list[bytes] = [_CANON_MAGIC]
    _c_str(out, desc.package)
    out.append(_U32.pack(len(desc.messages)))
    for m in desc.messages:
        _c_str(out, m.name)
        out.append(_U32.pack(len(m.fields)))
        for f in m.fields:
            _c_str(out, f.name)
            out.append(_U32.pack(f.tag))
            out.append(bytes((f.kind, 1 if f.repeated else 0)))
            if f.kind == K_MESSAGE:
                _c_str(out, f.message)
    out.append(_U32.pack(len(desc.services)))
    for s in desc.services:
        _c_str(out, s.name)
        out.append(_U32.pack(len(s.methods)))
        for meth in s.methods:
            _c_str(out, meth.name)
            _c_str(out, meth.request)
            _c_str(out, meth.response)
    return b"".join(out)


def schema_digest(desc_or_text) -> bytes:
    """32-byte SHA-256 digest of the canonical schema form."""
    desc = desc_or_text
    if isinstance(desc, str):
        desc = parse_schema(desc)
    return hashlib.sha256(canonical_bytes(desc)).digest()


def render_schema(desc: SchemaDescriptor) -> str:
    """Schema text that parses back to an identical descriptor."""
    lines = []
    if desc.package:
        lines.append(f"package {desc.package};")
    for m in desc.messages:
        lines.append(f"message {m.name} {{")
        for f in m.fields:
            rep = "repeated " if f.repeated else ""
            tname = f.message if f.kind == K_MESSAGE else KIND_NAMES[f.kind]
            lines.append(f"  {rep}{tname} {f.name} = {f.tag};")
        lines.append("}")
    for s in desc.services:
        lines.append(f"service {s.name} {{")
        for meth in s.methods:
            lines.append(f"  rpc {meth.name}({meth.request}) returns ({meth.response});")
        lines.append("}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Value layout and marshalling plans
#
# A message value is one root block plus zero or more child blocks.  The root
# block holds one slot per field at a fixed offset:
#
#   bool                1 byte (0 or 1)
#   i32 / u32           4 bytes
#   i64 / u64 / f64     8 bytes
#   string / bytes      u64 block offset + u32 byte length + u32 pad
#   message             u64 block offset (0 = unset)
#   repeated any        u64 array block offset + u32 element count + u32 pad
#
# Slots are aligned to their size (pointer slots to 8), in field declaration
# order.  Array blocks hold packed scalars, 16-byte (offset, length, pad)
# entries for string/bytes elements, or packed u64 child offsets for message
# elements.  Offset 0 never names a real block, so 0 doubles as null.

_PTR = struct.Struct("<Q")
_PTRLEN = struct.Struct("<QI4x")

_SCALAR_FMT = {
    K_BOOL: struct.Struct("<B"),
    K_I32: struct.Struct("<i"),
    K_U32: struct.Struct("<I"),
    K_I64: struct.Struct("<q"),
    K_U64: struct.Struct("<Q"),
    K_F64: struct.Struct("<d"),
}


@dataclass(frozen=True)
class FieldSlot:
    name: str
    tag: int
    kind: int
    repeated: bool
    offset: int
    message: str = ""


@dataclass(frozen=True)
class MessageLayout:
    name: str
    size: int
    slots: tuple[FieldSlot, ...]

    def slot(self, name: str) -> FieldSlot:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(name)


@dataclass(frozen=True)
class MethodPlan:
    index: int
    service: str
    name: str
    request: str
    response: str


class MarshalPlan:
    """Interpreted layout tables for one schema.

    Immutable after construction; shared by every connection bound to the
    same digest.
    """

    def __init__(self, desc: SchemaDescriptor):
        self.descriptor = desc
        self.digest = schema_digest(desc)
        self.layouts: dict[str, MessageLayout] = {}
        for m in desc.messages:
            self.layouts[m.name] = _layout_message(m)
        self.methods: tuple[MethodPlan, ...] = tuple(
            MethodPlan(i, svc, meth.name, meth.request, meth.response)
            for i, (svc, meth) in enumerate(desc.method_table())
        )
        self._by_name = {(p.service, p.name): p for p in self.methods}

    def layout(self, message: str) -> MessageLayout:
        return self.layouts[message]

    def method(self, index: int) -> MethodPlan:
        return self.methods[index]

    def method_named(self, service: str, name: str) -> MethodPlan:
        return self._by_name[(service, name)]


def _align(off: int, a: int) -> int:
    return (off + a - 1) & ~(a - 1)


def _layout_message(m: MessageDef) -> MessageLayout:
    off = 0
    slots = []
    for f in m.fields:
        if f.repeated or f.kind in (K_STRING, K_BYTES):
            off = _align(off, 8)
            slots.append(FieldSlot(f.name, f.tag, f.kind, f.repeated, off, f.message))
            off += 16
        elif f.kind == K_MESSAGE:
            off = _align(off, 8)
            slots.append(FieldSlot(f.name, f.tag, f.kind, False, off, f.message))
            off += 8
        else:
            width = _SCALAR_FMT[f.kind].size
            off = _align(off, width)
            slots.append(FieldSlot(f.name, f.tag, f.kind, False, off, ""))
            off += width
    size = max(8, _align(off, 8))
    return MessageLayout(m.name, size, tuple(slots))


class PlanCache:
    """Digest-keyed cache of marshalling plans.

    Thread safe.  Hit/miss/build counters feed the service stats surface;
    tests pin exact values, so every path that touches the cache goes
    through :meth:`load`.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._plans: dict[bytes, MarshalPlan] = {}
        self._refs: dict[bytes, set] = {}
        self.hits = 0
        self.misses = 0
        self.builds = 0

    def load(self, digest: bytes, desc: SchemaDescriptor | None, owner=None) -> MarshalPlan:
        """Return the plan for ``digest``, building it on first use.

        ``desc`` may be None for a pure lookup; a miss then raises KeyError.
        ``owner`` tracks which connection or tool holds the plan, purely
        for introspection.
        """
        with self._lock:
            plan = self._plans.get(digest)
            if plan is not None:
                self.hits += 1
            else:
                self.misses += 1
                if desc is None:
                    raise KeyError(digest.hex())
                plan = MarshalPlan(desc)
                if plan.digest != digest:
                    raise SchemaError("descriptor does not match requested digest")
                self._plans[digest] = plan
                self.builds += 1
            if owner is not None:
                self._refs.setdefault(digest, set()).add(owner)
            return plan

    def release(self, digest: bytes, owner) -> None:
        with self._lock:
            refs = self._refs.get(digest)
            if refs is not None:
                refs.discard(owner)

    def stats(self) -> dict:
        with self._lock:
            return {
                "plans": len(self._plans),
                "hits": self.hits,
                "misses": self.misses,
                "builds": self.builds,
            }

    def __len__(self) -> int:
        with self._lock:
            return len(self._plans)

    def digests(self) -> list[str]:
        with self._lock:
            return [d.hex() for d in self._plans]
