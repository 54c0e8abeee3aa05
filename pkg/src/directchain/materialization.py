"""Minimal delta messages, their binary encoding, and materialization.

Wire layout (all integers are unsigned LEB128 varints unless noted)::

    message := version:u8 flags:u8 count:u16be [batch_id batch_size] entry*
    entry   := kind:u8 object_id attr:u8 value
    value   := 0x00 varint            integer (zigzag)
             | 0x01 len utf8          short string (<= 48 bytes)
             | 0x02 phase:u8          lifecycle phase
             | 0x03 epoch counter     object version
             | 0x04 kind:u8 object_id attr:u8   external reference
    frame   := type:u8 message        (type bit 7 = more frames follow)

Pod entries with object_id 0 apply to every pod of the message's batch.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, NamedTuple, Union

from .core import LifecyclePhase, ObjectVersion, PodRecord, ZERO_VERSION

WIRE_VERSION = 1
HEADER_SIZE = 4
ENTRY_BUDGET = 64
MAX_SHORT_STRING = 48
TEMPLATE_SIZE = 17 * 1024

FLAG_BATCH = 0x01
MORE_FLAG = 0x80


class ObjectKind(enum.IntEnum):
    POD = 1
    REPLICASET = 2
    DEPLOYMENT = 3
    TOMBSTONE = 4
    NODE = 5


class Attr(enum.IntEnum):
    REPLICAS = 1
    NODE_NAME = 2
    PHASE = 3
    TEMPLATE_REF = 4
    VALID = 5
    VERSION = 6
    CREATOR = 7


_ALLOWED = {
    ObjectKind.POD: {Attr.NODE_NAME, Attr.PHASE, Attr.TEMPLATE_REF, Attr.VALID, Attr.VERSION},
    ObjectKind.REPLICASET: {Attr.REPLICAS, Attr.TEMPLATE_REF},
    ObjectKind.DEPLOYMENT: {Attr.REPLICAS, Attr.TEMPLATE_REF},
    ObjectKind.TOMBSTONE: {Attr.VALID, Attr.CREATOR, Attr.VERSION},
    ObjectKind.NODE: {Attr.VALID, Attr.REPLICAS},
}


class FrameType(enum.IntEnum):
    DELTA = 0
    DIGEST = 1
    FETCH = 2
    STATE = 3
    INVALIDATE = 4
    ACK = 5
    TOMBSTONE = 6


class OversizeEntry(Exception):
    pass


class MalformedMessage(Exception):
    pass


class DanglingRef(Exception):
    def __init__(self, key):
        super().__init__(f"unresolvable external reference {key}")
        self.key = key


class AttrKey(NamedTuple):
    object_kind: ObjectKind
    object_id: int
    attribute_path: Attr

    def validate(self) -> "AttrKey":
        if self.attribute_path not in _ALLOWED[self.object_kind]:
            raise ValueError(f"{self.attribute_path.name} is not an attribute of {self.object_kind.name}")
        if self.object_id < 0:
            raise ValueError("object_id must be non-negative")
        return self

    def __str__(self):
        return f"{self.object_kind.name.title()}/{self.object_id}/{self.attribute_path.name.title()}"


@dataclass(frozen=True)
class Literal:
    value: Union[int, str, LifecyclePhase, ObjectVersion]


@dataclass(frozen=True)
class ExternalRef:
    key: AttrKey


AttrValue = Union[Literal, ExternalRef]


@dataclass(frozen=True)
class DeltaMessage:
    entries: tuple = ()
    batch_hint: tuple | None = None  # (batch_id, batch_size)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))


def pod_key(pod_id: int, attr: Attr) -> AttrKey:
    return AttrKey(ObjectKind.POD, pod_id, attr)


def template_ref(function_id: int) -> ExternalRef:
    return ExternalRef(AttrKey(ObjectKind.REPLICASET, function_id, Attr.TEMPLATE_REF))


# -- varints --

def put_varint(buf: bytearray, n: int) -> None:
    if n < 0:
        raise ValueError("varint must be non-negative")
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            buf.append(b | 0x80)
        else:
            buf.append(b)
            return


def get_varint(data: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    while True:
        if pos >= len(data):
            raise MalformedMessage("truncated varint")
        b = data[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if not b & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise MalformedMessage("varint too long")


def _zigzag(n: int) -> int:
    return n << 1 if n >= 0 else ((-n) << 1) - 1


def _unzigzag(z: int) -> int:
    return z >> 1 if not z & 1 else -((z + 1) >> 1)


# -- encode --

def _put_key(buf: bytearray, key: AttrKey) -> None:
    buf.append(int(key.object_kind))
    put_varint(buf, key.object_id)
    buf.append(int(key.attribute_path))


def _put_value(buf: bytearray, value: AttrValue) -> None:
    if isinstance(value, ExternalRef):
        buf.append(0x04)
        _put_key(buf, value.key.validate())
        return
    v = value.value
    if isinstance(v, LifecyclePhase):
        buf.append(0x02)
        buf.append(int(v))
    elif isinstance(v, ObjectVersion):
        buf.append(0x03)
        put_varint(buf, v.epoch)
        put_varint(buf, v.counter)
    elif isinstance(v, bool):
        buf.append(0x00)
        put_varint(buf, _zigzag(int(v)))
    elif isinstance(v, int):
        buf.append(0x00)
        put_varint(buf, _zigzag(v))
    elif isinstance(v, str):
        raw = v.encode("utf-8")
        if len(raw) > MAX_SHORT_STRING:
            raise OversizeEntry(f"string literal of {len(raw)} bytes")
        buf.append(0x01)
        put_varint(buf, len(raw))
        buf += raw
    else:
        raise TypeError(f"unsupported literal {v!r}")


def encode_entry(key: AttrKey, value: AttrValue) -> bytes:
    buf = bytearray()
    _put_key(buf, key.validate())
    _put_value(buf, value)
    if len(buf) > ENTRY_BUDGET:
        raise OversizeEntry(f"entry {key} encodes to {len(buf)} bytes")
    return bytes(buf)


def encode_message_sized(msg: DeltaMessage) -> tuple[bytes, int]:
    """Encode and also report the largest per-object footprint.

    The header is charged in full to every object, so for a message about
    one pod the footprint is simply the message length.
    """
    if len(msg.entries) > 0xFFFF:
        raise OversizeEntry("too many entries for one message")
    buf = bytearray((WIRE_VERSION, FLAG_BATCH if msg.batch_hint else 0))
    buf += len(msg.entries).to_bytes(2, "big")
    if msg.batch_hint:
        batch_id, size = msg.batch_hint
        put_varint(buf, batch_id)
        put_varint(buf, size)
    fixed = len(buf)
    sizes: dict = {}
    for key, value in msg.entries:
        raw = encode_entry(key, value)
        buf += raw
        obj = (key.object_kind, key.object_id)
        sizes[obj] = sizes.get(obj, 0) + len(raw)
    biggest = max(sizes.values(), default=0) + fixed
    if biggest > ENTRY_BUDGET:
        raise OversizeEntry(f"object footprint of {biggest} bytes")
    return bytes(buf), biggest


def encode_message(msg: DeltaMessage) -> bytes:
    return encode_message_sized(msg)[0]


# -- decode --

def _get_key(data: bytes, pos: int) -> tuple[AttrKey, int]:
    if pos >= len(data):
        raise MalformedMessage("truncated key")
    try:
        kind = ObjectKind(data[pos])
    except ValueError:
        raise MalformedMessage(f"bad object kind {data[pos]}") from None
    oid, pos = get_varint(data, pos + 1)
    if pos >= len(data):
        raise MalformedMessage("truncated key")
    try:
        attr = Attr(data[pos])
    except ValueError:
        raise MalformedMessage(f"bad attribute tag {data[pos]}") from None
    key = AttrKey(kind, oid, attr)
    if attr not in _ALLOWED[kind]:
        raise MalformedMessage(f"attribute {attr.name} invalid for {kind.name}")
    return key, pos + 1


def _get_value(data: bytes, pos: int) -> tuple[AttrValue, int]:
    if pos >= len(data):
        raise MalformedMessage("truncated value")
    tag = data[pos]
    pos += 1
    if tag == 0x00:
        z, pos = get_varint(data, pos)
        return Literal(_unzigzag(z)), pos
    if tag == 0x01:
        n, pos = get_varint(data, pos)
        if n > MAX_SHORT_STRING or pos + n > len(data):
            raise MalformedMessage("bad string length")
        try:
            return Literal(data[pos:pos + n].decode("utf-8")), pos + n
        except UnicodeDecodeError:
            raise MalformedMessage("bad utf-8") from None
    if tag == 0x02:
        if pos >= len(data):
            raise MalformedMessage("truncated phase")
        try:
            return Literal(LifecyclePhase(data[pos])), pos + 1
        except ValueError:
            raise MalformedMessage(f"bad phase {data[pos]}") from None
    if tag == 0x03:
        epoch, pos = get_varint(data, pos)
        counter, pos = get_varint(data, pos)
        return Literal(ObjectVersion(epoch, counter)), pos
    if tag == 0x04:
        key, pos = _get_key(data, pos)
        return ExternalRef(key), pos
    raise MalformedMessage(f"bad value tag {tag}")


def decode_message(data: bytes) -> DeltaMessage:
    if len(data) < HEADER_SIZE:
        raise MalformedMessage("truncated header")
    if data[0] != WIRE_VERSION or data[1] & ~FLAG_BATCH:
        raise MalformedMessage("bad header")
    count = int.from_bytes(data[2:4], "big")
    pos = HEADER_SIZE
    hint = None
    if data[1] & FLAG_BATCH:
        batch_id, pos = get_varint(data, pos)
        size, pos = get_varint(data, pos)
        hint = (batch_id, size)
    entries = []
    for _ in range(count):
        key, pos = _get_key(data, pos)
        value, pos = _get_value(data, pos)
        entries.append((key, value))
    if pos != len(data):
        raise MalformedMessage("trailing bytes")
    return DeltaMessage(tuple(entries), hint)


def encode_frame(ftype: FrameType, msg: DeltaMessage, more: bool = False) -> bytes:
    return encode_frame_sized(ftype, msg, more)[0]


def encode_frame_sized(ftype: FrameType, msg: DeltaMessage, more: bool = False) -> tuple[bytes, int]:
    body, biggest = encode_message_sized(msg)
    return bytes((int(ftype) | (MORE_FLAG if more else 0),)) + body, biggest + 1


def decode_frame(data: bytes) -> tuple[FrameType, bool, DeltaMessage]:
    if not data:
        raise MalformedMessage("empty frame")
    try:
        ftype = FrameType(data[0] & ~MORE_FLAG)
    except ValueError:
        raise MalformedMessage(f"bad frame type {data[0]}") from None
    return ftype, bool(data[0] & MORE_FLAG), decode_message(data[1:])


def per_object_footprint(data: bytes, framed: bool = False) -> dict:
    """Encoded bytes attributed to each object of a message (or frame)."""
    offset = 1 if framed else 0
    msg = decode_message(data[offset:])
    fixed = len(data) - offset - sum(len(encode_entry(k, v)) for k, v in msg.entries) + offset
    sizes: dict = {}
    for key, value in msg.entries:
        obj = (key.object_kind, key.object_id)
        sizes[obj] = sizes.get(obj, 0) + len(encode_entry(key, value))
    if not sizes:
        return {None: fixed}
    return {obj: n + fixed for obj, n in sizes.items()}


# -- deltas and materialization --

def extract_delta(record: PodRecord, prior: PodRecord | None) -> DeltaMessage:
    if prior is not None and prior.pod_id != record.pod_id:
        raise ValueError("prior describes a different pod")
    pid = record.pod_id
    entries = []
    if prior is None or prior.node != record.node:
        if record.node is not None:
            entries.append((pod_key(pid, Attr.NODE_NAME), Literal(record.node)))
    if prior is None or prior.phase != record.phase:
        entries.append((pod_key(pid, Attr.PHASE), Literal(record.phase)))
    if prior is None or prior.function_id != record.function_id:
        entries.append((pod_key(pid, Attr.TEMPLATE_REF), template_ref(record.function_id)))
    if (prior is None and record.version != ZERO_VERSION) or (prior is not None and prior.version != record.version):
        entries.append((pod_key(pid, Attr.VERSION), Literal(record.version)))
    entries.sort(key=lambda e: e[0])
    return DeltaMessage(tuple(entries))


def record_message(record: PodRecord) -> DeltaMessage:
    """Full dynamic state of one pod (used for handshake state transfer)."""
    return extract_delta(record, None)


def batch_message(batch_id: int, batch_size: int, function_id: int,
                  version: ObjectVersion) -> DeltaMessage:
    entries = (
        (pod_key(0, Attr.PHASE), Literal(LifecyclePhase.PENDING)),
        (pod_key(0, Attr.TEMPLATE_REF), template_ref(function_id)),
        (pod_key(0, Attr.VERSION), Literal(version)),
    )
    return DeltaMessage(entries, (batch_id, batch_size))


@dataclass
class TemplateStore:
    templates: dict = field(default_factory=dict)

    @classmethod
    def for_functions(cls, function_ids: Iterable[int], size: int = TEMPLATE_SIZE) -> "TemplateStore":
        store = cls()
        for fn in function_ids:
            store.templates[fn] = _template_payload(fn, size)
        return store

    def __contains__(self, fn):
        return fn in self.templates

    def get(self, fn):
        return self.templates.get(fn)


def _template_payload(fn: int, size: int) -> bytes:
    seed = f"template:{fn};".encode()
    return (seed * (size // len(seed) + 1))[:size]


def _resolve(ref: ExternalRef, templates) -> int:
    key = ref.key
    if key.object_kind in (ObjectKind.REPLICASET, ObjectKind.DEPLOYMENT) and key.attribute_path == Attr.TEMPLATE_REF:
        if key.object_id in templates:
            return key.object_id
    raise DanglingRef(key)


def _apply(rec: PodRecord, attr: Attr, value: AttrValue, templates) -> PodRecord:
    if attr == Attr.TEMPLATE_REF:
        if not isinstance(value, ExternalRef):
            raise MalformedMessage("template reference must be external")
        return replace(rec, function_id=_resolve(value, templates))
    if isinstance(value, ExternalRef):
        raise MalformedMessage(f"{attr.name} cannot be an external reference")
    v = value.value
    if attr == Attr.NODE_NAME:
        return replace(rec, node=int(v))
    if attr == Attr.PHASE:
        return replace(rec, phase=LifecyclePhase(v))
    if attr == Attr.VERSION:
        return replace(rec, version=v)
    return rec


def materialize(delta: DeltaMessage, cache) -> list:
    """Assemble full pod records from a delta and the receiver's cache.

    ``cache`` needs a ``templates`` mapping-like attribute and may expose
    ``pods`` (pod_id -> PodRecord) to merge incremental deltas onto.
    """
    templates = cache.templates
    known: Mapping = getattr(cache, "pods", None) or {}
    by_pod: dict = {}
    wildcard = []
    for key, value in delta.entries:
        if key.object_kind != ObjectKind.POD:
            continue
        if key.object_id == 0:
            wildcard.append((key.attribute_path, value))
        else:
            by_pod.setdefault(key.object_id, []).append((key.attribute_path, value))
    out = []
    if delta.batch_hint:
        batch_id, size = delta.batch_hint
        for i in range(1, size + 1):
            rec = PodRecord(batch_id + i)
            for attr, value in wildcard:
                rec = _apply(rec, attr, value, templates)
            out.append(rec)
    for pid, attrs in by_pod.items():
        rec = known.get(pid) or PodRecord(pid)
        for attr, value in attrs:
            rec = _apply(rec, attr, value, templates)
        out.append(rec)
    return out
