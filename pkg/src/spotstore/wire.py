"""Framed binary wire protocol.

Frame layout::

    [len: u32 big-endian][type: u8][payload: len bytes]

``len`` covers the payload only, so a frame is always ``5 + len`` bytes.
Integers are big-endian, strings and byte blobs are u32-length-prefixed.
Replies to a request use the 0x8_ type bytes; any request may instead be
answered with an ``ErrorResponse`` (0x7F).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from typing import ClassVar

from spotstore.core import BlockDescriptor, DatanodeInfo, DatanodeState, ObjectMetadata, ProtocolError

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">IB")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 2**31 - 1


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        end = self.pos + n
        if end > len(self.buf):
            raise ProtocolError("truncated payload")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def done(self) -> bool:
        return self.pos == len(self.buf)


class _Fixed:
    def __init__(self, fmt: str):
        self.st = struct.Struct(">" + fmt)

    def pack(self, w: _Writer, v) -> None:
        try:
            w.parts.append(self.st.pack(v))
        except struct.error as e:
            raise ProtocolError(f"value {v!r} out of range: {e}") from None

    def unpack(self, r: _Reader):
        return self.st.unpack(r.take(self.st.size))[0]


class _Float(_Fixed):
    def pack(self, w, v) -> None:
        # -0.0 == 0.0 in Python; keep equal inputs byte-identical
        super().pack(w, float(v) + 0.0)


class _Bool(_Fixed):
    def pack(self, w, v) -> None:
        super().pack(w, 1 if v else 0)

    def unpack(self, r):
        v = super().unpack(r)
        if v not in (0, 1):
            raise ProtocolError(f"invalid bool byte {v}")
        return bool(v)


class _Bytes:
    def pack(self, w, v) -> None:
        U32.pack(w, len(v))
        w.parts.append(bytes(v))

    def unpack(self, r):
        return bytes(r.take(U32.unpack(r)))


class _Str(_Bytes):
    def pack(self, w, v) -> None:
        super().pack(w, v.encode("utf-8"))

    def unpack(self, r):
        try:
            return super().unpack(r).decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("string is not valid UTF-8") from None


class _Seq:
    def __init__(self, item):
        self.item = item

    def pack(self, w, v) -> None:
        U32.pack(w, len(v))
        for x in v:
            self.item.pack(w, x)

    def unpack(self, r):
        return tuple(self.item.unpack(r) for _ in range(U32.unpack(r)))


class _Tuple:
    def __init__(self, *items):
        self.items = items

    def pack(self, w, v) -> None:
        if len(v) != len(self.items):
            raise ProtocolError("tuple arity mismatch")
        for codec, x in zip(self.items, v):
            codec.pack(w, x)

    def unpack(self, r):
        return tuple(c.unpack(r) for c in self.items)


class _Record:
    def __init__(self, cls, schema):
        self.cls = cls
        self.schema = schema

    def pack(self, w, v) -> None:
        for name, codec in self.schema:
            codec.pack(w, getattr(v, name))

    def unpack(self, r):
        return self.cls(**{name: codec.unpack(r) for name, codec in self.schema})


class _State(_Fixed):
    def unpack(self, r):
        v = super().unpack(r)
        try:
            return DatanodeState(v)
        except ValueError:
            raise ProtocolError(f"invalid datanode state {v}") from None


U8, U32, U64, I64, F64 = _Fixed("B"), _Fixed("I"), _Fixed("Q"), _Fixed("q"), _Float("d")
BOOL, BYTES, STR = _Bool("B"), _Bytes(), _Str()

DESCRIPTOR = _Record(BlockDescriptor, [
    ("block_id", U64), ("datanode", U32), ("length", U32), ("index", U32),
    ("version", U64), ("address", STR),
])
METADATA = _Record(ObjectMetadata, [
    ("name", STR), ("size", U64), ("version", U64), ("blocks", _Seq(DESCRIPTOR)), ("sealed", BOOL),
])
NODE_INFO = _Record(DatanodeInfo, [
    ("node_id", U32), ("address", STR), ("capacity_blocks", U32), ("used_blocks", U32),
    ("state", _State("B")), ("deadline", F64), ("last_heartbeat", F64),
])


class Message:
    TYPE: ClassVar[int]
    SCHEMA: ClassVar[tuple] = ()

    def payload(self) -> bytes:
        w = _Writer()
        for name, codec in self.SCHEMA:
            codec.pack(w, getattr(self, name))
        return w.getvalue()

    @classmethod
    def from_payload(cls, payload: bytes) -> "Message":
        r = _Reader(payload)
        values = {name: codec.unpack(r) for name, codec in cls.SCHEMA}
        if not r.done():
            raise ProtocolError(f"{len(payload) - r.pos} trailing bytes in {cls.__name__}")
        return cls(**values)


MESSAGE_TYPES: dict[int, type[Message]] = {}


def message(type_byte: int, **schema):
    """Class decorator: freeze a dataclass and register it under ``type_byte``."""

    def wrap(cls):
        cls = dataclass(frozen=True)(cls)
        names = [f.name for f in fields(cls)]
        if sorted(names) != sorted(schema):
            raise TypeError(f"{cls.__name__}: schema does not match fields")
        cls.TYPE = type_byte
        cls.SCHEMA = tuple((n, schema[n]) for n in names)
        if type_byte in MESSAGE_TYPES:
            raise TypeError(f"duplicate message type {type_byte:#x}")
        MESSAGE_TYPES[type_byte] = cls
        return cls

    return wrap


# -- namenode requests -------------------------------------------------------

@message(0x01, protocol_version=U8, address=STR, capacity_blocks=U32)
class Register(Message):
    address: str
    capacity_blocks: int
    protocol_version: int = PROTOCOL_VERSION


@message(0x02, node_id=U32)
class Heartbeat(Message):
    node_id: int


@message(0x03, name=STR, size=U64)
class CreateObject(Message):
    name: str
    size: int


@message(0x04, name=STR, include_pending=BOOL)
class GetMetadata(Message):
    name: str
    include_pending: bool = False


@message(0x05, name=STR, index=I64, exclude=_Seq(U32))
class AllocateBlock(Message):
    """index >= 0 replaces that block of a pending object; -1 reserves a relocation target."""
    name: str
    index: int = -1
    exclude: tuple[int, ...] = ()


@message(0x06, block_id=U64, new_node=U32, expected_version=U64, reservation=U64)
class CommitRelocation(Message):
    block_id: int
    new_node: int
    expected_version: int
    reservation: int = 0


@message(0x07, node_id=U32)
class ListBlocksOnNode(Message):
    node_id: int


@message(0x08, node_id=U32, deadline=F64)
class BeginDrain(Message):
    node_id: int
    deadline: float


@message(0x09, node_id=U32)
class MarkLost(Message):
    """Mark a datanode terminated; every block still on it becomes Lost."""
    node_id: int


@message(0x0A, name=STR, if_version=U64)
class DeleteObject(Message):
    name: str
    if_version: int = 0


@message(0x0B, name=STR)
class SealObject(Message):
    name: str


@message(0x0C, block_id=U64)
class ReleaseReservation(Message):
    block_id: int


@message(0x0D)
class ListDatanodes(Message):
    pass


# -- datanode requests -------------------------------------------------------

@message(0x10, block_id=U64, offset=U32, crc=U32, data=BYTES)
class WriteBlock(Message):
    block_id: int
    offset: int
    crc: int
    data: bytes


@message(0x11, block_id=U64, offset=U32, length=U32)
class ReadBlock(Message):
    block_id: int
    offset: int
    length: int


@message(0x12, block_id=U64)
class DeleteBlock(Message):
    block_id: int


@message(0x13, deadline=F64)
class EnterDraining(Message):
    deadline: float


@message(0x14)
class Terminate(Message):
    pass


# -- relocator control -------------------------------------------------------

@message(0x20, node_id=U32, notice_period=F64)
class PreemptionNotice(Message):
    node_id: int
    notice_period: float


# -- replies -----------------------------------------------------------------

@message(0x7F, code=U8, message=STR)
class ErrorResponse(Message):
    code: int
    message: str = ""


@message(0x81, node_id=U32, block_size=U32)
class RegisterReply(Message):
    node_id: int
    block_size: int


@message(0x82)
class Ack(Message):
    pass


@message(0x83, metadata=METADATA)
class MetadataReply(Message):
    metadata: ObjectMetadata


@message(0x84, block=DESCRIPTOR)
class BlockReply(Message):
    block: BlockDescriptor


@message(0x85, version=U64)
class VersionReply(Message):
    version: int


@message(0x86, blocks=_Seq(_Tuple(STR, DESCRIPTOR)))
class BlockListReply(Message):
    blocks: tuple[tuple[str, BlockDescriptor], ...]


@message(0x87, node=NODE_INFO)
class DatanodeReply(Message):
    node: DatanodeInfo


@message(0x88, lost_blocks=U32)
class LostReply(Message):
    lost_blocks: int


@message(0x89, crc=U32, data=BYTES)
class BlockData(Message):
    crc: int
    data: bytes


@message(0x8A, nodes=_Seq(NODE_INFO))
class DatanodeListReply(Message):
    nodes: tuple[DatanodeInfo, ...]


def encode_message(msg: Message) -> bytes:
    payload = msg.payload()
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(len(payload), msg.TYPE) + payload


def decode_header(header: bytes) -> tuple[int, type[Message]]:
    if len(header) != HEADER_SIZE:
        raise ProtocolError(f"frame header needs {HEADER_SIZE} bytes, got {len(header)}")
    length, type_byte = HEADER.unpack(header)
    if length > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload {length} exceeds {MAX_PAYLOAD}")
    cls = MESSAGE_TYPES.get(type_byte)
    if cls is None:
        raise ProtocolError(f"unknown message type {type_byte:#04x}")
    return length, cls


def decode_message(frame: bytes) -> Message:
    frame = bytes(frame)
    if len(frame) < HEADER_SIZE:
        raise ProtocolError(f"frame of {len(frame)} bytes is shorter than the header")
    length, cls = decode_header(frame[:HEADER_SIZE])
    if len(frame) - HEADER_SIZE < length:
        raise ProtocolError("truncated frame")
    if len(frame) - HEADER_SIZE > length:
        raise ProtocolError("trailing bytes after frame")
    return cls.from_payload(frame[HEADER_SIZE:])
