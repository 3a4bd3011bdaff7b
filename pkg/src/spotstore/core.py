"""Domain types and error codes shared by every service and the client."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

BLOCK_SIZE = 1 << 20
MAX_NAME_BYTES = 4096
LOST = 0  # datanode id carried by a block whose bytes are gone


class ErrorCode(enum.IntEnum):
    NOT_FOUND = 1
    DATA_UNAVAILABLE = 2
    NODE_DRAINING = 3
    STALE_LOCATION = 4
    CAPACITY_EXHAUSTED = 5
    ALREADY_EXISTS = 6
    PROTOCOL_ERROR = 7
    CONFLICT = 8


class StoreError(Exception):
    """Base class for every error that crosses the wire."""

    code = ErrorCode.PROTOCOL_ERROR

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    @staticmethod
    def from_code(code: int, message: str = "") -> "StoreError":
        cls = _ERRORS.get(code)
        if cls is None:
            return ProtocolError(f"unknown error code {code}: {message}")
        return cls(message)


class NotFound(StoreError):
    code = ErrorCode.NOT_FOUND


class DataUnavailable(StoreError):
    code = ErrorCode.DATA_UNAVAILABLE


class NodeDraining(StoreError):
    code = ErrorCode.NODE_DRAINING


class StaleLocation(StoreError):
    code = ErrorCode.STALE_LOCATION


class CapacityExhausted(StoreError):
    code = ErrorCode.CAPACITY_EXHAUSTED


class AlreadyExists(StoreError):
    code = ErrorCode.ALREADY_EXISTS


class ProtocolError(StoreError):
    code = ErrorCode.PROTOCOL_ERROR


class Conflict(StoreError):
    code = ErrorCode.CONFLICT


_ERRORS = {cls.code: cls for cls in (NotFound, DataUnavailable, NodeDraining, StaleLocation,
                                     CapacityExhausted, AlreadyExists, ProtocolError, Conflict)}


class DatanodeState(enum.IntEnum):
    ACTIVE = 0
    DRAINING = 1
    TERMINATED = 2

    def can_become(self, other: "DatanodeState") -> bool:
        return other > self


def validate_object_name(name: str) -> str:
    """Return ``name`` unchanged if it is a legal object name, else raise ProtocolError.

    Names are ``/``-separated paths. A single leading ``/`` is tolerated; after it
    no segment may be empty, ``.`` or ``..``.
    """
    if not isinstance(name, str) or not name:
        raise ProtocolError("object name must be a non-empty string")
    try:
        encoded = name.encode("utf-8")
    except UnicodeEncodeError:
        raise ProtocolError("object name is not valid UTF-8") from None
    if len(encoded) > MAX_NAME_BYTES:
        raise ProtocolError(f"object name longer than {MAX_NAME_BYTES} bytes")
    body = name[1:] if name.startswith("/") else name
    for segment in body.split("/"):
        if segment in ("", ".", ".."):
            raise ProtocolError(f"illegal path segment {segment!r} in {name!r}")
    return name


def block_lengths(size: int, block_size: int = BLOCK_SIZE) -> list[int]:
    """Split an object of ``size`` bytes into fixed-size block lengths."""
    if size < 0:
        raise ValueError("size must be >= 0")
    full, rest = divmod(size, block_size)
    return [block_size] * full + ([rest] if rest else [])


@dataclass(frozen=True)
class BlockDescriptor:
    block_id: int
    datanode: int
    length: int
    index: int
    version: int = 0
    address: str = ""

    @property
    def lost(self) -> bool:
        return self.datanode == LOST


@dataclass(frozen=True)
class ObjectMetadata:
    name: str
    size: int
    version: int
    blocks: tuple[BlockDescriptor, ...] = field(default_factory=tuple)
    sealed: bool = True

    @property
    def lost_blocks(self) -> list[BlockDescriptor]:
        return [b for b in self.blocks if b.lost]

    def block(self, block_id: int) -> BlockDescriptor | None:
        for b in self.blocks:
            if b.block_id == block_id:
                return b
        return None


@dataclass(frozen=True)
class DatanodeInfo:
    node_id: int
    address: str
    capacity_blocks: int
    used_blocks: int
    state: DatanodeState
    deadline: float = 0.0
    last_heartbeat: float = 0.0
