"""In-memory block storage node.

A datanode holds block bytes keyed by BlockId. Once it enters draining mode
every write is refused with ``NodeDraining`` while reads keep being served,
so the content seen by the relocator is frozen. Egress and ingress can be
capped with token buckets to emulate a VM network link.
"""

from __future__ import annotations

import hashlib
import ipaddress
import logging
import threading
import zlib
from dataclasses import dataclass, field

from spotstore import wire
from spotstore.core import (
    BLOCK_SIZE,
    CapacityExhausted,
    Conflict,
    DatanodeState,
    NodeDraining,
    NotFound,
    ProtocolError,
)
from spotstore.rpc import ConnectionLost, ConnectionPool, RpcServer
from spotstore.throttle import make_bucket

log = logging.getLogger(__name__)


@dataclass
class _Block:
    data: bytearray = field(default_factory=bytearray)
    extents: list[list[int]] = field(default_factory=list)
    crc: int = 0

    def covers(self, start: int, end: int) -> bool:
        if start == end:
            return True
        return any(a <= start and end <= b for a, b in self.extents)

    def add_extent(self, start: int, end: int) -> None:
        merged = []
        for a, b in sorted(self.extents + [[start, end]]):
            if merged and a <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], b)
            else:
                merged.append([a, b])
        self.extents = merged


class DataNode:
    """Block store and lifecycle state of one storage node."""

    def __init__(self, capacity_blocks: int, block_size: int = BLOCK_SIZE,
                 egress_bytes_per_sec: float | None = None, ingress_bytes_per_sec: float | None = None):
        if capacity_blocks <= 0:
            raise ValueError("capacity_blocks must be > 0")
        self.capacity_blocks = capacity_blocks
        self.block_size = block_size
        self.egress = make_bucket(egress_bytes_per_sec)
        self.ingress = make_bucket(ingress_bytes_per_sec)
        self.state = DatanodeState.ACTIVE
        self.deadline = 0.0
        self._blocks: dict[int, _Block] = {}
        self._lock = threading.Lock()
        self._fence_requested = False
        self.bytes_read = 0
        self.bytes_written = 0

    def write_block(self, block_id: int, offset: int, data: bytes, crc: int) -> None:
        if offset < 0 or offset + len(data) > self.block_size:
            raise ProtocolError(f"write [{offset}, {offset + len(data)}) exceeds block size {self.block_size}")
        if zlib.crc32(data) != crc:
            raise ProtocolError(f"CRC mismatch on block {block_id}")
        self.ingress.consume(len(data))
        if self._fence_requested:
            raise NodeDraining("node is draining, writes are fenced")
        with self._lock:
            # the draining transition takes this lock too, so it acts as a write barrier
            if self.state != DatanodeState.ACTIVE:
                raise NodeDraining(f"node is {self.state.name.lower()}, writes are fenced")
            block = self._blocks.get(block_id)
            if block is None:
                if len(self._blocks) >= self.capacity_blocks:
                    raise CapacityExhausted(f"all {self.capacity_blocks} blocks in use")
                block = self._blocks[block_id] = _Block()
            end = offset + len(data)
            if len(block.data) < end:
                block.data.extend(bytes(end - len(block.data)))
            block.data[offset:end] = data
            block.add_extent(offset, end)
            block.crc = zlib.crc32(block.data)
            self.bytes_written += len(data)

    def read_block(self, block_id: int, offset: int, length: int) -> tuple[bytes, int]:
        with self._lock:
            block = self._blocks.get(block_id)
            if block is None:
                raise NotFound(f"block {block_id} not stored here")
            if not block.covers(offset, offset + length):
                raise ProtocolError(f"range [{offset}, {offset + length}) of block {block_id} not written")
            if zlib.crc32(block.data) != block.crc:
                raise ProtocolError(f"stored block {block_id} fails its CRC")
            data = bytes(block.data[offset:offset + length])
        self.egress.consume(len(data))
        self.bytes_read += len(data)
        return data, zlib.crc32(data)

    def delete_block(self, block_id: int) -> None:
        with self._lock:
            self._blocks.pop(block_id, None)

    def enter_draining(self, deadline: float) -> None:
        # stop new writers from queueing on the lock first; Python locks are not fair
        if self.state == DatanodeState.ACTIVE:
            self._fence_requested = True
        with self._lock:
            if self.state != DatanodeState.ACTIVE:
                raise Conflict(f"node is already {self.state.name.lower()}")
            self.state = DatanodeState.DRAINING
            self.deadline = deadline

    def terminate(self) -> None:
        with self._lock:
            self.state = DatanodeState.TERMINATED
            self._blocks.clear()

    def block_ids(self) -> list[int]:
        with self._lock:
            return sorted(self._blocks)

    def digest(self) -> str:
        """SHA-256 over every stored block id and its bytes."""
        h = hashlib.sha256()
        with self._lock:
            for bid in sorted(self._blocks):
                h.update(bid.to_bytes(8, "big"))
                h.update(self._blocks[bid].data)
        return h.hexdigest()

    def __len__(self) -> int:
        return len(self._blocks)


def _is_loopback(host: str) -> bool:
    try:
        return ipaddress.ip_address(host).is_loopback
    except ValueError:
        return host == "localhost"


class DataNodeServer:
    """Serves a DataNode over the wire and keeps it registered with the namenode."""

    def __init__(self, capacity_blocks: int, listen: str = "127.0.0.1:0", namenode: str | None = None,
                 egress_bytes_per_sec: float | None = None, ingress_bytes_per_sec: float | None = None,
                 heartbeat_interval: float = 1.0, control_peers: tuple[str, ...] = (),
                 block_size: int = BLOCK_SIZE):
        self.node = DataNode(capacity_blocks, block_size, egress_bytes_per_sec, ingress_bytes_per_sec)
        self.rpc = RpcServer(self.handle, listen, name="datanode")
        self.address = self.rpc.address
        self.namenode = namenode
        self.node_id: int | None = None
        self.heartbeat_interval = heartbeat_interval
        self.control_peers = set(control_peers)
        self._pool = ConnectionPool(timeout=5.0)
        self._stop = threading.Event()

    def start(self) -> "DataNodeServer":
        self.rpc.start()
        if self.namenode:
            reply = self._pool.call(self.namenode, wire.Register(self.address, self.node.capacity_blocks),
                                    expect=wire.RegisterReply)
            self.node_id = reply.node_id
            self.node.block_size = reply.block_size
            if self.heartbeat_interval:
                threading.Thread(target=self._heartbeat_loop, name="datanode-heartbeat", daemon=True).start()
        return self

    def _heartbeat_loop(self) -> None:
        while not self._stop.wait(self.heartbeat_interval):
            try:
                self._pool.call(self.namenode, wire.Heartbeat(self.node_id), expect=wire.Ack)
            except Conflict:
                return
            except (ConnectionLost, NotFound) as e:
                log.warning("heartbeat to %s failed: %s", self.namenode, e)

    def _check_control(self, peer: str) -> None:
        if not (_is_loopback(peer) or peer in self.control_peers):
            raise ProtocolError(f"control messages not accepted from {peer}")

    def handle(self, msg: wire.Message, peer: str) -> wire.Message | None:
        node = self.node
        if isinstance(msg, wire.ReadBlock):
            data, crc = node.read_block(msg.block_id, msg.offset, msg.length)
            return wire.BlockData(crc, data)
        if isinstance(msg, wire.WriteBlock):
            node.write_block(msg.block_id, msg.offset, msg.data, msg.crc)
            return wire.Ack()
        if isinstance(msg, wire.DeleteBlock):
            node.delete_block(msg.block_id)
            return wire.Ack()
        if isinstance(msg, wire.EnterDraining):
            self._check_control(peer)
            node.enter_draining(msg.deadline)
            return wire.Ack()
        if isinstance(msg, wire.Terminate):
            self._check_control(peer)
            self.terminate()
            return None
        raise ProtocolError(f"datanode does not handle {type(msg).__name__}")

    def terminate(self) -> None:
        """Drop every block and refuse further connections. Idempotent."""
        self._stop.set()
        self.node.terminate()
        self.rpc.close()
        self._pool.close()

    @property
    def terminated(self) -> bool:
        return self.rpc.closed
