"""Metadata service.

Holds the flat namespace, the block -> datanode map, the datanode registry and
its lifecycle, block placement, relocation commits and lost-block bookkeeping.
Every public method of :class:`NameNode` runs under one lock, so operations are
linearizable; datanode I/O (block deletes) happens after the lock is released.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

from spotstore import wire
from spotstore.clock import RealClock
from spotstore.core import (
    BLOCK_SIZE,
    LOST,
    AlreadyExists,
    BlockDescriptor,
    CapacityExhausted,
    Conflict,
    DatanodeInfo,
    DatanodeState,
    NotFound,
    ObjectMetadata,
    ProtocolError,
    StaleLocation,
    block_lengths,
    validate_object_name,
)
from spotstore.rpc import ConnectionLost, ConnectionPool, RpcServer, parse_address

log = logging.getLogger(__name__)

PLACEMENT_POLICIES = ("round-robin",)


@dataclass
class _Node:
    node_id: int
    address: str
    capacity_blocks: int
    used_blocks: int = 0
    state: DatanodeState = DatanodeState.ACTIVE
    deadline: float = 0.0
    last_heartbeat: float = 0.0

    def info(self) -> DatanodeInfo:
        return DatanodeInfo(self.node_id, self.address, self.capacity_blocks, self.used_blocks,
                            self.state, self.deadline, self.last_heartbeat)


@dataclass
class _Block:
    block_id: int
    name: str
    index: int
    length: int
    node: int
    version: int = 1


@dataclass
class _Object:
    name: str
    size: int
    version: int
    block_ids: list[int] = field(default_factory=list)
    sealed: bool = False


class NameNode:
    def __init__(self, block_size: int = BLOCK_SIZE, heartbeat_timeout: float = 5.0, clock=None,
                 placement_policy: str = "round-robin",
                 on_delete: Callable[[list[tuple[str, int]]], None] | None = None):
        if placement_policy not in PLACEMENT_POLICIES:
            raise ValueError(f"unknown placement policy {placement_policy!r}")
        self.block_size = block_size
        self.heartbeat_timeout = heartbeat_timeout
        self.clock = clock or RealClock()
        self.on_delete = on_delete
        self._lock = threading.RLock()
        self._nodes: dict[int, _Node] = {}
        self._objects: dict[str, _Object] = {}
        self._blocks: dict[int, _Block] = {}
        self._reservations: dict[int, int] = {}  # reservation block id -> node id
        self._next_node = 1
        self._next_block = 1
        self._seq = 0
        self._rr_last = 0
        self.lost_count = 0
        self.allocated_total = 0
        self.freed_total = 0

    # -- helpers (lock held) -------------------------------------------------

    def _version(self) -> int:
        self._seq += 1
        return self._seq

    def _node(self, node_id: int) -> _Node:
        node = self._nodes.get(node_id)
        if node is None:
            raise NotFound(f"unknown datanode {node_id}")
        return node

    def _object(self, name: str, include_pending: bool = True) -> _Object:
        obj = self._objects.get(name)
        if obj is None or not (obj.sealed or include_pending):
            raise NotFound(f"no object named {name!r}")
        return obj

    def _descriptor(self, blk: _Block) -> BlockDescriptor:
        address = self._nodes[blk.node].address if blk.node != LOST else ""
        return BlockDescriptor(blk.block_id, blk.node, blk.length, blk.index, blk.version, address)

    def _metadata(self, obj: _Object) -> ObjectMetadata:
        return ObjectMetadata(obj.name, obj.size, obj.version,
                              tuple(self._descriptor(self._blocks[b]) for b in obj.block_ids), obj.sealed)

    def _place(self, exclude: Iterable[int] = ()) -> _Node:
        exclude = set(exclude)
        eligible = [n for nid, n in sorted(self._nodes.items())
                    if n.state == DatanodeState.ACTIVE and n.used_blocks < n.capacity_blocks
                    and nid not in exclude]
        if not eligible:
            raise CapacityExhausted("no active datanode with free capacity")
        chosen = next((n for n in eligible if n.node_id > self._rr_last), eligible[0])
        self._rr_last = chosen.node_id
        chosen.used_blocks += 1
        self.allocated_total += 1
        return chosen

    def _new_block_id(self) -> int:
        bid = self._next_block
        self._next_block += 1
        return bid

    def _free_block(self, blk: _Block) -> tuple[str, int] | None:
        """Forget a block; return (address, id) if a live datanode still holds its bytes."""
        del self._blocks[blk.block_id]
        self.freed_total += 1
        if blk.node == LOST:
            self.lost_count -= 1
            return None
        node = self._nodes[blk.node]
        node.used_blocks -= 1
        if node.state == DatanodeState.TERMINATED:
            return None
        return node.address, blk.block_id

    def _release(self, reservation: int) -> None:
        node_id = self._reservations.pop(reservation, None)
        if node_id is not None:
            self._nodes[node_id].used_blocks -= 1
            self.freed_total += 1

    # -- datanode registry ---------------------------------------------------

    def register_datanode(self, address: str, capacity_blocks: int) -> int:
        parse_address(address)
        if capacity_blocks <= 0:
            raise ProtocolError("capacity_blocks must be > 0")
        with self._lock:
            node_id = self._next_node
            self._next_node += 1
            self._nodes[node_id] = _Node(node_id, address, capacity_blocks, last_heartbeat=self.clock.now())
            log.info("registered datanode %d at %s (%d blocks)", node_id, address, capacity_blocks)
            return node_id

    def heartbeat(self, node_id: int) -> None:
        with self._lock:
            node = self._node(node_id)
            if node.state == DatanodeState.TERMINATED:
                raise Conflict(f"datanode {node_id} is terminated")
            node.last_heartbeat = self.clock.now()

    def check_heartbeats(self) -> list[int]:
        """Terminate every node silent for longer than the heartbeat timeout."""
        with self._lock:
            now = self.clock.now()
            silent = [n.node_id for n in self._nodes.values()
                      if n.state != DatanodeState.TERMINATED
                      and now - n.last_heartbeat > self.heartbeat_timeout]
            for node_id in silent:
                log.warning("datanode %d missed heartbeats, treating as terminated", node_id)
                self.mark_node_terminated(node_id)
            return silent

    def datanodes(self) -> list[DatanodeInfo]:
        with self._lock:
            return [n.info() for _, n in sorted(self._nodes.items())]

    def datanode(self, node_id: int) -> DatanodeInfo:
        with self._lock:
            return self._node(node_id).info()

    def begin_drain(self, node_id: int, deadline: float) -> DatanodeInfo:
        with self._lock:
            node = self._node(node_id)
            if node.state != DatanodeState.ACTIVE:
                raise Conflict(f"datanode {node_id} is already {node.state.name.lower()}")
            node.state = DatanodeState.DRAINING
            node.deadline = deadline
            return node.info()

    def mark_node_terminated(self, node_id: int) -> int:
        """Terminate a node; every block still located on it becomes Lost. Returns the lost count."""
        with self._lock:
            node = self._node(node_id)
            if node.state == DatanodeState.TERMINATED:
                raise Conflict(f"datanode {node_id} is already terminated")
            node.state = DatanodeState.TERMINATED
            for res, nid in list(self._reservations.items()):
                if nid == node_id:
                    self._release(res)
            lost = 0
            touched = set()
            for blk in self._blocks.values():
                if blk.node == node_id:
                    blk.node = LOST
                    blk.version += 1
                    node.used_blocks -= 1
                    lost += 1
                    touched.add(blk.name)
            self.lost_count += lost
            for name in touched:
                self._objects[name].version = self._version()
            assert node.used_blocks == 0, node
            return lost

    # -- namespace -----------------------------------------------------------

    def create_object(self, name: str, size: int) -> ObjectMetadata:
        """Reserve ``name`` and place its blocks. The object stays invisible until sealed."""
        validate_object_name(name)
        with self._lock:
            if name in self._objects:
                raise AlreadyExists(f"object {name!r} exists")
            obj = _Object(name, size, self._version())
            placed = []
            try:
                for index, length in enumerate(block_lengths(size, self.block_size)):
                    node = self._place()
                    blk = _Block(self._new_block_id(), name, index, length, node.node_id)
                    self._blocks[blk.block_id] = blk
                    placed.append(blk)
            except CapacityExhausted:
                for blk in placed:
                    self._free_block(blk)
                raise
            obj.block_ids = [b.block_id for b in placed]
            self._objects[name] = obj
            return self._metadata(obj)

    def seal_object(self, name: str) -> ObjectMetadata:
        with self._lock:
            obj = self._object(name)
            if obj.sealed:
                raise Conflict(f"object {name!r} already sealed")
            obj.sealed = True
            obj.version = self._version()
            return self._metadata(obj)

    def get_metadata(self, name: str, include_pending: bool = False) -> ObjectMetadata:
        with self._lock:
            return self._metadata(self._object(name, include_pending))

    def allocate_block(self, name: str, exclude: Iterable[int] = (), index: int | None = None) -> BlockDescriptor:
        """Place a block on an Active node.

        With ``index`` the block at that position of a pending object is replaced
        by a fresh BlockId. Without it a relocation target is reserved; the
        returned block id is the reservation handle for ``commit_relocation``.
        """
        with self._lock:
            obj = self._object(name)
            if index is None:
                node = self._place(exclude)
                rid = self._new_block_id()
                self._reservations[rid] = node.node_id
                return BlockDescriptor(rid, node.node_id, 0, 0, 0, node.address)
            if obj.sealed:
                raise Conflict(f"object {name!r} is sealed; blocks are immutable")
            if not 0 <= index < len(obj.block_ids):
                raise ProtocolError(f"block index {index} out of range for {name!r}")
            node = self._place(exclude)
            old = self._blocks[obj.block_ids[index]]
            stale = self._free_block(old)
            blk = _Block(self._new_block_id(), name, index, old.length, node.node_id)
            self._blocks[blk.block_id] = blk
            obj.block_ids[index] = blk.block_id
            obj.version = self._version()
            desc = self._descriptor(blk)
        if stale and self.on_delete:
            self.on_delete([stale])
        return desc

    def release_reservation(self, reservation: int) -> None:
        with self._lock:
            self._release(reservation)

    def commit_relocation(self, block_id: int, new_node: int, expected_version: int, reservation: int = 0) -> int:
        """Compare-and-set a block's location. Always consumes ``reservation``."""
        with self._lock:
            reserved = self._reservations.get(reservation) if reservation else None
            if reservation and reserved is None:
                raise NotFound(f"unknown reservation {reservation}")
            try:
                if reserved is not None and reserved != new_node:
                    raise ProtocolError(f"reservation {reservation} is for node {reserved}, not {new_node}")
                blk = self._blocks.get(block_id)
                if blk is None:
                    raise NotFound(f"unknown block {block_id}")
                if blk.node == LOST:
                    raise Conflict(f"block {block_id} is lost")
                if blk.version != expected_version:
                    raise StaleLocation(f"block {block_id} is at version {blk.version}, not {expected_version}")
                target = self._node(new_node)
                if target.state != DatanodeState.ACTIVE:
                    raise Conflict(f"target datanode {new_node} is {target.state.name.lower()}")
                if target.node_id == blk.node:
                    raise Conflict(f"block {block_id} already on datanode {new_node}")
                if reserved is None and target.used_blocks >= target.capacity_blocks:
                    raise CapacityExhausted(f"datanode {new_node} is full")
            except Exception:
                self._release(reservation)
                raise
            if reserved is not None:
                # the reserved slot becomes the block's slot
                del self._reservations[reservation]
                self.freed_total += 1
            else:
                target.used_blocks += 1
            self._nodes[blk.node].used_blocks -= 1
            blk.node = new_node
            blk.version += 1
            self._objects[blk.name].version = self._version()
            return blk.version

    def list_blocks_on_node(self, node_id: int) -> list[tuple[str, BlockDescriptor]]:
        with self._lock:
            self._node(node_id)
            return [(b.name, self._descriptor(b)) for _, b in sorted(self._blocks.items()) if b.node == node_id]

    def delete_object(self, name: str, if_version: int = 0) -> None:
        with self._lock:
            obj = self._object(name)
            if if_version and obj.version != if_version:
                raise Conflict(f"object {name!r} is at version {obj.version}, not {if_version}")
            del self._objects[name]
            stale = [s for s in (self._free_block(self._blocks[b]) for b in obj.block_ids) if s]
        if stale and self.on_delete:
            self.on_delete(stale)

    # -- introspection ---------------------------------------------------------

    def block_count(self) -> int:
        with self._lock:
            return len(self._blocks)

    def reservation_count(self) -> int:
        with self._lock:
            return len(self._reservations)

    def object_names(self) -> list[str]:
        with self._lock:
            return sorted(n for n, o in self._objects.items() if o.sealed)


def load_config(path: str | None) -> dict:
    cfg = {"block_size_bytes": BLOCK_SIZE, "heartbeat_timeout_ms": 5000, "placement_policy": "round-robin"}
    if path:
        with open(path) as f:
            user = json.load(f)
        unknown = set(user) - set(cfg)
        if unknown:
            raise ValueError(f"unknown namenode config keys: {sorted(unknown)}")
        cfg.update(user)
    return cfg


class NameNodeServer:
    def __init__(self, listen: str = "127.0.0.1:9000", block_size: int = BLOCK_SIZE,
                 heartbeat_timeout: float = 5.0, placement_policy: str = "round-robin", clock=None):
        self._pool = ConnectionPool(timeout=2.0)
        self.namenode = NameNode(block_size, heartbeat_timeout, clock, placement_policy, self._delete_blocks)
        self.rpc = RpcServer(self.handle, listen, name="namenode")
        self.address = self.rpc.address
        self._stop = threading.Event()

    @classmethod
    def from_config(cls, listen: str, config: dict) -> "NameNodeServer":
        return cls(listen, config["block_size_bytes"], config["heartbeat_timeout_ms"] / 1000.0,
                   config["placement_policy"])

    def start(self) -> "NameNodeServer":
        self.rpc.start()
        threading.Thread(target=self._reaper, name="namenode-reaper", daemon=True).start()
        return self

    def close(self) -> None:
        self._stop.set()
        self.rpc.close()
        self._pool.close()

    def _reaper(self) -> None:
        interval = max(self.namenode.heartbeat_timeout / 4, 0.05)
        while not self._stop.wait(interval):
            self.namenode.check_heartbeats()

    def _delete_blocks(self, targets: list[tuple[str, int]]) -> None:
        for address, block_id in targets:
            try:
                self._pool.call(address, wire.DeleteBlock(block_id), expect=wire.Ack)
            except (ConnectionLost, ProtocolError) as e:
                log.debug("best-effort delete of block %d at %s failed: %s", block_id, address, e)

    def handle(self, msg: wire.Message, peer: str) -> wire.Message:
        nn = self.namenode
        if isinstance(msg, wire.GetMetadata):
            return wire.MetadataReply(nn.get_metadata(msg.name, msg.include_pending))
        if isinstance(msg, wire.CreateObject):
            return wire.MetadataReply(nn.create_object(msg.name, msg.size))
        if isinstance(msg, wire.SealObject):
            return wire.MetadataReply(nn.seal_object(msg.name))
        if isinstance(msg, wire.AllocateBlock):
            index = None if msg.index < 0 else msg.index
            return wire.BlockReply(nn.allocate_block(msg.name, msg.exclude, index))
        if isinstance(msg, wire.CommitRelocation):
            return wire.VersionReply(nn.commit_relocation(msg.block_id, msg.new_node, msg.expected_version,
                                                          msg.reservation))
        if isinstance(msg, wire.ReleaseReservation):
            nn.release_reservation(msg.block_id)
            return wire.Ack()
        if isinstance(msg, wire.DeleteObject):
            nn.delete_object(msg.name, msg.if_version)
            return wire.Ack()
        if isinstance(msg, wire.Heartbeat):
            nn.heartbeat(msg.node_id)
            return wire.Ack()
        if isinstance(msg, wire.Register):
            if msg.protocol_version != wire.PROTOCOL_VERSION:
                raise ProtocolError(f"unsupported protocol version {msg.protocol_version}")
            return wire.RegisterReply(nn.register_datanode(msg.address, msg.capacity_blocks), nn.block_size)
        if isinstance(msg, wire.ListBlocksOnNode):
            return wire.BlockListReply(tuple(nn.list_blocks_on_node(msg.node_id)))
        if isinstance(msg, wire.BeginDrain):
            return wire.DatanodeReply(nn.begin_drain(msg.node_id, msg.deadline))
        if isinstance(msg, wire.MarkLost):
            return wire.LostReply(nn.mark_node_terminated(msg.node_id))
        if isinstance(msg, wire.ListDatanodes):
            return wire.DatanodeListReply(tuple(nn.datanodes()))
        raise ProtocolError(f"namenode does not handle {type(msg).__name__}")
