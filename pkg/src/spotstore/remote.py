"""Typed wrappers over the wire protocol for talking to namenode and datanodes."""

from __future__ import annotations

import zlib

from spotstore import wire
from spotstore.core import BlockDescriptor, DatanodeInfo, NotFound, ObjectMetadata, ProtocolError
from spotstore.rpc import ConnectionPool


class NameNodeProxy:
    def __init__(self, address: str, pool: ConnectionPool | None = None):
        self.address = address
        self.pool = pool or ConnectionPool()

    def _call(self, msg, expect):
        return self.pool.call(self.address, msg, expect=expect)

    def create_object(self, name: str, size: int) -> ObjectMetadata:
        return self._call(wire.CreateObject(name, size), wire.MetadataReply).metadata

    def seal_object(self, name: str) -> ObjectMetadata:
        return self._call(wire.SealObject(name), wire.MetadataReply).metadata

    def get_metadata(self, name: str, include_pending: bool = False) -> ObjectMetadata:
        return self._call(wire.GetMetadata(name, include_pending), wire.MetadataReply).metadata

    def allocate_block(self, name: str, exclude=(), index: int | None = None) -> BlockDescriptor:
        msg = wire.AllocateBlock(name, -1 if index is None else index, tuple(sorted(exclude)))
        return self._call(msg, wire.BlockReply).block

    def release_reservation(self, block_id: int) -> None:
        self._call(wire.ReleaseReservation(block_id), wire.Ack)

    def commit_relocation(self, block_id: int, new_node: int, expected_version: int, reservation: int = 0) -> int:
        msg = wire.CommitRelocation(block_id, new_node, expected_version, reservation)
        return self._call(msg, wire.VersionReply).version

    def list_blocks_on_node(self, node_id: int) -> list[tuple[str, BlockDescriptor]]:
        return list(self._call(wire.ListBlocksOnNode(node_id), wire.BlockListReply).blocks)

    def begin_drain(self, node_id: int, deadline: float) -> DatanodeInfo:
        return self._call(wire.BeginDrain(node_id, deadline), wire.DatanodeReply).node

    def mark_node_terminated(self, node_id: int) -> int:
        return self._call(wire.MarkLost(node_id), wire.LostReply).lost_blocks

    def delete_object(self, name: str, if_version: int = 0) -> None:
        self._call(wire.DeleteObject(name, if_version), wire.Ack)

    def heartbeat(self, node_id: int) -> None:
        self._call(wire.Heartbeat(node_id), wire.Ack)

    def datanodes(self) -> list[DatanodeInfo]:
        return list(self._call(wire.ListDatanodes(), wire.DatanodeListReply).nodes)

    def datanode(self, node_id: int) -> DatanodeInfo:
        for info in self.datanodes():
            if info.node_id == node_id:
                return info
        raise NotFound(f"unknown datanode {node_id}")


class DataNodeProxy:
    """Stateless datanode access; the address travels with every call."""

    def __init__(self, pool: ConnectionPool | None = None):
        self.pool = pool or ConnectionPool()

    def write_block(self, address: str, block_id: int, data: bytes, offset: int = 0) -> None:
        self.pool.call(address, wire.WriteBlock(block_id, offset, zlib.crc32(data), data), expect=wire.Ack)

    def read_block(self, address: str, block_id: int, offset: int, length: int) -> bytes:
        reply = self.pool.call(address, wire.ReadBlock(block_id, offset, length), expect=wire.BlockData)
        if zlib.crc32(reply.data) != reply.crc or len(reply.data) != length:
            raise ProtocolError(f"block {block_id} from {address} failed its CRC check")
        return reply.data

    def delete_block(self, address: str, block_id: int) -> None:
        self.pool.call(address, wire.DeleteBlock(block_id), expect=wire.Ack)

    def enter_draining(self, address: str, deadline: float) -> None:
        self.pool.call(address, wire.EnterDraining(deadline), expect=wire.Ack)

    def terminate(self, address: str) -> None:
        self.pool.send_and_wait_close(address, wire.Terminate())
