"""Ephemeral in-memory block store that drains spot datanodes before they are reclaimed."""

from spotstore.core import (
    BLOCK_SIZE,
    BlockDescriptor,
    DatanodeInfo,
    DatanodeState,
    ErrorCode,
    ObjectMetadata,
    StoreError,
)

__version__ = "0.1.0"

__all__ = [
    "BLOCK_SIZE",
    "BlockDescriptor",
    "DatanodeInfo",
    "DatanodeState",
    "ErrorCode",
    "ObjectMetadata",
    "StoreError",
]
