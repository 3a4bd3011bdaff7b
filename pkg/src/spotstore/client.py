"""Client library.

Objects are written once: ``put_object`` splits the bytes into fixed-size
blocks, writes each to the datanode chosen by the namenode and then seals the
object. Block locations are cached; a data operation that fails against a
cached location (connection refused, block missing) invalidates the entry,
fetches fresh metadata and retries. Writes refused by a draining datanode are
re-allocated elsewhere.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

from spotstore.core import (
    AlreadyExists,
    BlockDescriptor,
    CapacityExhausted,
    Conflict,
    DataUnavailable,
    NodeDraining,
    NotFound,
    ObjectMetadata,
    StaleLocation,
    validate_object_name,
)
from spotstore.remote import DataNodeProxy, NameNodeProxy
from spotstore.rpc import ConnectionLost, ConnectionPool

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 5
    drain_poll_interval: float = 0.25
    backoff: tuple[float, ...] = (0.0, 0.1, 0.2, 0.4, 0.8)

    def __post_init__(self):
        if self.max_retries < 1:
            raise ValueError("max_retries must be >= 1")

    def delay(self, attempt: int) -> float:
        if not self.backoff:
            return 0.0
        return self.backoff[min(attempt, len(self.backoff) - 1)]


class MetadataCache:
    """Bounded LRU of object metadata. An entry is only replaced by a newer or equal version."""

    def __init__(self, capacity: int = 4096):
        self.capacity = capacity
        self._entries: OrderedDict[str, tuple[ObjectMetadata, float]] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, name: str) -> ObjectMetadata | None:
        with self._lock:
            entry = self._entries.get(name)
            if entry is None:
                return None
            self._entries.move_to_end(name)
            return entry[0]

    def put(self, meta: ObjectMetadata) -> ObjectMetadata:
        """Store ``meta`` unless a newer version is cached; return whichever is kept."""
        with self._lock:
            entry = self._entries.get(meta.name)
            if entry is not None and entry[0].version > meta.version:
                return entry[0]
            self._entries[meta.name] = (meta, time.monotonic())
            self._entries.move_to_end(meta.name)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)
            return meta

    def invalidate(self, name: str) -> None:
        with self._lock:
            self._entries.pop(name, None)

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class ClientStats:
    metadata_fetches: int = 0
    retries: int = 0
    reallocations: int = 0
    data_unavailable: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, counter: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, counter, getattr(self, counter) + n)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {k: getattr(self, k) for k in ("metadata_fetches", "retries", "reallocations", "data_unavailable")}


class Client:
    def __init__(self, namenode: str, retry: RetryPolicy | None = None, cache_capacity: int = 4096,
                 fanout: int = 8, idempotent_delete: bool = False, timeout: float = 30.0):
        self.pool = ConnectionPool(timeout=timeout)
        self.namenode = NameNodeProxy(namenode, self.pool)
        self.datanodes = DataNodeProxy(self.pool)
        self.retry = retry or RetryPolicy()
        self.cache = MetadataCache(cache_capacity)
        self.stats = ClientStats()
        self.idempotent_delete = idempotent_delete
        self.fanout = fanout
        self._executor = ThreadPoolExecutor(max_workers=fanout, thread_name_prefix="client-io")
        self._refresh_locks: dict[str, threading.Lock] = {}
        self._refresh_guard = threading.Lock()

    def close(self) -> None:
        self._executor.shutdown(wait=False)
        self.pool.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- metadata -------------------------------------------------------------

    def invalidate(self, name: str) -> None:
        self.cache.invalidate(name)

    def lookup_fresh(self, name: str) -> ObjectMetadata:
        self.stats.bump("metadata_fetches")
        try:
            meta = self.namenode.get_metadata(name)
        except NotFound:
            self.cache.invalidate(name)
            raise
        return self.cache.put(meta)

    def lookup(self, name: str) -> ObjectMetadata:
        meta = self.cache.get(name)
        return meta if meta is not None else self.lookup_fresh(name)

    stat = lookup_fresh

    def _refresh(self, name: str, seen_version: int) -> ObjectMetadata:
        """Fetch fresh metadata unless another caller already cached something newer."""
        with self._refresh_guard:
            lock = self._refresh_locks.setdefault(name, threading.Lock())
        with lock:
            cached = self.cache.get(name)
            if cached is not None and cached.version > seen_version:
                return cached
            return self.lookup_fresh(name)

    # -- reads ------------------------------------------------------------------

    def _read_block(self, name: str, meta: ObjectMetadata, index: int) -> bytes:
        last: Exception | None = None
        for attempt in range(self.retry.max_retries):
            desc = meta.blocks[index]
            if desc.lost:
                self.stats.bump("data_unavailable")
                err = DataUnavailable(f"block {index} of {name!r} was lost in a preemption")
                err.metadata = meta
                raise err
            try:
                return self.datanodes.read_block(desc.address, desc.block_id, 0, desc.length)
            except (ConnectionLost, NotFound, StaleLocation) as e:
                last = e
            self.stats.bump("retries")
            time.sleep(self.retry.delay(attempt))
            meta = self._refresh(name, meta.version)
            if len(meta.blocks) <= index:
                raise NotFound(f"object {name!r} changed while reading")
        raise StaleLocation(f"block {index} of {name!r} still unreachable after "
                            f"{self.retry.max_retries} attempts: {last}")

    def get_object(self, name: str) -> bytes:
        meta = self.lookup(name)
        if len(meta.blocks) <= 1 or self.fanout <= 1:
            parts = [self._read_block(name, meta, i) for i in range(len(meta.blocks))]
        else:
            parts = list(self._executor.map(lambda i: self._read_block(name, meta, i), range(len(meta.blocks))))
        return b"".join(parts)

    # -- writes -----------------------------------------------------------------

    def _write_block(self, name: str, desc: BlockDescriptor, chunk: bytes) -> None:
        excluded: set[int] = set()
        for attempt in range(self.retry.max_retries):
            try:
                self.datanodes.write_block(desc.address, desc.block_id, chunk)
                return
            except (NodeDraining, ConnectionLost, CapacityExhausted) as e:
                last = e
            if attempt + 1 == self.retry.max_retries:
                break
            # the namenode fences draining nodes from allocation; ask for a new home
            excluded.add(desc.datanode)
            self.stats.bump("retries")
            self.stats.bump("reallocations")
            time.sleep(self.retry.delay(attempt))
            desc = self.namenode.allocate_block(name, excluded, index=desc.index)
        raise last

    def put_object(self, name: str, data: bytes) -> ObjectMetadata:
        validate_object_name(name)
        data = memoryview(bytes(data))
        meta = self.namenode.create_object(name, len(data))
        try:
            offsets = []
            pos = 0
            for desc in meta.blocks:
                offsets.append((desc, bytes(data[pos:pos + desc.length])))
                pos += desc.length
            if len(offsets) <= 1 or self.fanout <= 1:
                for desc, chunk in offsets:
                    self._write_block(name, desc, chunk)
            else:
                list(self._executor.map(lambda dc: self._write_block(name, *dc), offsets))
            meta = self.namenode.seal_object(name)
        except BaseException:
            try:
                self.namenode.delete_object(name)
            except (NotFound, Conflict, ConnectionLost):
                pass
            raise
        return self.cache.put(meta)

    def delete_object(self, name: str) -> None:
        self.cache.invalidate(name)
        try:
            self.namenode.delete_object(name)
        except NotFound:
            if not self.idempotent_delete:
                raise

    # -- lineage ----------------------------------------------------------------

    def recompute_hook(self, name: str, generator: Callable[[], bytes]) -> bytes:
        """Read ``name``; if part of it was lost, regenerate it with ``generator`` and store it again."""
        contended = False
        for attempt in range(self.retry.max_retries * 4):
            try:
                return self.get_object(name)
            except DataUnavailable as e:
                try:
                    self.namenode.delete_object(name, if_version=e.metadata.version)
                except Conflict:
                    # metadata moved on (relocation commit or another regenerator); look again
                    self.invalidate(name)
                    continue
                except NotFound:
                    pass
                self.invalidate(name)
            except NotFound:
                if not contended:
                    raise
                # a concurrent regenerator holds the name but has not sealed it yet
                self.invalidate(name)
                time.sleep(self.retry.drain_poll_interval)
                continue
            data = generator()
            try:
                self.put_object(name, data)
                return data
            except AlreadyExists:
                contended = True
        raise StaleLocation(f"could not regenerate {name!r}")
