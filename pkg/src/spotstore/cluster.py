"""A whole datastore in one process: namenode, relocator and datanodes on loopback sockets."""

from __future__ import annotations

import logging
import threading
from concurrent.futures import Future
from dataclasses import asdict, dataclass, fields

from spotstore.client import Client
from spotstore.core import BLOCK_SIZE, Conflict, DatanodeState
from spotstore.datanode import DataNodeServer
from spotstore.namenode import NameNodeServer
from spotstore.relocator import DEFAULT_PARALLELISM, RelocationReport, RelocatorServer

log = logging.getLogger(__name__)


@dataclass
class ClusterConfig:
    datanodes: int = 4
    capacity_blocks: int = 512
    block_size: int = BLOCK_SIZE
    egress_bytes_per_sec: float | None = 50e6
    ingress_bytes_per_sec: float | None = None
    heartbeat_timeout: float = 5.0
    heartbeat_interval: float = 1.0
    parallelism: int = DEFAULT_PARALLELISM
    host: str = "127.0.0.1"

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"mode"}
        if unknown:
            raise ValueError(f"unknown cluster config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


class LocalCluster:
    def __init__(self, config: ClusterConfig | None = None, **overrides):
        cfg = config or ClusterConfig()
        for k, v in overrides.items():
            setattr(cfg, k, v)
        self.config = cfg
        self.namenode_server: NameNodeServer | None = None
        self.relocator_server: RelocatorServer | None = None
        self.datanodes: dict[int, DataNodeServer] = {}
        self.reports: list[RelocationReport] = []
        self._clients: list[Client] = []
        self._lock = threading.Lock()

    # -- lifecycle -------------------------------------------------------------

    def start(self) -> "LocalCluster":
        cfg = self.config
        self.namenode_server = NameNodeServer(f"{cfg.host}:0", cfg.block_size, cfg.heartbeat_timeout).start()
        self.relocator_server = RelocatorServer(self.namenode_address, f"{cfg.host}:0", cfg.parallelism,
                                                stdout=None).start()
        self.relocator_server.relocator.report_sink = self._collect
        for _ in range(cfg.datanodes):
            self.spawn_datanode()
        return self

    def close(self) -> None:
        for c in self._clients:
            c.close()
        for dn in self.datanodes.values():
            dn.terminate()
        if self.relocator_server:
            self.relocator_server.close()
        if self.namenode_server:
            self.namenode_server.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def _collect(self, report: RelocationReport) -> None:
        with self._lock:
            self.reports.append(report)

    @property
    def namenode(self):
        return self.namenode_server.namenode

    @property
    def namenode_address(self) -> str:
        return self.namenode_server.address

    @property
    def relocator(self):
        return self.relocator_server.relocator

    def client(self, **kwargs) -> Client:
        c = Client(self.namenode_address, **kwargs)
        self._clients.append(c)
        return c

    # -- datanodes -------------------------------------------------------------

    def spawn_datanode(self, capacity_blocks: int | None = None) -> int:
        cfg = self.config
        dn = DataNodeServer(capacity_blocks or cfg.capacity_blocks, f"{cfg.host}:0", self.namenode_address,
                            cfg.egress_bytes_per_sec, cfg.ingress_bytes_per_sec, cfg.heartbeat_interval,
                            block_size=cfg.block_size).start()
        with self._lock:
            self.datanodes[dn.node_id] = dn
        return dn.node_id

    def datanode(self, node_id: int) -> DataNodeServer:
        return self.datanodes[node_id]

    def live_ids(self) -> list[int]:
        return sorted(n.node_id for n in self.namenode.datanodes() if n.state != DatanodeState.TERMINATED)

    def active_ids(self) -> list[int]:
        return sorted(n.node_id for n in self.namenode.datanodes() if n.state == DatanodeState.ACTIVE)

    def block_counts(self, states=(DatanodeState.ACTIVE,)) -> dict[int, int]:
        return {n.node_id: n.used_blocks for n in self.namenode.datanodes() if n.state in states}

    def notice(self, node_id: int, notice_period: float) -> Future:
        """Deliver a preemption notice: fence the datanode and start the relocator's drain."""
        relocator = self.relocator
        deadline = relocator.clock.now() + notice_period
        try:
            self.datanodes[node_id].node.enter_draining(deadline)
        except Conflict:
            pass
        return relocator.submit_notice(node_id, deadline)

    def drain(self, node_id: int, notice_period: float, terminate: bool = True) -> RelocationReport:
        """Notice, wait for the drain report, then kill the node."""
        report = self.notice(node_id, notice_period).result()
        if terminate:
            self.terminate(node_id)
        return report

    def terminate(self, node_id: int) -> int:
        """Kill a datanode now. Returns how many blocks the namenode marked lost."""
        self.datanodes[node_id].terminate()
        try:
            return self.namenode.mark_node_terminated(node_id)
        except Conflict:
            return 0
