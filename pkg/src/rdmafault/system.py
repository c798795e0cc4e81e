"""Nodes and the fabric that connects them.

A node bundles one memory manager, one IOMMU, one engine with its receive
fault FIFO and one fault driver. The fabric is a hop count: traffic between
distinct nodes crosses ``hops`` hops, loopback traffic crosses none.
"""

from __future__ import annotations

from .driver import DriverConfig, FaultDriver, UserThread
from .engine import EngineConfig, RdmaEngine, WireCostModel
from .errors import ConfigError, UnboundDomain
from .fifo import DEFAULT_FIFO_DEPTH, FaultFifo
from .memory import DEFAULT_PIN_LIMIT, AddressSpace, CostModel, MemoryManager
from .sim import Simulator
from .smmu import NUM_CONTEXT_BANKS, FaultConfig, SctlrFlags, Smmu, SmmuConfig

NODE_COORD_BITS = 22


class Node:
    def __init__(self, system: System, coord: int, costs: CostModel | None = None,
                 smmu_config: SmmuConfig | None = None, engine_config: EngineConfig | None = None,
                 driver_config: DriverConfig | None = None, fifo_depth: int = DEFAULT_FIFO_DEPTH) -> None:
        if not 0 <= coord < (1 << NODE_COORD_BITS):
            raise ConfigError(f"node coordinate {coord:#x} exceeds 22 bits")
        self.system = system
        self.sim = system.sim
        self.coord = coord
        self.mm = MemoryManager(costs)
        self.fifo = FaultFifo(fifo_depth)
        self.engine = RdmaEngine(self, system, engine_config)
        self.driver = FaultDriver(self, driver_config)
        self.smmu = Smmu(self.sim, self.mm, smmu_config, on_context_fault=self.driver.context_fault_irq)
        self.spaces: dict[tuple[int, int], AddressSpace] = {}
        self._banks: dict[tuple[int, int], int] = {}

    def bind_process(self, pdid: int, proc_idx: int, flags: SctlrFlags | None = None,
                     pin_limit: int = DEFAULT_PIN_LIMIT) -> AddressSpace:
        """Create a process address space, give it a context bank and a helper thread."""
        key = (pdid, proc_idx)
        if key in self.spaces:
            raise ConfigError(f"pd {pdid} proc {proc_idx} already bound on node {self.coord:#x}")
        if len(self._banks) >= NUM_CONTEXT_BANKS:
            raise ConfigError("all context banks are in use")
        flags = flags if flags is not None else SctlrFlags(hupcf=True)
        if flags.cfcfg is FaultConfig.STALL:
            raise ConfigError("the engine path runs context banks in terminate mode only")
        aspace = AddressSpace(pdid, proc_idx, pin_limit=pin_limit)
        cb = len(self._banks)
        self.smmu.init_context_bank(cb, pdid, proc_idx, aspace, flags)
        self.spaces[key] = aspace
        self._banks[key] = cb
        self.driver.enable_pgfault_mechanism(pdid, proc_idx, aspace)
        return aspace

    def bank_for(self, pdid: int, proc_idx: int, strict: bool = True) -> int | None:
        cb = self._banks.get((pdid, proc_idx))
        if cb is None and strict:
            raise UnboundDomain(f"no context bank for pd {pdid} proc {proc_idx}")
        return cb

    def thread(self, pdid: int, proc_idx: int) -> UserThread:
        return self.driver.thread(pdid, proc_idx)


class System:
    def __init__(self, sim: Simulator | None = None, wire: WireCostModel | None = None,
                 hops: int = 0) -> None:
        if hops < 0:
            raise ConfigError("hop count must be >= 0")
        self.sim = sim or Simulator()
        self.wire = wire or WireCostModel()
        self.hop_count = hops
        self.nodes: dict[int, Node] = {}

    def add_node(self, coord: int, **kwargs) -> Node:
        if coord in self.nodes:
            raise ConfigError(f"node {coord:#x} already exists")
        node = Node(self, coord, **kwargs)
        self.nodes[coord] = node
        return node

    def node(self, coord: int) -> Node:
        try:
            return self.nodes[coord]
        except KeyError:
            raise ConfigError(f"unknown node {coord:#x}") from None

    def hops(self, a: int, b: int) -> int:
        return 0 if a == b else self.hop_count

    def live_transfers(self) -> int:
        return sum(len(n.engine.transfers) for n in self.nodes.values())

    def quiescent(self) -> bool:
        return all(not n.engine.txns and n.driver.idle and not len(n.fifo)
                   for n in self.nodes.values())
