"""Behavioral IOMMU model: context banks, fault registers, micro-TLBs.

Each of the 16 context banks binds one (protection domain, process) address
space. A translation either hits the owning TBU's micro-TLB, walks the page
table (``MemoryManager.lookup``) or faults. Fault handling follows the
bank's SCTLR: terminate or stall, with or without hit-under-previous-fault.
The first fault while FSR is clear is recorded in full and raises the
context interrupt; later faults only set FSR.MULTI.
"""

from __future__ import annotations

import heapq
from collections import OrderedDict
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum

from .errors import BankBusy, BankDisabled, NoActiveFault, UnknownToken, ValueOutOfRange
from .memory import PAGE_SHIFT, AddressSpace, MemoryManager, Present

NUM_CONTEXT_BANKS = 16
STREAM_ID_BITS = 15
FAR_BITS = 48
FSR_TF = 1 << 1
FSR_MULTI = 1 << 31
FSYNR_WNR = 1 << 4


def decode_stream_id(value: int) -> tuple[int, int, int]:
    """Split a 15-bit StreamID into (tbu, master_id, axi_id)."""
    if not 0 <= value < (1 << STREAM_ID_BITS):
        raise ValueOutOfRange(f"stream id {value:#x} is not 15 bits")
    return (value >> 10) & 0x1F, (value >> 6) & 0xF, value & 0x3F


def encode_stream_id(tbu: int, master_id: int, axi_id: int) -> int:
    if not (0 <= tbu < 32 and 0 <= master_id < 16 and 0 <= axi_id < 64):
        raise ValueOutOfRange("stream id field out of range")
    return (tbu << 10) | (master_id << 6) | axi_id


@dataclass(frozen=True)
class StreamId:
    value: int

    def __post_init__(self):
        decode_stream_id(self.value)

    @classmethod
    def of(cls, tbu: int, master_id: int, axi_id: int) -> StreamId:
        return cls(encode_stream_id(tbu, master_id, axi_id))

    @property
    def tbu(self) -> int:
        return (self.value >> 10) & 0x1F

    @property
    def master_id(self) -> int:
        return (self.value >> 6) & 0xF

    @property
    def axi_id(self) -> int:
        return self.value & 0x3F


class FaultConfig(Enum):
    TERMINATE = 0
    STALL = 1


@dataclass
class SctlrFlags:
    m: bool = True
    cfie: bool = True
    cfre: bool = True
    afe: bool = True
    tre: bool = True
    hupcf: bool = False
    cfcfg: FaultConfig = FaultConfig.TERMINATE


@dataclass
class FaultRegs:
    tf: bool = False
    multi: bool = False
    far: int = 0
    wnr: bool = False

    @property
    def active(self) -> bool:
        return self.tf

    @property
    def fsr(self) -> int:
        return (FSR_TF if self.tf else 0) | (FSR_MULTI if self.multi else 0)

    @property
    def far_low(self) -> int:
        return self.far & 0xFFFF_FFFF

    @property
    def far_high(self) -> int:
        return (self.far >> 32) & 0xFFFF

    @property
    def fsynr(self) -> int:
        return FSYNR_WNR if self.wnr else 0


@dataclass(frozen=True)
class FaultSnapshot:
    iova: int
    is_write: bool
    multi: bool


@dataclass(frozen=True)
class Translated:
    pa: int
    latency_ns: int


@dataclass(frozen=True)
class Terminated:
    #: True when this transaction itself failed translation; False when it was
    #: terminated only because an earlier fault was still outstanding.
    fault: bool


@dataclass(frozen=True)
class Stalled:
    token: int


class ResumeAction(Enum):
    RETRY = "retry"
    TERMINATE = "terminate"


@dataclass
class StalledTxn:
    token: int
    stream: int
    iova: int
    is_write: bool


@dataclass
class ContextBank:
    index: int
    pdid: int | None = None
    proc_idx: int | None = None
    aspace: AddressSpace | None = None
    sctlr: SctlrFlags = field(default_factory=SctlrFlags)
    regs: FaultRegs = field(default_factory=FaultRegs)
    stalled: OrderedDict[int, StalledTxn] = field(default_factory=OrderedDict)


@dataclass
class SmmuConfig:
    tlb_depth: int = 32
    ptw_limit: int = 8
    tbu_outstanding: int = 256
    irq_latency_ns: int = 1_000
    tlb_hit_ns: int = 4
    walk_ns: int = 150

    def __post_init__(self):
        if self.ptw_limit not in (8, 16):
            raise ValueError("ptw_limit must be 8 or 16")
        if self.tlb_depth < 1 or self.tbu_outstanding < 1:
            raise ValueError("tlb_depth and tbu_outstanding must be positive")


class TbuState:
    """Micro-TLB plus occupancy bookkeeping for walks and outstanding requests.

    Occupancy is kept as heaps of completion times; a request that finds the
    limit reached waits for the earliest completion.
    """

    def __init__(self, tlb_depth: int, ptw_limit: int, outstanding_limit: int) -> None:
        self.tlb: OrderedDict[tuple[int, int], tuple[int, bool]] = OrderedDict()
        self.tlb_depth = tlb_depth
        self.ptw_limit = ptw_limit
        self.outstanding_limit = outstanding_limit
        self._walks: list[int] = []
        self._outstanding = {False: [], True: []}

    @staticmethod
    def _reserve(heap: list[int], limit: int, now: int, duration: int) -> int:
        while heap and heap[0] <= now:
            heapq.heappop(heap)
        start = now
        if len(heap) >= limit:
            start = heapq.heappop(heap)
        heapq.heappush(heap, start + duration)
        return start

    def start_walk(self, now: int, walk_ns: int) -> int:
        """Reserve a walker slot, returning the finish time of the walk."""
        return self._reserve(self._walks, self.ptw_limit, now, walk_ns) + walk_ns

    def admit(self, now: int, is_write: bool, duration: int) -> int:
        return self._reserve(self._outstanding[is_write], self.outstanding_limit, now, duration)

    def ptw_in_flight(self, now: int) -> int:
        return sum(1 for t in self._walks if t > now)

    def outstanding(self, now: int, is_write: bool) -> int:
        return sum(1 for t in self._outstanding[is_write] if t > now)

    def tlb_get(self, key: tuple[int, int]) -> tuple[int, bool] | None:
        hit = self.tlb.get(key)
        if hit is not None:
            self.tlb.move_to_end(key)
        return hit

    def tlb_fill(self, key: tuple[int, int], frame: int, writable: bool) -> None:
        self.tlb[key] = (frame, writable)
        self.tlb.move_to_end(key)
        while len(self.tlb) > self.tlb_depth:
            self.tlb.popitem(last=False)

    def tlb_drop(self, cb: int, first_page: int, count: int) -> int:
        doomed = [k for k in self.tlb if k[0] == cb and first_page <= k[1] < first_page + count]
        for k in doomed:
            del self.tlb[k]
        return len(doomed)


TranslateResult = Translated | Terminated | Stalled


class Smmu:
    def __init__(self, sim, mm: MemoryManager, config: SmmuConfig | None = None,
                 on_context_fault: Callable[[int], None] | None = None) -> None:
        self.sim = sim
        self.mm = mm
        self.config = config or SmmuConfig()
        self.on_context_fault = on_context_fault
        self.banks = [ContextBank(i) for i in range(NUM_CONTEXT_BANKS)]
        self.tbus: dict[int, TbuState] = {}
        self._next_token = 1
        mm.invalidation_listeners.append(self._on_invalidate)

    # -- configuration -------------------------------------------------------

    def _bank(self, cb: int) -> ContextBank:
        if not 0 <= cb < NUM_CONTEXT_BANKS:
            raise ValueOutOfRange(f"context bank {cb} outside 0..{NUM_CONTEXT_BANKS - 1}")
        return self.banks[cb]

    def tbu(self, index: int) -> TbuState:
        t = self.tbus.get(index)
        if t is None:
            c = self.config
            t = self.tbus[index] = TbuState(c.tlb_depth, c.ptw_limit, c.tbu_outstanding)
        return t

    def init_context_bank(self, cb_index: int, pdid: int, proc_idx: int,
                          aspace: AddressSpace, flags: SctlrFlags | None = None) -> None:
        bank = self._bank(cb_index)
        if bank.regs.active:
            raise BankBusy(f"context bank {cb_index} has an uncleared fault")
        bank.pdid = pdid
        bank.proc_idx = proc_idx
        bank.aspace = aspace
        bank.sctlr = flags if flags is not None else SctlrFlags()
        bank.regs = FaultRegs()
        bank.stalled.clear()
        for t in self.tbus.values():
            t.tlb_drop(cb_index, 0, 1 << 40)

    def banks_for(self, aspace: AddressSpace) -> list[int]:
        return [b.index for b in self.banks if b.aspace is aspace]

    # -- translation ---------------------------------------------------------

    def _record(self, bank: ContextBank, iova: int, is_write: bool) -> None:
        m = self.sim.metrics
        regs = bank.regs
        if regs.tf:
            regs.multi = True
            m.incr("smmu_multi")
            return
        regs.tf = True
        regs.multi = False
        regs.far = iova & ((1 << FAR_BITS) - 1)
        regs.wnr = is_write
        m.incr("smmu_faults_recorded")
        if bank.sctlr.cfie:
            self.sim.schedule(self.config.irq_latency_ns, self._raise_irq, bank.index, tag="smmu_irq")

    def _raise_irq(self, cb: int) -> None:
        self.sim.metrics.incr("smmu_irqs")
        if self.on_context_fault is not None:
            self.on_context_fault(cb)

    def _stall(self, bank: ContextBank, stream: int, iova: int, is_write: bool) -> Stalled:
        token = self._next_token
        self._next_token += 1
        bank.stalled[token] = StalledTxn(token, stream, iova, is_write)
        self.sim.metrics.incr("smmu_stalls")
        return Stalled(token)

    def translate(self, stream: int | StreamId, cb: int, iova: int, is_write: bool) -> TranslateResult:
        stream = stream.value if isinstance(stream, StreamId) else stream
        tbu_idx = decode_stream_id(stream)[0]
        bank = self._bank(cb)
        if not bank.sctlr.m:
            raise BankDisabled(f"context bank {cb} is disabled")
        if bank.aspace is None:
            raise BankDisabled(f"context bank {cb} is not bound")
        m = self.sim.metrics
        m.incr("smmu_translations")
        sctlr = bank.sctlr
        stall_mode = sctlr.cfcfg is FaultConfig.STALL

        if bank.regs.tf and not sctlr.hupcf:
            # No hit under previous fault: nothing proceeds until FSR is cleared.
            if stall_mode:
                return self._stall(bank, stream, iova, is_write)
            would_fault = not isinstance(self.mm.lookup(bank.aspace, iova, is_write), Present)
            if would_fault:
                bank.regs.multi = True
                m.incr("smmu_multi")
            else:
                m.incr("smmu_collateral_terminations")
            m.incr("smmu_terminations")
            return Terminated(fault=would_fault)

        tbu = self.tbu(tbu_idx)
        now = self.sim.now
        page = iova >> PAGE_SHIFT
        key = (cb, page)
        hit = tbu.tlb_get(key)
        if hit is not None and (hit[1] or not is_write):
            m.incr("tlb_hits")
            lat = self.config.tlb_hit_ns
            start = tbu.admit(now, is_write, lat)
            return Translated((hit[0] << PAGE_SHIFT) | (iova & 0xFFF), start - now + lat)

        m.incr("tlb_misses")
        done = tbu.start_walk(now, self.config.walk_ns)
        res = self.mm.lookup(bank.aspace, iova, is_write)
        if isinstance(res, Present):
            tbu.tlb_fill(key, res.frame, res.writable)
            start = tbu.admit(now, is_write, done - now)
            return Translated(res.pa, start - now + (done - now))
        self._record(bank, iova, is_write)
        if stall_mode:
            return self._stall(bank, stream, iova, is_write)
        m.incr("smmu_terminations")
        return Terminated(fault=True)

    def read_and_clear_fault(self, cb: int) -> FaultSnapshot:
        bank = self._bank(cb)
        regs = bank.regs
        if not regs.tf:
            raise NoActiveFault(f"context bank {cb} has no active fault")
        snap = FaultSnapshot(regs.far, regs.wnr, regs.multi)
        regs.tf = False
        regs.multi = False
        return snap

    def resume(self, cb: int, token: int, action: ResumeAction) -> TranslateResult:
        bank = self._bank(cb)
        txn = bank.stalled.pop(token, None)
        if txn is None:
            raise UnknownToken(f"no stalled transaction {token} on bank {cb}")
        if action is ResumeAction.TERMINATE:
            self.sim.metrics.incr("smmu_terminations")
            return Terminated(fault=True)
        return self.translate(txn.stream, cb, txn.iova, txn.is_write)

    # -- TLB maintenance -----------------------------------------------------

    def tlb_invalidate(self, cb: int, first_page: int, count: int) -> int:
        self._bank(cb)
        if count <= 0:
            return 0
        return sum(t.tlb_drop(cb, first_page, count) for t in self.tbus.values())

    def _on_invalidate(self, aspace: AddressSpace, first_page: int, count: int) -> None:
        for cb in self.banks_for(aspace):
            self.tlb_invalidate(cb, first_page, count)

    def tlb_entries(self) -> list[tuple[int, int, int]]:
        """(tbu, bank, page) for every cached translation."""
        return [(i, k[0], k[1]) for i, t in sorted(self.tbus.items()) for k in t.tlb]
