"""IOMMU fault driver and user-space fault library.

The context-fault interrupt reads and clears the bank's fault registers and
defers the real work to two tasklets running on one simulated softirq
context: ``pf_send`` for faults on the read (source) side and ``pf_rcv``,
which drains the receiver fault FIFO. Pages come in either through the
process's helper thread touching them (one page per message) or through a
kernel page-in of up to four pages. Retransmit requests for destination
faults are sent by the helper thread through its packetizer channel.
"""

from __future__ import annotations

import string
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING

from .errors import BadDigit, BadLength, FieldOverflow, NoActiveFault, ProcessKilled, SegFault, UnboundDomain
from .fifo import compress_iova, expand_iova
from .memory import PAGE_MASK, AddressSpace, TouchOutcome

if TYPE_CHECKING:
    from .system import Node

TOUCH_AHEAD_PAGES = 4
DEDUP_DEPTH = 2

# (name, hex digits, bits), most significant first
NETLINK_FIELDS = (
    ("src_id", 6, 22),
    ("trid", 4, 14),
    ("seq", 4, 14),
    ("iova", 8, 32),
    ("pdid", 4, 16),
    ("rw", 1, 1),
)
NETLINK_DIGITS = sum(f[1] for f in NETLINK_FIELDS)
_HEX = frozenset(string.hexdigits)


@dataclass(frozen=True)
class NetlinkPageFaultMsg:
    src_id: int
    trid: int
    seq: int
    iova: int
    pdid: int
    rw: int

    def encode(self) -> str:
        return encode_netlink(self.src_id, self.trid, self.seq, self.iova, self.pdid, self.rw)


def encode_netlink(src_id: int, trid: int, seq: int, iova: int, pdid: int, rw: int) -> str:
    values = (src_id, trid, seq, iova, pdid, rw)
    parts = []
    for (name, digits, bits), v in zip(NETLINK_FIELDS, values):
        if not 0 <= v < (1 << bits):
            raise FieldOverflow(f"{name}={v:#x} does not fit in {bits} bits")
        parts.append(f"{v:0{digits}X}")
    return "".join(parts)


def decode_netlink(text: str) -> NetlinkPageFaultMsg:
    if len(text) != NETLINK_DIGITS:
        raise BadLength(f"expected {NETLINK_DIGITS} hex digits, got {len(text)}")
    bad = [c for c in text if c not in _HEX]
    if bad:
        raise BadDigit(f"non-hex digit {bad[0]!r}")
    pos = 0
    values = []
    for name, digits, bits in NETLINK_FIELDS:
        v = int(text[pos:pos + digits], 16)
        if v >= (1 << bits):
            raise FieldOverflow(f"{name}={v:#x} does not fit in {bits} bits")
        values.append(v)
        pos += digits
    return NetlinkPageFaultMsg(*values)


class HandlerPolicy(Enum):
    TOUCH_A_PAGE = "touch_a_page"
    TOUCH_AHEAD = "touch_ahead"


class DedupCache:
    """Last two handled (trid, seq, page) keys per source node."""

    def __init__(self, depth: int = DEDUP_DEPTH) -> None:
        self.depth = depth
        self._recent: dict[int, deque[tuple[int, int, int]]] = {}

    def seen(self, src_id: int, key: tuple[int, int, int]) -> bool:
        """True if ``key`` was handled recently; otherwise remember it."""
        q = self._recent.setdefault(src_id, deque(maxlen=self.depth))
        if key in q:
            return True
        q.append(key)
        return False

    def recent(self, src_id: int) -> list[tuple[int, int, int]]:
        return list(self._recent.get(src_id, ()))


class UserTouchOutcome(Enum):
    TOUCHED = "touched"
    SEGFAULT_ABSORBED = "segfault_absorbed"


@dataclass
class DriverConfig:
    policy: HandlerPolicy = HandlerPolicy.TOUCH_A_PAGE
    irq_handler_ns: int = 500
    tasklet_delay_ns: int = 2_000
    handler_fixed_ns: int = 1_000
    netlink_dispatch_ns: int = 1_500
    user_recv_ns: int = 2_000
    pckzer_ns: int = 1_000
    absorb_segfault: bool = True
    kernel_rapf: bool = False

    def __post_init__(self):
        for name in ("irq_handler_ns", "tasklet_delay_ns", "handler_fixed_ns",
                     "netlink_dispatch_ns", "user_recv_ns", "pckzer_ns"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


class UserThread:
    """Helper thread of one process: receives fault messages and serves them in order."""

    def __init__(self, driver: FaultDriver, pdid: int, proc_idx: int, aspace: AddressSpace,
                 channel: int, absorb_segfault: bool = True) -> None:
        self.driver = driver
        self.pdid = pdid
        self.proc_idx = proc_idx
        self.aspace = aspace
        self.channel = channel
        self.absorb_segfault = absorb_segfault
        self.registered = True
        self.inbox: deque[str] = deque()
        self.busy = False
        self.handled = 0

    def deliver(self, text: str) -> None:
        self.inbox.append(text)
        if not self.busy:
            self._next()

    def _next(self) -> None:
        if not self.inbox:
            self.busy = False
            return
        self.busy = True
        text = self.inbox.popleft()
        cfg = self.driver.config
        self.driver.sim.schedule(cfg.user_recv_ns, self._handle, text, tag="user_msg")

    def _handle(self, text: str) -> None:
        drv = self.driver
        msg = decode_netlink(text)
        outcome, touch_ns = drv.user_touch(self, msg, send_rapf=False)
        self.handled += 1
        if outcome is UserTouchOutcome.TOUCHED and msg.rw == 1:
            delay = touch_ns + drv.config.pckzer_ns
            drv.sim.schedule(delay, self._rapf_then_next, msg, tag="user_rapf")
        else:
            drv.sim.schedule(touch_ns, self._next, tag="user_done")

    def _rapf_then_next(self, msg: NetlinkPageFaultMsg) -> None:
        self.driver.send_rapf(self, msg)
        self._next()


class FaultDriver:
    def __init__(self, node: Node, config: DriverConfig | None = None) -> None:
        self.node = node
        self.sim = node.sim
        self.config = config or DriverConfig()
        self.threads: dict[tuple[int, int], UserThread] = {}
        self.dedup = DedupCache()
        self._softirq: deque[tuple] = deque()
        self._softirq_busy = False
        self._rcv_pending = False
        self._next_channel = 0

    # -- registration --------------------------------------------------------

    def enable_pgfault_mechanism(self, pdid: int, proc_idx: int, aspace: AddressSpace) -> UserThread:
        """Create the helper thread of a process and give it a packetizer channel."""
        key = (pdid, proc_idx)
        t = self.threads.get(key)
        if t is not None:
            return t
        channel = self._next_channel
        self._next_channel += 1
        self.node.engine.bind_channel(channel, pdid)
        t = UserThread(self, pdid, proc_idx, aspace, channel, self.config.absorb_segfault)
        self.threads[key] = t
        return t

    def thread(self, pdid: int, proc_idx: int) -> UserThread:
        t = self.threads.get((pdid, proc_idx))
        if t is None:
            raise UnboundDomain(f"no process bound to pd {pdid} proc {proc_idx}")
        return t

    # -- interrupt and softirq -------------------------------------------------

    def context_fault_irq(self, cb: int) -> None:
        m = self.sim.metrics
        m.incr("driver_irqs")
        m.incr("driver_irq_ns", self.config.irq_handler_ns)
        smmu = self.node.smmu
        try:
            snap = smmu.read_and_clear_fault(cb)
        except NoActiveFault:
            m.incr("spurious_irqs")
            return
        bank = smmu.banks[cb]
        if snap.is_write:
            self._schedule_rcv()
        else:
            self._schedule_tasklet(self._run_pf_send, bank.pdid, bank.proc_idx, snap.iova)
            # The destination side may have faulted meanwhile; drain it too.
            self._schedule_rcv()

    def _schedule_rcv(self) -> None:
        if self._rcv_pending:
            return
        self._rcv_pending = True
        self._schedule_tasklet(self._run_pf_rcv)

    def _schedule_tasklet(self, fn, *args) -> None:
        self.sim.schedule(self.config.tasklet_delay_ns, self._tasklet_ready, fn, args, tag="tasklet_ready")

    def _tasklet_ready(self, fn, args) -> None:
        self._softirq.append((fn, args))
        if not self._softirq_busy:
            self._run_softirq()

    def _run_softirq(self) -> None:
        if not self._softirq:
            self._softirq_busy = False
            return
        self._softirq_busy = True
        fn, args = self._softirq.popleft()
        cost = fn(*args)
        self.sim.metrics.incr("driver_tasklet_ns", cost)
        self.sim.schedule(cost, self._run_softirq, tag="tasklet_done")

    def _run_pf_send(self, pdid: int, proc_idx: int, iova: int) -> int:
        cost = [0]
        self.pf_send_handler(pdid, proc_idx, iova, cost=cost)
        return cost[0]

    def _run_pf_rcv(self) -> int:
        self._rcv_pending = False
        cost = [0]
        self.pf_rcv_handler(cost=cost)
        return cost[0]

    @property
    def idle(self) -> bool:
        return not self._softirq_busy and not self._softirq and all(
            not t.busy for t in self.threads.values())

    # -- handlers -------------------------------------------------------------

    def _gup(self, thread: UserThread, va: int) -> tuple[int, int]:
        """Kernel page-in of up to four pages; returns (pages resident, cost ns)."""
        mm = self.node.mm
        before = mm.paged_in
        n = mm.get_user_pages(thread.aspace, va & ~PAGE_MASK, TOUCH_AHEAD_PAGES)
        fresh = mm.paged_in - before
        if fresh:
            self.sim.metrics.incr("handler_invocations")
            self.sim.metrics.incr("pages_touched", fresh)
        return n, mm.take_charged()

    def _netlink(self, thread: UserThread, msg: NetlinkPageFaultMsg) -> None:
        self.sim.metrics.incr("netlink_msgs")
        delay = self.node.mm.costs.netlink_roundtrip_ns
        self.sim.schedule(delay, thread.deliver, msg.encode(), tag="netlink")

    def pf_send_handler(self, pdid: int, proc_idx: int, iova: int,
                        policy: HandlerPolicy | None = None, cost: list[int] | None = None) -> int:
        """Bring in the faulting source page(s). No retransmit request follows."""
        policy = policy or self.config.policy
        thread = self.thread(pdid, proc_idx)
        m = self.sim.metrics
        m.incr("handler_calls")
        ns = self.config.handler_fixed_ns
        if policy is HandlerPolicy.TOUCH_AHEAD:
            pages, gup_ns = self._gup(thread, iova)
            ns += gup_ns
        else:
            msg = NetlinkPageFaultMsg(0, 0, 0, compress_iova(proc_idx, iova), pdid, 0)
            self._netlink(thread, msg)
            ns += self.config.netlink_dispatch_ns
            pages = 1
        if cost is not None:
            cost[0] += ns
        return pages

    def pf_rcv_handler(self, policy: HandlerPolicy | None = None, cost: list[int] | None = None) -> int:
        """Drain the receiver fault FIFO; returns the number of entries consumed."""
        policy = policy or self.config.policy
        cfg = self.config
        fifo = self.node.fifo
        m = self.sim.metrics
        m.incr("handler_calls")
        ns = cfg.handler_fixed_ns
        handled = 0
        while len(fifo):
            entry = fifo.pop_entry()
            handled += 1
            if self.dedup.seen(entry.src_id, (entry.trid, entry.seq, entry.page)):
                m.incr("driver_dedup_hits")
                continue
            proc_idx, va = expand_iova(entry.iova)
            thread = self.threads.get((entry.pdid, proc_idx))
            if thread is None:
                m.incr("unbound_fifo_entries")
                continue
            msg = NetlinkPageFaultMsg(entry.src_id, entry.trid, entry.seq, entry.iova, entry.pdid, 1)
            if policy is HandlerPolicy.TOUCH_AHEAD:
                _, gup_ns = self._gup(thread, va)
                ns += gup_ns
                if cfg.kernel_rapf:
                    self.send_rapf(thread, msg)
                    ns += cfg.pckzer_ns
                    continue
            self._netlink(thread, msg)
            ns += cfg.netlink_dispatch_ns
        if cost is not None:
            cost[0] += ns
        return handled

    def user_touch(self, thread: UserThread, msg: NetlinkPageFaultMsg,
                   send_rapf: bool = True) -> tuple[UserTouchOutcome, int]:
        """Touch the page named by ``msg`` from the process; returns the outcome
        and the simulated time the touch took."""
        mm = self.node.mm
        m = self.sim.metrics
        _, va = expand_iova(msg.iova)
        try:
            outcome = mm.touch(thread.aspace, va, is_write=msg.rw == 1)
        except SegFault:
            if not thread.absorb_segfault:
                raise ProcessKilled(f"pd {thread.pdid} proc {thread.proc_idx} killed at {va:#x}") from None
            m.incr("segfaults_absorbed")
            return UserTouchOutcome.SEGFAULT_ABSORBED, mm.take_charged()
        if outcome is not TouchOutcome.ALREADY_PRESENT:
            m.incr("handler_invocations")
            m.incr("pages_touched")
        if send_rapf and msg.rw == 1:
            self.send_rapf(thread, msg)
        return UserTouchOutcome.TOUCHED, mm.take_charged()

    def send_rapf(self, thread: UserThread, msg: NetlinkPageFaultMsg) -> None:
        if msg.rw != 1:
            raise ValueError("retransmit requests are only sent for destination faults")
        self.node.engine.packetizer_send_rapf(thread.channel, msg.src_id, msg.trid, msg.seq, msg.pdid)
