"""RDMA engine and scheduler model (remote write path only).

A transfer is cut into transactions at every 16 KB boundary of the
destination address; at most ``outstanding_per_transfer`` of them are in
flight at once. Each attempt of a transaction translates its source pages on
the initiator's IOMMU, withholds packets of faulting pages and hands the rest
to a single output link that serves active transactions round-robin. The
target translates each packet for writing; a fault produces a NACK and an
entry in the receiver's fault FIFO. A transaction completes once every packet
of its current attempt has been acknowledged. Recovery is either a timeout
or an explicit retransmit request (RAPF) arriving in the scheduler mailbox.
"""

from __future__ import annotations

from collections import OrderedDict, deque
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING

from .errors import (
    ChannelBusy,
    ChannelNotAllocated,
    ConfigError,
    InvariantViolation,
    TooManyOutstanding,
)
from .fifo import (
    OPCODE_RAPF,
    FaultFifoEntry,
    MailboxMsg,
    PushOutcome,
    compress_iova,
    decode_nack,
    encode_nack,
    is_pf_nack,
)
from .memory import PAGE_MASK, PAGE_SIZE
from .smmu import Stalled, StreamId, Terminated, Translated

if TYPE_CHECKING:
    from .system import Node, System

MTU = 256
TXN_SIZE = 16 * 1024
MAX_CHANNELS = 64
MAX_TRANSFERS = 1024
SEQ_MOD = 1 << 14
TRID_MOD = 1 << 14

TX_STREAM = StreamId.of(0, 0, 0)
RX_STREAM = StreamId.of(0, 0, 1)


def segment(dst_va: int, length: int) -> list[tuple[int, int]]:
    """Transaction spans ``(offset, len)`` cut at 16 KB boundaries of ``dst_va``."""
    if length <= 0:
        raise ValueError("transfer length must be positive")
    spans = []
    off = 0
    while off < length:
        addr = dst_va + off
        n = min(TXN_SIZE - (addr % TXN_SIZE), length - off)
        spans.append((off, n))
        off += n
    return spans


def packet_spans(src_va: int, dst_va: int, length: int) -> list[tuple[int, int]]:
    """Packet spans ``(offset, len)`` inside one transaction.

    Packets are MTU-sized from the transaction start and additionally cut where
    either address crosses a page, so every packet touches one source page and
    one destination page.
    """
    out = []
    off = 0
    while off < length:
        n = min(MTU - (off % MTU), length - off,
                PAGE_SIZE - ((src_va + off) & PAGE_MASK),
                PAGE_SIZE - ((dst_va + off) & PAGE_MASK))
        out.append((off, n))
        off += n
    return out


@dataclass
class WireCostModel:
    per_packet_ns: float = 2792.0
    per_hop_ns: int = 100
    ack_ns: int = 1_000
    r5_poll_ns: int = 200
    packet_gap_ns: int = 50

    def __post_init__(self):
        for name in ("per_packet_ns", "per_hop_ns", "ack_ns", "r5_poll_ns", "packet_gap_ns"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def one_way(self, hops: int) -> int:
        return round(self.per_packet_ns) + hops * self.per_hop_ns

    def ack_path(self, hops: int) -> int:
        return self.ack_ns + hops * self.per_hop_ns


@dataclass
class EngineConfig:
    timeout_ns: int = 1_000_000
    outstanding_per_transfer: int = 2
    max_transfers: int = MAX_TRANSFERS

    def __post_init__(self):
        if self.timeout_ns < 1_000:
            raise ValueError("timeout must be at least 1 us")
        if self.outstanding_per_transfer < 1:
            raise ValueError("outstanding_per_transfer must be >= 1")


class TxState(Enum):
    QUEUED = "queued"
    IN_FLIGHT = "in_flight"
    PAUSED_ON_PF = "paused_on_pf"
    ACKED = "acked"


class RapfOutcome(Enum):
    RETRANSMITTED = "retransmitted"
    STALE_SEQ = "stale_seq"
    PDID_MISMATCH = "pdid_mismatch"
    UNKNOWN_TRID = "unknown_trid"
    BAD_OPCODE = "bad_opcode"


@dataclass(eq=False)
class Transaction:
    trid: int
    transfer: Transfer
    offset: int
    length: int
    state: TxState = TxState.QUEUED
    attempts: int = 0
    timeout_handle: object = None
    packets: list[tuple[int, int]] = field(default_factory=list)
    acked: int = 0
    seq_history: list[int] = field(default_factory=list)

    @property
    def seq(self) -> int:
        return (self.attempts - 1) % SEQ_MOD if self.attempts else 0

    @property
    def src_va(self) -> int:
        return self.transfer.src_va + self.offset

    @property
    def dst_va(self) -> int:
        return self.transfer.dst_va + self.offset


@dataclass(eq=False)
class Transfer:
    pdid: int
    channel: int
    src_va: int
    dst_va: int
    length: int
    src_node: int
    dst_node: int
    src_proc: int = 0
    dst_proc: int = 0
    transactions: list[Transaction] = field(default_factory=list)
    submitted_at: int = 0
    completed_at: int | None = None
    next_launch: int = 0
    on_complete: Callable[[Transfer], None] | None = None

    @property
    def done(self) -> bool:
        return self.completed_at is not None

    @property
    def in_flight(self) -> int:
        return sum(1 for t in self.transactions if t.state in (TxState.IN_FLIGHT, TxState.PAUSED_ON_PF))


@dataclass(eq=False)
class Packet:
    tx: Transaction
    seq: int
    index: int
    dst_va: int
    data: bytes
    ready_at: int


class RdmaEngine:
    """Per-node engine; acts as initiator for its own transfers and as target for
    packets addressed to its node."""

    def __init__(self, node: Node, system: System, config: EngineConfig | None = None) -> None:
        self.node = node
        self.system = system
        self.sim = system.sim
        self.config = config or EngineConfig()
        self.txns: dict[int, Transaction] = {}
        self.transfers: dict[tuple[int, int], Transfer] = {}
        self._next_trid = 0
        self._link: OrderedDict[int, deque[Packet]] = OrderedDict()
        self._link_free_at = 0
        self._link_event = None
        self.pckz_channels: dict[int, int] = {}
        self.rapf_log: list[tuple[int, RapfOutcome]] = []

    @property
    def wire(self) -> WireCostModel:
        return self.system.wire

    # -- submission ----------------------------------------------------------

    def _alloc_trid(self) -> int:
        for _ in range(TRID_MOD):
            trid = self._next_trid
            self._next_trid = (self._next_trid + 1) % TRID_MOD
            if trid not in self.txns:
                return trid
        raise TooManyOutstanding("no free transaction ids")

    def submit_transfer(self, pdid: int, channel: int, src_va: int, dst_va: int, length: int,
                        dst_node: int, src_proc: int = 0, dst_proc: int = 0,
                        on_complete: Callable[[Transfer], None] | None = None) -> Transfer:
        if not 0 <= channel < MAX_CHANNELS:
            raise ConfigError(f"channel {channel} outside 0..{MAX_CHANNELS - 1}")
        if length <= 0:
            raise ValueError("transfer length must be positive")
        if (pdid, channel) in self.transfers:
            raise ChannelBusy(f"channel {channel} of pd {pdid} is busy")
        if self.system.live_transfers() >= self.config.max_transfers:
            raise TooManyOutstanding(f"more than {self.config.max_transfers} transfers in flight")
        xfer = Transfer(pdid, channel, src_va, dst_va, length, self.node.coord, dst_node,
                        src_proc, dst_proc, submitted_at=self.sim.now, on_complete=on_complete)
        for off, n in segment(dst_va, length):
            tx = Transaction(self._alloc_trid(), xfer, off, n)
            tx.packets = packet_spans(src_va + off, dst_va + off, n)
            self.txns[tx.trid] = tx
            xfer.transactions.append(tx)
        self.transfers[(pdid, channel)] = xfer
        self.sim.metrics.incr("transfers_submitted")
        self.sim.schedule(self.wire.r5_poll_ns, self._launch_more, xfer, tag="r5_launch")
        return xfer

    def _launch_more(self, xfer: Transfer) -> None:
        limit = self.config.outstanding_per_transfer
        while xfer.next_launch < len(xfer.transactions) and xfer.in_flight < limit:
            tx = xfer.transactions[xfer.next_launch]
            xfer.next_launch += 1
            self.tx_transaction(tx)
        if xfer.in_flight > limit:
            raise InvariantViolation("per-transfer outstanding bound exceeded")

    # -- initiator side ------------------------------------------------------

    def tx_transaction(self, tx: Transaction) -> int:
        """Start a new attempt of ``tx``; returns how many packets were sent."""
        if tx.state is TxState.ACKED:
            raise InvariantViolation(f"transaction {tx.trid} already acked")
        sim = self.sim
        tx.attempts += 1
        tx.seq_history.append(tx.seq)
        tx.state = TxState.IN_FLIGHT
        tx.acked = 0
        sim.cancel(tx.timeout_handle)
        tx.timeout_handle = sim.schedule(self.config.timeout_ns, self.on_timeout, tx.trid, tag="timeout")
        sim.metrics.incr("attempts")

        xfer = tx.transfer
        smmu = self.node.smmu
        cb = self.node.bank_for(xfer.pdid, xfer.src_proc)
        frames = self.node.mm.frames
        seq = tx.seq
        out = []
        for i, (off, n) in enumerate(tx.packets):
            va = tx.src_va + off
            res = smmu.translate(TX_STREAM, cb, va, False)
            if isinstance(res, Translated):
                data = frames.read(res.pa, n)
                out.append(Packet(tx, seq, i, tx.dst_va + off, data, sim.now + res.latency_ns))
            elif isinstance(res, Stalled):
                raise InvariantViolation("stall-mode bank reached the engine")
            else:
                sim.metrics.incr("packets_withheld")
        self._link[tx.trid] = deque(out)
        self._link.move_to_end(tx.trid)
        if out:
            self._kick_link()
        return len(out)

    def _kick_link(self) -> None:
        if self._link_event is not None and self._link_event.pending:
            return
        delay = max(0, self._link_free_at - self.sim.now)
        self._link_event = self.sim.schedule(delay, self._inject, tag="inject")

    def _next_ready(self) -> tuple[Packet | None, int | None]:
        """Pop the head packet of the first queue, in round-robin order, whose
        source translation has finished; otherwise report the earliest ready time."""
        now = self.sim.now
        earliest = None
        for trid in list(self._link):
            q = self._link[trid]
            if not q:
                del self._link[trid]
                continue
            head = q[0]
            if head.ready_at <= now:
                q.popleft()
                if q:
                    self._link.move_to_end(trid)
                else:
                    del self._link[trid]
                return head, None
            if earliest is None or head.ready_at < earliest:
                earliest = head.ready_at
        return None, earliest

    def _inject(self) -> None:
        # A packet enters the link only once its source translation is done, so
        # packets of one transaction never overtake each other on the wire.
        pkt, wait_until = self._next_ready()
        if pkt is None:
            if wait_until is not None:
                self._link_event = self.sim.schedule(wait_until - self.sim.now, self._inject, tag="inject")
            return
        xfer = pkt.tx.transfer
        target = self.system.node(xfer.dst_node)
        hops = self.system.hops(self.node.coord, xfer.dst_node)
        self.sim.schedule(self.wire.one_way(hops), target.engine.rx_packet, pkt, tag="pkt_arrive")
        self.sim.metrics.incr("packets_sent")
        self._link_free_at = self.sim.now + self.wire.packet_gap_ns
        if self._link:
            self._link_event = self.sim.schedule(self.wire.packet_gap_ns, self._inject, tag="inject")

    def on_ack(self, trid: int, seq: int) -> None:
        tx = self.txns.get(trid)
        if tx is None or tx.state is TxState.ACKED or seq != tx.seq:
            self.sim.metrics.incr("stale_acks")
            return
        tx.acked += 1
        if tx.acked == len(tx.packets):
            self._complete_tx(tx)

    def _complete_tx(self, tx: Transaction) -> None:
        tx.state = TxState.ACKED
        self.sim.cancel(tx.timeout_handle)
        tx.timeout_handle = None
        del self.txns[tx.trid]
        self._link.pop(tx.trid, None)
        xfer = tx.transfer
        if all(t.state is TxState.ACKED for t in xfer.transactions):
            xfer.completed_at = self.sim.now
            del self.transfers[(xfer.pdid, xfer.channel)]
            self.sim.metrics.incr("transfers_completed")
            if xfer.on_complete is not None:
                xfer.on_complete(xfer)
        else:
            self._launch_more(xfer)

    def on_nack(self, value: int, seq: int | None = None) -> None:
        """Handle a NACK word. Pauses the transaction; the timeout stays armed."""
        trid, code = decode_nack(value)
        m = self.sim.metrics
        m.incr("nack_count")
        tx = self.txns.get(trid)
        if tx is None or tx.state is TxState.ACKED or (seq is not None and seq != tx.seq):
            m.incr("stale_nacks")
            return
        if is_pf_nack(value):
            tx.state = TxState.PAUSED_ON_PF
            if code != 1:
                m.incr("nack_nonstandard_code")

    def on_timeout(self, trid: int) -> None:
        tx = self.txns.get(trid)
        if tx is None or tx.state is TxState.ACKED:
            return
        tx.timeout_handle = None
        self.sim.metrics.incr("timeouts_fired")
        self.tx_transaction(tx)

    # -- mailbox / RAPF ------------------------------------------------------

    def mailbox_receive(self, value: int) -> None:
        # The scheduler polls its mailbox; model the poll as a fixed delay.
        self.sim.schedule(self.wire.r5_poll_ns, self._mailbox_poll, value, tag="mbox_poll")

    def _mailbox_poll(self, value: int) -> None:
        self.mailbox_dispatch(MailboxMsg.decode(value))

    def mailbox_dispatch(self, msg: MailboxMsg) -> RapfOutcome:
        m = self.sim.metrics
        out = self._dispatch(msg)
        m.incr(f"rapf_{out.value}")
        self.rapf_log.append((self.sim.now, out))
        return out

    def _dispatch(self, msg: MailboxMsg) -> RapfOutcome:
        if msg.opcode != OPCODE_RAPF:
            return RapfOutcome.BAD_OPCODE
        if msg.wired_pdid != msg.rcved_pdid:
            return RapfOutcome.PDID_MISMATCH
        tx = self.txns.get(msg.trid)
        if tx is None or tx.state in (TxState.ACKED, TxState.QUEUED):
            return RapfOutcome.UNKNOWN_TRID
        if tx.transfer.pdid != msg.wired_pdid:
            return RapfOutcome.PDID_MISMATCH
        if (tx.seq & 0xFFF) != msg.seq:
            return RapfOutcome.STALE_SEQ
        self.tx_transaction(tx)
        return RapfOutcome.RETRANSMITTED

    def bind_channel(self, channel: int, pdid: int) -> None:
        """Hand a packetizer channel to a protection domain."""
        self.pckz_channels[channel] = pdid

    def packetizer_send_rapf(self, channel: int, dst_coord: int, trid: int, seq: int, pdid: int) -> None:
        bound = self.pckz_channels.get(channel)
        if bound is None:
            raise ChannelNotAllocated(f"packetizer channel {channel} is not allocated")
        msg = MailboxMsg(OPCODE_RAPF, bound, trid, seq & 0xFFF, pdid)
        target = self.system.node(dst_coord)
        delay = self.wire.one_way(self.system.hops(self.node.coord, dst_coord))
        self.sim.schedule(delay, target.engine.mailbox_receive, msg.encode(), tag="rapf_wire")
        self.sim.metrics.incr("rapf_sent")

    # -- target side ---------------------------------------------------------

    def rx_packet(self, pkt: Packet) -> bool:
        """Translate and write one packet; returns True on ACK."""
        tx = pkt.tx
        xfer = tx.transfer
        sim = self.sim
        initiator = self.system.node(xfer.src_node).engine
        hops = self.system.hops(self.node.coord, xfer.src_node)
        back = self.wire.ack_path(hops)
        cb = self.node.bank_for(xfer.pdid, xfer.dst_proc, strict=False)
        if cb is None:
            sim.metrics.incr("unknown_pdid")
            sim.schedule(back, initiator.on_nack, encode_nack(tx.trid), pkt.seq, tag="nack")
            return False
        res = self.node.smmu.translate(RX_STREAM, cb, pkt.dst_va, True)
        if isinstance(res, Translated):
            self.node.mm.frames.write(res.pa, pkt.data)
            sim.schedule(res.latency_ns + back, initiator.on_ack, tx.trid, pkt.seq, tag="ack")
            return True
        if not isinstance(res, Terminated):
            raise InvariantViolation("stall-mode bank reached the engine")
        entry = FaultFifoEntry(xfer.src_node, tx.trid, pkt.seq, xfer.pdid,
                               compress_iova(xfer.dst_proc, pkt.dst_va))
        outcome = self.node.fifo.push(entry)
        if outcome is PushOutcome.PUSHED:
            sim.metrics.incr("fifo_pushes")
        elif outcome is PushOutcome.DUP_SKIPPED:
            sim.metrics.incr("fifo_dups")
        else:
            sim.metrics.incr("fifo_drops")
        delay = self.node.smmu.config.walk_ns + back
        sim.schedule(delay, initiator.on_nack, encode_nack(tx.trid), pkt.seq, tag="nack")
        return False

    def check_invariants(self) -> None:
        limit = self.config.outstanding_per_transfer
        for xfer in self.transfers.values():
            if xfer.in_flight > limit:
                raise InvariantViolation(f"transfer on channel {xfer.channel} has {xfer.in_flight} in flight")
        if len(self.transfers) > self.config.max_transfers:
            raise InvariantViolation("too many live transfers")

