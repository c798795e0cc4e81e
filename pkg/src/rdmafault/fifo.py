"""Wire-level records: receiver fault FIFO entries, mailbox words, NACK words.

The fault FIFO stores one 128-bit record per logged slave error, as four
32-bit words each carrying a valid bit in bit 0. Software pops an entry with
two 64-bit reads; only the second read pops.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum

from .errors import EmptyFifo, FieldOverflow, ProtocolViolation
from .memory import PAGE_SHIFT

SRC_ID_BITS = 22
TRID_BITS = 14
SEQ_BITS = 14
PDID_FIELD_BITS = 16
IOVA_FIELD_BITS = 32
EXA_ACK_BITS = 2
PROC_SHIFT = 28
PAGE_FIELD_MASK = (1 << 27) - 1

DEFAULT_FIFO_DEPTH = 512
OPCODE_RAPF = 2
NACK_PAGE_FAULT = 1


def _check(name: str, value: int, bits: int) -> int:
    if not 0 <= value < (1 << bits):
        raise FieldOverflow(f"{name}={value:#x} does not fit in {bits} bits")
    return value


def compress_iova(proc_idx: int, va: int) -> int:
    """Pack a process index and a page number into the 32-bit IOVA field.

    The top nibble is the process index; the rest is the 4 KB page number
    with its top bit clear.
    """
    _check("proc_idx", proc_idx, 4)
    pn = va >> PAGE_SHIFT
    if pn > PAGE_FIELD_MASK:
        raise FieldOverflow(f"page number {pn:#x} exceeds 27 bits")
    return (proc_idx << PROC_SHIFT) | pn


def expand_iova(field: int) -> tuple[int, int]:
    """Inverse of :func:`compress_iova`: ``(proc_idx, page-aligned va)``."""
    _check("iova", field, IOVA_FIELD_BITS)
    return field >> PROC_SHIFT, (field & PAGE_FIELD_MASK) << PAGE_SHIFT


@dataclass(frozen=True)
class FaultFifoEntry:
    src_id: int
    trid: int
    seq: int
    pdid: int
    iova: int
    exa_ack: int = 0

    def __post_init__(self):
        _check("src_id", self.src_id, SRC_ID_BITS)
        _check("trid", self.trid, TRID_BITS)
        _check("seq", self.seq, SEQ_BITS)
        _check("pdid", self.pdid, PDID_FIELD_BITS)
        _check("iova", self.iova, IOVA_FIELD_BITS)
        _check("exa_ack", self.exa_ack, EXA_ACK_BITS)

    @property
    def page(self) -> int:
        return self.iova & PAGE_FIELD_MASK

    @property
    def key(self) -> tuple[int, int, int, int]:
        return self.src_id, self.trid, self.seq, self.page

    def to_words(self) -> tuple[int, int, int, int]:
        w0 = (self.src_id << 8) | ((self.trid >> 12) << 4) | 1
        w1 = ((self.trid & 0xFFF) << 20) | (self.seq << 4) | 1
        w2 = (self.pdid << 16) | ((self.iova >> 20) << 4) | (self.exa_ack << 1) | 1
        w3 = ((self.iova & 0xFFFFF) << 12) | 1
        return w0, w1, w2, w3

    @classmethod
    def from_words(cls, w0: int, w1: int, w2: int, w3: int) -> FaultFifoEntry:
        for i, w in enumerate((w0, w1, w2, w3)):
            if not w & 1:
                raise ValueError(f"word {i} of FIFO entry is not valid")
        return cls(
            src_id=(w0 >> 8) & 0x3FFFFF,
            trid=(((w0 >> 4) & 0x3) << 12) | ((w1 >> 20) & 0xFFF),
            seq=(w1 >> 4) & 0x3FFF,
            pdid=(w2 >> 16) & 0xFFFF,
            iova=(((w2 >> 4) & 0xFFF) << 20) | ((w3 >> 12) & 0xFFFFF),
            exa_ack=(w2 >> 1) & 0x3,
        )


class PushOutcome(Enum):
    PUSHED = "pushed"
    DUP_SKIPPED = "dup_skipped"
    DROPPED_FULL = "dropped_full"


class ReadHalf(Enum):
    FIRST = 1
    SECOND = 2


class FifoFsm(Enum):
    IDLE = "idle"
    FIRST_HALF_READ = "first_half_read"


class FaultFifo:
    """Bounded ring of 128-bit entries with consecutive-duplicate suppression."""

    def __init__(self, depth: int = DEFAULT_FIFO_DEPTH) -> None:
        if depth < 1:
            raise ValueError("FIFO depth must be positive")
        self.depth = depth
        self.entries: deque[tuple[int, int, int, int]] = deque()
        self.last_pushed: tuple[int, int, int, int] | None = None
        self.state = FifoFsm.IDLE
        self.pushes = 0
        self.dups = 0
        self.drops = 0

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, entry: FaultFifoEntry) -> PushOutcome:
        key = entry.key
        if key == self.last_pushed:
            self.dups += 1
            return PushOutcome.DUP_SKIPPED
        if len(self.entries) >= self.depth:
            self.drops += 1
            return PushOutcome.DROPPED_FULL
        self.entries.append(entry.to_words())
        self.last_pushed = key
        self.pushes += 1
        return PushOutcome.PUSHED

    def read64(self, half: ReadHalf) -> int:
        if not self.entries:
            raise EmptyFifo("fault FIFO is empty")
        w0, w1, w2, w3 = self.entries[0]
        if half is ReadHalf.FIRST:
            self.state = FifoFsm.FIRST_HALF_READ
            return (w0 << 32) | w1
        if self.state is not FifoFsm.FIRST_HALF_READ:
            raise ProtocolViolation("second half read without a preceding first half")
        self.entries.popleft()
        self.state = FifoFsm.IDLE
        return (w2 << 32) | w3

    def pop_entry(self) -> FaultFifoEntry:
        """Two-phase read of the head entry, decoded."""
        hi = self.read64(ReadHalf.FIRST)
        lo = self.read64(ReadHalf.SECOND)
        return FaultFifoEntry.from_words(hi >> 32, hi & 0xFFFF_FFFF, lo >> 32, lo & 0xFFFF_FFFF)


@dataclass(frozen=True)
class MailboxMsg:
    opcode: int
    wired_pdid: int
    trid: int
    seq: int
    rcved_pdid: int

    def __post_init__(self):
        _check("opcode", self.opcode, 2)
        _check("wired_pdid", self.wired_pdid, 16)
        _check("trid", self.trid, TRID_BITS)
        _check("seq", self.seq, 12)
        _check("rcved_pdid", self.rcved_pdid, 16)

    @property
    def word0(self) -> int:
        return (self.trid << 18) | (self.wired_pdid << 2) | self.opcode

    @property
    def word1(self) -> int:
        return (self.rcved_pdid << 12) | self.seq

    def encode(self) -> int:
        return (self.word1 << 32) | self.word0

    @classmethod
    def decode(cls, value: int) -> MailboxMsg:
        w0 = value & 0xFFFF_FFFF
        w1 = (value >> 32) & 0xFFFF_FFFF
        return cls(
            opcode=w0 & 0x3,
            wired_pdid=(w0 >> 2) & 0xFFFF,
            trid=(w0 >> 18) & 0x3FFF,
            seq=w1 & 0xFFF,
            rcved_pdid=(w1 >> 12) & 0xFFFF,
        )


def encode_nack(trid: int, errorcode: int = NACK_PAGE_FAULT, opcode: int = 0) -> int:
    _check("trid", trid, TRID_BITS)
    _check("errorcode", errorcode, 3)
    _check("opcode", opcode, 2)
    return (errorcode << 16) | (trid << 2) | opcode


def decode_nack(value: int) -> tuple[int, int]:
    """``(trid, errorcode)`` from a NACK word."""
    return (value >> 2) & 0x3FFF, (value >> 16) & 0x7


def is_pf_nack(value: int) -> bool:
    # The firmware compares the code against 1; any nonzero code is treated
    # as a page-fault NACK here and the raw code is kept by the caller.
    return ((value >> 16) & 0x07) != 0
