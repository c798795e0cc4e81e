"""Per-node memory manager.

Process address spaces are page maps (4 KB pages). Pages start out
demand-paged, come in on touch, can be armed copy-on-write, pinned up to a
lock limit, or transiently invalidated the way a huge-page merge does it.
Every operation charges simulated time from :class:`CostModel` into
``MemoryManager.charged_ns``; callers drain it with ``take_charged()``.
"""

from __future__ import annotations

import bisect
import random
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from enum import Enum

from .errors import (
    NotMappedError,
    NotPinnedError,
    OverlapError,
    PinLimitExceeded,
    SegFault,
    ValueOutOfRange,
)

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
PAGE_MASK = PAGE_SIZE - 1
DEFAULT_VA_BITS = 39
DEFAULT_PIN_LIMIT = 64 * 1024


def page_num(va: int) -> int:
    return va >> PAGE_SHIFT


def page_offset(va: int) -> int:
    return va & PAGE_MASK


def page_span(va: int, length: int) -> range:
    """Page numbers covered by ``[va, va+length)``, rounded outward."""
    if length <= 0:
        raise ValueError(f"length must be positive, got {length}")
    return range(va >> PAGE_SHIFT, ((va + length - 1) >> PAGE_SHIFT) + 1)


def check_va(va: int, width: int = DEFAULT_VA_BITS) -> int:
    if not 0 <= va < (1 << width):
        raise ValueOutOfRange(f"address {va:#x} exceeds {width}-bit space")
    return va


# ---------------------------------------------------------------------------
# cost model

TABLE_SIZES = (16, 64, 256, 1024, 4096, 16384, 32768, 65536)

#: Per-buffer overhead in microseconds for each operation and buffer size.
MEMORY_OP_COSTS_US: dict[str, tuple[int, ...]] = {
    "mmap": (2, 2, 2, 2, 2, 2, 2, 2),
    "munmap": (6, 6, 6, 6, 7, 10, 12, 19),
    "pin": (6, 6, 6, 6, 6, 15, 27, 49),
    "unpin": (2, 2, 2, 2, 2, 5, 8, 14),
    "touch": (3, 3, 3, 3, 3, 10, 19, 40),
}


@dataclass
class CostModel:
    table_us: dict[str, tuple[int, ...]] = field(
        default_factory=lambda: dict(MEMORY_OP_COSTS_US)
    )
    minor_fault_ns: int = 2_500
    major_fault_io_ns: int = 100_000
    gup_per_page_ns: int = 750
    netlink_roundtrip_ns: int = 10_000

    def __post_init__(self) -> None:
        for op, row in self.table_us.items():
            if len(row) != len(TABLE_SIZES) or any(v < 0 for v in row):
                raise ValueError(f"bad cost row for {op!r}: {row}")
        for name in ("minor_fault_ns", "major_fault_io_ns", "gup_per_page_ns", "netlink_roundtrip_ns"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def lookup_us(self, op: str, size: int) -> float:
        """Table cost for ``size`` bytes; in-between sizes use the next larger bucket.

        Sizes above the largest bucket are charged per started 64 KB chunk.
        """
        if size <= 0:
            raise ValueError("size must be positive")
        row = self.table_us[op]
        i = bisect.bisect_left(TABLE_SIZES, size)
        if i < len(TABLE_SIZES):
            return row[i]
        chunks = -(-size // TABLE_SIZES[-1])
        return row[-1] * chunks

    def cost_ns(self, op: str, size: int) -> int:
        return round(self.lookup_us(op, size) * 1000)


# ---------------------------------------------------------------------------
# page state


class PageState(Enum):
    UNMAPPED = "unmapped"
    NOT_PRESENT = "not_present"
    PRESENT = "present"
    PRESENT_RO = "present_ro"


class TouchOutcome(Enum):
    ALREADY_PRESENT = "already_present"
    MINOR_FAULT = "minor_fault"
    MAJOR_FAULT = "major_fault"
    COW_COPIED = "cow_copied"


class FaultKind(Enum):
    NOT_PRESENT = "not_present"
    UNMAPPED = "unmapped"
    WRITE_TO_READ_ONLY = "write_to_read_only"


@dataclass(frozen=True)
class Present:
    pa: int
    frame: int
    writable: bool = True


@dataclass(frozen=True)
class Fault:
    kind: FaultKind


@dataclass
class PageEntry:
    """One mapped page.

    ``frame`` is the live frame while present. A NOT_PRESENT page may still
    hold a frame as its backing copy (contents survive an invalidation and
    come back on the next touch); a never-touched page has none and pages in
    zero-filled.
    """

    state: PageState
    frame: int | None = None
    cow_origin: int | None = None
    pinned: bool = False
    disk_backed: bool = False


class AddressSpace:
    """Page map of one process inside one protection domain."""

    def __init__(self, pdid: int, proc_idx: int, pin_limit: int = DEFAULT_PIN_LIMIT,
                 va_bits: int = DEFAULT_VA_BITS) -> None:
        if not 0 <= pdid < 16:
            raise ValueOutOfRange(f"pdid {pdid} outside 0..15")
        if not 0 <= proc_idx < 16:
            raise ValueOutOfRange(f"proc_idx {proc_idx} outside 0..15")
        self.pdid = pdid
        self.proc_idx = proc_idx
        self.pin_limit = pin_limit
        self.va_bits = va_bits
        self.pages: dict[int, PageEntry] = {}
        self.pinned_bytes = 0

    def state(self, va: int) -> PageState:
        e = self.pages.get(va >> PAGE_SHIFT)
        return PageState.UNMAPPED if e is None else e.state

    def entry(self, va: int) -> PageEntry | None:
        return self.pages.get(va >> PAGE_SHIFT)

    def pinned_pages(self) -> int:
        return sum(1 for e in self.pages.values() if e.pinned)

    def __repr__(self) -> str:
        return f"AddressSpace(pdid={self.pdid}, proc={self.proc_idx}, pages={len(self.pages)})"


class PhysicalMemory:
    """Frame store. Frame ids come from a monotone counter and are never reused."""

    def __init__(self) -> None:
        self.frames: dict[int, bytearray] = {}
        self._next = 1

    def alloc(self, data: bytes | None = None) -> int:
        fid = self._next
        self._next += 1
        self.frames[fid] = bytearray(data) if data is not None else bytearray(PAGE_SIZE)
        return fid

    def free(self, fid: int) -> None:
        self.frames.pop(fid, None)

    def read(self, pa: int, n: int) -> bytes:
        off = pa & PAGE_MASK
        if off + n > PAGE_SIZE:
            raise ValueError("physical read crosses a frame boundary")
        return bytes(self.frames[pa >> PAGE_SHIFT][off:off + n])

    def write(self, pa: int, data: bytes) -> None:
        off = pa & PAGE_MASK
        if off + len(data) > PAGE_SIZE:
            raise ValueError("physical write crosses a frame boundary")
        self.frames[pa >> PAGE_SHIFT][off:off + len(data)] = data


InvalidationListener = Callable[[AddressSpace, int, int], None]


class MemoryManager:
    def __init__(self, costs: CostModel | None = None, frames: PhysicalMemory | None = None) -> None:
        self.costs = costs or CostModel()
        self.frames = frames or PhysicalMemory()
        self.charged_ns = 0
        #: pages actually brought in (minor, major or COW copy) since creation
        self.paged_in = 0
        self.invalidation_listeners: list[InvalidationListener] = []

    def take_charged(self) -> int:
        ns, self.charged_ns = self.charged_ns, 0
        return ns

    def _notify(self, aspace: AddressSpace, first: int, count: int) -> None:
        for cb in self.invalidation_listeners:
            cb(aspace, first, count)

    def _covered(self, aspace: AddressSpace, va: int, length: int) -> list[PageEntry]:
        check_va(va, aspace.va_bits)
        check_va(va + length - 1, aspace.va_bits)
        out = []
        for pn in page_span(va, length):
            e = aspace.pages.get(pn)
            if e is None:
                raise NotMappedError(f"page {pn:#x} not mapped")
            out.append(e)
        return out

    # -- region operations ---------------------------------------------------

    def map_region(self, aspace: AddressSpace, va: int, length: int, disk_backed: bool = False) -> None:
        check_va(va, aspace.va_bits)
        check_va(va + length - 1, aspace.va_bits)
        span = page_span(va, length)
        for pn in span:
            if pn in aspace.pages:
                raise OverlapError(f"page {pn:#x} already mapped")
        for pn in span:
            aspace.pages[pn] = PageEntry(PageState.NOT_PRESENT, disk_backed=disk_backed)
        self.charged_ns += self.costs.cost_ns("mmap", length)

    def unmap_region(self, aspace: AddressSpace, va: int, length: int) -> None:
        span = page_span(va, length)
        entries = self._covered(aspace, va, length)
        for pn, e in zip(span, entries):
            if e.pinned:
                aspace.pinned_bytes -= PAGE_SIZE
            if e.frame is not None and e.frame != e.cow_origin:
                self.frames.free(e.frame)
            del aspace.pages[pn]
        self._notify(aspace, span.start, len(span))
        self.charged_ns += self.costs.cost_ns("munmap", length)

    def _page_in(self, e: PageEntry, is_write: bool) -> tuple[TouchOutcome, int]:
        st = e.state
        if st is PageState.PRESENT:
            return TouchOutcome.ALREADY_PRESENT, 0
        if st is PageState.PRESENT_RO:
            if not is_write:
                return TouchOutcome.ALREADY_PRESENT, 0
            e.frame = self.frames.alloc(self.frames.frames[e.frame])
            e.state = PageState.PRESENT
            self.paged_in += 1
            return TouchOutcome.COW_COPIED, self.costs.minor_fault_ns
        # NOT_PRESENT
        if e.frame is None:
            e.frame = self.frames.alloc()
        e.state = PageState.PRESENT
        self.paged_in += 1
        if e.disk_backed:
            return TouchOutcome.MAJOR_FAULT, self.costs.minor_fault_ns + self.costs.major_fault_io_ns
        return TouchOutcome.MINOR_FAULT, self.costs.minor_fault_ns

    def touch(self, aspace: AddressSpace, va: int, is_write: bool = False) -> TouchOutcome:
        pn = va >> PAGE_SHIFT
        e = aspace.pages.get(pn)
        if e is None:
            raise SegFault(va)
        outcome, ns = self._page_in(e, is_write)
        if outcome is TouchOutcome.COW_COPIED:
            self._notify(aspace, pn, 1)
        self.charged_ns += ns
        return outcome

    def touch_region(self, aspace: AddressSpace, va: int, length: int, is_write: bool = False) -> None:
        """Touch one byte per page; charged at the per-buffer table rate."""
        span = page_span(va, length)
        entries = self._covered(aspace, va, length)
        for pn, e in zip(span, entries):
            outcome, _ = self._page_in(e, is_write)
            if outcome is TouchOutcome.COW_COPIED:
                self._notify(aspace, pn, 1)
        self.charged_ns += self.costs.cost_ns("touch", length)

    def pin_region(self, aspace: AddressSpace, va: int, length: int) -> None:
        entries = self._covered(aspace, va, length)
        new = sum(1 for e in entries if not e.pinned)
        if aspace.pinned_bytes + new * PAGE_SIZE > aspace.pin_limit:
            raise PinLimitExceeded(
                f"pinning {new} more pages exceeds the {aspace.pin_limit} B lock limit"
            )
        for e in entries:
            self._page_in(e, False)
            if not e.pinned:
                e.pinned = True
                aspace.pinned_bytes += PAGE_SIZE
        self.charged_ns += self.costs.cost_ns("pin", length)

    def unpin_region(self, aspace: AddressSpace, va: int, length: int) -> None:
        entries = self._covered(aspace, va, length)
        if not all(e.pinned for e in entries):
            raise NotPinnedError(f"region {va:#x}+{length} is not fully pinned")
        for e in entries:
            e.pinned = False
            aspace.pinned_bytes -= PAGE_SIZE
        self.charged_ns += self.costs.cost_ns("unpin", length)

    def get_user_pages(self, aspace: AddressSpace, va: int, n: int, is_write: bool = False) -> int:
        """Bring in up to ``n`` pages starting at ``va``'s page.

        Stops before the first page the process does not own. Returns how many
        pages are resident afterwards (already-present ones included).
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        first = va >> PAGE_SHIFT
        count = 0
        for pn in range(first, first + n):
            e = aspace.pages.get(pn)
            if e is None:
                break
            outcome, _ = self._page_in(e, is_write)
            if outcome is TouchOutcome.COW_COPIED:
                self._notify(aspace, pn, 1)
            count += 1
        self.charged_ns += count * self.costs.gup_per_page_ns
        return count

    def lookup(self, aspace: AddressSpace, va: int, is_write: bool) -> Present | Fault:
        e = aspace.pages.get(va >> PAGE_SHIFT)
        if e is None:
            return Fault(FaultKind.UNMAPPED)
        st = e.state
        if st is PageState.PRESENT:
            return Present((e.frame << PAGE_SHIFT) | (va & PAGE_MASK), e.frame, True)
        if st is PageState.PRESENT_RO:
            if is_write:
                return Fault(FaultKind.WRITE_TO_READ_ONLY)
            return Present((e.frame << PAGE_SHIFT) | (va & PAGE_MASK), e.frame, False)
        return Fault(FaultKind.NOT_PRESENT)

    # -- fault injection -----------------------------------------------------

    def invalidate_region(self, aspace: AddressSpace, va: int, length: int) -> int:
        """Make the unpinned present pages of a region NOT_PRESENT, keeping contents.

        Returns the number of pages invalidated.
        """
        span = page_span(va, length)
        entries = self._covered(aspace, va, length)
        n = 0
        for e in entries:
            if not e.pinned and e.state in (PageState.PRESENT, PageState.PRESENT_RO):
                e.state = PageState.NOT_PRESENT
                e.cow_origin = None
                n += 1
        self._notify(aspace, span.start, len(span))
        return n

    def arm_cow(self, aspace: AddressSpace, va: int, length: int) -> None:
        """Share the region's frames read-only, as after a fork."""
        span = page_span(va, length)
        for e in self._covered(aspace, va, length):
            if e.state is PageState.NOT_PRESENT:
                self._page_in(e, False)
            if e.state is PageState.PRESENT:
                e.state = PageState.PRESENT_RO
                e.cow_origin = e.frame
        self._notify(aspace, span.start, len(span))

    def thp_tick(self, aspace: AddressSpace, rng: random.Random, range_pages: int = 512) -> tuple[int, int] | None:
        """Invalidate one fully-resident aligned range, as a huge-page merge would.

        Pinned pages are left alone. Returns ``(first_page, range_pages)`` or
        ``None`` when there is no candidate.
        """
        if range_pages < 1 or range_pages & (range_pages - 1):
            raise ValueError("range_pages must be a power of two")
        resident = (PageState.PRESENT, PageState.PRESENT_RO)
        bases = sorted({pn & ~(range_pages - 1) for pn in aspace.pages})
        candidates = []
        for base in bases:
            group = [aspace.pages.get(pn) for pn in range(base, base + range_pages)]
            if all(e is not None and e.state in resident for e in group) and any(
                not e.pinned for e in group
            ):
                candidates.append(base)
        if not candidates:
            return None
        base = rng.choice(candidates)
        for pn in range(base, base + range_pages):
            e = aspace.pages[pn]
            if not e.pinned:
                e.state = PageState.NOT_PRESENT
                e.cow_origin = None
        self._notify(aspace, base, range_pages)
        return base, range_pages

    # -- CPU data access (setup and verification, never charged) -------------

    def write_bytes(self, aspace: AddressSpace, va: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            cur = va + pos
            n = min(PAGE_SIZE - (cur & PAGE_MASK), len(data) - pos)
            e = aspace.pages.get(cur >> PAGE_SHIFT)
            if e is None:
                raise SegFault(cur)
            outcome, _ = self._page_in(e, True)
            if outcome is TouchOutcome.COW_COPIED:
                self._notify(aspace, cur >> PAGE_SHIFT, 1)
            self.frames.write((e.frame << PAGE_SHIFT) | (cur & PAGE_MASK), data[pos:pos + n])
            pos += n

    def peek_bytes(self, aspace: AddressSpace, va: int, length: int) -> bytes:
        """Read memory contents without changing any page state.

        Pages that were never brought in read as zeros.
        """
        out = bytearray()
        pos = 0
        while pos < length:
            cur = va + pos
            n = min(PAGE_SIZE - (cur & PAGE_MASK), length - pos)
            e = aspace.pages.get(cur >> PAGE_SHIFT)
            if e is None:
                raise SegFault(cur)
            if e.frame is None:
                out += bytes(n)
            else:
                out += self.frames.read((e.frame << PAGE_SHIFT) | (cur & PAGE_MASK), n)
            pos += n
        return bytes(out)


class ThpInjector:
    """Periodic huge-page style invalidation over a set of address spaces."""

    def __init__(self, sim, mm: MemoryManager, spaces: Iterable[AddressSpace],
                 period_ns: int, range_pages: int = 512, max_ticks: int | None = None) -> None:
        if period_ns <= 0:
            raise ValueError("THP period must be positive")
        if max_ticks is not None and max_ticks < 1:
            raise ValueError("max_ticks must be positive")
        self.sim = sim
        self.mm = mm
        self.spaces = list(spaces)
        self.period_ns = period_ns
        self.range_pages = range_pages
        self.rng = sim.rng.stream("thp")
        self.hits: list[tuple[int, int, int]] = []
        self.max_ticks = max_ticks
        self.ticks = 0
        self._handle = sim.schedule(period_ns, self._tick, tag="thp_tick")

    @property
    def active(self) -> bool:
        return self._handle is not None and self._handle.pending

    def _tick(self) -> None:
        self.ticks += 1
        for aspace in self.spaces:
            hit = self.mm.thp_tick(aspace, self.rng, self.range_pages)
            if hit is not None:
                self.hits.append((self.sim.now, *hit))
                self.sim.metrics.incr("thp_invalidations")
        if self.max_ticks is None or self.ticks < self.max_ticks:
            self._handle = self.sim.schedule(self.period_ns, self._tick, tag="thp_tick")

    def stop(self) -> None:
        self.sim.cancel(self._handle)
