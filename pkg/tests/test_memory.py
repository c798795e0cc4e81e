import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import leading_mapped_pages
from rdmafault.errors import NotMappedError, NotPinnedError, OverlapError, PinLimitExceeded, SegFault
from rdmafault.memory import (
    MEMORY_OP_COSTS_US,
    PAGE_SIZE,
    TABLE_SIZES,
    AddressSpace,
    CostModel,
    Fault,
    FaultKind,
    MemoryManager,
    PageState,
    Present,
    ThpInjector,
    TouchOutcome,
    page_span,
)
from rdmafault.sim import Simulator


@pytest.fixture
def mm():
    return MemoryManager()


@pytest.fixture
def aspace():
    return AddressSpace(pdid=1, proc_idx=2)


# published per-buffer costs, in microseconds
TABLE = {
    "mmap": (2, 2, 2, 2, 2, 2, 2, 2),
    "munmap": (6, 6, 6, 6, 7, 10, 12, 19),
    "pin": (6, 6, 6, 6, 6, 15, 27, 49),
    "unpin": (2, 2, 2, 2, 2, 5, 8, 14),
    "touch": (3, 3, 3, 3, 3, 10, 19, 40),
}


def test_cost_table_matches_published_values():
    costs = CostModel()
    assert MEMORY_OP_COSTS_US == TABLE
    for op, row in TABLE.items():
        for size, us in zip(TABLE_SIZES, row):
            assert costs.lookup_us(op, size) == us


def test_intermediate_sizes_use_next_bucket():
    c = CostModel()
    assert c.lookup_us("pin", 17) == 6
    assert c.lookup_us("pin", 4097) == 15
    assert c.lookup_us("pin", 65537) == 98


def test_negative_costs_rejected():
    with pytest.raises(ValueError):
        CostModel(minor_fault_ns=-1)


def test_map_marks_pages_not_present(mm, aspace):
    mm.map_region(aspace, 0x10000, 8192)
    assert aspace.state(0x10000) is PageState.NOT_PRESENT
    assert aspace.state(0x11000) is PageState.NOT_PRESENT
    assert aspace.state(0x12000) is PageState.UNMAPPED
    assert mm.take_charged() == 2000


def test_overlapping_map_rejected(mm, aspace):
    mm.map_region(aspace, 0x10000, 4096)
    with pytest.raises(OverlapError):
        mm.map_region(aspace, 0x10800, 4096)


def test_unmap_costs_and_segfault(mm, aspace):
    mm.map_region(aspace, 0x20000, 65536)
    mm.take_charged()
    mm.unmap_region(aspace, 0x20000, 65536)
    assert mm.take_charged() == 19_000
    with pytest.raises(SegFault):
        mm.touch(aspace, 0x20000)
    mm.map_region(aspace, 0x20000, 16)
    mm.take_charged()
    mm.unmap_region(aspace, 0x20000, 16)
    assert mm.take_charged() == 6_000
    with pytest.raises(NotMappedError):
        mm.unmap_region(aspace, 0x20000, 16)


def test_touch_outcomes(mm, aspace):
    mm.map_region(aspace, 0x10000, 4096)
    mm.take_charged()
    assert mm.touch(aspace, 0x10000) is TouchOutcome.MINOR_FAULT
    assert mm.take_charged() == 2_500
    assert mm.touch(aspace, 0x10000) is TouchOutcome.ALREADY_PRESENT
    assert mm.take_charged() == 0


def test_disk_backed_pages_take_major_fault(mm, aspace):
    mm.map_region(aspace, 0x10000, 4096, disk_backed=True)
    mm.take_charged()
    assert mm.touch(aspace, 0x10000) is TouchOutcome.MAJOR_FAULT
    assert mm.take_charged() == 2_500 + 100_000


def test_cow_write_copies_to_fresh_frame(mm, aspace):
    mm.map_region(aspace, 0x10000, 4096)
    mm.write_bytes(aspace, 0x10000, b"abc")
    mm.arm_cow(aspace, 0x10000, 4096)
    e = aspace.entry(0x10000)
    assert e.state is PageState.PRESENT_RO
    origin = e.cow_origin
    assert isinstance(mm.lookup(aspace, 0x10000, True), Fault)
    assert mm.touch(aspace, 0x10000, is_write=True) is TouchOutcome.COW_COPIED
    assert e.frame != origin
    assert mm.peek_bytes(aspace, 0x10000, 3) == b"abc"


def test_pin_costs_limits_and_repin(mm, aspace):
    assert aspace.pin_limit == 65536
    mm.map_region(aspace, 0x100000, 2 * 65536)
    mm.take_charged()
    mm.pin_region(aspace, 0x100000, 65536)
    assert mm.take_charged() == 49_000
    assert isinstance(mm.lookup(aspace, 0x10F000, False), Present)
    with pytest.raises(PinLimitExceeded):
        mm.pin_region(aspace, 0x110000, 4096)
    mm.unpin_region(aspace, 0x100000, 65536)
    assert mm.take_charged() == 14_000
    mm.pin_region(aspace, 0x100000, 16)
    mm.unpin_region(aspace, 0x100000, 16)
    mm.take_charged()
    with pytest.raises(NotPinnedError):
        mm.unpin_region(aspace, 0x100000, 16)
    mm.pin_region(aspace, 0x100000, 65536)


def test_unpin_small_costs_two_us(mm, aspace):
    mm.map_region(aspace, 0x100000, 16)
    mm.pin_region(aspace, 0x100000, 16)
    mm.take_charged()
    mm.unpin_region(aspace, 0x100000, 16)
    assert mm.take_charged() == 2_000


def test_get_user_pages_examples(mm, aspace):
    mm.map_region(aspace, 0x10000, 4 * PAGE_SIZE)
    assert mm.get_user_pages(aspace, 0x10000, 4) == 4
    b = AddressSpace(1, 3)
    mm.map_region(b, 0x10000, 2 * PAGE_SIZE)
    assert mm.get_user_pages(b, 0x10000, 4) == 2
    assert mm.get_user_pages(b, 0x50000, 4) == 0
    with pytest.raises(ValueError):
        mm.get_user_pages(b, 0x10000, 0)


def test_lookup_classification(mm, aspace):
    mm.map_region(aspace, 0x10000, 4096)
    assert mm.lookup(aspace, 0x10010, False) == Fault(FaultKind.NOT_PRESENT)
    assert mm.lookup(aspace, 0x90000, False) == Fault(FaultKind.UNMAPPED)
    mm.touch(aspace, 0x10000)
    res = mm.lookup(aspace, 0x10ABC, True)
    assert isinstance(res, Present) and res.pa & 0xFFF == 0xABC


def test_invalidation_keeps_contents(mm, aspace):
    mm.map_region(aspace, 0x10000, 8192)
    mm.write_bytes(aspace, 0x10FFE, b"wxyz")
    assert mm.invalidate_region(aspace, 0x10000, 8192) == 2
    assert aspace.state(0x10000) is PageState.NOT_PRESENT
    assert mm.peek_bytes(aspace, 0x10FFE, 4) == b"wxyz"
    mm.touch(aspace, 0x11000)
    assert mm.peek_bytes(aspace, 0x10FFE, 4) == b"wxyz"


def test_thp_tick_examples(mm, aspace):
    rng = random.Random(0)
    mm.map_region(aspace, 0, 4 * PAGE_SIZE)
    mm.pin_region(aspace, 0, 4 * PAGE_SIZE)
    assert mm.thp_tick(aspace, rng, 4) is None
    mm.unpin_region(aspace, 0, 4 * PAGE_SIZE)
    assert mm.thp_tick(aspace, rng, 4) == (0, 4)
    assert all(aspace.state(p * PAGE_SIZE) is PageState.NOT_PRESENT for p in range(4))
    with pytest.raises(ValueError):
        mm.thp_tick(aspace, rng, 3)


def test_thp_injector_reschedules_and_stops(mm, aspace):
    sim = Simulator(seed=3)
    mm.map_region(aspace, 0, 2 * 1024 * 1024)
    mm.touch_region(aspace, 0, 2 * 1024 * 1024)
    inj = ThpInjector(sim, mm, [aspace], period_ns=1000, max_ticks=3)
    sim.run_until(10_000)
    assert inj.ticks == 3 and len(inj.hits) == 1  # later ticks find nothing resident
    assert not inj.active
    inj.stop()


def test_invalidation_listeners_notified(mm, aspace):
    seen = []
    mm.invalidation_listeners.append(lambda a, first, n: seen.append((first, n)))
    mm.map_region(aspace, 0x10000, 8192)
    mm.unmap_region(aspace, 0x10000, 8192)
    assert seen == [(0x10, 2)]


def test_page_span_rounds_outward():
    assert list(page_span(0xFFF, 2)) == [0, 1]


# -- properties ---------------------------------------------------------------

_region = st.tuples(st.integers(0, 31), st.integers(1, 6))


@given(st.lists(_region, max_size=8), st.integers(0, 40), st.integers(1, 8))
def test_gup_equals_leading_mapped_scan(regions, first, n):
    mm = MemoryManager()
    a = AddressSpace(0, 0)
    for start, npages in regions:
        try:
            mm.map_region(a, start * PAGE_SIZE, npages * PAGE_SIZE)
        except OverlapError:
            pass
    mm.take_charged()
    expected = leading_mapped_pages(set(a.pages), first, n)
    assert mm.get_user_pages(a, first * PAGE_SIZE, n) == expected
    assert mm.take_charged() == expected * mm.costs.gup_per_page_ns


@given(st.integers(0, 15), st.booleans())
def test_touch_idempotent(page, is_write):
    mm = MemoryManager()
    a = AddressSpace(0, 0)
    mm.map_region(a, 0, 16 * PAGE_SIZE)
    mm.touch(a, page * PAGE_SIZE, is_write)
    snapshot = {pn: (e.state, e.frame) for pn, e in a.pages.items()}
    assert mm.touch(a, page * PAGE_SIZE, is_write) is TouchOutcome.ALREADY_PRESENT
    assert snapshot == {pn: (e.state, e.frame) for pn, e in a.pages.items()}


_mem_ops = st.lists(st.tuples(st.sampled_from(["map", "unmap", "pin", "unpin", "touch", "thp", "inv"]),
                              st.integers(0, 7), st.integers(1, 4)), max_size=40)


@given(_mem_ops, st.integers(0, 1000))
def test_pin_accounting_and_thp_spares_pinned(ops, seed):
    mm = MemoryManager()
    a = AddressSpace(0, 0, pin_limit=8 * PAGE_SIZE)
    rng = random.Random(seed)
    for op, p, n in ops:
        va, ln = p * PAGE_SIZE, n * PAGE_SIZE
        pinned_before = {pn for pn, e in a.pages.items() if e.pinned}
        try:
            if op == "map":
                mm.map_region(a, va, ln)
            elif op == "unmap":
                mm.unmap_region(a, va, ln)
            elif op == "pin":
                mm.pin_region(a, va, ln)
            elif op == "unpin":
                mm.unpin_region(a, va, ln)
            elif op == "touch":
                mm.touch(a, va, True)
            elif op == "inv":
                mm.invalidate_region(a, va, ln)
            else:
                mm.thp_tick(a, rng, 2)
        except (OverlapError, NotMappedError, PinLimitExceeded, NotPinnedError, SegFault):
            pass
        if op in ("thp", "inv"):
            for pn in pinned_before:
                assert a.pages[pn].state is PageState.PRESENT
        pinned = [e for e in a.pages.values() if e.pinned]
        assert a.pinned_bytes == PAGE_SIZE * len(pinned) <= a.pin_limit
        assert all(e.state in (PageState.PRESENT, PageState.PRESENT_RO) for e in pinned)
        for e in a.pages.values():
            if e.state in (PageState.PRESENT, PageState.PRESENT_RO):
                assert e.frame in mm.frames.frames
