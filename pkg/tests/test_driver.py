import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import netlink_by_concat
from rdmafault.driver import (
    NETLINK_DIGITS,
    DedupCache,
    DriverConfig,
    HandlerPolicy,
    NetlinkPageFaultMsg,
    UserTouchOutcome,
    decode_netlink,
    encode_netlink,
)
from rdmafault.errors import BadDigit, BadLength, FieldOverflow, ProcessKilled, UnboundDomain
from rdmafault.fifo import FaultFifoEntry, compress_iova
from rdmafault.memory import PAGE_SIZE, PageState
from rdmafault.system import System

VA = 0x100000


def node(policy=HandlerPolicy.TOUCH_A_PAGE, absorb=True, touch=False):
    system = System(hops=1)
    n = system.add_node(1, driver_config=DriverConfig(policy=policy, absorb_segfault=absorb))
    a = n.bind_process(0, 0)
    n.mm.map_region(a, VA, 16 * PAGE_SIZE)
    if touch:
        n.mm.touch_region(a, VA, 16 * PAGE_SIZE)
    n.mm.take_charged()
    return system, n, a


def test_netlink_example():
    s = encode_netlink(0, 5, 2, 0x10000000, 3, 1)
    assert s == "000000000500021000000000031" == netlink_by_concat(0, 5, 2, 0x10000000, 3, 1)
    assert len(s) == NETLINK_DIGITS == 27
    assert decode_netlink(s) == NetlinkPageFaultMsg(0, 5, 2, 0x10000000, 3, 1)


@given(st.integers(0, (1 << 22) - 1), st.integers(0, (1 << 14) - 1), st.integers(0, (1 << 14) - 1),
       st.integers(0, (1 << 32) - 1), st.integers(0, 0xFFFF), st.integers(0, 1))
def test_netlink_roundtrip_vs_concat(src, trid, seq, iova, pdid, rw):
    s = encode_netlink(src, trid, seq, iova, pdid, rw)
    assert s == netlink_by_concat(src, trid, seq, iova, pdid, rw)
    assert decode_netlink(s) == NetlinkPageFaultMsg(src, trid, seq, iova, pdid, rw)
    assert decode_netlink(s.lower()) == decode_netlink(s)


def test_netlink_errors():
    good = encode_netlink(0, 5, 2, 0x10000000, 3, 1)
    with pytest.raises(BadLength):
        decode_netlink(good[:-1])
    with pytest.raises(BadDigit):
        decode_netlink(good[:-1] + "g")
    with pytest.raises(FieldOverflow):
        decode_netlink("FFFFFF" + good[6:])  # src_id needs 22 bits, not 24
    with pytest.raises(FieldOverflow):
        decode_netlink(good[:-1] + "2")
    with pytest.raises(FieldOverflow):
        encode_netlink(0, 1 << 14, 0, 0, 0, 0)


def test_dedup_remembers_two_keys_per_source():
    d = DedupCache()
    assert not d.seen(1, (1, 0, 5))
    assert d.seen(1, (1, 0, 5))
    assert not d.seen(2, (1, 0, 5))
    assert not d.seen(1, (2, 0, 5))
    assert not d.seen(1, (3, 0, 5))
    assert not d.seen(1, (1, 0, 5))  # evicted after two newer keys
    assert d.recent(1) == [(3, 0, 5), (1, 0, 5)]


def test_touch_a_page_source_fault_sends_no_rapf():
    system, n, a = node()
    pages = n.driver.pf_send_handler(0, 0, VA + 0x10)
    assert pages == 1
    system.sim.run_until(10**6)
    assert a.state(VA) is PageState.PRESENT
    assert a.state(VA + PAGE_SIZE) is PageState.NOT_PRESENT
    m = system.sim.metrics
    assert m["netlink_msgs"] == 1 and m["rapf_sent"] == 0
    assert m["handler_invocations"] == 1


def test_touch_ahead_brings_four_pages():
    system, n, a = node(HandlerPolicy.TOUCH_AHEAD)
    assert n.driver.pf_send_handler(0, 0, VA) == 4
    assert [a.state(VA + i * PAGE_SIZE) for i in range(5)] == [PageState.PRESENT] * 4 + [PageState.NOT_PRESENT]
    assert system.sim.metrics["handler_invocations"] == 1
    n.driver.pf_send_handler(0, 0, VA)
    assert system.sim.metrics["handler_invocations"] == 1  # nothing new came in


def test_rcv_handler_dedups_and_sends_rapf_for_writes():
    system, n, a = node()
    e = FaultFifoEntry(1, 7, 0, 0, compress_iova(0, VA))
    n.fifo.push(e)
    n.fifo.push(FaultFifoEntry(1, 7, 0, 0, compress_iova(0, VA + PAGE_SIZE)))
    n.fifo.push(e)
    assert n.driver.pf_rcv_handler() == 3
    m = system.sim.metrics
    assert m["driver_dedup_hits"] == 1 and m["netlink_msgs"] == 2
    system.sim.run_until(10**6)
    assert m["rapf_sent"] == 2
    assert n.driver.idle


def test_rcv_handler_unbound_entry():
    system, n, a = node()
    n.fifo.push(FaultFifoEntry(1, 7, 0, 9, compress_iova(0, VA)))
    n.driver.pf_rcv_handler()
    assert system.sim.metrics["unbound_fifo_entries"] == 1


def test_user_touch_rapf_only_for_writes():
    system, n, a = node()
    t = n.thread(0, 0)
    with pytest.raises(ValueError):
        n.driver.send_rapf(t, NetlinkPageFaultMsg(1, 0, 0, compress_iova(0, VA), 0, 0))
    out, ns = n.driver.user_touch(t, NetlinkPageFaultMsg(1, 0, 0, compress_iova(0, VA), 0, 0))
    assert out is UserTouchOutcome.TOUCHED and ns == 2500
    assert system.sim.metrics["rapf_sent"] == 0


def test_segfault_absorbed_or_fatal():
    system, n, a = node()
    msg = NetlinkPageFaultMsg(1, 0, 0, compress_iova(0, 0x900000), 0, 1)
    out, _ = n.driver.user_touch(n.thread(0, 0), msg)
    assert out is UserTouchOutcome.SEGFAULT_ABSORBED
    assert system.sim.metrics["segfaults_absorbed"] == 1
    system, n, a = node(absorb=False)
    with pytest.raises(ProcessKilled):
        n.driver.user_touch(n.thread(0, 0), msg)


def test_spurious_irq_counted():
    system, n, a = node()
    n.driver.context_fault_irq(0)
    assert system.sim.metrics["spurious_irqs"] == 1


def test_unbound_domain():
    system, n, a = node()
    with pytest.raises(UnboundDomain):
        n.driver.thread(5, 0)


def test_irq_to_page_in_flow():
    system, n, a = node()
    cb = n.bank_for(0, 0)
    n.smmu.translate(0, cb, VA + 3 * PAGE_SIZE, False)
    system.sim.run_until(10**6)
    m = system.sim.metrics
    assert m["driver_irqs"] == 1 and m["handler_calls"] >= 1
    assert a.state(VA + 3 * PAGE_SIZE) is PageState.PRESENT
    assert n.driver.idle
