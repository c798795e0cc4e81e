"""Reference implementations written independently of the package code.

They favor obviousness over speed: byte-by-byte scans, explicit state
tables and string building. Tests compare the package against these.
"""

from __future__ import annotations

BLOCK = 16384


def segment_by_scan(dst_va: int, length: int) -> list[tuple[int, int]]:
    """Walk every byte; start a new span whenever the destination byte address
    is a multiple of the block size."""
    spans: list[list[int]] = []
    for off in range(length):
        if off == 0 or (dst_va + off) % BLOCK == 0:
            spans.append([off, 0])
        spans[-1][1] += 1
    return [tuple(s) for s in spans]


def stream_id_by_bits(tbu: int, master: int, axi: int) -> int:
    """Assemble the 15-bit StreamID one bit at a time, MSB first."""
    bits = format(tbu, "05b") + format(master, "04b") + format(axi, "06b")
    value = 0
    for b in bits:
        value = value * 2 + (b == "1")
    return value


# Two-state read machine of the fault FIFO, written as an explicit table.
# (state, request, nonempty) -> (next state, returns, pops, error)
FIFO_FSM = {
    ("idle", "first", True): ("first_half", "hi", False, None),
    ("idle", "second", True): ("idle", None, False, "protocol"),
    ("first_half", "first", True): ("first_half", "hi", False, None),
    ("first_half", "second", True): ("idle", "lo", True, None),
    ("idle", "first", False): ("idle", None, False, "empty"),
    ("idle", "second", False): ("idle", None, False, "empty"),
    ("first_half", "first", False): ("first_half", None, False, "empty"),
    ("first_half", "second", False): ("first_half", None, False, "empty"),
}


def netlink_by_concat(src_id, trid, seq, iova, pdid, rw) -> str:
    return "%06X%04X%04X%08X%04X%01X" % (src_id, trid, seq, iova, pdid, rw)


def fifo_words_by_table(src_id, trid, seq, pdid, iova, exa_ack=0) -> tuple[int, int, int, int]:
    """Build the four FIFO words from a per-bit placement table."""

    def place(fields):
        word = [0] * 32
        for hi, lo, value in fields:
            width = hi - lo + 1
            for i in range(width):
                word[lo + i] = (value >> i) & 1
        word[0] = 1
        return sum(b << i for i, b in enumerate(word))

    w0 = place([(29, 8, src_id), (5, 4, trid >> 12)])
    w1 = place([(31, 20, trid & 0xFFF), (17, 4, seq)])
    w2 = place([(31, 16, pdid), (15, 4, iova >> 20), (2, 1, exa_ack)])
    w3 = place([(31, 12, iova & 0xFFFFF)])
    return w0, w1, w2, w3


def leading_mapped_pages(mapped: set[int], first: int, n: int) -> int:
    count = 0
    for pn in range(first, first + n):
        if pn not in mapped:
            break
        count += 1
    return count


def boundary_values(bits: int) -> list[int]:
    """0, max, both alternating-bit patterns and a couple of edges."""
    mx = (1 << bits) - 1
    alt_a = int(("10" * bits)[:bits], 2)
    alt_b = mx ^ alt_a
    return sorted({0, 1, mx, mx - 1 if mx else 0, alt_a, alt_b, 1 << (bits - 1)})


def smmu_counters_by_fsm(events, hupcf: bool, stall: bool) -> dict[str, int]:
    """Replay a bank's fault-recording rules over a script of events.

    Each event is ``"hit"`` (page present), ``"miss"`` (page faults) or
    ``"clear"`` (software reads and clears FSR). Returns expected counters.
    """
    c = dict(recorded=0, multi=0, terminations=0, collateral=0, stalls=0, translated=0)
    tf = False
    for ev in events:
        if ev == "clear":
            tf = False
            continue
        present = ev == "hit"
        if tf and not hupcf:
            if stall:
                c["stalls"] += 1
            elif present:
                c["collateral"] += 1
                c["terminations"] += 1
            else:
                c["multi"] += 1
                c["terminations"] += 1
            continue
        if present:
            c["translated"] += 1
            continue
        if tf:
            c["multi"] += 1
        else:
            tf = True
            c["recorded"] += 1
        if stall:
            c["stalls"] += 1
        else:
            c["terminations"] += 1
    return c
