"""Deterministic discrete-event core.

Virtual clock in integer nanoseconds, a heap of events ordered by
(fire_at, sequence), per-label seeded random substreams and a counter sink.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import defaultdict
from collections.abc import Callable
from enum import Enum

NS_PER_US = 1_000
NS_PER_MS = 1_000_000

#: Counters every simulation starts with (all zero).
CORE_COUNTERS = (
    "timeouts_fired",
    "handler_invocations",
    "fifo_pushes",
    "fifo_drops",
    "rapf_sent",
    "pages_touched",
    "nack_count",
)


class EventState(Enum):
    PENDING = "pending"
    FIRED = "fired"
    CANCELLED = "cancelled"


class EventHandle:
    """A scheduled action. Keep it around to cancel the event later."""

    __slots__ = ("fire_at", "sequence", "action", "args", "tag", "detail", "state")

    def __init__(self, fire_at, sequence, action, args, tag, detail):
        self.fire_at = fire_at
        self.sequence = sequence
        self.action = action
        self.args = args
        self.tag = tag
        self.detail = detail
        self.state = EventState.PENDING

    @property
    def pending(self) -> bool:
        return self.state is EventState.PENDING

    def __lt__(self, other: EventHandle) -> bool:
        return (self.fire_at, self.sequence) < (other.fire_at, other.sequence)

    def __repr__(self) -> str:
        return f"EventHandle({self.fire_at}, {self.sequence}, {self.tag!r}, {self.state.value})"


class Metrics:
    """Named monotonic counters plus per-key latency samples."""

    def __init__(self) -> None:
        self.counters: dict[str, int] = dict.fromkeys(CORE_COUNTERS, 0)
        self.latencies: dict[str, list[int]] = defaultdict(list)

    def incr(self, name: str, n: int = 1) -> None:
        if n < 0:
            raise ValueError(f"counter {name!r} cannot decrease (n={n})")
        self.counters[name] = self.counters.get(name, 0) + n

    def __getitem__(self, name: str) -> int:
        return self.counters.get(name, 0)

    def record_latency(self, key: str, ns: int) -> None:
        self.latencies[key].append(ns)

    def snapshot(self) -> dict[str, int]:
        return dict(self.counters)


class RngStreams:
    """One root seed, split by label into independent ``random.Random`` streams.

    A stream's draws depend only on (seed, label), so adding a new consumer
    never perturbs the sequences other components see.
    """

    def __init__(self, seed: int) -> None:
        self.seed = seed
        self._streams: dict[str, random.Random] = {}

    def stream(self, label: str) -> random.Random:
        rng = self._streams.get(label)
        if rng is None:
            digest = hashlib.sha256(f"{self.seed}/{label}".encode()).digest()
            rng = random.Random(int.from_bytes(digest[:8], "big"))
            self._streams[label] = rng
        return rng


def _noop() -> None:
    pass


def _describe(args: tuple) -> str:
    # Only plain scalars go into traces; object reprs may embed addresses.
    parts = []
    for a in args:
        if isinstance(a, (int, str, bool)) or a is None:
            parts.append(str(a))
        else:
            parts.append(type(a).__name__)
    return " ".join(parts)


class Simulator:
    """Single-threaded event loop.

    >>> sim = Simulator()
    >>> out = []
    >>> _ = sim.schedule(5, out.append, "x")
    >>> sim.run_until(10)
    5
    >>> out
    ['x']
    """

    def __init__(self, seed: int = 0, trace: bool = False) -> None:
        self.now = 0
        self._queue: list[tuple[int, int, EventHandle]] = []
        self._next_seq = 0
        self.scheduled = 0
        self.dispatched = 0
        self.cancelled = 0
        self.metrics = Metrics()
        self.rng = RngStreams(seed)
        self.trace: list[str] | None = [] if trace else None

    @property
    def pending(self) -> int:
        return self.scheduled - self.dispatched - self.cancelled

    def schedule(
        self,
        delay: int,
        action: Callable[..., object],
        *args,
        tag: str | None = None,
        detail: str | None = None,
    ) -> EventHandle:
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        seq = self._next_seq
        self._next_seq += 1
        h = EventHandle(self.now + int(delay), seq, action, args, tag or action.__name__, detail)
        heapq.heappush(self._queue, (h.fire_at, seq, h))
        self.scheduled += 1
        return h

    def cancel(self, h: EventHandle | None) -> bool:
        if h is None or h.state is not EventState.PENDING:
            return False
        h.state = EventState.CANCELLED
        self.cancelled += 1
        return True

    def run_until(self, limit: int, stop: Callable[[], bool] | None = None) -> int:
        """Dispatch events with ``fire_at <= limit`` in order.

        Stops early when ``stop()`` turns true after a dispatch. Returns the
        clock value, which only ever moves to a dispatched event's time.
        """
        q = self._queue
        trace = self.trace
        while q:
            fire_at, _, h = q[0]
            if h.state is not EventState.PENDING:
                heapq.heappop(q)
                continue
            if fire_at > limit:
                break
            heapq.heappop(q)
            self.now = fire_at
            h.state = EventState.FIRED
            self.dispatched += 1
            if trace is not None:
                detail = h.detail if h.detail is not None else _describe(h.args)
                trace.append(f"{fire_at} {h.sequence} {h.tag} {detail}".rstrip())
            h.action(*h.args)
            if stop is not None and stop():
                break
        return self.now

    def advance(self, ns: int) -> int:
        """Let ``ns`` of simulated time pass, dispatching whatever falls inside."""
        if ns <= 0:
            return self.now
        target = self.now + ns
        self.schedule(ns, _noop, tag="advance")
        return self.run_until(target)

    def idle(self) -> bool:
        return self.pending == 0
