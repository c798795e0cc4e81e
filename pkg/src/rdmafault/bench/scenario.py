"""Experiment runner: measurement loops, sweeps, calibration and the soak."""

from __future__ import annotations

import dataclasses
import math
import random
from dataclasses import dataclass, field

from ..driver import HandlerPolicy
from ..engine import EngineConfig
from ..errors import ConfigError, InvariantViolation, Unsatisfiable
from ..memory import PAGE_SHIFT, PAGE_SIZE, TABLE_SIZES, AddressSpace, CostModel, MemoryManager, ThpInjector
from ..sim import Simulator
from ..smmu import SctlrFlags
from ..system import Node, System
from .config import FaultSite, Mode, ScenarioConfig, Strategy
from .report import SizeStats, StatsReport

VA_BASE = 0x4000_0000
VA_ALIGN = 64 * 1024
SRC_NODE = 0x000001
DST_NODE = 0x000002
PDID = 0
PROC = 0
CHANNEL = 0
COLD_RUN_BYTES = 8
#: A transfer that has not completed after this many timeout periods is
#: treated as a liveness failure.
LIVENESS_TIMEOUTS = 400
MEMORY_OPS = ("mmap", "munmap", "pin", "unpin", "touch")


class BufferAllocator:
    """Bump allocator for fresh virtual ranges, each followed by an unmapped guard."""

    def __init__(self, base: int = VA_BASE) -> None:
        self.next = base

    def take(self, size: int) -> int:
        va = self.next
        span = -(-size // VA_ALIGN) * VA_ALIGN
        self.next += span + VA_ALIGN
        return va


@dataclass
class Bench:
    """One simulated system set up for a scenario: initiator and target process."""

    cfg: ScenarioConfig
    system: System
    src: Node
    dst: Node
    src_as: AddressSpace
    dst_as: AddressSpace
    alloc_src: BufferAllocator = field(default_factory=BufferAllocator)
    alloc_dst: BufferAllocator = field(default_factory=lambda: BufferAllocator(VA_BASE + (1 << 34)))
    thp: list[ThpInjector] = field(default_factory=list)

    @property
    def sim(self) -> Simulator:
        return self.system.sim

    def spend(self, node: Node) -> int:
        """Let the time charged by the memory manager pass on the clock."""
        ns = node.mm.take_charged()
        if ns:
            self.sim.advance(ns)
        return ns


def build_bench(cfg: ScenarioConfig, seed: int | None = None, trace: bool = False) -> Bench:
    cfg.validate()
    sim = Simulator(cfg.seed if seed is None else seed, trace=trace)
    system = System(sim, dataclasses.replace(cfg.wire), hops=cfg.hops)
    driver_cfg = dataclasses.replace(cfg.driver, policy=cfg.policy)
    eng = EngineConfig(timeout_ns=cfg.timeout_ns, outstanding_per_transfer=cfg.outstanding_per_transfer)
    kwargs = dict(costs=dataclasses.replace(cfg.costs), smmu_config=dataclasses.replace(cfg.smmu),
                  engine_config=eng, driver_config=driver_cfg, fifo_depth=cfg.fifo_depth)
    src = system.add_node(SRC_NODE, **kwargs)
    dst = src if cfg.hops == 0 else system.add_node(DST_NODE, **kwargs)
    flags = SctlrFlags(hupcf=cfg.hupcf)
    src_as = src.bind_process(PDID, PROC, flags, pin_limit=cfg.pin_limit)
    if dst is src:
        dst_as = src_as
    else:
        dst_as = dst.bind_process(PDID, PROC, dataclasses.replace(flags), pin_limit=cfg.pin_limit)
    bench = Bench(cfg, system, src, dst, src_as, dst_as)
    if cfg.thp_period_ns is not None:
        for node in {id(src): src, id(dst): dst}.values():
            bench.thp.append(ThpInjector(sim, node.mm, list(node.spaces.values()),
                                         cfg.thp_period_ns, cfg.thp_range_pages, cfg.thp_max_ticks))
    return bench


# ---------------------------------------------------------------------------
# one transfer


def _quiet(bench: Bench) -> bool:
    # Nothing may be left in the event queue except the huge-page ticker.
    background = sum(1 for inj in bench.thp if inj.active)
    return bench.sim.pending == background and bench.system.quiescent()


def run_transfer(bench: Bench, src_va: int, dst_va: int, size: int) -> int:
    """Submit a remote write, poll until it completes; returns its latency in ns."""
    sim = bench.sim
    engine = bench.src.engine
    xfer = engine.submit_transfer(PDID, CHANNEL, src_va, dst_va, size, bench.dst.coord, PROC, PROC)
    deadline = sim.now + LIVENESS_TIMEOUTS * bench.cfg.timeout_ns
    sim.run_until(deadline, stop=lambda: xfer.done)
    if not xfer.done:
        raise InvariantViolation(
            f"transfer of {size} B did not complete within {LIVENESS_TIMEOUTS} timeout periods")
    engine.check_invariants()
    return xfer.completed_at - xfer.submitted_at


def settle(bench: Bench) -> None:
    """Run until no engine, driver or helper-thread work is left."""
    sim = bench.sim
    deadline = sim.now + LIVENESS_TIMEOUTS * bench.cfg.timeout_ns
    if not _quiet(bench):
        sim.run_until(deadline, stop=lambda: _quiet(bench))
    if not _quiet(bench):
        raise InvariantViolation("system did not settle after a transfer")


def _fill(bench: Bench, va: int, size: int) -> bytes:
    rng = bench.sim.rng.stream("payload")
    data = rng.randbytes(size)
    bench.src.mm.write_bytes(bench.src_as, va, data)
    bench.src.mm.take_charged()
    return data


def _fault_pages(bench: Bench, node: Node, aspace: AddressSpace, va: int, size: int) -> int:
    cfg = bench.cfg
    mm = node.mm
    first = va >> PAGE_SHIFT
    last = (va + size - 1) >> PAGE_SHIFT
    pages = list(range(first, last + 1))
    if cfg.fault_fraction < 1.0:
        k = max(1, math.ceil(cfg.fault_fraction * len(pages)))
        pages = sorted(bench.sim.rng.stream("fault_pages").sample(pages, k))
    n = 0
    for pn in pages:
        n += mm.invalidate_region(aspace, pn << PAGE_SHIFT, PAGE_SIZE)
    return n


def _prepare(bench: Bench, src_va: int, dst_va: int, size: int) -> None:
    """Apply the buffer strategy and then the fault injection."""
    cfg = bench.cfg
    site = cfg.fault_site
    smm, dmm = bench.src.mm, bench.dst.mm
    if cfg.strategy is Strategy.PRE_TOUCH:
        smm.touch_region(bench.src_as, src_va, size)
        bench.spend(bench.src)
        dmm.touch_region(bench.dst_as, dst_va, size, is_write=True)
        bench.spend(bench.dst)
    elif cfg.strategy is Strategy.PIN_UNPIN:
        smm.pin_region(bench.src_as, src_va, size)
        bench.spend(bench.src)
        dmm.pin_region(bench.dst_as, dst_va, size)
        bench.spend(bench.dst)
    else:
        if not site.src:
            smm.touch_region(bench.src_as, src_va, size)
            bench.spend(bench.src)
        if not site.dst:
            dmm.touch_region(bench.dst_as, dst_va, size, is_write=True)
            bench.spend(bench.dst)
        elif cfg.fault_fraction < 1.0:
            # Only the sampled pages should fault; bring the others in untimed.
            dmm.touch_region(bench.dst_as, dst_va, size, is_write=True)
            dmm.take_charged()
    if site.src:
        _fault_pages(bench, bench.src, bench.src_as, src_va, size)
    if site.dst:
        _fault_pages(bench, bench.dst, bench.dst_as, dst_va, size)


def _release(bench: Bench, src_va: int, dst_va: int, size: int) -> None:
    smm, dmm = bench.src.mm, bench.dst.mm
    if bench.cfg.strategy is Strategy.PIN_UNPIN:
        smm.unpin_region(bench.src_as, src_va, size)
        bench.spend(bench.src)
        dmm.unpin_region(bench.dst_as, dst_va, size)
        bench.spend(bench.dst)
    smm.unmap_region(bench.src_as, src_va, size)
    bench.spend(bench.src)
    dmm.unmap_region(bench.dst_as, dst_va, size)
    bench.spend(bench.dst)


def _check_bytes(bench: Bench, dst_va: int, data: bytes) -> None:
    got = bench.dst.mm.peek_bytes(bench.dst_as, dst_va, len(data))
    if got != data:
        bad = next(i for i, (a, b) in enumerate(zip(got, data)) if a != b)
        raise InvariantViolation(f"destination differs from source at offset {bad}")


def real_iteration(bench: Bench, size: int) -> int:
    """One timed iteration of the real-measurement loop; returns ns."""
    src_va = bench.alloc_src.take(size)
    dst_va = bench.alloc_dst.take(size)
    sim = bench.sim
    t0 = sim.now
    bench.src.mm.map_region(bench.src_as, src_va, size, disk_backed=bench.cfg.disk_backed)
    bench.spend(bench.src)
    bench.dst.mm.map_region(bench.dst_as, dst_va, size, disk_backed=bench.cfg.disk_backed)
    bench.spend(bench.dst)
    data = _fill(bench, src_va, size)
    _prepare(bench, src_va, dst_va, size)
    run_transfer(bench, src_va, dst_va, size)
    _check_bytes(bench, dst_va, data)
    _release(bench, src_va, dst_va, size)
    elapsed = sim.now - t0
    settle(bench)
    return elapsed


def _cold_run(bench: Bench) -> None:
    saved = bench.cfg
    bench.cfg = dataclasses.replace(saved, fault_site=FaultSite.NONE, strategy=Strategy.PRE_TOUCH)
    try:
        real_iteration(bench, COLD_RUN_BYTES)
    finally:
        bench.cfg = saved


# ---------------------------------------------------------------------------
# scenarios


_COUNTERS = ("timeouts_fired", "handler_invocations", "rapf_sent", "fifo_pushes", "fifo_dups",
             "fifo_drops", "pages_touched", "driver_irq_ns", "driver_tasklet_ns", "handler_calls",
             "nack_count", "thp_invalidations", "segfaults_absorbed")


def run_size(cfg: ScenarioConfig, size: int, seed: int | None = None) -> SizeStats:
    bench = build_bench(cfg, seed)
    n = cfg.effective_iterations
    _cold_run(bench)
    base = bench.sim.metrics.snapshot()
    samples: list[int] = []
    if cfg.mode is Mode.IDEAL:
        src_va = bench.alloc_src.take(size)
        dst_va = bench.alloc_dst.take(size)
        bench.src.mm.map_region(bench.src_as, src_va, size)
        bench.dst.mm.map_region(bench.dst_as, dst_va, size)
        data = _fill(bench, src_va, size)
        _prepare(bench, src_va, dst_va, size)
        bench.src.mm.take_charged()
        bench.dst.mm.take_charged()
        for _ in range(n):
            samples.append(run_transfer(bench, src_va, dst_va, size))
        _check_bytes(bench, dst_va, data)
    else:
        for _ in range(n):
            samples.append(real_iteration(bench, size))
    for inj in bench.thp:
        inj.stop()
    snap = bench.sim.metrics.snapshot()
    delta = {k: snap.get(k, 0) - base.get(k, 0) for k in _COUNTERS}
    per = {k: v / n for k, v in delta.items()}
    return SizeStats(
        size_bytes=size,
        strategy=cfg.strategy.value,
        policy=cfg.policy.value,
        fault_site=cfg.fault_site.value,
        timeout_ns=cfg.timeout_ns,
        mean_us=sum(samples) / n / 1000,
        timeouts=per["timeouts_fired"],
        handler_invocations=per["handler_invocations"],
        rapf_sent=per["rapf_sent"],
        driver_ns=per["driver_irq_ns"] + per["driver_tasklet_ns"],
        seed=cfg.seed if seed is None else seed,
        min_us=min(samples) / 1000,
        max_us=max(samples) / 1000,
        iterations=n,
        fifo_pushes=per["fifo_pushes"],
        fifo_dups=per["fifo_dups"],
        fifo_drops=per["fifo_drops"],
        pages_touched=per["pages_touched"],
        driver_irq_ns=per["driver_irq_ns"],
        driver_tasklet_ns=per["driver_tasklet_ns"],
        handler_calls=per["handler_calls"],
    )


def run_scenario(cfg: ScenarioConfig) -> StatsReport:
    cfg.validate()
    rows = [run_size(cfg, size) for size in cfg.sizes]
    return StatsReport(rows=rows, knobs=cfg.knobs())


SWEEP_TIMEOUTS = (25_000_000, 2_500_000, 1_000_000)


def run_sweep(base: ScenarioConfig, axis: str, values=None) -> list[StatsReport]:
    if axis == "sizes":
        points = [base.replace(sizes=(s,)) for s in (values or base.sizes)]
    elif axis == "timeouts":
        points = [base.replace(timeout_ns=t) for t in (values or SWEEP_TIMEOUTS)]
    elif axis == "policies":
        pols = values or tuple(HandlerPolicy)
        points = [base.replace(policy=p) for p in pols]
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    if not points:
        raise ConfigError("sweep axis has no values")
    return [run_scenario(p) for p in points]


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationTargets:
    target_16b_us: float = 4.0
    hops: int = 0
    iterations: int = 1_000
    tolerance_ns: float = 0.5


@dataclass
class CalibrationRecord:
    per_packet_ns: float
    ack_ns: int
    per_hop_ns: int
    hops: int
    target_us: float
    achieved_us: float
    steps: int

    def apply(self, cfg: ScenarioConfig) -> ScenarioConfig:
        return cfg.replace(wire=dataclasses.replace(cfg.wire, per_packet_ns=self.per_packet_ns))


def ideal_16b_us(cfg: ScenarioConfig, iterations: int) -> float:
    probe = cfg.replace(sizes=(16,), mode=Mode.IDEAL, fault_site=FaultSite.NONE,
                        strategy=Strategy.PRE_TOUCH, iterations=iterations, thp_period_ns=None)
    return run_size(probe, 16).mean_us


def calibrate(targets: CalibrationTargets, base: ScenarioConfig | None = None, max_steps: int = 8) -> CalibrationRecord:
    """Solve ``per_packet_ns`` so the fault-free 16 B ideal round trip hits the target.

    The round trip is linear in ``per_packet_ns`` with slope 1, so each step is
    a Newton step on the measured error.
    """
    if targets.target_16b_us <= 0:
        raise ConfigError("target must be positive")
    cfg = (base or ScenarioConfig()).replace(hops=targets.hops)
    target_ns = targets.target_16b_us * 1000
    pp = float(cfg.wire.per_packet_ns)
    steps = 0
    while True:
        cur = cfg.replace(wire=dataclasses.replace(cfg.wire, per_packet_ns=pp))
        achieved = ideal_16b_us(cur, targets.iterations)
        err = achieved * 1000 - target_ns
        if abs(err) <= targets.tolerance_ns or steps >= max_steps:
            break
        pp -= err
        steps += 1
        if pp < 0:
            raise Unsatisfiable(
                f"reaching {targets.target_16b_us} us needs a negative per-packet cost")
    return CalibrationRecord(pp, cfg.wire.ack_ns, cfg.wire.per_hop_ns, targets.hops,
                             targets.target_16b_us, achieved, steps)


# ---------------------------------------------------------------------------
# memory overhead probe


def measure_overheads(sizes=TABLE_SIZES, costs: CostModel | None = None) -> dict[str, dict[int, float]]:
    """Per-buffer time of each memory operation, measured on the simulated clock (us)."""
    out: dict[str, dict[int, float]] = {op: {} for op in MEMORY_OPS}
    for size in sizes:
        sim = Simulator()
        mm = MemoryManager(dataclasses.replace(costs) if costs else None)
        aspace = AddressSpace(PDID, PROC)
        va = VA_BASE

        def timed(fn, *args):
            t0 = sim.now
            fn(*args)
            sim.advance(mm.take_charged())
            return (sim.now - t0) / 1000

        out["mmap"][size] = timed(mm.map_region, aspace, va, size)
        out["touch"][size] = timed(mm.touch_region, aspace, va, size)
        out["pin"][size] = timed(mm.pin_region, aspace, va, size)
        out["unpin"][size] = timed(mm.unpin_region, aspace, va, size)
        out["munmap"][size] = timed(mm.unmap_region, aspace, va, size)
    return out


# ---------------------------------------------------------------------------
# randomized soak


@dataclass
class SoakResult:
    scenarios: int
    transfers: int
    csv: bytes
    failures: list[str]


def soak_configs(n: int, seed: int) -> list[ScenarioConfig]:
    rng = random.Random(seed)
    cfgs = []
    for i in range(n):
        site = rng.choice(list(FaultSite))
        thp = rng.random() < 0.3
        cfgs.append(ScenarioConfig(
            sizes=(rng.randint(1, 65536),),
            iterations=1,
            fault_site=site,
            policy=rng.choice(list(HandlerPolicy)),
            strategy=Strategy.FAULT_HANDLED,
            mode=Mode.REAL,
            timeout_ns=rng.choice((20_000, 100_000, 1_000_000)),
            seed=seed * 100_003 + i,
            hops=rng.choice((0, 0, 1)),
            fault_fraction=rng.choice((1.0, 1.0, 0.5, 0.25)),
            thp_period_ns=rng.choice((20_000, 50_000)) if thp else None,
            thp_range_pages=rng.choice((1, 2, 4)),
            thp_max_ticks=rng.randint(1, 20),
        ))
    return cfgs


def soak(n: int = 1000, seed: int = 0) -> SoakResult:
    """Run ``n`` random single-transfer scenarios; every one must complete intact."""
    from .report import emit_rows

    rows = []
    failures = []
    for cfg in soak_configs(n, seed):
        try:
            rows.extend(run_scenario(cfg).rows)
        except InvariantViolation as exc:
            failures.append(f"seed={cfg.seed} size={cfg.sizes[0]} site={cfg.fault_site.value}: {exc}")
    return SoakResult(n, len(rows), emit_rows(rows), failures)
