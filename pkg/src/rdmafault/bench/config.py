"""Scenario configuration and its line-oriented config file format."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from ..driver import DriverConfig, HandlerPolicy
from ..engine import MTU, TXN_SIZE, WireCostModel
from ..errors import ConfigError
from ..fifo import DEFAULT_FIFO_DEPTH
from ..memory import DEFAULT_PIN_LIMIT, TABLE_SIZES, CostModel
from ..smmu import SmmuConfig

MAX_SIZE = 65536
DEFAULT_ITERATIONS_IDEAL = 10_000
DEFAULT_ITERATIONS_FAULT = 500
#: Loopback runs pin both buffers in one process, so the process limit covers two.
BENCH_PIN_LIMIT = 2 * DEFAULT_PIN_LIMIT


class FaultSite(Enum):
    NONE = "none"
    SRC = "src"
    DST = "dst"
    BOTH = "both"

    @property
    def src(self) -> bool:
        return self in (FaultSite.SRC, FaultSite.BOTH)

    @property
    def dst(self) -> bool:
        return self in (FaultSite.DST, FaultSite.BOTH)


class Strategy(Enum):
    PRE_TOUCH = "pre_touch"
    PIN_UNPIN = "pin_unpin"
    FAULT_HANDLED = "fault_handled"


class Mode(Enum):
    IDEAL = "ideal"
    REAL = "real"


@dataclass
class ScenarioConfig:
    sizes: tuple[int, ...] = TABLE_SIZES
    iterations: int | None = None
    fault_site: FaultSite = FaultSite.NONE
    policy: HandlerPolicy = HandlerPolicy.TOUCH_A_PAGE
    strategy: Strategy = Strategy.PRE_TOUCH
    mode: Mode = Mode.REAL
    timeout_ns: int = 1_000_000
    seed: int = 0
    hops: int = 0
    fault_fraction: float = 1.0
    thp_period_ns: int | None = None
    thp_range_pages: int = 512
    thp_max_ticks: int | None = None
    disk_backed: bool = False
    hupcf: bool = True
    outstanding_per_transfer: int = 2
    fifo_depth: int = DEFAULT_FIFO_DEPTH
    pin_limit: int = BENCH_PIN_LIMIT
    wire: WireCostModel = field(default_factory=WireCostModel)
    smmu: SmmuConfig = field(default_factory=SmmuConfig)
    driver: DriverConfig = field(default_factory=DriverConfig)
    costs: CostModel = field(default_factory=CostModel)

    @property
    def effective_iterations(self) -> int:
        if self.iterations is not None:
            return self.iterations
        if self.fault_site is FaultSite.NONE and self.thp_period_ns is None:
            return DEFAULT_ITERATIONS_IDEAL
        return DEFAULT_ITERATIONS_FAULT

    def validate(self) -> ScenarioConfig:
        if not self.sizes:
            raise ConfigError("at least one transfer size is required")
        for s in self.sizes:
            if not 0 < s <= MAX_SIZE:
                raise ConfigError(f"size {s} outside 1..{MAX_SIZE}")
        if self.iterations is not None and self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.mode is Mode.IDEAL and self.fault_site is not FaultSite.NONE:
            raise ConfigError("ideal mode measures fault-free transfers only")
        if self.mode is Mode.IDEAL and self.thp_period_ns is not None:
            raise ConfigError("ideal mode does not take huge-page injection")
        if self.strategy is Strategy.PIN_UNPIN and self.fault_site is not FaultSite.NONE:
            raise ConfigError("pinned buffers cannot fault; use fault_handled with a fault site")
        if self.timeout_ns < 1_000:
            raise ConfigError("timeout_ns must be at least 1000")
        if self.hops < 0:
            raise ConfigError("hops must be >= 0")
        if not 0.0 < self.fault_fraction <= 1.0:
            raise ConfigError("fault_fraction must be in (0, 1]")
        if self.thp_period_ns is not None and self.thp_period_ns <= 0:
            raise ConfigError("thp_period_ns must be positive")
        r = self.thp_range_pages
        if r < 1 or r & (r - 1):
            raise ConfigError("thp_range_pages must be a power of two")
        if self.thp_max_ticks is not None and self.thp_max_ticks < 1:
            raise ConfigError("thp_max_ticks must be positive")
        if self.outstanding_per_transfer < 1:
            raise ConfigError("outstanding_per_transfer must be >= 1")
        if self.fifo_depth < 1:
            raise ConfigError("fifo_depth must be >= 1")
        return self

    def replace(self, **changes) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)

    def knobs(self) -> dict[str, object]:
        """Every model input that affects results, flattened for report headers."""
        out: dict[str, object] = {}
        for group, obj in (("wire", self.wire), ("smmu", self.smmu),
                           ("driver", self.driver), ("memory", self.costs)):
            for f in dataclasses.fields(obj):
                if f.name == "table_us":
                    continue
                v = getattr(obj, f.name)
                out[f"{group}.{f.name}"] = v.value if isinstance(v, Enum) else v
        for name in ("hops", "hupcf", "outstanding_per_transfer", "fifo_depth", "pin_limit",
                     "fault_fraction", "thp_period_ns", "thp_range_pages", "thp_max_ticks", "disk_backed"):
            out[f"scenario.{name}"] = getattr(self, name)
        out["scenario.mode"] = self.mode.value
        out["scenario.iterations"] = self.effective_iterations
        return out


# ---------------------------------------------------------------------------
# config files


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text: str) -> int:
    return int(text.replace("_", ""), 0)


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "off") else _int(text)


def _sizes(text: str) -> tuple[int, ...]:
    return tuple(_parse_size(p) for p in text.split(",") if p.strip())


def _parse_size(text: str) -> int:
    t = text.strip().upper().removesuffix("B")
    if t.endswith("K"):
        return _int(t[:-1]) * 1024
    return _int(t)


def _enum(cls):
    def conv(text: str):
        t = text.strip().lower().replace("-", "_")
        for member in cls:
            if member.value == t:
                return member
        raise ValueError(f"{text!r} is not one of {[m.value for m in cls]}")
    return conv


# section -> key -> (object path, converter)
_SCHEMA: dict[str, dict[str, tuple[str, object]]] = {
    "scenario": {
        "sizes": ("sizes", _sizes),
        "iterations": ("iterations", _opt_int),
        "fault_site": ("fault_site", _enum(FaultSite)),
        "policy": ("policy", _enum(HandlerPolicy)),
        "strategy": ("strategy", _enum(Strategy)),
        "mode": ("mode", _enum(Mode)),
        "timeout_ns": ("timeout_ns", _int),
        "seed": ("seed", _int),
        "hops": ("hops", _int),
        "fault_fraction": ("fault_fraction", float),
        "thp_period_ns": ("thp_period_ns", _opt_int),
        "thp_range_pages": ("thp_range_pages", _int),
        "thp_max_ticks": ("thp_max_ticks", _opt_int),
        "disk_backed": ("disk_backed", _bool),
    },
    "wire": {
        "per_packet_ns": ("wire.per_packet_ns", float),
        "per_hop_ns": ("wire.per_hop_ns", _int),
        "ack_ns": ("wire.ack_ns", _int),
        "r5_poll_ns": ("wire.r5_poll_ns", _int),
        "packet_gap_ns": ("wire.packet_gap_ns", _int),
    },
    "smmu": {
        "tlb_depth": ("smmu.tlb_depth", _int),
        "ptw_limit": ("smmu.ptw_limit", _int),
        "tbu_outstanding": ("smmu.tbu_outstanding", _int),
        "irq_latency_ns": ("smmu.irq_latency_ns", _int),
        "tlb_hit_ns": ("smmu.tlb_hit_ns", _int),
        "walk_ns": ("smmu.walk_ns", _int),
        "hupcf": ("hupcf", _bool),
        "cfcfg": ("cfcfg", str),
    },
    "driver": {
        "policy": ("policy", _enum(HandlerPolicy)),
        "tasklet_delay_ns": ("driver.tasklet_delay_ns", _int),
        "irq_handler_ns": ("driver.irq_handler_ns", _int),
        "handler_fixed_ns": ("driver.handler_fixed_ns", _int),
        "netlink_dispatch_ns": ("driver.netlink_dispatch_ns", _int),
        "netlink_roundtrip_ns": ("costs.netlink_roundtrip_ns", _int),
        "user_recv_ns": ("driver.user_recv_ns", _int),
        "pckzer_ns": ("driver.pckzer_ns", _int),
        "absorb_segfault": ("driver.absorb_segfault", _bool),
        "kernel_rapf": ("driver.kernel_rapf", _bool),
    },
    "memory": {
        "minor_fault_ns": ("costs.minor_fault_ns", _int),
        "major_fault_io_ns": ("costs.major_fault_io_ns", _int),
        "gup_per_page_ns": ("costs.gup_per_page_ns", _int),
        "pin_limit": ("pin_limit", _int),
    },
    "engine": {
        "timeout_ns": ("timeout_ns", _int),
        "outstanding_per_transfer": ("outstanding_per_transfer", _int),
        "fifo_depth": ("fifo_depth", _int),
        "mtu": ("mtu", _int),
        "txn_size": ("txn_size", _int),
    },
}


def parse_config_text(text: str, source: str = "<config>") -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cp.defaults():
        raise ConfigError(f"{source}: keys outside a section are not allowed")

    top: dict[str, object] = {}
    nested: dict[str, dict[str, object]] = {"wire": {}, "smmu": {}, "driver": {}, "costs": {}}
    for section in cp.sections():
        schema = _SCHEMA.get(section)
        if schema is None:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in schema:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            path, conv = schema[key]
            try:
                value = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{section}] {key}: {exc}") from None
            if "." in path:
                group, name = path.split(".", 1)
                nested[group][name] = value
            else:
                if path in top and top[path] != value:
                    raise ConfigError(f"{source}: conflicting values for {key!r}")
                top[path] = value

    if top.pop("mtu", MTU) != MTU:
        raise ConfigError(f"mtu is fixed at {MTU}")
    if top.pop("txn_size", TXN_SIZE) != TXN_SIZE:
        raise ConfigError(f"txn_size is fixed at {TXN_SIZE}")
    cfcfg = str(top.pop("cfcfg", "terminate")).strip().lower()
    if cfcfg == "stall":
        raise ConfigError("stall mode is not supported on the engine path")
    if cfcfg != "terminate":
        raise ConfigError(f"cfcfg must be terminate or stall, got {cfcfg!r}")
    try:
        cfg = ScenarioConfig(
            wire=WireCostModel(**nested["wire"]),
            smmu=SmmuConfig(**nested["smmu"]),
            driver=DriverConfig(**nested["driver"]),
            costs=CostModel(**nested["costs"]),
            **top,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg.validate()


def load_config(path: str | Path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))
