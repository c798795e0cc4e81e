import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdmafault.bench import (
    CSV_COLUMNS,
    CalibrationTargets,
    FaultSite,
    Mode,
    ScenarioConfig,
    SizeStats,
    StatsReport,
    Strategy,
    calibrate,
    emit,
    measure_overheads,
    parse_config_text,
    parse_csv,
    run_scenario,
    run_size,
    run_sweep,
)
from rdmafault.driver import HandlerPolicy
from rdmafault.errors import ConfigError, Unsatisfiable

FH = Strategy.FAULT_HANDLED


# -- config files ----------------------------------------------------------------


def test_config_parses_sections():
    cfg = parse_config_text("""
[scenario]
sizes = 16, 4K, 64KB
fault_site = src
policy = touch-ahead
strategy = fault_handled
iterations = 3
[wire]
per_hop_ns = 120
[engine]
timeout_ns = 2500000
""")
    assert cfg.sizes == (16, 4096, 65536)
    assert cfg.fault_site is FaultSite.SRC and cfg.policy is HandlerPolicy.TOUCH_AHEAD
    assert cfg.wire.per_hop_ns == 120 and cfg.timeout_ns == 2_500_000


@pytest.mark.parametrize("text", [
    "[scenario]\nbogus = 1\n",
    "[nosuch]\nx = 1\n",
    "[scenario]\nsizes = 70000\n",
    "[scenario]\nfault_site = left\n",
    "[engine]\nmtu = 512\n",
    "[engine]\ntxn_size = 4096\n",
    "[smmu]\ncfcfg = stall\n",
    "[smmu]\nptw_limit = 12\n",
    "[scenario]\ntimeout_ns = 1000000\n[engine]\ntimeout_ns = 2000000\n",
    "[scenario]\nmode = ideal\nfault_site = src\n",
    "[scenario]\nstrategy = pin_unpin\nfault_site = dst\n",
    "sizes = 16\n",
    "[scenario]\nsizes\n",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_agreeing_duplicates_allowed():
    cfg = parse_config_text("[scenario]\ntimeout_ns = 1000000\n[engine]\ntimeout_ns = 1000000\n")
    assert cfg.timeout_ns == 1_000_000


# -- reports -----------------------------------------------------------------------


def _row(**kw):
    base = dict(size_bytes=16, strategy="pre_touch", policy="touch_a_page", fault_site="none",
                timeout_ns=1_000_000, mean_us=4.0000292, timeouts=0.0, handler_invocations=0.0,
                rapf_sent=0.0, driver_ns=0.0, seed=0)
    base.update(kw)
    return SizeStats(**base)


def test_csv_header_and_row_count():
    data = emit(StatsReport([_row()]))
    lines = data.decode().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[0] == ("size_bytes,strategy,policy,fault_site,timeout_ns,mean_us,timeouts,"
                        "handler_invocations,rapf_sent,driver_ns,seed")
    assert len(lines) == 2


@given(st.floats(0, 1e9, allow_nan=False), st.floats(0, 1e4, allow_nan=False), st.integers(0, 2**31))
def test_csv_roundtrip(mean, timeouts, seed):
    r = _row(mean_us=mean, timeouts=timeouts, seed=seed)
    back = parse_csv(emit(StatsReport([r])))
    assert back == [r.csv_fields()]


def test_summary_lists_knobs():
    cfg = ScenarioConfig(sizes=(16,), iterations=2)
    out = emit(run_scenario(cfg), "summary").decode()
    assert "wire.per_packet_ns" in out and "scenario.hupcf" in out
    with pytest.raises(ValueError):
        emit(StatsReport([]), "xml")


# -- scenario behavior ---------------------------------------------------------------


def test_seed_stability():
    cfg = ScenarioConfig(sizes=(16, 20000), iterations=2, fault_site=FaultSite.BOTH, strategy=FH,
                         thp_period_ns=30_000, thp_range_pages=2, thp_max_ticks=5, timeout_ns=100_000)
    assert emit(run_scenario(cfg)) == emit(run_scenario(cfg))


def test_pre_touch_has_no_handler_work():
    r = run_size(ScenarioConfig(sizes=(16384,), iterations=2), 16384)
    assert r.handler_invocations == 0 and r.timeouts == 0


def test_real_no_fault_at_least_ideal():
    for size in (16, 4096, 65536):
        real = run_size(ScenarioConfig(iterations=2), size)
        ideal = run_size(ScenarioConfig(iterations=2, mode=Mode.IDEAL), size)
        assert real.mean_us >= ideal.mean_us


def test_pin_unpin_costs_more_than_touch_at_64k():
    touch = run_size(ScenarioConfig(iterations=2, strategy=Strategy.PRE_TOUCH), 65536)
    pin = run_size(ScenarioConfig(iterations=2, strategy=Strategy.PIN_UNPIN), 65536)
    assert pin.mean_us > touch.mean_us
    # both the source and the destination buffer pay the strategy cost
    assert pin.mean_us - touch.mean_us == pytest.approx(2 * (49 + 14 - 40), abs=0.5)


def test_no_fault_size_sweep_non_decreasing():
    reports = run_sweep(ScenarioConfig(iterations=2), "sizes")
    means = [r.rows[0].mean_us for r in reports]
    assert means == sorted(means)


def test_one_hop_adds_200ns_round_trip():
    a = run_size(ScenarioConfig(iterations=5, mode=Mode.IDEAL, hops=1), 16)
    b = run_size(ScenarioConfig(iterations=5, mode=Mode.IDEAL, hops=2), 16)
    assert b.mean_us - a.mean_us == pytest.approx(0.2, abs=1e-9)


def test_sweep_bad_axis():
    with pytest.raises(ConfigError):
        run_sweep(ScenarioConfig(), "colors")


def test_calibration_identity_and_unsatisfiable():
    rec = calibrate(CalibrationTargets())
    assert rec.steps == 0 and abs(rec.achieved_us - 4.0) < 0.0005
    rec2 = calibrate(CalibrationTargets(target_16b_us=5.0, iterations=20))
    assert abs(rec2.achieved_us - 5.0) < 0.001 and rec2.steps >= 1
    with pytest.raises(Unsatisfiable):
        calibrate(CalibrationTargets(target_16b_us=0.5, iterations=20))


def test_overhead_probe_matches_cost_inputs():
    got = measure_overheads((16, 65536))
    assert got["pin"] == {16: 6.0, 65536: 49.0}
    assert got["munmap"][65536] == 19.0


@settings(max_examples=15)
@given(st.integers(1, 65536), st.sampled_from(list(FaultSite)), st.sampled_from(list(HandlerPolicy)),
       st.integers(0, 1000))
def test_any_transfer_completes_intact(size, site, policy, seed):
    # run_size checks destination bytes and raises on any invariant breach
    cfg = ScenarioConfig(sizes=(size,), iterations=1, fault_site=site, policy=policy, strategy=FH,
                         timeout_ns=50_000, seed=seed)
    r = run_size(cfg, size)
    assert r.mean_us > 0
