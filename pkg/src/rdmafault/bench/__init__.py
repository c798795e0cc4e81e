"""Benchmark harness: scenarios, sweeps, calibration and reports."""

from .config import FaultSite, Mode, ScenarioConfig, Strategy, load_config, parse_config_text
from .report import CSV_COLUMNS, SizeStats, StatsReport, emit, parse_csv
from .scenario import (
    CalibrationRecord,
    CalibrationTargets,
    calibrate,
    measure_overheads,
    run_scenario,
    run_size,
    run_sweep,
    soak,
)
