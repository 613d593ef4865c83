import numpy as np
import pandas as pd
import pytest

from mixer_lab.consolidate import (
    consolidate_reports,
    consolidate_sweep,
    histogram_file_name,
    histogram_table,
    merge_report_tables,
    probe_table,
    verify_table,
    write_table,
)
from mixer_lab.constants import (
    HIST_COLUMNS,
    PROBE_COLUMNS,
    REPORT_COLUMNS,
    VERIFY_COLUMNS,
    CheckReport,
    DistanceDistribution,
    EvalReport,
    ProbeReport,
)


def report(score, used=10, skipped=0):
    return EvalReport({1: score, 5: score, 10: score, 20: score}, score, score / 2, used, skipped)


def test_report_table_has_fixed_columns_and_order():
    frame = consolidate_reports([("MixCam", "fused_rule", "I", report(0.5)), ("Mix", "fused_rule", "I", report(0.25))])
    assert list(frame.columns) == REPORT_COLUMNS
    assert frame["setting"].tolist() == ["MixCam", "Mix"]
    assert frame.loc[0, "mINP"] == 0.25
    assert frame.loc[1, "used"] == 10


def test_write_table_is_deterministic_and_round_trips(tmp_path):
    frame = consolidate_reports([("Mix", "erased_only", "V", report(1.0 / 3.0, skipped=2))])
    first, second = tmp_path / "a.csv", tmp_path / "b.csv"
    write_table(frame, str(first))
    write_table(frame, str(second))
    raw = first.read_bytes()
    assert raw == second.read_bytes()
    assert b"\r\n" not in raw
    assert raw.splitlines()[0].decode("utf-8") == ",".join(REPORT_COLUMNS)
    assert pd.read_csv(first, float_precision="round_trip").loc[0, "mAP"] == 1.0 / 3.0


def test_histogram_table():
    edges = np.linspace(0.0, 2.0, 5)
    dist = DistanceDistribution(0.1, 0.0, 1.0, 0.0, edges, np.array([3, 0, 0, 0]), np.array([0, 1, 4, 0]))
    frame = histogram_table(dist)
    assert list(frame.columns) == HIST_COLUMNS
    assert frame["bin_lo"].tolist() == [0.0, 0.5, 1.0, 1.5]
    assert frame["bin_hi"].tolist() == [0.5, 1.0, 1.5, 2.0]
    assert frame["inter_count"].sum() == 5


def test_histogram_file_names():
    assert histogram_file_name("Mix", "fused_rule", True) == "dist_hist.csv"
    assert histogram_file_name("MixID", "erased_only", False) == "dist_hist_MixID_erased_only.csv"


def test_verify_and_probe_tables():
    checks = verify_table([CheckReport("p1_nonnegativity", 10, 0.0, True), CheckReport("xor_interaction", 1, 0.5, False)])
    assert list(checks.columns) == VERIFY_COLUMNS
    assert checks["pass"].tolist() == [True, False]

    probes = probe_table([ProbeReport("modality", "erased", 0.52, 0.5)])
    assert list(probes.columns) == PROBE_COLUMNS
    assert probes.loc[0, "accuracy"] == 0.52


def test_consolidate_sweep_prefixes_grid_columns():
    table = consolidate_reports([("Mix", "fused_rule", "I", report(0.5))])
    stacked = consolidate_sweep([("lambda_m", "0", table), ("lambda_m", "0.4", table)])
    assert list(stacked.columns) == ["param", "value"] + REPORT_COLUMNS
    assert stacked["value"].tolist() == ["0", "0.4"]
    assert list(consolidate_sweep([]).columns) == ["param", "value"] + REPORT_COLUMNS


def test_merge_report_tables_averages_metrics_and_sums_counts():
    a = consolidate_reports([("Mix", "fused_rule", "I", report(0.2, used=10)),
                             ("MixCam", "fused_rule", "I", report(0.4, used=8, skipped=1))])
    b = consolidate_reports([("Mix", "fused_rule", "I", report(0.6, used=10))])
    merged = merge_report_tables([a, b])
    assert merged["setting"].tolist() == ["Mix", "MixCam"]
    assert merged.loc[0, "mAP"] == pytest.approx(0.4)
    assert merged.loc[0, "used"] == 20
    assert merged.loc[0, "runs"] == 2 and merged.loc[1, "runs"] == 1
    assert merged.loc[1, "skipped"] == 1


def test_merge_report_tables_rejects_bad_input():
    with pytest.raises(ValueError):
        merge_report_tables([])
    with pytest.raises(ValueError, match="lack column"):
        merge_report_tables([pd.DataFrame({"setting": ["Mix"]})])
