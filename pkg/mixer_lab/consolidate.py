"""
Functions for combining evaluation, histogram, verification and sweep
results into CSV tables.

Includes:
- consolidate_reports: EvalReports keyed by (setting, embed_mode, query_modality) as a report table.
- histogram_table: DistanceDistribution as bin_lo,bin_hi,intra_count,inter_count rows.
- verify_table: CheckReports as check,trials,max_violation,pass rows.
- probe_table: ProbeReports as one row per (target, source).
- consolidate_sweep: Per-grid-point report tables stacked under param,value columns.
- merge_report_tables: Mean of metric columns over runs with the same key.
- write_table: Deterministic CSV writer shared by every output file.
"""

from typing import List, Sequence, Tuple

import pandas as pd

from .constants import (
    HIST_COLUMNS,
    HIST_FILE,
    PROBE_COLUMNS,
    RANKS,
    REPORT_COLUMNS,
    VERIFY_COLUMNS,
    CheckReport,
    DistanceDistribution,
    EvalReport,
    ProbeReport,
)

REPORT_KEY = ["setting", "embed_mode", "query_modality"]
METRIC_COLUMNS = [f"R{k}" for k in RANKS] + ["mAP", "mINP"]
COUNT_COLUMNS = ["used", "skipped"]


def write_table(frame: pd.DataFrame, path: str) -> None:
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")


def consolidate_reports(results: Sequence[Tuple[str, str, str, EvalReport]]) -> pd.DataFrame:
    """
    One row per (setting, embed_mode, query_modality, report) tuple, in the
    order given:
      setting,embed_mode,query_modality,R1,R5,R10,R20,mAP,mINP,used,skipped
    """

    rows = []
    for setting, embed_mode, query_modality, report in results:
        row = {"setting": setting, "embed_mode": embed_mode, "query_modality": query_modality}
        row.update({f"R{k}": report.rank_k[k] for k in RANKS})
        row.update({
            "mAP": report.mAP,
            "mINP": report.mINP,
            "used": report.num_queries_used,
            "skipped": report.num_queries_skipped,
        })
        rows.append(row)
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def histogram_table(dist: DistanceDistribution) -> pd.DataFrame:
    edges = dist.bin_edges
    return pd.DataFrame({
        "bin_lo": edges[:-1],
        "bin_hi": edges[1:],
        "intra_count": dist.intra_counts.astype(int),
        "inter_count": dist.inter_counts.astype(int),
    }, columns=HIST_COLUMNS)


def histogram_file_name(setting: str, embed_mode: str, first: bool) -> str:
    """The first (setting, mode) pair owns dist_hist.csv; the rest are suffixed."""
    if first:
        return HIST_FILE
    stem, ext = HIST_FILE.rsplit(".", 1)
    return f"{stem}_{setting}_{embed_mode}.{ext}"


def verify_table(checks: Sequence[CheckReport]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"check": c.check, "trials": c.trials, "max_violation": c.max_violation, "pass": c.passed} for c in checks],
        columns=VERIFY_COLUMNS,
    )


def probe_table(probes: Sequence[ProbeReport]) -> pd.DataFrame:
    return pd.DataFrame([p._asdict() for p in probes], columns=PROBE_COLUMNS)


def consolidate_sweep(entries: Sequence[Tuple[str, str, pd.DataFrame]]) -> pd.DataFrame:
    """
    Stack the report table of every sweep point under a leading param,value
    pair of columns. Entries keep the order given.
    """
    frames: List[pd.DataFrame] = []
    for param, value, frame in entries:
        frame = frame.copy()
        frame.insert(0, "value", value)
        frame.insert(0, "param", param)
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=["param", "value"] + REPORT_COLUMNS)
    return pd.concat(frames, ignore_index=True)


def merge_report_tables(frames: Sequence[pd.DataFrame]) -> pd.DataFrame:
    """
    Average metric columns over runs sharing (setting, embed_mode,
    query_modality); query counts are summed and a `runs` column records
    how many tables contributed. Keys keep first-seen order.
    """

    if not frames:
        raise ValueError("no report tables to merge")
    stacked = pd.concat(frames, ignore_index=True)
    missing = [c for c in REPORT_COLUMNS if c not in stacked.columns]
    if missing:
        raise ValueError(f"report tables lack column(s) {missing}")

    grouped = stacked.groupby(REPORT_KEY, sort=False)
    merged = grouped[METRIC_COLUMNS].mean()
    counts = grouped[COUNT_COLUMNS].sum()
    runs = grouped.size().rename("runs")
    return pd.concat([merged, counts, runs], axis=1).reset_index()
