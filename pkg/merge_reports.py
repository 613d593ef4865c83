#!/usr/bin/env python3
from __future__ import annotations

import argparse
import sys
from typing import List

import pandas as pd

from mixer_lab.consolidate import merge_report_tables, write_table


def load_reports(paths: List[str]) -> List[pd.DataFrame]:
    frames = []
    for path in paths:
        frame = pd.read_csv(path, float_precision="round_trip", encoding="utf-8")
        if frame.empty:
            print(f"Skipping empty report {path}")
            continue
        frames.append(frame)
    return frames


def main() -> int:
    ap = argparse.ArgumentParser(description="Average report.csv files from several seeds into one table.")
    ap.add_argument("--reports", nargs="+", required=True, help="Paths to report.csv files")
    ap.add_argument("--out", required=True, help="Output path for the merged report")
    args = ap.parse_args()

    try:
        frames = load_reports(args.reports)
        merged = merge_report_tables(frames)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    write_table(merged, args.out)

    print(f"Merged {len(frames)} reports into {len(merged)} rows")
    for row in merged.to_dict("records"):
        print(f"  {row['setting']}/{row['embed_mode']}/{row['query_modality']}: "
              f"mAP {row['mAP']:.4f} R1 {row['R1']:.4f} over {row['runs']} runs")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
