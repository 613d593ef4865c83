"""
Command-line entry point for the MixER laboratory.

Subcommands:
1. gen     - Generate the synthetic dataset and print the oracle check.
2. train   - Train one model (or a lambda sweep in parallel) and write checkpoints.
3. eval    - Embed the test split and write report.csv plus distance histograms.
4. verify  - Run the information-theory checks and write verify.csv.
5. probe   - Fit linear probes on learned embeddings and write probe.csv.

Exit codes: 0 success, 1 failed verification or unexpected error, 2 usage/config/input error,
3 numerical failure.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

from .autodiff import DegenerateVectorError
from .config import RunConfig, apply_ablation, load_run_config
from .consolidate import (
    consolidate_reports,
    consolidate_sweep,
    histogram_file_name,
    histogram_table,
    probe_table,
    verify_table,
    write_table,
)
from .constants import (
    CHECKPOINT_FILE,
    DATASET_FILE,
    EMBED_MODES,
    GALLERY_KINDS,
    MODALITIES,
    PROBE_BINS,
    PROBE_FILE,
    REPORT_FILE,
    SHOT_MODES,
    SWEEP_DIR,
    SWEEP_REPORT_FILE,
    VERIFY_FILE,
)
from .errors import MixerError
from .evalharness import GallerySetting, distance_distribution, evaluate
from .miprobe import binned_mi_estimate, linear_probe, mean_abs_cosine, run_all_checks
from .model import embed_dataset, load_checkpoint
from .synthgen import Dataset, generate, load, oracle_check, save
from .tasks import default_dataset_path, discover_sweep_tasks, find_sweep_points, run_sweep_task, train_run
from .trainer import NonFiniteLossError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

BANNER = "=" * 70


def _split_list(raw: Optional[str]) -> Optional[List[str]]:
    if raw is None:
        return None
    return [p.strip() for p in raw.split(",") if p.strip()]


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Nested RunConfig updates from the flags that were actually given."""
    out: Dict[str, Any] = {}
    if args.out:
        out["out"] = args.out
    if args.seed is not None:
        for section in ("gen", "model", "train", "eval"):
            out.setdefault(section, {})["seed"] = args.seed

    evaluation: Dict[str, Any] = {}
    if getattr(args, "settings", None) is not None:
        evaluation["settings"] = _split_list(args.settings)
    if getattr(args, "embed_mode", None) is not None:
        evaluation["embed_modes"] = _split_list(args.embed_mode)
    if getattr(args, "query_modality", None) is not None:
        evaluation["query_modality"] = args.query_modality
    if getattr(args, "shot_mode", None) is not None:
        evaluation["shot_mode"] = args.shot_mode
    if getattr(args, "trials", None) is not None and args.command == "eval":
        evaluation["trials"] = args.trials
    if evaluation:
        out["eval"] = {**out.get("eval", {}), **evaluation}
    return out


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(args.config, _overrides(args))
    if getattr(args, "ablation", None):
        weights = apply_ablation(cfg.train.weights, args.ablation)
        cfg = cfg.model_copy(update={"train": cfg.train.model_copy(update={"weights": weights})})
    return cfg


def exit_code_for(err: BaseException) -> int:
    """Map any exception raised by a command to the process exit code."""
    if isinstance(err, (NonFiniteLossError, DegenerateVectorError)):
        return EXIT_NUMERIC
    if isinstance(err, (MixerError, FileNotFoundError, NotADirectoryError)):
        return EXIT_USAGE
    return EXIT_FAILURE


# Commands


def cmd_gen(cfg: RunConfig, args: argparse.Namespace) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    dataset = generate(cfg.gen)
    path = os.path.join(cfg.out, DATASET_FILE)
    save(dataset, path)
    oracle = oracle_check(dataset)

    print(f"\n{BANNER}")
    print("DATASET GENERATED")
    print(BANNER)
    print(f"Samples: {len(dataset.samples)} ({len(dataset.train)} train, {len(dataset.test)} test)")
    print(f"Identities: {dataset.num_ids}, cameras: {len(dataset.camera_table)}")
    by_modality = ", ".join(f"{m}={acc:.3f}" for m, acc in oracle.accuracy_by_modality.items())
    print(f"Nearest-centroid oracle: {oracle.accuracy:.3f} over {oracle.num_test} test samples ({by_modality})")
    print(f"Dataset: {path}")
    return EXIT_OK


def _train_sweep(cfg: RunConfig, dataset_path: str, spec: str) -> int:
    tasks = discover_sweep_tasks(cfg, spec)
    # Fail fast on a missing or malformed dataset
    load(dataset_path)
    print(f"Starting sweep of {len(tasks)} grid points over {tasks[0].param}...")

    # Limit concurrency to avoid resource exhaustion
    max_workers = min(4, os.cpu_count() or 1, len(tasks))

    results, errors = {}, {}
    with ProcessPoolExecutor(max_workers=max_workers) as executor:
        futures = {executor.submit(run_sweep_task, task, dataset_path): task for task in tasks}
        for future in as_completed(futures):
            task = futures[future]
            try:
                results[task.raw_value] = future.result()
            except Exception as e:
                errors[task.raw_value] = e
                print(f"Grid point {task.param}={task.raw_value} failed: {e}")

    print(f"\n{BANNER}")
    print("SWEEP COMPLETE")
    print(BANNER)
    for task in tasks:
        result = results.get(task.raw_value)
        if result is not None:
            print(f"  {task.param}={task.raw_value}: {result.epochs} epochs, final loss {result.final_total:.4f}")
    print(f"Successfully trained: {len(results)} grid points.")
    if errors:
        print(f"Failed: {len(errors)} grid points.")
        first = next(errors[t.raw_value] for t in tasks if t.raw_value in errors)
        return exit_code_for(first)
    print(f"Checkpoints under: {os.path.join(cfg.out, SWEEP_DIR)}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset_path = default_dataset_path(cfg, args.dataset)
    if args.sweep:
        return _train_sweep(cfg, dataset_path, args.sweep)

    dataset = load(dataset_path)
    outcome = train_run(cfg, dataset, cfg.out, resume=args.resume, show_progress=not args.quiet)

    print(f"\n{BANNER}")
    print("TRAINING COMPLETE")
    print(BANNER)
    epochs_run = max(cfg.train.epochs - outcome.start_epoch, 0)
    print(f"Epochs run: {epochs_run} (from epoch {outcome.start_epoch}), optimizer steps: {outcome.step}")
    if outcome.history:
        last = outcome.history[-1]
        print(f"Final losses: total {last.total:.4f}, yme {last.l_yme:.4f}, ymr {last.l_ymr:.4f}, "
              f"m {last.l_m:.4f}, o {last.l_o:.4f}, f {last.l_f:.4f}")
    print(f"Checkpoint: {outcome.checkpoint} (~{os.path.getsize(outcome.checkpoint) / 1024:.1f} KB)")
    print(f"History: {outcome.history_file}")
    return EXIT_OK


def _evaluate_checkpoint(cfg: RunConfig, checkpoint: str, dataset: Dataset, out_dir: Optional[str]):
    """Report table for one checkpoint; histograms are written when `out_dir` is given."""

    model, _ = load_checkpoint(checkpoint)
    records = embed_dataset(model, dataset.test)
    ev = cfg.eval
    results = []
    first = True
    for kind in ev.settings:
        for mode in ev.embed_modes:
            setting = GallerySetting(kind, mode, ev.shot_mode, ev.trials, ev.seed)
            report = evaluate(records, ev.query_modality, setting)
            results.append((kind, mode, ev.query_modality, report))
            logging.info("%s/%s: R1 %.4f mAP %.4f mINP %.4f (%d used, %d skipped)", kind, mode,
                         report.rank_k[1], report.mAP, report.mINP, report.num_queries_used,
                         report.num_queries_skipped)
            if out_dir is not None:
                dist = distance_distribution(records, ev.query_modality, setting)
                write_table(histogram_table(dist), os.path.join(out_dir, histogram_file_name(kind, mode, first)))
                logging.info("%s/%s distances: intra %.4f (var %.4f), inter %.4f (var %.4f)", kind, mode,
                             dist.intra_mean, dist.intra_var, dist.inter_mean, dist.inter_var)
                first = False
    return consolidate_reports(results)


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = load(default_dataset_path(cfg, args.dataset))
    os.makedirs(cfg.out, exist_ok=True)

    if args.sweep_dir:
        points = find_sweep_points(args.sweep_dir)
        if not points:
            print(f"No trained grid points under {args.sweep_dir}")
            return EXIT_USAGE
        entries = [(param, raw, _evaluate_checkpoint(cfg, ckpt, dataset, None)) for param, raw, ckpt in points]
        table = consolidate_sweep(entries)
        path = os.path.join(cfg.out, SWEEP_REPORT_FILE)
        write_table(table, path)
        print(f"\n{BANNER}")
        print("SWEEP EVALUATION COMPLETE")
        print(BANNER)
        print(table[["param", "value", "setting", "embed_mode", "R1", "mAP", "mINP"]].to_string(index=False))
        print(f"Sweep report: {path}")
        return EXIT_OK

    checkpoint = args.checkpoint or os.path.join(cfg.out, CHECKPOINT_FILE)
    table = _evaluate_checkpoint(cfg, checkpoint, dataset, cfg.out)
    path = os.path.join(cfg.out, REPORT_FILE)
    write_table(table, path)

    print(f"\n{BANNER}")
    print("EVALUATION COMPLETE")
    print(BANNER)
    print(table[["setting", "embed_mode", "query_modality", "R1", "mAP", "mINP", "used", "skipped"]]
          .to_string(index=False))
    print(f"Report: {path}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, args: argparse.Namespace) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    checks = run_all_checks(trials=args.trials or 1000, seed=seed)
    path = os.path.join(cfg.out, VERIFY_FILE)
    write_table(verify_table(checks), path)

    failed = [c for c in checks if not c.passed]
    print(f"\n{BANNER}")
    print("VERIFICATION FAILED" if failed else "VERIFICATION PASSED")
    print(BANNER)
    for c in checks:
        mark = "✓" if c.passed else "✗"
        print(f"  {mark} {c.check}: {c.trials} trials, max violation {c.max_violation:.3e}")
    print(f"Report: {path}")
    if failed:
        print(f"Offending checks: {', '.join(c.check for c in failed)}")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_probe(cfg: RunConfig, args: argparse.Namespace) -> int:
    dataset = load(default_dataset_path(cfg, args.dataset))
    model, _ = load_checkpoint(args.checkpoint or os.path.join(cfg.out, CHECKPOINT_FILE))
    records = embed_dataset(model, dataset.test)
    seed = cfg.eval.seed

    probes = [linear_probe(records, target, source, seed)
              for target in ("modality", "identity") for source in ("erased", "related")]
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, PROBE_FILE)
    write_table(probe_table(probes), path)

    print(f"\n{BANNER}")
    print("PROBES COMPLETE")
    print(BANNER)
    for p in probes:
        print(f"  {p.probe_target} from {p.feature_source}: accuracy {p.accuracy:.3f} (chance {p.chance_level:.3f})")
    if model.config.d_e == model.config.d_r:
        print(f"Mean |cos(z_e, z_r)|: {mean_abs_cosine(records):.4f}")
    modality = [r.modality for r in records]
    for source, field in (("erased", "z_e"), ("related", "z_r")):
        features = [getattr(r, field) for r in records]
        estimate = binned_mi_estimate(features, modality, args.bins)
        print(f"Binned MI(modality; {source}) over {len(records)} samples, {args.bins} bins: {estimate:.4f} nats")
    print(f"Report: {path}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "probe": cmd_probe,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="UTF-8 JSON run configuration; flags override its values.")
    common.add_argument("--out", help="Output directory (default: config value, then MIXER_OUT_DIR).")
    common.add_argument("--seed", type=int, help="Seed applied to generation, model, training and evaluation.")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    common.add_argument("--quiet", action="store_true", help="Only log warnings and hide progress bars.")

    ap = argparse.ArgumentParser(prog="mixer_lab", description="MixER mixed-modal re-identification laboratory.")
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="Generate the synthetic dataset.")

    train = sub.add_parser("train", parents=[common], help="Train a model.")
    train.add_argument("--dataset", help="Dataset CSV (default: <out>/dataset.csv).")
    train.add_argument("--resume", action="store_true", help="Continue from <out>/model.ckpt when present.")
    train.add_argument("--sweep", help="Grid over one loss weight, e.g. lambda_m=0,0.2,0.4.")
    train.add_argument("--ablation", help="Loss-ablation preset (yme, yme_ymr, ..., full).")

    ev = sub.add_parser("eval", parents=[common], help="Evaluate a checkpoint.")
    ev.add_argument("--checkpoint", help="Checkpoint file (default: <out>/model.ckpt).")
    ev.add_argument("--dataset", help="Dataset CSV (default: <out>/dataset.csv).")
    ev.add_argument("--settings", help=f"Comma list of {', '.join(GALLERY_KINDS)}.")
    ev.add_argument("--embed-mode", help=f"Comma list of {', '.join(EMBED_MODES)}.")
    ev.add_argument("--query-modality", choices=MODALITIES)
    ev.add_argument("--shot-mode", choices=SHOT_MODES)
    ev.add_argument("--trials", type=int, help="Single-shot trials.")
    ev.add_argument("--sweep-dir", help="Evaluate every grid point under this sweep directory.")

    verify = sub.add_parser("verify", parents=[common], help="Run the information-theory checks.")
    verify.add_argument("--trials", type=int, help="Random tables per check (default 1000).")

    probe = sub.add_parser("probe", parents=[common], help="Linear probes on learned embeddings.")
    probe.add_argument("--checkpoint", help="Checkpoint file (default: <out>/model.ckpt).")
    probe.add_argument("--dataset", help="Dataset CSV (default: <out>/dataset.csv).")
    probe.add_argument("--bins", type=int, default=PROBE_BINS, help="Equal-mass bins for the MI estimate.")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)

    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except Exception as err:
        code = exit_code_for(err)
        if code == EXIT_FAILURE:
            logging.exception("Unhandled error")
        print(f"error: {err}", file=sys.stderr)
        return code


if __name__ == "__main__":
    raise SystemExit(main())
