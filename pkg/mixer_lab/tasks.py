"""
Training runs and lambda-sweep task discovery.

Includes:
- train_run: Builds (or resumes) a model, trains it, writes checkpoint and history.
- parse_sweep: Parses "param=v1,v2,..." sweep grids.
- discover_sweep_tasks: Returns one SweepTask per grid point.
- run_sweep_task: Worker entry point for a single grid point.
- find_sweep_points: Lists trained grid points under a sweep directory.
"""

import logging
import os
import re
from collections import namedtuple
from typing import List, Optional, Tuple

from .config import RunConfig
from .constants import CHECKPOINT_FILE, DATASET_FILE, HISTORY_FILE, SWEEP_DIR
from .errors import ConfigError
from .model import MixerModel, load_checkpoint
from .synthgen import Dataset, load
from .trainer import OptimizerState, read_history, train, write_history

SweepTask = namedtuple("SweepTask", ["param", "value", "raw_value", "out_dir", "config"])
SweepResult = namedtuple("SweepResult", ["param", "raw_value", "checkpoint", "epochs", "final_total"])
TrainOutcome = namedtuple("TrainOutcome", ["checkpoint", "history_file", "history", "step", "start_epoch"])

# Loss weights that can be swept; grl_coeff lives on TrainConfig itself
WEIGHT_PARAMS = ("lambda_m", "lambda_o", "lambda_f", "margin_alpha", "cc_margin_rho")
SWEEP_PARAMS = WEIGHT_PARAMS + ("grl_coeff",)

_POINT_DIR = re.compile(r"^(?P<param>[a-z_]+)=(?P<value>[^=]+)$")


def train_run(cfg: RunConfig, dataset: Dataset, out_dir: str, resume: bool = False,
              show_progress: bool = False) -> TrainOutcome:
    """
    Train on `dataset` and write model.ckpt plus history.csv to `out_dir`.
    With `resume`, an existing checkpoint supplies the weights, Adam moments,
    step counter and the first epoch to run.
    """

    os.makedirs(out_dir, exist_ok=True)
    checkpoint = os.path.join(out_dir, CHECKPOINT_FILE)
    model_cfg = cfg.model.model_copy(update={"input_dim": dataset.input_dim, "num_ids": dataset.num_ids})

    start_epoch, state, model = 0, None, None
    if resume and os.path.exists(checkpoint):
        model, saved = load_checkpoint(checkpoint)
        start_epoch = saved.epochs_done
        state = OptimizerState(model.params, step=saved.step, moments=saved.moments)
        logging.info("Resuming %s at epoch %d, step %d", checkpoint, start_epoch, saved.step)
    elif resume:
        logging.warning("No checkpoint at %s; starting from scratch", checkpoint)
    if model is None:
        model = MixerModel(model_cfg)
        state = OptimizerState(model.params)

    history_file = os.path.join(out_dir, HISTORY_FILE)
    earlier = []
    if start_epoch > 0 and os.path.exists(history_file):
        earlier = [row for row in read_history(history_file) if row.epoch < start_epoch]

    _, new_rows = train(model, dataset, cfg.train, checkpoint_path=checkpoint, start_epoch=start_epoch,
                        state=state, show_progress=show_progress)
    history = earlier + new_rows
    write_history(history, history_file)
    return TrainOutcome(checkpoint, history_file, history, state.step, start_epoch)


def parse_sweep(spec: str) -> Tuple[str, List[Tuple[float, str]]]:
    """
    Parse "lambda_m=0,0.2,0.4" into ("lambda_m", [(0.0, "0"), (0.2, "0.2"), ...]).
    The raw strings name the per-point output directories.
    """

    if "=" not in spec:
        raise ConfigError(f"sweep must look like param=v1,v2,...; got {spec!r}")
    param, _, raw = spec.partition("=")
    param = param.strip()
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"cannot sweep '{param}'; valid names: {', '.join(SWEEP_PARAMS)}")

    values = []
    for part in (p.strip() for p in raw.split(",")):
        if not part:
            continue
        try:
            values.append((float(part), part))
        except ValueError as e:
            raise ConfigError(f"sweep value {part!r} for {param} is not a number") from e
    if not values:
        raise ConfigError(f"sweep over {param} has no values")
    return param, values


def discover_sweep_tasks(cfg: RunConfig, spec: str) -> List[SweepTask]:
    """One task per grid value, each with its own config and out/sweep/<param>=<value> directory."""

    param, values = parse_sweep(spec)
    tasks = []
    for value, raw in values:
        if param in WEIGHT_PARAMS:
            weights = cfg.train.weights.model_copy(update={param: value})
            train_cfg = cfg.train.model_copy(update={"weights": weights})
        else:
            train_cfg = cfg.train.model_copy(update={param: value})
        point = cfg.model_copy(update={"train": train_cfg})
        out_dir = os.path.join(cfg.out, SWEEP_DIR, f"{param}={raw}")
        tasks.append(SweepTask(param, value, raw, out_dir, point))
    return tasks


def run_sweep_task(task: SweepTask, dataset_path: str) -> SweepResult:
    """Load the shared dataset and train one grid point; runs in a worker process."""
    dataset = load(dataset_path)
    outcome = train_run(task.config, dataset, task.out_dir)
    final = outcome.history[-1].total if outcome.history else float("nan")
    return SweepResult(task.param, task.raw_value, outcome.checkpoint, len(outcome.history), final)


def find_sweep_points(sweep_dir: str) -> List[Tuple[str, str, str]]:
    """
    (param, raw value, checkpoint path) for every trained grid point under
    `sweep_dir`, ordered by parameter name then numeric value.
    """

    points = []
    for name in os.listdir(sweep_dir):
        match = _POINT_DIR.match(name)
        checkpoint = os.path.join(sweep_dir, name, CHECKPOINT_FILE)
        if not match or not os.path.isfile(checkpoint):
            continue
        try:
            numeric = float(match["value"])
        except ValueError:
            continue
        points.append((match["param"], numeric, match["value"], checkpoint))
    points.sort(key=lambda p: (p[0], p[1]))
    return [(param, raw, checkpoint) for param, _, raw, checkpoint in points]


def default_dataset_path(cfg: RunConfig, dataset: Optional[str] = None) -> str:
    return dataset or os.path.join(cfg.out, DATASET_FILE)
