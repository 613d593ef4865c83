"""
PK batch sampling, Adam with linear warm-up and step decay, and the
end-to-end training loop.

Includes:
- sample_batch: p identities x (k visible + k infrared) samples.
- lr_at: Learning rate for an epoch.
- OptimizerState / adam_step: Bias-corrected Adam, in place.
- train: Runs the schedule, records per-epoch history, writes a checkpoint.
- write_history: Dumps history rows as CSV.
"""

import logging
import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from . import autodiff as ad
from .config import TrainConfig
from .constants import HISTORY_COLUMNS, MODALITIES, HistoryRow, Sample
from .errors import MixerError
from .losses import COMPONENTS, mixer_losses
from .model import MixerModel, forward, save_checkpoint
from .synthgen import Dataset


class SamplingError(MixerError):
    """Raised when a PK batch cannot be drawn from the training split."""


class NonFiniteLossError(MixerError):
    """Raised when a loss component or parameter stops being finite."""

    def __init__(self, component: str, epoch: int, step: int):
        super().__init__(f"non-finite value in '{component}' at epoch {epoch}, step {step}")
        self.component = component
        self.epoch = epoch
        self.step = step

    def __reduce__(self):
        return (self.__class__, (self.component, self.epoch, self.step))


class OptimizerState:
    """Adam first/second moments per parameter plus the step counter."""

    def __init__(self, params: Dict[str, np.ndarray], step: int = 0,
                 moments: Optional[Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]] = None):
        if moments is None:
            self.m = {k: np.zeros_like(v) for k, v in params.items()}
            self.v = {k: np.zeros_like(v) for k, v in params.items()}
        else:
            self.m = {k: moments[0][k].copy() for k in params}
            self.v = {k: moments[1][k].copy() for k in params}
        self.step = step

    def moments(self) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        return self.m, self.v


def _index_by_identity(samples: Sequence[Sample]) -> Dict[int, Dict[str, List[int]]]:
    index: Dict[int, Dict[str, List[int]]] = defaultdict(lambda: {m: [] for m in MODALITIES})
    for i, s in enumerate(samples):
        index[s.id][s.modality].append(i)
    return index


def _eligible(index: Dict[int, Dict[str, List[int]]]) -> List[int]:
    return sorted(y for y, pools in index.items() if all(pools[m] for m in MODALITIES))


def eligible_ids(samples: Sequence[Sample]) -> List[int]:
    return _eligible(_index_by_identity(samples))


def sample_batch(samples: Sequence[Sample], p_ids: int, k: int, rng: np.random.Generator) -> List[Sample]:
    """
    Draw p_ids distinct identities among those seen in both modalities, then
    k visible and k infrared samples of each (with replacement when fewer
    than k exist). Batch order is identity-major, visible first.
    """

    index = _index_by_identity(samples)
    ids = _eligible(index)
    if p_ids > len(ids):
        raise SamplingError(f"asked for {p_ids} identities, {len(ids)} have samples in both modalities")

    batch: List[Sample] = []
    for y in rng.choice(ids, size=p_ids, replace=False):
        for m in MODALITIES:
            pool = index[int(y)][m]
            picks = rng.choice(len(pool), size=k, replace=len(pool) < k)
            batch.extend(samples[pool[j]] for j in picks)
    return batch


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """
    Linear warm-up to base_lr over warmup_epochs, then base_lr times the
    factor of the latest decay threshold reached.
    """
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    factor = 1.0
    for threshold, f in sorted(cfg.decay_epochs):
        if epoch >= threshold:
            factor = f
    return cfg.base_lr * factor


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: OptimizerState, lr: float,
              betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    beta1, beta2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ad.DimensionError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def batch_shape(cfg: TrainConfig, samples: Sequence[Sample]) -> Tuple[int, int]:
    """p_ids shrunk to the identities that have both modalities."""
    available = len(eligible_ids(samples))
    p = min(cfg.p_ids, available)
    if p < 2:
        raise SamplingError(f"need at least 2 identities with both modalities, found {available}")
    return p, cfg.k_per_modality


def train_step(model: MixerModel, batch: Sequence[Sample], cfg: TrainConfig, state: OptimizerState, lr: float,
               epoch: int = 0):
    """One forward/backward/update; returns the detached LossBreakdown."""

    tape = ad.Tape()
    out = forward(model, tape, batch)
    y = [s.id for s in batch]
    m = [s.modality for s in batch]
    total, breakdown = mixer_losses(out, y, m, cfg.weights, cfg.grl_coeff)

    for name, value in breakdown._asdict().items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, epoch, state.step)

    ad.backward(tape, total)
    adam_step(model.params, out.params.grads(), state, lr, betas=cfg.adam[:2], eps=cfg.adam[2])

    for name, p in model.params.items():
        if not np.all(np.isfinite(p)):
            raise NonFiniteLossError(name, epoch, state.step)
    return breakdown


def train(model: MixerModel, dataset: Dataset, cfg: TrainConfig, checkpoint_path: Optional[str] = None,
          start_epoch: int = 0, state: Optional[OptimizerState] = None,
          show_progress: bool = False) -> Tuple[MixerModel, List[HistoryRow]]:
    """
    Run epochs start_epoch..cfg.epochs-1, each of floor(train_size / batch_size)
    steps (at least one). Every epoch draws from its own generator derived
    from (seed, epoch) so a resumed run matches an uninterrupted one.
    """

    train_samples = dataset.train
    state = state or OptimizerState(model.params)
    history: List[HistoryRow] = []

    if cfg.epochs > start_epoch:
        p, k = batch_shape(cfg, train_samples)
        iterations = max(1, len(train_samples) // (p * 2 * k))
        logging.info("Training %d epochs x %d iterations, batch %d (p=%d, k=%d)",
                     cfg.epochs - start_epoch, iterations, p * 2 * k, p, k)

        for epoch in tqdm(range(start_epoch, cfg.epochs), desc="epochs", disable=not show_progress):
            lr = lr_at(epoch, cfg)
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, epoch])))
            sums = dict.fromkeys(COMPONENTS + ("total",), 0.0)
            for _ in range(iterations):
                breakdown = train_step(model, sample_batch(train_samples, p, k, rng), cfg, state, lr, epoch)
                for name, value in breakdown._asdict().items():
                    sums[name] += value
            row = HistoryRow(epoch=epoch, lr=lr, **{name: total / iterations for name, total in sums.items()})
            history.append(row)
            logging.info("epoch %d lr %.3g total %.4f (yme %.4f ymr %.4f m %.4f o %.4f f %.4f)",
                         epoch, lr, row.total, row.l_yme, row.l_ymr, row.l_m, row.l_o, row.l_f)

    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, epochs_done=max(cfg.epochs, start_epoch), step=state.step,
                        moments=state.moments())
    return model, history


def write_history(history: Sequence[HistoryRow], path: str) -> None:
    frame = pd.DataFrame([r._asdict() for r in history], columns=HISTORY_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")


def read_history(path: str) -> List[HistoryRow]:
    frame = pd.read_csv(path, float_precision="round_trip", encoding="utf-8")
    return [HistoryRow(**{c: (int(row[c]) if c == "epoch" else float(row[c])) for c in HISTORY_COLUMNS})
            for row in frame.to_dict("records")]
