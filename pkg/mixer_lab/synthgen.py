"""
Deterministic synthetic visible/infrared feature populations.

Every identity y owns a shared latent u_y and one specific latent per
modality; each camera adds a fixed bias. A sample of identity y seen by
camera c (modality m) is
    tanh(P_m @ concat(u_y, v_{y,m})) + b_c + noise.

Random streams come from numpy's PCG64 seeded through SeedSequence with a
derived key [seed, stream, ...indices], so any (identity, camera) cell can
be regenerated on its own.

Includes:
- generate: Builds a Dataset from a GenConfig.
- oracle_check: Nearest-class-centroid learnability report.
- save / load: CSV plus JSON sidecar round trip.
"""

import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd

from .config import GenConfig, validate_gen_config
from .constants import DATASET_META_FILE, MODALITIES, ORACLE_NOISE_LIMIT, OracleReport, Sample
from .errors import ConfigError, MixerError


class DatasetParseError(MixerError):
    """Raised when a dataset file cannot be parsed; no partial dataset is returned."""


# Stream tags for SeedSequence keys
_STREAM_PROJECTION = 0
_STREAM_SHARED = 1
_STREAM_SPECIFIC = 2
_STREAM_CAMERA = 3
_STREAM_NOISE = 4
_STREAM_SPLIT = 5

_META_COLUMNS = ["id", "modality", "camera", "split"]


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in key])))


@dataclass
class Dataset:
    samples: List[Sample]
    config: GenConfig
    camera_table: Dict[int, str] = field(default_factory=dict)

    def split(self, name: str) -> List[Sample]:
        return [s for s in self.samples if s.split == name]

    @property
    def train(self) -> List[Sample]:
        return self.split("train")

    @property
    def test(self) -> List[Sample]:
        return self.split("test")

    @property
    def input_dim(self) -> int:
        return self.config.input_dim

    @property
    def num_ids(self) -> int:
        return self.config.num_ids


def camera_table(config: GenConfig) -> Dict[int, str]:
    """Global camera ids: 0..cams_v-1 are visible, the rest infrared."""
    table = {c: "V" for c in range(config.cams_v)}
    table.update({config.cams_v + c: "I" for c in range(config.cams_i)})
    return table


def samples_per_cell(config: GenConfig) -> int:
    # Two per (id, camera) at minimum so both splits see every (id, modality)
    return max(config.samples_per_id_per_cam, 2)


def _test_count(n: int, fraction: float) -> int:
    return min(max(int(round(n * fraction)), 1), n - 1)


def generate(config: GenConfig) -> Dataset:
    """
    Draw the dataset described by `config`. Identical configs (seed
    included) give bitwise-identical datasets.
    """

    config = validate_gen_config(config.model_dump())
    latent = config.latent_shared + config.latent_specific
    projections = {
        m: _rng(config.seed, _STREAM_PROJECTION, i).standard_normal((config.input_dim, latent)) / np.sqrt(latent)
        for i, m in enumerate(MODALITIES)
    }
    cams = camera_table(config)
    biases = {
        c: config.camera_bias_sigma * _rng(config.seed, _STREAM_CAMERA, c).standard_normal(config.input_dim)
        for c in cams
    }
    n_cell = samples_per_cell(config)
    n_test = _test_count(n_cell, config.test_fraction)

    samples: List[Sample] = []
    for y in range(config.num_ids):
        shared = _rng(config.seed, _STREAM_SHARED, y).standard_normal(config.latent_shared)
        specific = {
            m: _rng(config.seed, _STREAM_SPECIFIC, y, i).standard_normal(config.latent_specific)
            for i, m in enumerate(MODALITIES)
        }
        for c, m in cams.items():
            clean = np.tanh(projections[m] @ np.concatenate([shared, specific[m]])) + biases[c]
            noise = config.noise_sigma * _rng(config.seed, _STREAM_NOISE, y, c).standard_normal((n_cell, config.input_dim))
            test_rows = set(_rng(config.seed, _STREAM_SPLIT, y, c).permutation(n_cell)[:n_test].tolist())
            for s in range(n_cell):
                samples.append(Sample(
                    features=clean + noise[s],
                    id=y,
                    modality=m,
                    camera=c,
                    split="test" if s in test_rows else "train",
                ))

    logging.info("Generated %d samples (%d ids, %d cameras)", len(samples), config.num_ids, len(cams))
    return Dataset(samples=samples, config=config, camera_table=cams)


def oracle_check(ds: Dataset) -> OracleReport:
    """
    Classify every test sample by the nearest train centroid of its own
    modality. Certifies the dataset is learnable before any training.
    """

    if ds.config.noise_sigma > ORACLE_NOISE_LIMIT:
        logging.warning("noise_sigma %.3f exceeds %.1f; oracle accuracy is not meaningful",
                        ds.config.noise_sigma, ORACLE_NOISE_LIMIT)

    by_modality: Dict[str, float] = {}
    correct_total, count_total = 0, 0
    for m in MODALITIES:
        train = [s for s in ds.train if s.modality == m]
        test = [s for s in ds.test if s.modality == m]
        if not train or not test:
            continue
        ids = sorted({s.id for s in train})
        train_x = np.vstack([s.features for s in train])
        train_y = np.array([s.id for s in train])
        centroids = np.vstack([train_x[train_y == y].mean(axis=0) for y in ids])

        test_x = np.vstack([s.features for s in test])
        test_y = np.array([s.id for s in test])
        d2 = ((test_x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        predicted = np.asarray(ids)[np.argmin(d2, axis=1)]
        correct = int((predicted == test_y).sum())

        by_modality[m] = correct / len(test)
        correct_total += correct
        count_total += len(test)

    accuracy = correct_total / count_total if count_total else 0.0
    return OracleReport(accuracy=accuracy, accuracy_by_modality=by_modality, num_test=count_total)


def _meta_path(path: str) -> str:
    return os.path.join(os.path.dirname(path) or ".", DATASET_META_FILE)


def save(ds: Dataset, path: str) -> None:
    """
    Write `path` as CSV (id,modality,camera,split,f0..f{D-1}, floats with 17
    significant digits) and the GenConfig plus row count to the JSON sidecar.
    """

    dim = ds.config.input_dim
    frame = pd.DataFrame(
        np.vstack([s.features for s in ds.samples]) if ds.samples else np.zeros((0, dim)),
        columns=[f"f{i}" for i in range(dim)],
    )
    frame.insert(0, "split", [s.split for s in ds.samples])
    frame.insert(0, "camera", [s.camera for s in ds.samples])
    frame.insert(0, "modality", [s.modality for s in ds.samples])
    frame.insert(0, "id", [s.id for s in ds.samples])
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n", encoding="utf-8")

    meta = {"config": ds.config.model_dump(mode="json"), "num_samples": len(ds.samples)}
    with open(_meta_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_ints(values: np.ndarray, column: str) -> np.ndarray:
    out = np.empty(values.size, dtype=np.int64)
    for row, raw in enumerate(values):
        try:
            out[row] = int(raw)
        except ValueError as e:
            raise DatasetParseError(f"line {row + 2}, field '{column}': expected an integer, got {raw!r}") from e
    return out


def _parse_floats(values: np.ndarray, column: str) -> np.ndarray:
    try:
        return np.asarray(values, dtype=np.float64)
    except ValueError:
        for row, raw in enumerate(values):
            try:
                float(raw)
            except ValueError as e:
                raise DatasetParseError(f"line {row + 2}, field '{column}': expected a float, got {raw!r}") from e
        raise


def load(path: str) -> Dataset:
    """
    Read a dataset written by `save`. Any malformed cell, unknown column,
    missing final newline, row-count mismatch with the sidecar or an
    (identity, modality) absent from a split raises DatasetParseError.
    """

    try:
        with open(_meta_path(path), "r", encoding="utf-8") as f:
            meta = json.load(f)
        config = validate_gen_config(meta["config"])
        expected_rows = int(meta["num_samples"])
    except FileNotFoundError as e:
        raise DatasetParseError(f"missing sidecar {_meta_path(path)}") from e
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, ConfigError) as e:
        raise DatasetParseError(f"malformed sidecar {_meta_path(path)}: {e}") from e

    try:
        with open(path, "rb") as f:
            text = f.read().decode("utf-8")
    except FileNotFoundError as e:
        raise DatasetParseError(f"dataset file not found: {path}") from e
    except UnicodeDecodeError as e:
        raise DatasetParseError(f"{path}: not UTF-8 ({e})") from e
    # save always terminates the last row
    if not text.endswith("\n"):
        raise DatasetParseError(f"{path}: last line has no newline (truncated file?)")

    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DatasetParseError(f"{path}: {e}") from e

    feature_cols = [f"f{i}" for i in range(config.input_dim)]
    expected_cols = _META_COLUMNS + feature_cols
    for col in frame.columns:
        if col not in expected_cols:
            raise DatasetParseError(f"{path}: unknown column '{col}'")
    missing = [c for c in expected_cols if c not in frame.columns]
    if missing:
        raise DatasetParseError(f"{path}: missing column(s) {missing}")
    if len(frame) != expected_rows:
        raise DatasetParseError(f"{path}: expected {expected_rows} rows, found {len(frame)} (truncated file?)")

    for col in expected_cols:
        blank = np.flatnonzero(frame[col].isna().to_numpy() | (frame[col].fillna("").to_numpy() == ""))
        if blank.size:
            raise DatasetParseError(f"line {blank[0] + 2}, field '{col}': empty value")

    ids = _parse_ints(frame["id"].to_numpy(), "id")
    cameras = _parse_ints(frame["camera"].to_numpy(), "camera")
    features = np.column_stack([_parse_floats(frame[c].to_numpy(), c) for c in feature_cols])
    if not np.all(np.isfinite(features)):
        row = int(np.flatnonzero(~np.isfinite(features).all(axis=1))[0])
        raise DatasetParseError(f"line {row + 2}: non-finite feature value")

    cams = camera_table(config)
    samples = []
    for row, (y, m, c, split) in enumerate(zip(ids, frame["modality"], cameras, frame["split"])):
        if m not in MODALITIES:
            raise DatasetParseError(f"line {row + 2}, field 'modality': expected V or I, got {m!r}")
        if split not in ("train", "test"):
            raise DatasetParseError(f"line {row + 2}, field 'split': expected train or test, got {split!r}")
        if not 0 <= y < config.num_ids:
            raise DatasetParseError(f"line {row + 2}, field 'id': {y} outside [0, {config.num_ids})")
        if cams.get(int(c)) != m:
            raise DatasetParseError(f"line {row + 2}, field 'camera': camera {c} is not a {m} camera")
        samples.append(Sample(features=features[row].copy(), id=int(y), modality=m, camera=int(c), split=split))

    seen = {(s.split, s.id, s.modality) for s in samples}
    for split in ("train", "test"):
        for y in range(config.num_ids):
            for m in MODALITIES:
                if (split, y, m) not in seen:
                    raise DatasetParseError(f"{path}: identity {y} has no {m} samples in the {split} split")

    return Dataset(samples=samples, config=config, camera_table=cams)
