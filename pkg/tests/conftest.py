import json

import numpy as np
import pytest

from mixer_lab import autodiff as ad
from mixer_lab.config import GenConfig, ModelConfig
from mixer_lab.constants import EmbeddingRecord
from mixer_lab.model import fuse
from mixer_lab.synthgen import generate


@pytest.fixture
def tiny_gen_config():
    return GenConfig(
        num_ids=6,
        latent_shared=4,
        latent_specific=2,
        input_dim=12,
        cams_v=2,
        cams_i=2,
        samples_per_id_per_cam=6,
        noise_sigma=0.05,
        camera_bias_sigma=0.05,
        seed=0,
    )


@pytest.fixture
def tiny_dataset(tiny_gen_config):
    return generate(tiny_gen_config)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(input_dim=12, hidden_dims=[16], d_e=8, d_r=8, num_ids=6, seed=0)


@pytest.fixture
def tiny_run_file(tmp_path):
    """Write a desk-sized run configuration and return its path."""

    def _write(out_dir=None, **sections):
        cfg = {
            "gen": {"num_ids": 6, "latent_shared": 4, "latent_specific": 2, "input_dim": 12, "cams_v": 2,
                    "cams_i": 2, "samples_per_id_per_cam": 6, "noise_sigma": 0.05, "seed": 0},
            "model": {"input_dim": 12, "hidden_dims": [16], "d_e": 8, "d_r": 8, "num_ids": 6, "seed": 0},
            "train": {"epochs": 2, "base_lr": 0.001, "warmup_epochs": 1, "decay_epochs": [], "p_ids": 3,
                      "k_per_modality": 2, "seed": 0},
            "eval": {"settings": ["Mix", "MixCam", "MixCamID", "MixID"], "query_modality": "I"},
            "out": str(out_dir or tmp_path / "run"),
        }
        for name, values in sections.items():
            cfg[name] = {**cfg.get(name, {}), **values}
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg), encoding="utf-8")
        return str(path)

    return _write


@pytest.fixture
def grad_check():
    """
    Compare reverse-mode gradients of `build(tape, leaves) -> 1x1 Node`
    against central differences on `arrays`. Returns the largest per-tensor
    relative error ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12).
    `entries` limits the check to that many randomly chosen coordinates per array.
    """

    def _check(build, arrays, h=1e-5, entries=None, rng=None):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        tape = ad.Tape()
        leaves = [tape.leaf(a) for a in arrays]
        root = build(tape, leaves)
        ad.backward(tape, root)
        analytic = [leaf.grad.copy() for leaf in leaves]

        def value():
            t = ad.Tape()
            return float(build(t, [t.leaf(a) for a in arrays]).value[0, 0])

        worst = 0.0
        for a, grad in zip(arrays, analytic):
            coords = list(np.ndindex(a.shape))
            if entries is not None and entries < len(coords):
                picks = (rng or np.random.default_rng(0)).choice(len(coords), size=entries, replace=False)
                coords = [coords[i] for i in picks]
            numeric = np.zeros(len(coords))
            for n, idx in enumerate(coords):
                saved = a[idx]
                a[idx] = saved + h
                up = value()
                a[idx] = saved - h
                down = value()
                a[idx] = saved
                numeric[n] = (up - down) / (2 * h)
            exact = np.array([grad[idx] for idx in coords])
            denom = max(np.linalg.norm(exact) + np.linalg.norm(numeric), 1e-12)
            worst = max(worst, np.linalg.norm(exact - numeric) / denom)
        return worst

    return _check


def make_records(rng, n, num_ids=4, dim=4, cams_v=(0, 1), cams_i=(2, 3)):
    """Random EmbeddingRecords with V cameras cams_v and I cameras cams_i."""
    records = []
    for _ in range(n):
        modality = "V" if rng.random() < 0.5 else "I"
        camera = int(rng.choice(cams_v if modality == "V" else cams_i))
        z_e = rng.standard_normal(dim)
        z_r = rng.standard_normal(dim)
        records.append(EmbeddingRecord(z_e, z_r, fuse(z_e, z_r), int(rng.integers(num_ids)), modality, camera))
    return records


def oracle_records(num_ids=4, per_camera=2):
    """One-hot identity embeddings over two V and two I cameras."""
    records = []
    for y in range(num_ids):
        onehot = np.eye(num_ids)[y]
        for camera, modality in ((0, "V"), (1, "V"), (2, "I"), (3, "I")):
            for _ in range(per_camera):
                records.append(EmbeddingRecord(onehot.copy(), onehot.copy(), fuse(onehot, onehot), y, modality, camera))
    return records


@pytest.fixture
def record_factory():
    return make_records


@pytest.fixture
def separable_records():
    return oracle_records()
