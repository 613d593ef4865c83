"""
The MixER network and its checkpoint format.

A shared MLP backbone F_b feeds one shared modality-erased head F_s and two
modality-specific modality-related heads F_v / F_i. Each related head clones
the last stage (a ReLU layer as wide as the backbone output) and then
projects to d_r. Three linear classifiers sit on top: identity on z_e,
identity-modality on z_r and modality on z_e (the latter reached through
grad_reverse inside the losses).

Includes:
- MixerModel: Parameter storage with seeded Glorot-uniform init.
- forward / forward_arrays: Records one batch on a Tape.
- fuse, embed_dataset: Inference-time feature extraction.
- save_checkpoint / load_checkpoint: Bit-exact binary container.
"""

import json
import logging
from collections import namedtuple
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .config import ModelConfig
from .constants import CHECKPOINT_MAGIC, MODALITY_INDEX, NORM_EPS, EmbeddingRecord, Sample
from .errors import MixerError


class InputError(MixerError):
    """Raised when a batch does not match the model's input contract."""


class CheckpointError(MixerError):
    """Raised when a checkpoint file is missing, truncated or malformed."""


ForwardOutputs = namedtuple("ForwardOutputs", ["params", "z", "z_e", "z_r"])
CheckpointState = namedtuple("CheckpointState", ["epochs_done", "step", "moments"])

BACKBONE = "backbone"
HEAD_ERASED = "head_s"
HEAD_VISIBLE = "head_v"
HEAD_INFRARED = "head_i"
CLS_ID = "cls_id"
CLS_ID_MODALITY = "cls_idmod"
CLS_MODALITY = "cls_mod"


def layer_shapes(config: ModelConfig) -> List[Tuple[str, int, int]]:
    """
    (name, fan_in, fan_out) of every linear layer in declaration order.
    The parameter count is sum(fan_in * fan_out + fan_out) over this list.
    """
    shapes = []
    widths = [config.input_dim] + list(config.hidden_dims)
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        shapes.append((f"{BACKBONE}.{i}", fan_in, fan_out))
    shared = config.shared_width
    shapes += [
        (HEAD_ERASED, shared, config.d_e),
        (f"{HEAD_VISIBLE}.0", shared, shared),
        (f"{HEAD_VISIBLE}.1", shared, config.d_r),
        (f"{HEAD_INFRARED}.0", shared, shared),
        (f"{HEAD_INFRARED}.1", shared, config.d_r),
        (CLS_ID, config.d_e, config.num_ids),
        (CLS_ID_MODALITY, config.d_r, 2 * config.num_ids),
        (CLS_MODALITY, config.d_e, 2),
    ]
    return shapes


class MixerModel:
    def __init__(self, config: ModelConfig, params: Optional[Dict[str, np.ndarray]] = None):
        self.config = config
        self.params: Dict[str, np.ndarray] = params if params is not None else self._init_params()

    def _init_params(self) -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}
        for i, (name, fan_in, fan_out) in enumerate(layer_shapes(self.config)):
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.config.seed, i])))
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"{name}.W"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params[f"{name}.b"] = np.zeros((1, fan_out))
        return params

    @property
    def num_backbone_layers(self) -> int:
        return len(self.config.hidden_dims)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


class ParamBinding:
    """
    Lazily records model parameters as tape leaves. Parameters never touched
    by a forward pass stay off the tape and report an all-zero gradient.
    """

    def __init__(self, model: MixerModel, tape: ad.Tape):
        self.model = model
        self.tape = tape
        self._nodes: Dict[str, ad.Node] = {}

    def __getitem__(self, name: str) -> ad.Node:
        node = self._nodes.get(name)
        if node is None:
            node = self.tape.leaf(self.model.params[name])
            self._nodes[name] = node
        return node

    def linear(self, layer: str, x: ad.Node) -> ad.Node:
        return ad.add_bias(ad.matmul(x, self[f"{layer}.W"]), self[f"{layer}.b"])

    def grads(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, value in self.model.params.items():
            node = self._nodes.get(name)
            out[name] = node.grad.copy() if node is not None else np.zeros_like(value)
        return out


def _modality_codes(modalities: Sequence) -> np.ndarray:
    codes = []
    for m in modalities:
        if isinstance(m, str):
            if m not in MODALITY_INDEX:
                raise InputError(f"unknown modality label {m!r}")
            codes.append(MODALITY_INDEX[m])
        else:
            if int(m) not in (0, 1):
                raise InputError(f"unknown modality code {m!r}")
            codes.append(int(m))
    return np.asarray(codes, dtype=np.int64)


def forward_arrays(model: MixerModel, tape: ad.Tape, features: np.ndarray, modalities: Sequence) -> ForwardOutputs:
    """
    Record F_b, F_s and the routed F_v / F_i for a feature matrix.
    Row i of z_r comes from F_v when modality(i) is V and from F_i otherwise.
    """

    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.config.input_dim:
        raise InputError(f"expected features of shape (B, {model.config.input_dim}), got {x.shape}")
    codes = _modality_codes(modalities)
    if codes.shape[0] != x.shape[0]:
        raise InputError("one modality label is required per row")

    params = ParamBinding(model, tape)
    h = tape.constant(x)
    for i in range(model.num_backbone_layers):
        h = ad.tanh(params.linear(f"{BACKBONE}.{i}", h))
    z = h

    z_e = params.linear(HEAD_ERASED, z)

    # Route each row through its own modality head only
    parts, order = [], []
    for code, head in ((0, HEAD_VISIBLE), (1, HEAD_INFRARED)):
        rows = np.flatnonzero(codes == code)
        if rows.size == 0:
            continue
        stage = ad.relu(params.linear(f"{head}.0", ad.take_rows(z, rows)))
        parts.append(params.linear(f"{head}.1", stage))
        order.append(rows)
    z_r = ad.take_rows(ad.concat_rows(parts), np.argsort(np.concatenate(order), kind="stable"))

    return ForwardOutputs(params=params, z=z, z_e=z_e, z_r=z_r)


def forward(model: MixerModel, tape: ad.Tape, batch: Sequence[Sample]) -> ForwardOutputs:
    if not batch:
        raise InputError("empty batch")
    features = np.vstack([np.asarray(s.features, dtype=np.float64).reshape(1, -1) for s in batch])
    return forward_arrays(model, tape, features, [s.modality for s in batch])


def fuse(z_e: np.ndarray, z_r: np.ndarray) -> np.ndarray:
    """Concatenate the L2-normalized erased and related parts."""
    z_e = np.asarray(z_e, dtype=np.float64).reshape(-1)
    z_r = np.asarray(z_r, dtype=np.float64).reshape(-1)
    ne, nr = np.linalg.norm(z_e), np.linalg.norm(z_r)
    if ne <= NORM_EPS or nr <= NORM_EPS:
        raise ad.DegenerateVectorError("fuse: degenerate embedding")
    return np.concatenate([z_e / ne, z_r / nr])


def embed_dataset(model: MixerModel, samples: Sequence[Sample], chunk_size: int = 512) -> List[EmbeddingRecord]:
    """
    Extract (z_e, z_r, z_f) for every sample, order preserved. Deterministic
    for fixed parameters; works chunk by chunk on fresh tapes.
    """

    records: List[EmbeddingRecord] = []
    for start in range(0, len(samples), chunk_size):
        chunk = samples[start : start + chunk_size]
        out = forward(model, ad.Tape(), chunk)
        for s, ze, zr in zip(chunk, out.z_e.value, out.z_r.value):
            records.append(EmbeddingRecord(
                z_e=ze.copy(),
                z_r=zr.copy(),
                z_f=fuse(ze, zr),
                id=s.id,
                modality=s.modality,
                camera=s.camera,
            ))
    return records


def save_checkpoint(path: str, model: MixerModel, epochs_done: int = 0, step: int = 0,
                    moments: Optional[Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]] = None) -> None:
    """
    Write: magic "MIXER1", an 8-byte little-endian header length, the UTF-8
    JSON header, then every parameter as little-endian float64 in
    declaration order, then (optionally) Adam first and second moments.
    """

    names = list(model.params)
    header = {
        "model_config": model.config.model_dump(mode="json"),
        "param_names": names,
        "param_shapes": [list(model.params[n].shape) for n in names],
        "epochs_done": int(epochs_done),
        "step": int(step),
        "has_optimizer_state": moments is not None,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())
        if moments is not None:
            for table in moments:
                for n in names:
                    f.write(np.ascontiguousarray(table[n], dtype="<f8").tobytes())
    logging.info("Wrote checkpoint %s (%d parameters)", path, model.num_parameters())


def load_checkpoint(path: str) -> Tuple[MixerModel, CheckpointState]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint not found: {path}") from e

    magic_len = len(CHECKPOINT_MAGIC)
    if raw[:magic_len] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a MixER checkpoint")
    if len(raw) < magic_len + 8:
        raise CheckpointError(f"{path}: truncated header")
    header_len = int.from_bytes(raw[magic_len : magic_len + 8], "little")
    offset = magic_len + 8
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
        config = ModelConfig.model_validate(header["model_config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: malformed header ({e})") from e
    offset += header_len

    def read_table() -> Dict[str, np.ndarray]:
        nonlocal offset
        table = {}
        for name, shape in zip(header["param_names"], header["param_shapes"]):
            count = int(np.prod(shape))
            end = offset + 8 * count
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated while reading {name}")
            table[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
            offset = end
        return table

    params = read_table()
    moments = (read_table(), read_table()) if header.get("has_optimizer_state") else None
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    expected = {f"{n}.{p}" for n, _, _ in layer_shapes(config) for p in ("W", "b")}
    if set(params) != expected:
        raise CheckpointError(f"{path}: parameter names do not match the model config")

    state = CheckpointState(epochs_done=header.get("epochs_done", 0), step=header.get("step", 0), moments=moments)
    return MixerModel(config, params), state
