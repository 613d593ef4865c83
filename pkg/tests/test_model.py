import numpy as np
import pytest

from mixer_lab import autodiff as ad
from mixer_lab.config import ModelConfig
from mixer_lab.constants import CHECKPOINT_MAGIC, Sample
from mixer_lab.miprobe import linear_probe
from mixer_lab.model import (
    CheckpointError,
    InputError,
    MixerModel,
    embed_dataset,
    forward,
    forward_arrays,
    fuse,
    layer_shapes,
    load_checkpoint,
    save_checkpoint,
)


def test_default_parameter_count_matches_layer_formula():
    config = ModelConfig()
    model = MixerModel(config)
    assert model.num_parameters() == sum(i * o + o for _, i, o in layer_shapes(config))
    assert model.num_parameters() == 75256


def test_initialization_is_seeded(tiny_model_config):
    a = MixerModel(tiny_model_config)
    b = MixerModel(tiny_model_config)
    c = MixerModel(tiny_model_config.model_copy(update={"seed": 1}))
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params if n.endswith(".W"))
    assert all(not a.params[n].any() for n in a.params if n.endswith(".b"))


def test_forward_routes_rows_through_their_modality_head(tiny_model_config):
    model = MixerModel(tiny_model_config)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((5, 12))
    modalities = ["V", "I", "I", "V", "I"]
    out = forward_arrays(model, ad.Tape(), x, modalities)

    p = model.params
    z = np.tanh(x @ p["backbone.0.W"] + p["backbone.0.b"])
    np.testing.assert_allclose(out.z.value, z, rtol=0, atol=1e-14)
    np.testing.assert_allclose(out.z_e.value, z @ p["head_s.W"] + p["head_s.b"], atol=1e-14)
    for i, m in enumerate(modalities):
        head = "head_v" if m == "V" else "head_i"
        stage = np.maximum(z[i] @ p[f"{head}.0.W"] + p[f"{head}.0.b"][0], 0.0)
        np.testing.assert_allclose(out.z_r.value[i], stage @ p[f"{head}.1.W"] + p[f"{head}.1.b"][0], atol=1e-14)


def test_unused_head_gets_zero_gradient(tiny_model_config):
    model = MixerModel(tiny_model_config)
    tape = ad.Tape()
    out = forward_arrays(model, tape, np.ones((3, 12)), ["V", "V", "V"])
    ad.backward(tape, ad.sum_all(out.z_r))
    grads = out.params.grads()
    for layer in ("head_i.0", "head_i.1"):
        assert not grads[f"{layer}.W"].any() and not grads[f"{layer}.b"].any()
    assert grads["head_v.1.W"].any()


def test_forward_rejects_wrong_feature_width(tiny_model_config):
    model = MixerModel(tiny_model_config)
    with pytest.raises(InputError):
        forward_arrays(model, ad.Tape(), np.ones((2, 11)), ["V", "I"])
    with pytest.raises(InputError):
        forward_arrays(model, ad.Tape(), np.ones((2, 12)), ["V", "X"])
    with pytest.raises(InputError):
        forward(model, ad.Tape(), [])


def test_fuse_concatenates_unit_halves():
    z_f = fuse(np.array([3.0, 4.0]), np.array([0.0, 2.0]))
    np.testing.assert_allclose(z_f, [0.6, 0.8, 0.0, 1.0])
    assert np.linalg.norm(z_f) == pytest.approx(np.sqrt(2.0))
    with pytest.raises(ad.DegenerateVectorError):
        fuse(np.zeros(2), np.ones(2))


def test_embed_dataset_is_deterministic_and_order_preserving(tiny_model_config, tiny_dataset):
    model = MixerModel(tiny_model_config)
    samples = tiny_dataset.test
    first = embed_dataset(model, samples)
    second = embed_dataset(model, samples, chunk_size=7)
    assert [r.id for r in first] == [s.id for s in samples]
    assert [r.camera for r in first] == [s.camera for s in samples]
    for a, b in zip(first, second):
        np.testing.assert_allclose(a.z_e, b.z_e, atol=1e-12)
        np.testing.assert_allclose(a.z_f, b.z_f, atol=1e-12)


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_model_config):
    model = MixerModel(tiny_model_config)
    rng = np.random.default_rng(3)
    moments = ({k: rng.standard_normal(v.shape) for k, v in model.params.items()},
               {k: rng.random(v.shape) for k, v in model.params.items()})
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), model, epochs_done=4, step=17, moments=moments)

    loaded, state = load_checkpoint(str(path))
    assert loaded.config == model.config
    assert (state.epochs_done, state.step) == (4, 17)
    for name in model.params:
        np.testing.assert_array_equal(loaded.params[name], model.params[name])
        np.testing.assert_array_equal(state.moments[0][name], moments[0][name])
        np.testing.assert_array_equal(state.moments[1][name], moments[1][name])
    assert path.read_bytes().startswith(CHECKPOINT_MAGIC)


def test_checkpoint_without_optimizer_state(tmp_path, tiny_model_config):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), MixerModel(tiny_model_config))
    _, state = load_checkpoint(str(path))
    assert state.moments is None and state.step == 0


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "header"])
def test_damaged_checkpoint_is_rejected(tmp_path, tiny_model_config, damage):
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), MixerModel(tiny_model_config))
    raw = path.read_bytes()
    if damage == "magic":
        raw = b"XIXER1" + raw[6:]
    elif damage == "truncate":
        raw = raw[:-9]
    elif damage == "trailing":
        raw = raw + b"\x00" * 8
    else:
        raw = raw[:14] + b"[" + raw[15:]
    path.write_bytes(raw)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_missing_checkpoint_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "absent.ckpt"))


def test_forward_accepts_samples(tiny_model_config):
    model = MixerModel(tiny_model_config)
    batch = [Sample(np.full(12, 0.1 * i), i, "V" if i % 2 else "I", 0, "train") for i in range(4)]
    out = forward(model, ad.Tape(), batch)
    assert out.z_e.shape == (4, 8) and out.z_r.shape == (4, 8)


def test_related_heads_give_each_modality_its_own_offset(tiny_dataset):
    config = ModelConfig(input_dim=tiny_dataset.input_dim, num_ids=tiny_dataset.num_ids, seed=0)
    records = embed_dataset(MixerModel(config), tiny_dataset.samples)
    related = np.vstack([r.z_r for r in records])
    visible = np.array([r.modality == "V" for r in records])
    gap = np.linalg.norm(related[visible].mean(axis=0) - related[~visible].mean(axis=0))
    assert gap > 0.5 * related[visible].std(axis=0).mean() * np.sqrt(related.shape[1])
    assert linear_probe(records, "modality", "related").accuracy > 0.85
