import itertools

import numpy as np
import pytest

from conftest import make_records, oracle_records
from mixer_lab.autodiff import DegenerateVectorError
from mixer_lab.constants import HIST_BINS, EmbeddingRecord
from mixer_lab.evalharness import (
    GallerySetting,
    NoPositives,
    ProtocolError,
    average_precision,
    brute_force_metrics,
    build_gallery,
    cmc,
    distance_distribution,
    evaluate,
    inverse_precision,
    order_by_distance,
    pair_distance,
    rank,
    single_shot_pool,
)
from mixer_lab.model import fuse


def record(y, modality, camera, z_e=(1.0, 0.0), z_r=(0.0, 1.0)):
    z_e, z_r = np.array(z_e), np.array(z_r)
    return EmbeddingRecord(z_e, z_r, fuse(z_e, z_r), y, modality, camera)


@pytest.fixture
def small_pool():
    # query: id 0, I, camera 2
    return [
        record(0, "I", 2),  # same camera, same id
        record(1, "I", 2),  # same camera, other id
        record(0, "I", 3),  # other I camera, same id
        record(0, "V", 0),  # cross-modal, same id
        record(1, "V", 1),  # cross-modal, other id
        record(2, "I", 3),  # other I camera, other id
    ]


@pytest.mark.parametrize("kind, expected", [
    ("Mix", [0, 1, 2, 3, 4, 5]),
    ("MixCam", [2, 3, 4, 5]),
    ("MixCamID", [1, 2, 3, 4, 5]),
    ("MixID", [1, 3, 4, 5]),
    ("CrossModal", [3, 4]),
    ("UniModal", [1, 2, 5]),
])
def test_gallery_exclusion_rules(small_pool, kind, expected):
    query = record(0, "I", 2)
    assert build_gallery(query, small_pool, kind) == expected


def test_mixed_galleries_are_nested(record_factory):
    records = record_factory(np.random.default_rng(0), 40)
    for query in records[:10]:
        mix = set(build_gallery(query, records, "Mix"))
        cam_id = set(build_gallery(query, records, "MixCamID"))
        cam = set(build_gallery(query, records, "MixCam"))
        mix_id = set(build_gallery(query, records, "MixID"))
        assert cam <= cam_id <= mix
        assert mix_id <= mix


def test_build_gallery_of_empty_pool():
    assert build_gallery(record(0, "V", 0), [], "Mix") == []


def test_unknown_setting_is_rejected():
    with pytest.raises(ProtocolError):
        GallerySetting("Everything")
    with pytest.raises(ProtocolError):
        GallerySetting("Mix", embed_mode="blend")
    with pytest.raises(ProtocolError):
        GallerySetting("Mix", shot_mode="few_shot")


def test_pair_distance_switches_on_modality():
    q = record(0, "I", 2, z_e=(1.0, 0.0), z_r=(1.0, 0.0))
    same = record(1, "I", 3, z_e=(1.0, 0.0), z_r=(0.0, 1.0))
    cross = record(1, "V", 0, z_e=(0.0, 1.0), z_r=(1.0, 0.0))
    # Within a modality: fused vectors (1,0,1,0) and (1,0,0,1) have cosine 1/2
    assert pair_distance(q, same, "fused_rule") == pytest.approx(0.5)
    # Across modalities only z_e counts
    assert pair_distance(q, cross, "fused_rule") == pytest.approx(1.0)
    assert pair_distance(q, same, "erased_only") == pytest.approx(0.0)
    assert pair_distance(q, cross, "related_only") == pytest.approx(0.0)


def test_pair_distance_rejects_degenerate_embedding():
    q = record(0, "I", 2)
    bad = EmbeddingRecord(np.zeros(2), np.ones(2), np.ones(4), 1, "V", 0)
    with pytest.raises(DegenerateVectorError):
        pair_distance(q, bad, "fused_rule")


def test_ranking_breaks_ties_by_index():
    np.testing.assert_array_equal(order_by_distance([0.3, 0.1, 0.3, 0.1]), [1, 3, 0, 2])
    q = record(0, "I", 2)
    records = [record(0, "I", 2), record(1, "V", 0), record(2, "V", 1), record(3, "I", 3, z_e=(0.0, 1.0))]
    assert rank(q, records, [3, 2, 1], "erased_only") == [1, 2, 3]


def test_average_and_inverse_precision_by_hand():
    flags = [True, False, True]
    assert average_precision(flags) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)
    assert inverse_precision(flags) == pytest.approx(2.0 / 3.0)
    assert average_precision([False, True]) == pytest.approx(0.5)
    assert inverse_precision([True, True]) == 1.0


@pytest.mark.parametrize("length", range(1, 8))
def test_inverse_precision_is_one_exactly_when_positives_lead(length):
    for flags in itertools.product([False, True], repeat=length):
        positives = sum(flags)
        if positives == 0:
            continue
        leading = all(flags[:positives])
        assert (inverse_precision(list(flags)) == 1.0) == leading, flags


def test_metrics_without_positives_raise():
    with pytest.raises(NoPositives):
        average_precision([False, False])
    with pytest.raises(NoPositives):
        inverse_precision([])


def test_cmc_counts_hits_within_k():
    rankings = [[False, True], [False, False, True], [False, False]]
    assert cmc(rankings, 1) == 0.0
    assert cmc(rankings, 2) == pytest.approx(0.5)
    assert cmc(rankings, 3) == 1.0
    assert cmc([], 1) == 0.0


def test_separable_embeddings_score_perfectly(separable_records):
    for kind in ("Mix", "MixCam", "MixCamID", "MixID", "CrossModal", "UniModal"):
        report = evaluate(separable_records, "I", GallerySetting(kind))
        assert report.mAP == pytest.approx(1.0)
        assert report.mINP == pytest.approx(1.0)
        assert all(v == pytest.approx(1.0) for v in report.rank_k.values())
        assert report.num_queries_skipped == 0


def test_queries_without_positives_are_skipped_and_counted():
    records = oracle_records(num_ids=3, per_camera=1)
    # Identity 2 keeps only infrared records, so its cross-modal queries have no positive
    records = [r for r in records if not (r.id == 2 and r.modality == "V")]
    report = evaluate(records, "I", GallerySetting("CrossModal"))
    assert report.num_queries_skipped == 2
    assert report.num_queries_used == 4


def test_evaluate_without_any_usable_query_raises():
    records = [record(0, "I", 2), record(1, "V", 0)]
    with pytest.raises(ProtocolError):
        evaluate(records, "I", GallerySetting("Mix"))
    with pytest.raises(ProtocolError):
        evaluate([], "I", GallerySetting("Mix"))


def _assert_reports_match(fast, slow):
    assert fast.num_queries_used == slow.num_queries_used
    assert fast.num_queries_skipped == slow.num_queries_skipped
    assert fast.mAP == pytest.approx(slow.mAP, abs=1e-12)
    assert fast.mINP == pytest.approx(slow.mINP, abs=1e-12)
    for k in fast.rank_k:
        assert fast.rank_k[k] == pytest.approx(slow.rank_k[k], abs=1e-12)


@pytest.mark.parametrize("instance", range(50))
def test_evaluate_agrees_with_brute_force(instance):
    rng = np.random.default_rng(1000 + instance)
    records = make_records(rng, int(rng.integers(10, 41)), num_ids=int(rng.integers(2, 6)))
    kinds = ("Mix", "MixCam", "MixCamID", "MixID", "CrossModal", "UniModal")
    kind = kinds[instance % len(kinds)]
    mode = ("fused_rule", "erased_only", "related_only")[instance % 3]
    shot = "single_shot" if instance % 5 == 0 else "all"
    query = "I" if instance % 2 else "V"
    setting = GallerySetting(kind, mode, shot, trials=3, seed=instance)

    try:
        slow = brute_force_metrics(records, query, setting)
    except ProtocolError:
        with pytest.raises(ProtocolError):
            evaluate(records, query, setting)
        return
    _assert_reports_match(evaluate(records, query, setting), slow)


@pytest.mark.parametrize("instance", range(40))
def test_scaled_copies_rank_identically_in_fast_and_brute_force_paths(instance):
    rng = np.random.default_rng(3000 + instance)
    bases = rng.standard_normal((2, 4))
    records = []
    for i in range(24):
        modality = "V" if i % 2 else "I"
        camera = int(rng.choice((0, 1) if modality == "V" else (2, 3)))
        z_e = bases[i % 2] * rng.uniform(0.1, 10.0)
        z_r = bases[(i // 2) % 2] * rng.uniform(0.1, 10.0)
        records.append(EmbeddingRecord(z_e, z_r, fuse(z_e, z_r), i % 3, modality, camera))
    for mode in ("fused_rule", "erased_only", "related_only"):
        setting = GallerySetting(("Mix", "MixCamID", "CrossModal")[instance % 3], mode)
        _assert_reports_match(evaluate(records, "I", setting), brute_force_metrics(records, "I", setting))


def test_single_shot_pool_keeps_one_record_per_identity_camera(record_factory):
    records = record_factory(np.random.default_rng(3), 60)
    pool = single_shot_pool(records, trial=0, seed=0)
    keys = [(records[i].id, records[i].camera) for i in pool]
    assert len(keys) == len(set(keys)) == len({(r.id, r.camera) for r in records})
    assert list(pool) == sorted(pool)
    np.testing.assert_array_equal(pool, single_shot_pool(records, trial=0, seed=0))
    assert any(not np.array_equal(pool, single_shot_pool(records, trial=t, seed=0)) for t in range(1, 6))


def test_single_shot_evaluation_is_seeded(record_factory):
    records = record_factory(np.random.default_rng(4), 40)
    setting = GallerySetting("MixCamID", shot_mode="single_shot", trials=4, seed=9)
    assert evaluate(records, "I", setting) == evaluate(records, "I", setting)


def test_distance_distribution_counts_every_pair(separable_records):
    setting = GallerySetting("Mix")
    dist = distance_distribution(separable_records, "I", setting)
    queries = sum(r.modality == "I" for r in separable_records)
    assert dist.intra_counts.sum() + dist.inter_counts.sum() == queries * (len(separable_records) - 1)
    assert dist.bin_edges[0] == 0.0 and dist.bin_edges[-1] == 2.0
    assert dist.intra_counts.size == HIST_BINS
    assert dist.intra_mean == pytest.approx(0.0, abs=1e-12)
    assert dist.inter_mean == pytest.approx(1.0)


def test_distance_distribution_of_empty_population_is_nan():
    records = [record(0, "I", 2), record(1, "V", 0, z_e=(0.0, 1.0))]
    dist = distance_distribution(records, "I", GallerySetting("Mix"), bins=4)
    assert np.isnan(dist.intra_mean) and np.isnan(dist.intra_var)
    assert dist.inter_counts.sum() == 1 and dist.inter_counts.size == 4
