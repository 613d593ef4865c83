"""
Mixed-modal retrieval evaluation.

Includes:
- GallerySetting: Protocol kind, embedding mode and shot mode.
- build_gallery: Exclusion rules for Mix, MixCam, MixCamID, MixID, CrossModal, UniModal.
- pair_distance / rank: The modality-conditional cosine distance and stable ranking.
- average_precision, inverse_precision, cmc: Per-query metrics.
- evaluate: Vectorized protocol run producing an EvalReport.
- brute_force_metrics: Independent definition-level oracle for evaluate.
- distance_distribution: Intra/inter-class distance statistics and histograms.
"""

from collections import namedtuple
from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import numpy as np

from .autodiff import DegenerateVectorError
from .constants import (
    EMBED_MODES,
    GALLERY_KINDS,
    HIST_BINS,
    HIST_RANGE,
    MODALITY_INDEX,
    NORM_EPS,
    RANKS,
    SHOT_MODES,
    DistanceDistribution,
    EmbeddingRecord,
    EvalReport,
)
from .errors import MixerError


class ProtocolError(MixerError):
    """Raised when a protocol is misconfigured or leaves no usable query."""


class NoPositives(MixerError):
    """Raised for a query whose ranking holds no correct match; callers skip it."""


@dataclass(frozen=True)
class GallerySetting:
    kind: str
    embed_mode: str = "fused_rule"
    shot_mode: str = "all"
    trials: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in GALLERY_KINDS:
            raise ProtocolError(f"unknown setting '{self.kind}'; valid names: {', '.join(GALLERY_KINDS)}")
        if self.embed_mode not in EMBED_MODES:
            raise ProtocolError(f"unknown embed mode '{self.embed_mode}'; valid names: {', '.join(EMBED_MODES)}")
        if self.shot_mode not in SHOT_MODES:
            raise ProtocolError(f"unknown shot mode '{self.shot_mode}'")
        if self.shot_mode == "single_shot" and self.trials < 1:
            raise ProtocolError("single_shot needs trials >= 1")


_Columns = namedtuple("_Columns", ["ids", "mods", "cams", "unit_e", "unit_r", "unit_f"])


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise DegenerateVectorError("degenerate embedding in evaluation records")
    return rows / norms


def _columns(records: Sequence[EmbeddingRecord]) -> _Columns:
    return _Columns(
        ids=np.array([r.id for r in records], dtype=np.int64),
        mods=np.array([MODALITY_INDEX[r.modality] for r in records], dtype=np.int64),
        cams=np.array([r.camera for r in records], dtype=np.int64),
        unit_e=_unit_rows(np.vstack([r.z_e for r in records])),
        unit_r=_unit_rows(np.vstack([r.z_r for r in records])),
        unit_f=_unit_rows(np.vstack([r.z_f for r in records])),
    )


def gallery_mask(q_id: int, q_mod: int, q_cam: int, ids: np.ndarray, mods: np.ndarray, cams: np.ndarray,
                 kind: str) -> np.ndarray:
    """Boolean keep-mask of candidate records for one query under `kind`."""
    same_cam = cams == q_cam
    same_id = ids == q_id
    same_mod = mods == q_mod
    if kind == "Mix":
        return np.ones(ids.shape, dtype=bool)
    if kind == "MixCam":
        return ~same_cam
    if kind == "MixCamID":
        return ~(same_cam & same_id)
    if kind == "MixID":
        return ~(same_id & same_mod)
    if kind == "CrossModal":
        return ~same_mod
    if kind == "UniModal":
        return same_mod & ~(same_cam & same_id)
    raise ProtocolError(f"unknown setting '{kind}'")


def build_gallery(query: EmbeddingRecord, all_test: Sequence[EmbeddingRecord], kind: str) -> List[int]:
    """Indices into `all_test` that survive the exclusion rules of `kind`."""
    if not all_test:
        return []
    ids = np.array([r.id for r in all_test])
    mods = np.array([MODALITY_INDEX[r.modality] for r in all_test])
    cams = np.array([r.camera for r in all_test])
    mask = gallery_mask(query.id, MODALITY_INDEX[query.modality], query.camera, ids, mods, cams, kind)
    return np.flatnonzero(mask).tolist()


def _row_cosine_distance(unit_gallery: np.ndarray, unit_query: np.ndarray) -> np.ndarray:
    # evaluate and brute_force_metrics both rank with this; their distances must match bit for bit
    return 1.0 - (unit_gallery * unit_query).sum(axis=1)


def _cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    unit = _unit_rows(np.vstack([np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)]))
    return float(_row_cosine_distance(unit[1:], unit[0])[0])


def pair_distance(q: EmbeddingRecord, g: EmbeddingRecord, embed_mode: str) -> float:
    """
    fused_rule: 1 - cos on z_f within a modality, 1 - cos on z_e across
    modalities. erased_only / related_only use z_e / z_r for every pair.
    """
    if embed_mode == "fused_rule":
        if q.modality == g.modality:
            return _cosine_distance(q.z_f, g.z_f)
        return _cosine_distance(q.z_e, g.z_e)
    if embed_mode == "erased_only":
        return _cosine_distance(q.z_e, g.z_e)
    if embed_mode == "related_only":
        return _cosine_distance(q.z_r, g.z_r)
    raise ProtocolError(f"unknown embed mode '{embed_mode}'")


def order_by_distance(distances: Sequence[float]) -> np.ndarray:
    """Ascending positions; equal distances keep their original order."""
    return np.argsort(np.asarray(distances, dtype=np.float64), kind="stable")


def rank(q: EmbeddingRecord, records: Sequence[EmbeddingRecord], gallery: Sequence[int], embed_mode: str) -> List[int]:
    """Gallery indices sorted by distance to `q`, ties by ascending index."""
    gallery = sorted(gallery)
    distances = [pair_distance(q, records[j], embed_mode) for j in gallery]
    return [gallery[j] for j in order_by_distance(distances)]


def _hit_ranks(flags: Sequence[bool]) -> np.ndarray:
    ranks = np.flatnonzero(np.asarray(flags, dtype=bool)) + 1
    if ranks.size == 0:
        raise NoPositives("no correct match in ranking")
    return ranks


def average_precision(flags: Sequence[bool]) -> float:
    """AP = (1/P) * sum_i i / r_i over 1-based positive ranks r_i; `flags` in ranked order."""
    ranks = _hit_ranks(flags)
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def inverse_precision(flags: Sequence[bool]) -> float:
    """INP = P / r_last."""
    ranks = _hit_ranks(flags)
    return float(ranks.size / ranks[-1])


def cmc(rankings_flags: Sequence[Sequence[bool]], k: int) -> float:
    """Fraction of queries (with at least one positive) hit within the top k."""
    counted = [np.asarray(f, dtype=bool) for f in rankings_flags if np.any(f)]
    if not counted:
        return 0.0
    return float(np.mean([f[:k].any() for f in counted]))


def single_shot_pool(records_or_columns, trial: int, seed: int) -> np.ndarray:
    """One randomly chosen record per (identity, camera), sorted by index."""
    if isinstance(records_or_columns, _Columns):
        ids, cams = records_or_columns.ids, records_or_columns.cams
    else:
        ids = np.array([r.id for r in records_or_columns])
        cams = np.array([r.camera for r in records_or_columns])
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, trial])))
    chosen = []
    for key in sorted(set(zip(ids.tolist(), cams.tolist()))):
        members = np.flatnonzero((ids == key[0]) & (cams == key[1]))
        chosen.append(int(members[rng.integers(members.size)]))
    return np.array(sorted(chosen), dtype=np.int64)


def _pools(n: int, setting: GallerySetting, columns) -> Iterator[np.ndarray]:
    if setting.shot_mode == "all":
        yield np.arange(n)
        return
    for t in range(setting.trials):
        yield single_shot_pool(columns, t, setting.seed)


def _query_indices(columns: _Columns, query_modality: str) -> np.ndarray:
    if query_modality not in MODALITY_INDEX:
        raise ProtocolError(f"query modality must be V or I, got {query_modality!r}")
    return np.flatnonzero(columns.mods == MODALITY_INDEX[query_modality])


def _distances(columns: _Columns, qi: int, gallery: np.ndarray, embed_mode: str) -> np.ndarray:
    if embed_mode == "erased_only":
        return _row_cosine_distance(columns.unit_e[gallery], columns.unit_e[qi])
    if embed_mode == "related_only":
        return _row_cosine_distance(columns.unit_r[gallery], columns.unit_r[qi])
    if embed_mode == "fused_rule":
        erased = _row_cosine_distance(columns.unit_e[gallery], columns.unit_e[qi])
        fused = _row_cosine_distance(columns.unit_f[gallery], columns.unit_f[qi])
        return np.where(columns.mods[gallery] == columns.mods[qi], fused, erased)
    raise ProtocolError(f"unknown embed mode '{embed_mode}'")


def _query_galleries(columns: _Columns, queries: np.ndarray, pool: np.ndarray,
                     setting: GallerySetting) -> Iterator[Tuple[int, np.ndarray]]:
    for qi in queries:
        candidates = pool[pool != qi]
        keep = gallery_mask(columns.ids[qi], columns.mods[qi], columns.cams[qi],
                            columns.ids[candidates], columns.mods[candidates], columns.cams[candidates],
                            setting.kind)
        yield int(qi), candidates[keep]


def _mean_reports(reports: List[EvalReport]) -> EvalReport:
    return EvalReport(
        rank_k={k: float(np.mean([r.rank_k[k] for r in reports])) for k in RANKS},
        mAP=float(np.mean([r.mAP for r in reports])),
        mINP=float(np.mean([r.mINP for r in reports])),
        num_queries_used=sum(r.num_queries_used for r in reports),
        num_queries_skipped=sum(r.num_queries_skipped for r in reports),
    )


def evaluate(records: Sequence[EmbeddingRecord], query_modality: str, setting: GallerySetting) -> EvalReport:
    """
    Queries are all records of `query_modality`; the gallery pool is all
    records (one per (id, camera) per trial in single_shot mode) minus the
    query itself, filtered by the setting. Queries without a positive are
    skipped and counted.
    """

    if not records:
        raise ProtocolError("no records to evaluate")
    columns = _columns(records)
    queries = _query_indices(columns, query_modality)

    trial_reports: List[EvalReport] = []
    skipped_total = 0
    for pool in _pools(len(records), setting, columns):
        first_hits, aps, inps, skipped = [], [], [], 0
        for qi, gallery in _query_galleries(columns, queries, pool, setting):
            d = _distances(columns, qi, gallery, setting.embed_mode)
            flags = columns.ids[gallery[order_by_distance(d)]] == columns.ids[qi]
            if not flags.any():
                skipped += 1
                continue
            hits = np.flatnonzero(flags) + 1
            first_hits.append(hits[0])
            aps.append(np.mean(np.arange(1, hits.size + 1) / hits))
            inps.append(hits.size / hits[-1])
        skipped_total += skipped
        if not aps:
            continue
        first_hits = np.asarray(first_hits)
        trial_reports.append(EvalReport(
            rank_k={k: float(np.mean(first_hits <= k)) for k in RANKS},
            mAP=float(np.mean(aps)),
            mINP=float(np.mean(inps)),
            num_queries_used=len(aps),
            num_queries_skipped=skipped,
        ))

    if not trial_reports:
        raise ProtocolError(f"no usable query for {setting.kind} with {query_modality} queries "
                            f"({skipped_total} skipped)")
    # Trials without a usable query still count their skipped queries
    return _mean_reports(trial_reports)._replace(num_queries_skipped=skipped_total)


def brute_force_metrics(records: Sequence[EmbeddingRecord], query_modality: str, setting: GallerySetting) -> EvalReport:
    """
    Recompute every metric with fully materialized Python lists, per-pair
    pair_distance calls and direct definitions: precision at each hit for AP,
    positives over last-hit rank for INP, membership in the top k for CMC.
    """

    if not records:
        raise ProtocolError("no records to evaluate")
    n = len(records)
    if setting.shot_mode == "all":
        pools = [list(range(n))]
    else:
        pools = [single_shot_pool(records, t, setting.seed).tolist() for t in range(setting.trials)]

    trial_reports: List[EvalReport] = []
    skipped_total = 0
    for pool in pools:
        per_query = []
        skipped = 0
        for qi, q in enumerate(records):
            if q.modality != query_modality:
                continue
            candidates = [j for j in pool if j != qi]
            kept = build_gallery(q, [records[j] for j in candidates], setting.kind)
            gallery = [candidates[i] for i in kept]
            scored = sorted((pair_distance(q, records[j], setting.embed_mode), j) for j in gallery)
            flags = [records[j].id == q.id for _, j in scored]
            positives = sum(flags)
            if positives == 0:
                skipped += 1
                continue

            precisions = []
            seen = 0
            last_hit = 0
            for r, hit in enumerate(flags, start=1):
                if hit:
                    seen += 1
                    precisions.append(seen / r)
                    last_hit = r
            ap = sum(precisions) / positives
            inp = positives / last_hit
            topk = {k: 1.0 if any(flags[:k]) else 0.0 for k in RANKS}
            per_query.append((ap, inp, topk))

        skipped_total += skipped
        if not per_query:
            continue
        used = len(per_query)
        trial_reports.append(EvalReport(
            rank_k={k: sum(t[2][k] for t in per_query) / used for k in RANKS},
            mAP=sum(t[0] for t in per_query) / used,
            mINP=sum(t[1] for t in per_query) / used,
            num_queries_used=used,
            num_queries_skipped=skipped,
        ))

    if not trial_reports:
        raise ProtocolError(f"no usable query for {setting.kind} with {query_modality} queries")
    return _mean_reports(trial_reports)._replace(num_queries_skipped=skipped_total)


def distance_distribution(records: Sequence[EmbeddingRecord], query_modality: str, setting: GallerySetting,
                          bins: int = HIST_BINS) -> DistanceDistribution:
    """
    Collect every (query, gallery) pair distance under the setting's rule,
    split into intra-class (same identity) and inter-class populations.
    Histograms use `bins` equal bins over [0, 2].
    """

    columns = _columns(records)
    queries = _query_indices(columns, query_modality)
    intra, inter = [], []
    for pool in _pools(len(records), setting, columns):
        for qi, gallery in _query_galleries(columns, queries, pool, setting):
            d = _distances(columns, qi, gallery, setting.embed_mode)
            same = columns.ids[gallery] == columns.ids[qi]
            intra.append(d[same])
            inter.append(d[~same])

    intra_d = np.concatenate(intra) if intra else np.zeros(0)
    inter_d = np.concatenate(inter) if inter else np.zeros(0)
    edges = np.linspace(HIST_RANGE[0], HIST_RANGE[1], bins + 1)
    intra_counts, _ = np.histogram(np.clip(intra_d, *HIST_RANGE), bins=edges)
    inter_counts, _ = np.histogram(np.clip(inter_d, *HIST_RANGE), bins=edges)

    def stats(values: np.ndarray) -> Tuple[float, float]:
        if values.size == 0:
            return float("nan"), float("nan")
        return float(values.mean()), float(values.var())

    intra_mean, intra_var = stats(intra_d)
    inter_mean, inter_var = stats(inter_d)
    return DistanceDistribution(
        intra_mean=intra_mean,
        intra_var=intra_var,
        inter_mean=inter_mean,
        inter_var=inter_var,
        bin_edges=edges,
        intra_counts=intra_counts,
        inter_counts=inter_counts,
    )
