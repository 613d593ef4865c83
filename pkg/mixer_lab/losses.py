"""
MixER training objectives and their weighted combination.

Every loss takes tape Nodes plus plain label arrays and returns a 1 x 1 Node.
Classifier heads are passed in as callables mapping a Node to logits so the
same functions serve the model and isolated unit graphs.

Includes:
- double_labels: (y, m) -> 2y / 2y + 1
- loss_orth, loss_cc, loss_yme, loss_m, loss_ymr, loss_fusion
- mine_fusion_triplets: Batch-hard same/cross-modality mining.
- loss_total, mixer_losses: Weighted sum with a detached breakdown.
"""

from collections import namedtuple
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .config import LossWeights
from .constants import MODALITY_INDEX, NORM_EPS, LossBreakdown
from .model import CLS_ID, CLS_ID_MODALITY, CLS_MODALITY, ForwardOutputs

Classifier = Callable[[ad.Node], ad.Node]
FusionTriplets = namedtuple("FusionTriplets", ["anchors", "pos_same", "neg_same", "pos_cross", "neg_cross"])

COMPONENTS = ("l_yme", "l_ymr", "l_m", "l_o", "l_f")


def modality_codes(m: Sequence) -> np.ndarray:
    """Map V/I labels (or 0/1 codes) to an int array of 0/1."""
    return np.asarray([MODALITY_INDEX[v] if isinstance(v, str) else int(v) for v in m], dtype=np.int64)


def double_labels(y: Sequence[int], m: Sequence, num_ids: Optional[int] = None) -> np.ndarray:
    """Split identities per modality: 2y for V, 2y + 1 for I."""
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    codes = modality_codes(m)
    if y.shape != codes.shape:
        raise ad.DimensionError("double_labels: one modality per label is required")
    if np.any(y < 0) or (num_ids is not None and np.any(y >= num_ids)):
        raise ad.LabelError(f"identity labels must lie in [0, {num_ids})")
    if np.any((codes != 0) & (codes != 1)):
        raise ad.LabelError("modality codes must be 0 (V) or 1 (I)")
    return 2 * y + codes


def loss_orth(z_r: ad.Node, z_e: ad.Node, form: str = "squared") -> ad.Node:
    """
    Mean over rows of cos(z_r_i, z_e_i)^2 (default) or of the raw cosine
    when form == "raw".
    """
    if z_r.shape != z_e.shape:
        raise ad.DimensionError(f"loss_orth needs d_r == d_e, got {z_r.shape} vs {z_e.shape}")
    cos = ad.cosine(z_r, z_e)
    if form == "squared":
        return ad.mean_all(ad.mul(cos, cos))
    if form == "raw":
        return ad.mean_all(cos)
    raise ad.ContractError(f"unknown orth form '{form}'")


def loss_cc(z: ad.Node, labels: Sequence[int], rho: float) -> ad.Node:
    """
    Center-cluster loss: mean squared distance of each sample to its batch
    class center, plus the mean over unordered center pairs of
    max(rho - |c_j - c_k|, 0)^2. Centers stay inside the graph.
    """

    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    rows = z.shape[0]
    if rows == 0:
        raise ad.ContractError("loss_cc of an empty batch")
    if y.shape[0] != rows:
        raise ad.DimensionError("loss_cc: one label per row is required")

    tape = z.tape
    classes, inverse = np.unique(y, return_inverse=True)
    num_classes = classes.size

    onehot = np.zeros((rows, num_classes))
    onehot[np.arange(rows), inverse] = 1.0
    averaging = onehot.T / onehot.sum(axis=0)[:, None]

    centers = ad.matmul(tape.constant(averaging), z)
    diff = ad.sub(z, ad.matmul(tape.constant(onehot), centers))
    pull = ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / rows)

    if num_classes < 2:
        return pull

    j, k = np.triu_indices(num_classes, k=1)
    pairs = np.zeros((j.size, num_classes))
    pairs[np.arange(j.size), j] = 1.0
    pairs[np.arange(j.size), k] = -1.0
    dist = ad.row_norm(ad.matmul(tape.constant(pairs), centers))
    hinge = ad.relu(ad.shift(ad.scale(dist, -1.0), rho))
    push = ad.mean_all(ad.mul(hinge, hinge))
    return ad.add(pull, push)


def loss_yme(z_e: ad.Node, y: Sequence[int], classifier: Classifier, rho: float) -> ad.Node:
    """Identity cross-entropy on z_e plus the center-cluster loss on z_e."""
    return ad.add(ad.softmax_cross_entropy(classifier(z_e), y), loss_cc(z_e, y, rho))


def loss_m(z_e: ad.Node, m: Sequence, classifier: Classifier, coeff: float = 1.0, reverse: bool = True) -> ad.Node:
    """
    Modality-confusion loss: 2-way cross-entropy of the modality classifier
    applied to grad_reverse(z_e, coeff). With reverse=False the plain
    (non-reversed) graph is recorded instead.
    """
    features = ad.grad_reverse(z_e, coeff) if reverse else z_e
    return ad.softmax_cross_entropy(classifier(features), modality_codes(m))


def loss_ymr(z_r: ad.Node, y: Sequence[int], m: Sequence, classifier: Classifier, rho: float) -> ad.Node:
    """Identity-modality cross-entropy and center-cluster loss over doubled labels."""
    doubled = double_labels(y, m)
    return ad.add(ad.softmax_cross_entropy(classifier(z_r), doubled), loss_cc(z_r, doubled, rho))


def fused_features(z_e: ad.Node, z_r: ad.Node) -> ad.Node:
    return ad.concat_cols(ad.l2_normalize(z_e), ad.l2_normalize(z_r))


def _cosine_distance_matrix(values: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(values, axis=1, keepdims=True)
    if np.any(norms <= NORM_EPS):
        raise ad.DegenerateVectorError("degenerate embedding row")
    unit = values / norms
    return 1.0 - unit @ unit.T


def mine_fusion_triplets(e_values: np.ndarray, f_values: np.ndarray, y: Sequence[int], m: Sequence) -> FusionTriplets:
    """
    Batch-hard mining. Same-modality positive / negative are the farthest /
    nearest under the fused distance; cross-modality ones under the erased
    distance. Anchors lacking any of the four are dropped.
    """

    y = np.asarray(y).reshape(-1)
    codes = modality_codes(m)
    d_e = _cosine_distance_matrix(np.asarray(e_values))
    d_f = _cosine_distance_matrix(np.asarray(f_values))

    same_id = y[:, None] == y[None, :]
    same_mod = codes[:, None] == codes[None, :]
    not_self = ~np.eye(y.size, dtype=bool)

    pos_same = same_id & same_mod & not_self
    neg_same = ~same_id & same_mod
    pos_cross = same_id & ~same_mod
    neg_cross = ~same_id & ~same_mod

    valid = pos_same.any(1) & neg_same.any(1) & pos_cross.any(1) & neg_cross.any(1)
    anchors = np.flatnonzero(valid)

    p = np.argmax(np.where(pos_same, d_f, -np.inf), axis=1)
    n = np.argmin(np.where(neg_same, d_f, np.inf), axis=1)
    pt = np.argmax(np.where(pos_cross, d_e, -np.inf), axis=1)
    nt = np.argmin(np.where(neg_cross, d_e, np.inf), axis=1)
    return FusionTriplets(anchors, p[anchors], n[anchors], pt[anchors], nt[anchors])


def loss_fusion(z_e: ad.Node, z_f: ad.Node, y: Sequence[int], m: Sequence, alpha: float) -> ad.Node:
    """
    Mixed cross-modal triplet loss, averaged over valid anchors j:
      max(D(f_j, f_p) - D(e_j, e_n~) + alpha, 0) + max(D(e_j, e_p~) - D(f_j, f_n) + alpha, 0)
    with D = 1 - cosine. Returns a zero constant when no anchor is valid.
    """

    t = mine_fusion_triplets(z_e.value, z_f.value, y, m)
    if t.anchors.size == 0:
        return z_e.tape.constant(0.0)

    e_a = ad.take_rows(z_e, t.anchors)
    f_a = ad.take_rows(z_f, t.anchors)

    # 1 - cos differences: D(f,p) - D(e,n~) == cos(e,n~) - cos(f,p)
    cos_fp = ad.cosine(f_a, ad.take_rows(z_f, t.pos_same))
    cos_en = ad.cosine(e_a, ad.take_rows(z_e, t.neg_cross))
    cos_ep = ad.cosine(e_a, ad.take_rows(z_e, t.pos_cross))
    cos_fn = ad.cosine(f_a, ad.take_rows(z_f, t.neg_same))

    fused_term = ad.relu(ad.shift(ad.sub(cos_en, cos_fp), alpha))
    erased_term = ad.relu(ad.shift(ad.sub(cos_fn, cos_ep), alpha))
    return ad.mean_all(ad.add(fused_term, erased_term))


def loss_total(components: Dict[str, Optional[ad.Node]], weights: LossWeights) -> Tuple[ad.Node, LossBreakdown]:
    """
    L = L_yme + L_ymr + lambda_m L_m + lambda_o L_o + lambda_f L_f.
    A component given as None contributes 0 and is reported as 0.
    """

    factors = {"l_yme": 1.0, "l_ymr": 1.0, "l_m": weights.lambda_m, "l_o": weights.lambda_o, "l_f": weights.lambda_f}
    present = [name for name in COMPONENTS if components.get(name) is not None]
    if not present:
        raise ad.ContractError("loss_total needs at least one component")

    total = None
    for name in present:
        node = components[name]
        term = node if factors[name] == 1.0 else ad.scale(node, factors[name])
        total = term if total is None else ad.add(total, term)

    values = {name: float(components[name].value[0, 0]) if name in present else 0.0 for name in COMPONENTS}
    return total, LossBreakdown(total=float(total.value[0, 0]), **values)


def mixer_losses(outputs: ForwardOutputs, y: Sequence[int], m: Sequence, weights: LossWeights,
                 grl_coeff: float = 1.0) -> Tuple[ad.Node, LossBreakdown]:
    """Record every MixER objective for one forward pass and combine them."""

    params = outputs.params
    z_e, z_r = outputs.z_e, outputs.z_r
    rho = weights.cc_margin_rho

    components: Dict[str, Optional[ad.Node]] = {
        "l_yme": loss_yme(z_e, y, lambda x: params.linear(CLS_ID, x), rho),
        "l_ymr": None,
        "l_m": loss_m(z_e, m, lambda x: params.linear(CLS_MODALITY, x), grl_coeff),
        "l_o": None,
        "l_f": loss_fusion(z_e, fused_features(z_e, z_r), y, m, weights.margin_alpha),
    }
    if weights.ymr_enabled:
        components["l_ymr"] = loss_ymr(z_r, y, m, lambda x: params.linear(CLS_ID_MODALITY, x), rho)
    if z_e.shape == z_r.shape or weights.lambda_o > 0.0:
        components["l_o"] = loss_orth(z_r, z_e, weights.orth_form)
    return loss_total(components, weights)
