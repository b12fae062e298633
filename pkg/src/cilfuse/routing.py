"""Routing baselines: confidence-based, learned (split-balanced BCE), oracle.

A router picks a branch for each sample; the prediction is then the chosen
branch's own argmax. The learned variant generalizes the two-way routing
classifier to one softmax way per branch, with the loss balanced across
splits the same way the two-split binary loss balances memory vs novel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import ModelBundle, _HeadCtx, all_branch_features, head_logits, predict_branch
from .data import LabeledSet
from .errors import SpecError, TrainingError
from .linalg import Mat, Param, SgdConfig, l2_normalize_rows, matmul, sgd_step, softmax_rows, log_softmax_rows
from .memory import BalancedSampler, ExemplarMemory
from .seeding import rng_for

ROUTER_MODES = ("confidence", "learned", "oracle-learned")


@dataclass
class Router:
    mode: str
    w: Param | None
    branch_order: list[str]

    def __post_init__(self):
        if self.mode not in ROUTER_MODES:
            raise SpecError(f"unknown router mode {self.mode!r}")
        if self.mode == "confidence" and self.w is not None:
            raise SpecError("confidence routing carries no parameters")
        if self.mode != "confidence" and self.w is None:
            raise SpecError(f"{self.mode} routing needs trained weights")


def split_balanced_ce_and_grad(logits: Mat, splits: np.ndarray) -> tuple[float, Mat]:
    """Mean-over-splits of per-split mean cross-entropy, and its gradient.

    With two splits this is the re-weighted binary routing loss (weights
    1/(2*n_split) per sample); duplicating every sample of one split leaves
    the value unchanged.
    """
    splits = np.asarray(splits, dtype=np.int64)
    present = np.unique(splits)
    n = logits.shape[0]
    ls = log_softmax_rows(logits)
    per_sample = -ls[np.arange(n), splits]
    weights = np.empty(n)
    for s in present:
        mask = splits == s
        weights[mask] = 1.0 / (len(present) * mask.sum())
    loss = float((per_sample * weights).sum())
    grad = np.exp(ls)
    grad[np.arange(n), splits] -= 1.0
    grad *= weights[:, None]
    return loss, grad


def branch_confidences(m: ModelBundle, x: Mat, feats: dict[str, Mat] | None = None) -> Mat:
    """Max softmax probability of each branch's own classifier, per row."""
    feats = all_branch_features(m, x) if feats is None else feats
    cols = []
    for d in m.branch_ids:
        probs = softmax_rows(head_logits(m, feats[d], d))
        cols.append(probs.max(axis=1))
    return np.stack(cols, axis=1)


def confidence_route(m: ModelBundle, x) -> str:
    """Route one sample to the branch with the highest own-classifier confidence.

    Ties go to the earliest branch in order (the base branch wins a tie, per
    the strict-inequality indicator).
    """
    if len(m.branches) < 2:
        raise SpecError("confidence routing needs at least 2 branches")
    conf = branch_confidences(m, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return m.branch_ids[int(np.argmax(conf[0]))]


def _split_feature_matrix(m: ModelBundle, x: Mat) -> Mat:
    feats = all_branch_features(m, x)
    cat = np.concatenate([feats[d] for d in m.branch_ids], axis=1)
    # the routing classifier follows the heads' convention: normalized
    # features against normalized weights, scaled
    return l2_normalize_rows(cat) if m.arch.normalize else cat


def _router_logits(m: ModelBundle, router: "Router", feats: Mat) -> Mat:
    return _HeadCtx(router.w, feats, m.arch.cosine_scale, m.arch.normalize).z


def train_learned_router(
    m: ModelBundle,
    memory: ExemplarMemory | None,
    novel: LabeledSet | None,
    cfg: SgdConfig,
    seed: int,
    oracle: bool = False,
    oracle_data: LabeledSet | None = None,
) -> Router:
    """Fit routing weights on concatenated frozen per-branch features.

    Split labels are the samples' origin tags (0 = base, t = novel step t).
    The oracle variant trains on the full data instead of the exemplar
    memory; both use class-balanced pools and the split-balanced loss.
    """
    order = m.branch_ids
    n_splits = len(order)
    if oracle:
        if oracle_data is None:
            raise SpecError("oracle routing needs the full training data")
        candidates = oracle_data
        counts = np.bincount(candidates.y)
        per_class = int(counts[counts > 0].max())
        sampler = BalancedSampler(None, candidates, per_class)
    else:
        if memory is None or novel is None:
            raise SpecError("learned routing needs exemplar memory and novel data")
        sampler = BalancedSampler(memory, novel, memory.capacity)

    feats = _split_feature_matrix(m, sampler.candidates.x)
    splits = sampler.candidates.origin
    if splits.max() >= n_splits:
        raise SpecError("sample origin tags exceed the branch count")

    k_total = feats.shape[1]
    w = Param(
        rng_for(seed, "router").uniform(-1.0 / np.sqrt(k_total), 1.0 / np.sqrt(k_total), size=(k_total, n_splits)),
        name="router.w",
    )
    router = Router("oracle-learned" if oracle else "learned", w, order)
    for epoch in range(cfg.epochs):
        for idx in sampler.batches(seed, epoch, cfg.batch_size):
            ctx = _HeadCtx(w, feats[idx], m.arch.cosine_scale, m.arch.normalize)
            loss, d_logits = split_balanced_ce_and_grad(ctx.z, splits[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"router loss diverged at epoch {epoch}")
            ctx.backward(d_logits)
            sgd_step([w], epoch, cfg)
    return router


def route_batch(m: ModelBundle, router: Router, x: Mat) -> np.ndarray:
    """Branch index per row under the given router."""
    if router.mode == "confidence":
        return np.argmax(branch_confidences(m, x), axis=1)
    return np.argmax(_router_logits(m, router, _split_feature_matrix(m, x)), axis=1)


def routed_predict_batch(m: ModelBundle, router: Router, x: Mat) -> np.ndarray:
    """Route, then classify within the chosen branch only."""
    choice = route_batch(m, router, x)
    out = np.empty(x.shape[0], dtype=np.int64)
    for j, d in enumerate(m.branch_ids):
        mask = choice == j
        if mask.any():
            out[mask] = predict_branch(m, x[mask], d)
    return out


def routed_predict(m: ModelBundle, router: Router, x) -> int:
    return int(routed_predict_batch(m, router, np.atleast_2d(np.asarray(x, dtype=np.float64)))[0])


def routing_accuracy(m: ModelBundle, router: Router, data: LabeledSet, true_split: np.ndarray) -> float:
    """Fraction of samples routed to their own split's branch."""
    return float((route_batch(m, router, data.x) == np.asarray(true_split)).mean())
