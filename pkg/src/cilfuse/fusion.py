"""Stage-II score fusion: cross-branch delta logits, overlap pooling, and
the balanced classification + auxiliary routing objective.

All backbone and head parameters stay frozen here; the only trainable pieces
are the cross-branch transfer weights (one k x |Y_d| matrix per ordered
branch pair) and the small auxiliary routing matrix fed with each branch's
maximum fused logit. Duplicate logit entries of overlapping classes are
reduced by a max or average "knowledge pooler".
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import ModelBundle, _HeadCtx, all_branch_features, head_logits
from .data import LabeledSet
from .errors import SpecError, TrainingError
from .linalg import Mat, Param, SgdConfig, ce_mean_and_grad, l2_normalize_rows, matmul, sgd_step
from .memory import BalancedSampler, ExemplarMemory
from .routing import split_balanced_ce_and_grad
from .seeding import rng_for

POOLERS = ("max", "avg")
CROSS_INIT_SCALE = 1e-3  # start near the exact zero-transfer point


@dataclass
class GlobalLabelMap:
    """Where every global class lives in the concatenated logit vector."""

    classes: list[int]                    # sorted; order of the pooled logits
    entries: list[list[tuple[str, int]]]  # per class: (branch id, local column)
    branch_order: list[str]
    branch_sizes: dict[str, int]
    offsets: dict[str, int]

    def concat_indices(self, g: int) -> list[int]:
        return [self.offsets[d] + j for d, j in self.entries[g]]

    @property
    def concat_len(self) -> int:
        return sum(self.branch_sizes.values())

    def global_index(self) -> dict[int, int]:
        return {c: g for g, c in enumerate(self.classes)}


def build_label_map(m: ModelBundle) -> GlobalLabelMap:
    order = m.branch_ids
    sizes, offsets, off = {}, {}, 0
    for d in order:
        labels = m.branches[d].labels
        if len(set(labels)) != len(labels):
            raise SpecError(f"branch {d} repeats a label")
        sizes[d] = len(labels)
        offsets[d] = off
        off += len(labels)
    classes = sorted({c for d in order for c in m.branches[d].labels})
    entries = []
    for c in classes:
        locs = [(d, m.branches[d].labels.index(c)) for d in order if c in m.branches[d].labels]
        if not locs:
            raise SpecError(f"class {c} is mapped to no branch")
        entries.append(locs)
    return GlobalLabelMap(classes, entries, order, sizes, offsets)


@dataclass
class FusionHead:
    cross: dict[tuple[str, str], Param]  # (d, d') -> k x |Y_d|, d != d'
    aux_router: Param                    # (t+1) x (t+1)
    pooler: str
    alpha: float
    beta: float
    label_map: GlobalLabelMap
    delta_scale: float = 1.0  # transfer logits share the heads' cosine scale
    aux_lr_scale: float = 1e-2  # the aux router sees s-scale inputs; damp its steps
    epoch_losses: list[float] = field(default_factory=list)

    def params(self) -> list[Param]:
        return list(self.cross.values()) + [self.aux_router]


@dataclass
class FusionOutput:
    z: dict[str, np.ndarray]
    delta: dict[str, np.ndarray]
    z_tilde: dict[str, np.ndarray]
    z_a: np.ndarray
    z_a_pooled: np.ndarray


def init_fusion(m: ModelBundle, pooler: str, alpha: float, beta: float, seed: int) -> FusionHead:
    """Fresh fusion head; freezes every backbone/head parameter of ``m``.

    Cross weights start near zero, so training begins at the exact
    zero-transfer point. The auxiliary router starts at the identity: its
    logits then read "route by each branch's maximum score", which is the
    balancing the routing term is meant to impose from the first step.
    """
    if len(m.branches) < 2:
        raise SpecError("fusion needs at least 2 branches")
    if pooler not in POOLERS:
        raise SpecError(f"pooler must be one of {POOLERS}")
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise SpecError("alpha and beta must lie in [0, 1]")
    lm = build_label_map(m)
    k = m.feature_dim
    cross: dict[tuple[str, str], Param] = {}
    for d in lm.branch_order:
        for dp in lm.branch_order:
            if d == dp:
                continue
            rng = rng_for(seed, "cross", d, dp)
            cross[(d, dp)] = Param(
                rng.uniform(-CROSS_INIT_SCALE, CROSS_INIT_SCALE, size=(k, lm.branch_sizes[d])),
                name=f"cross.{d}.{dp}",
            )
    t1 = len(lm.branch_order)
    aux = Param(np.eye(t1), name="aux_router")
    m.set_frozen(True)
    scale = m.arch.cosine_scale if m.arch.normalize else 1.0
    return FusionHead(cross, aux, pooler, alpha, beta, lm, delta_scale=scale)


def _pool_forward(z_a: Mat, lm: GlobalLabelMap, mode: str):
    """Pool duplicate class entries; returns (pooled, per-class backward info)."""
    n = z_a.shape[0]
    pooled = np.empty((n, len(lm.classes)))
    back = []
    rows = np.arange(n)
    for g in range(len(lm.classes)):
        idxs = lm.concat_indices(g)
        if not idxs:
            raise SpecError(f"class {lm.classes[g]} pools over no entries")
        if len(idxs) == 1:
            pooled[:, g] = z_a[:, idxs[0]]
            back.append((idxs, None))
        elif mode == "max":
            sub = z_a[:, idxs]
            k = np.argmax(sub, axis=1)  # first max = earliest branch on ties
            pooled[:, g] = sub[rows, k]
            back.append((idxs, np.asarray(idxs)[k]))
        else:
            pooled[:, g] = z_a[:, idxs].mean(axis=1)
            back.append((idxs, None))
    return pooled, back


def _pool_backward(d_pooled: Mat, back, concat_len: int, mode: str) -> Mat:
    n = d_pooled.shape[0]
    d_z_a = np.zeros((n, concat_len))
    rows = np.arange(n)
    for g, (idxs, argcols) in enumerate(back):
        if len(idxs) == 1:
            d_z_a[:, idxs[0]] += d_pooled[:, g]
        elif mode == "max":
            d_z_a[rows, argcols] += d_pooled[:, g]
        else:
            share = d_pooled[:, g] / len(idxs)
            for j in idxs:
                d_z_a[:, j] += share
    return d_z_a


def pool_overlap(z_a, lm: GlobalLabelMap, mode: str) -> np.ndarray:
    """Knowledge pooler over one concatenated logit vector."""
    if mode not in POOLERS:
        raise SpecError(f"pooler must be one of {POOLERS}")
    z = np.asarray(z_a, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != lm.concat_len:
        raise SpecError(f"logit vector has length {z.shape[1]}, map expects {lm.concat_len}")
    pooled, _ = _pool_forward(z, lm, mode)
    return pooled[0]


def _delta_inputs(f: FusionHead, feats: dict[str, Mat], base_mask: np.ndarray | None):
    """Per source branch: the features fed into W_bd' (possibly beta-scaled)."""
    scaled: dict[str, Mat] = {}
    if base_mask is not None and base_mask.any():
        for d in f.label_map.branch_order:
            s = feats[d].copy()
            s[base_mask] *= f.beta
            scaled[d] = s
    else:
        scaled = feats
    return scaled


def _forward_z_a(
    m: ModelBundle, f: FusionHead, feats: dict[str, Mat], base_mask: np.ndarray | None
) -> tuple[Mat, dict[str, Mat]]:
    """Concatenated fused logits z_a and the transfer inputs used per source."""
    lm = f.label_map
    scaled = _delta_inputs(f, feats, base_mask)
    parts = []
    for d in lm.branch_order:
        z_d = head_logits(m, feats[d], d)
        delta = np.zeros_like(z_d)
        for dp in lm.branch_order:
            if dp == d:
                continue
            src = scaled[dp] if d == "b" else feats[dp]
            delta += f.delta_scale * matmul(src, f.cross[(d, dp)].value)
        parts.append(z_d + delta)
    return np.concatenate(parts, axis=1), scaled


def fused_forward(m: ModelBundle, f: FusionHead, x, train_scaling_label: int | None = None) -> FusionOutput:
    """Full fusion forward for one sample.

    When ``train_scaling_label`` is a base-branch class, the transfer inputs
    into the base branch are scaled by beta (the training-time rule); at
    inference no label is available and no scaling is applied.
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    feats = all_branch_features(m, x2)
    lm = f.label_map
    base_mask = None
    if train_scaling_label is not None and train_scaling_label in m.branches["b"].labels:
        base_mask = np.ones(x2.shape[0], dtype=bool)
    z_a, scaled = _forward_z_a(m, f, feats, base_mask)
    z, delta, z_tilde = {}, {}, {}
    for d in lm.branch_order:
        z[d] = head_logits(m, feats[d], d)[0]
        sl = slice(lm.offsets[d], lm.offsets[d] + lm.branch_sizes[d])
        z_tilde[d] = z_a[0, sl]
        delta[d] = z_tilde[d] - z[d]
    pooled, _ = _pool_forward(z_a, lm, f.pooler)
    return FusionOutput(z, delta, z_tilde, z_a[0], pooled[0])


def _fusion_losses(
    m: ModelBundle,
    f: FusionHead,
    feats: dict[str, Mat],
    y_idx: np.ndarray,
    splits: np.ndarray,
    base_mask: np.ndarray | None,
    with_grads: bool = True,
) -> tuple[float, float, float]:
    """L_total, L_cls, L_rt for a batch of cached features.

    Gradients (when requested) flow only into the cross weights and the
    auxiliary router; max operations pass gradient to the argmax entry.
    """
    lm = f.label_map
    n = len(y_idx)
    rows = np.arange(n)
    z_a, scaled = _forward_z_a(m, f, feats, base_mask)

    pooled, back = _pool_forward(z_a, lm, f.pooler)
    l_cls, d_pooled = ce_mean_and_grad(pooled, y_idx)

    # auxiliary routing on the per-branch maximum fused logit
    r_cols, argmax_cols = [], []
    for d in lm.branch_order:
        sl = z_a[:, lm.offsets[d] : lm.offsets[d] + lm.branch_sizes[d]]
        k = np.argmax(sl, axis=1)
        r_cols.append(sl[rows, k])
        argmax_cols.append(lm.offsets[d] + k)
    r_in = np.stack(r_cols, axis=1)
    aux_logits = matmul(r_in, f.aux_router.value)
    l_rt, d_aux_logits = split_balanced_ce_and_grad(aux_logits, splits)

    total = (1.0 - f.alpha) * l_cls + f.alpha * l_rt
    if not with_grads:
        return total, l_cls, l_rt

    d_z_a = _pool_backward((1.0 - f.alpha) * d_pooled, back, lm.concat_len, f.pooler)
    f.aux_router.accumulate(matmul(r_in.T, f.alpha * d_aux_logits))
    d_r = matmul(f.alpha * d_aux_logits, f.aux_router.value.T)
    for j, cols in enumerate(argmax_cols):
        d_z_a[rows, cols] += d_r[:, j]

    for d in lm.branch_order:
        d_tilde = d_z_a[:, lm.offsets[d] : lm.offsets[d] + lm.branch_sizes[d]]
        for dp in lm.branch_order:
            if dp == d:
                continue
            src = scaled[dp] if d == "b" else feats[dp]
            f.cross[(d, dp)].accumulate(f.delta_scale * matmul(src.T, d_tilde))
    return total, l_cls, l_rt


def loss_total(m: ModelBundle, f: FusionHead, batch: LabeledSet) -> tuple[float, float, float]:
    """Total stage-II loss on a batch, with gradients accumulated into f.

    The batch's origin tags choose both the routing split labels and the
    rows whose transfer inputs get the beta scaling (origin 0 = base).
    """
    feats = all_branch_features(m, batch.x)
    gidx = f.label_map.global_index()
    y_idx = np.array([gidx[int(c)] for c in batch.y], dtype=np.int64)
    return _fusion_losses(m, f, feats, y_idx, batch.origin, batch.origin == 0)


def train_fusion(
    m: ModelBundle,
    f: FusionHead,
    memory: ExemplarMemory,
    novel: LabeledSet,
    cfg: SgdConfig,
    seed: int,
    per_class: int | None = None,
) -> FusionHead:
    """Optimize the fusion head over class-balanced batches; backbone frozen."""
    sampler = BalancedSampler(memory, novel, memory.capacity if per_class is None else per_class)
    cand = sampler.candidates
    feats_all = all_branch_features(m, cand.x)
    gidx = f.label_map.global_index()
    y_idx_all = np.array([gidx[int(c)] for c in cand.y], dtype=np.int64)
    base_all = cand.origin == 0
    cross_params = list(f.cross.values())
    aux_cfg = replace(cfg, base_lr=cfg.base_lr * f.aux_lr_scale)
    for epoch in range(cfg.epochs):
        losses = []
        for idx in sampler.batches(seed, epoch, cfg.batch_size):
            feats = {d: feats_all[d][idx] for d in f.label_map.branch_order}
            total, _, _ = _fusion_losses(m, f, feats, y_idx_all[idx], cand.origin[idx], base_all[idx])
            if not np.isfinite(total):
                raise TrainingError(f"fusion loss diverged at epoch {epoch}")
            sgd_step(cross_params, epoch, cfg)
            sgd_step([f.aux_router], epoch, aux_cfg)
            losses.append(total)
        f.epoch_losses.append(float(np.mean(losses)))
    return f


def fused_logits_batch(m: ModelBundle, f: FusionHead, x: Mat, feats: dict[str, Mat] | None = None) -> Mat:
    """Pooled inference logits (no beta scaling) for a batch."""
    feats = all_branch_features(m, x) if feats is None else feats
    z_a, _ = _forward_z_a(m, f, feats, None)
    pooled, _ = _pool_forward(z_a, f.label_map, f.pooler)
    return pooled


def fused_predict_batch(m: ModelBundle, f: FusionHead, x: Mat, feats: dict[str, Mat] | None = None) -> np.ndarray:
    pooled = fused_logits_batch(m, f, x, feats)
    classes = np.asarray(f.label_map.classes, dtype=np.int64)
    return classes[np.argmax(pooled, axis=1)]  # first max = lowest class id


def fused_predict(m: ModelBundle, f: FusionHead, x) -> int:
    return int(fused_predict_batch(m, f, np.atleast_2d(np.asarray(x, dtype=np.float64)))[0])


# --- concatenation baselines -------------------------------------------------

@dataclass
class FusionBaseline:
    """FeatCat / LogitCat predictor over the full label set."""

    kind: str                      # featcat-rt | logitcat-rt | logitcat-ft
    heads: dict[str, Param]
    label_map: GlobalLabelMap
    pooler: str
    normalize: bool
    scale: float

    @property
    def classes(self) -> list[int]:
        return self.label_map.classes

    def logits(self, m: ModelBundle, x: Mat) -> Mat:
        feats = all_branch_features(m, x)
        if self.kind == "featcat-rt":
            cat = np.concatenate([feats[d] for d in self.label_map.branch_order], axis=1)
            ctx = _HeadCtx(self.heads["cat"], l2_normalize_rows(cat) if self.normalize else cat,
                           self.scale, self.normalize)
            return ctx.z
        parts = []
        for d in self.label_map.branch_order:
            parts.append(_HeadCtx(self.heads[d], feats[d], self.scale, self.normalize).z)
        pooled, _ = _pool_forward(np.concatenate(parts, axis=1), self.label_map, self.pooler)
        return pooled

    def predict(self, m: ModelBundle, x: Mat) -> np.ndarray:
        cls = np.asarray(self.classes, dtype=np.int64)
        return cls[np.argmax(self.logits(m, x), axis=1)]


def _train_baseline(
    b: FusionBaseline, m: ModelBundle, memory: ExemplarMemory, novel: LabeledSet,
    cfg: SgdConfig, seed: int
) -> FusionBaseline:
    sampler = BalancedSampler(memory, novel, memory.capacity)
    cand = sampler.candidates
    feats_all = all_branch_features(m, cand.x)
    lm = b.label_map
    gidx = lm.global_index()
    y_idx = np.array([gidx[int(c)] for c in cand.y], dtype=np.int64)
    cat_all = np.concatenate([feats_all[d] for d in lm.branch_order], axis=1)
    if b.normalize and b.kind == "featcat-rt":
        cat_all = l2_normalize_rows(cat_all)
    params = list(b.heads.values())
    for epoch in range(cfg.epochs):
        for idx in sampler.batches(seed, epoch, cfg.batch_size):
            if b.kind == "featcat-rt":
                ctx = _HeadCtx(b.heads["cat"], cat_all[idx], b.scale, b.normalize)
                loss, d_z = ce_mean_and_grad(ctx.z, y_idx[idx])
                ctx.backward(d_z)
            else:
                ctxs = {d: _HeadCtx(b.heads[d], feats_all[d][idx], b.scale, b.normalize)
                        for d in lm.branch_order}
                z_a = np.concatenate([ctxs[d].z for d in lm.branch_order], axis=1)
                pooled, back = _pool_forward(z_a, lm, b.pooler)
                loss, d_pooled = ce_mean_and_grad(pooled, y_idx[idx])
                d_z_a = _pool_backward(d_pooled, back, lm.concat_len, b.pooler)
                for d in lm.branch_order:
                    ctxs[d].backward(d_z_a[:, lm.offsets[d] : lm.offsets[d] + lm.branch_sizes[d]])
            if not np.isfinite(loss):
                raise TrainingError(f"{b.kind} loss diverged at epoch {epoch}")
            sgd_step(params, epoch, cfg)
    return b


def featcat_retrain(m: ModelBundle, memory: ExemplarMemory, novel: LabeledSet,
                    cfg: SgdConfig, seed: int) -> FusionBaseline:
    """Fresh linear head over concatenated branch features, all classes."""
    lm = build_label_map(m)
    k_cat = m.feature_dim * len(lm.branch_order)
    head = Param(
        rng_for(seed, "featcat").uniform(-1.0 / np.sqrt(k_cat), 1.0 / np.sqrt(k_cat),
                                         size=(k_cat, len(lm.classes))),
        name="featcat.head",
    )
    m.set_frozen(True)
    b = FusionBaseline("featcat-rt", {"cat": head}, lm, "max", m.arch.normalize, m.arch.cosine_scale)
    return _train_baseline(b, m, memory, novel, cfg, seed)


def _logitcat(m: ModelBundle, memory: ExemplarMemory, novel: LabeledSet, cfg: SgdConfig,
              seed: int, finetune: bool, pooler: str) -> FusionBaseline:
    lm = build_label_map(m)
    heads: dict[str, Param] = {}
    for d in lm.branch_order:
        orig = m.branches[d].head
        if finetune:
            heads[d] = Param(orig.value.copy(), name=f"logitcat.{d}")
        else:
            bound = 1.0 / np.sqrt(m.feature_dim)
            heads[d] = Param(
                rng_for(seed, "logitcat", d).uniform(-bound, bound, size=orig.value.shape),
                name=f"logitcat.{d}",
            )
    m.set_frozen(True)
    kind = "logitcat-ft" if finetune else "logitcat-rt"
    b = FusionBaseline(kind, heads, lm, pooler, m.arch.normalize, m.arch.cosine_scale)
    return _train_baseline(b, m, memory, novel, cfg, seed)


def logitcat_retrain(m, memory, novel, cfg, seed, pooler: str = "max") -> FusionBaseline:
    """Reinitialize every branch head and retrain on the balanced pool."""
    return _logitcat(m, memory, novel, cfg, seed, finetune=False, pooler=pooler)


def logitcat_finetune(m, memory, novel, cfg, seed, pooler: str = "max") -> FusionBaseline:
    """Fine-tune the existing branch heads on the balanced pool."""
    return _logitcat(m, memory, novel, cfg, seed, finetune=True, pooler=pooler)
