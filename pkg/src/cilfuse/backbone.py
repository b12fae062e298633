"""Block-structured feature extractor with a shared trunk and clonable branches.

The trunk plays the role of the frozen lower layers of a pretrained network;
each branch is a clonable top block stack plus a linear (optionally cosine)
head over that branch's label set. Branches are kept in insertion order:
"b" first, then "n1", "n2", ...
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSet
from .errors import SpecError, TrainingError
from .linalg import (
    EPS_NORM,
    Mat,
    Param,
    SgdConfig,
    ce_mean_and_grad,
    l2_normalize_rows,
    matmul,
    sgd_step,
    softmax_rows,
)
from .seeding import rng_for


@dataclass
class ArchSpec:
    """Network shape: trunk block widths, branch block widths, head style.

    The cosine scale doubles as the softmax temperature of every scaled
    head; 8 keeps desk-scale margins soft enough for the stage-II balancing
    knobs to act (16 saturates them).
    """

    input_dim: int
    trunk_dims: list[int] = field(default_factory=lambda: [64, 64])
    branch_dims: list[int] = field(default_factory=lambda: [32])
    normalize: bool = True
    cosine_scale: float = 8.0

    def __post_init__(self):
        if self.input_dim < 1 or not self.branch_dims:
            raise SpecError("arch needs a positive input dim and at least one branch block")
        if self.cosine_scale <= 0:
            raise SpecError("cosine scale must be positive")

    @property
    def feature_dim(self) -> int:
        return self.branch_dims[-1]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "trunk_dims": list(self.trunk_dims),
            "branch_dims": list(self.branch_dims),
            "normalize": self.normalize,
            "cosine_scale": self.cosine_scale,
        }

    @staticmethod
    def from_dict(d: dict) -> "ArchSpec":
        return ArchSpec(**d)


@dataclass
class Block:
    """Affine map followed by a rectifier."""

    weight: Param  # in_dim x out_dim
    bias: Param    # 1 x out_dim

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


@dataclass
class Branch:
    blocks: list[Block]
    head: Param          # feature_dim x |labels|
    labels: list[int]    # global class ids; column j of head <-> labels[j]

    def params(self) -> list[Param]:
        return [p for b in self.blocks for p in b.params()] + [self.head]

    def local_index(self) -> dict[int, int]:
        return {c: j for j, c in enumerate(self.labels)}


@dataclass
class ModelBundle:
    arch: ArchSpec
    trunk: list[Block]
    branches: dict[str, Branch]
    train_logs: dict[str, list[float]] = field(default_factory=dict)

    @property
    def feature_dim(self) -> int:
        return self.arch.feature_dim

    @property
    def normalize(self) -> bool:
        return self.arch.normalize

    @property
    def branch_ids(self) -> list[str]:
        return list(self.branches)

    def params(self) -> list[Param]:
        out = [p for b in self.trunk for p in b.params()]
        for br in self.branches.values():
            out.extend(br.params())
        return out

    def all_labels(self) -> list[int]:
        seen: set[int] = set()
        for br in self.branches.values():
            seen.update(br.labels)
        return sorted(seen)

    def set_frozen(self, frozen: bool) -> None:
        for p in self.params():
            p.frozen = frozen


def _init_block(in_dim: int, out_dim: int, rng: np.random.Generator, name: str) -> Block:
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(in_dim, out_dim))
    return Block(Param(w, name=f"{name}.weight"), Param(np.zeros((1, out_dim)), name=f"{name}.bias"))


def _init_head(in_dim: int, n_classes: int, rng: np.random.Generator, name: str) -> Param:
    bound = 1.0 / np.sqrt(in_dim)
    return Param(rng.uniform(-bound, bound, size=(in_dim, n_classes)), name=name)


def _blocks_forward(blocks: list[Block], x: Mat, caches: list | None = None) -> Mat:
    out = x
    for b in blocks:
        pre = matmul(out, b.weight.value) + b.bias.value
        act = np.maximum(pre, 0.0)
        if caches is not None:
            caches.append((out, pre > 0.0))
        out = act
    return out


def _blocks_backward(blocks: list[Block], d_out: Mat, caches: list, need_dx: bool = True) -> Mat | None:
    d = d_out
    for b, (x_in, mask) in zip(reversed(blocks), reversed(caches)):
        d_pre = d * mask
        b.weight.accumulate(matmul(x_in.T, d_pre))
        b.bias.accumulate(d_pre.sum(axis=0, keepdims=True))
        first = b is blocks[0]
        if first and not need_dx:
            return None
        d = matmul(d_pre, b.weight.value.T)
    return d


def _rows_normalize_fwd(x: Mat) -> tuple[Mat, np.ndarray]:
    r = np.sqrt((x * x).sum(axis=1, keepdims=True))
    safe = r > EPS_NORM
    y = np.where(safe, x / np.where(safe, r, 1.0), x)
    return y, r


def _rows_normalize_bwd(d_y: Mat, y: Mat, r: np.ndarray) -> Mat:
    safe = r > EPS_NORM
    inner = (y * d_y).sum(axis=1, keepdims=True)
    return np.where(safe, (d_y - y * inner) / np.where(safe, r, 1.0), d_y)


def _cols_normalize_fwd(w: Mat) -> tuple[Mat, np.ndarray]:
    r = np.sqrt((w * w).sum(axis=0, keepdims=True))
    safe = r > EPS_NORM
    wn = np.where(safe, w / np.where(safe, r, 1.0), w)
    return wn, r


def head_logits(m: ModelBundle, features: Mat, d: str) -> Mat:
    """Branch-d logits from already-extracted features."""
    head = m.branches[d].head
    if m.arch.normalize:
        wn, _ = _cols_normalize_fwd(head.value)
        return m.arch.cosine_scale * matmul(features, wn)
    return matmul(features, head.value)


class _HeadCtx:
    """Forward state needed to backpropagate through a (cosine) head."""

    def __init__(self, head: Param, feats: Mat, scale: float, normalize: bool):
        self.head, self.feats, self.scale, self.normalize = head, feats, scale, normalize
        if normalize:
            self.wn, self.wr = _cols_normalize_fwd(head.value)
            self.z = scale * matmul(feats, self.wn)
        else:
            self.z = matmul(feats, head.value)

    def backward(self, d_z: Mat) -> Mat:
        if not self.normalize:
            self.head.accumulate(matmul(self.feats.T, d_z))
            return matmul(d_z, self.head.value.T)
        d_wn = self.scale * matmul(self.feats.T, d_z)
        safe = self.wr > EPS_NORM
        inner = (self.wn * d_wn).sum(axis=0, keepdims=True)
        d_w = np.where(safe, (d_wn - self.wn * inner) / np.where(safe, self.wr, 1.0), d_wn)
        self.head.accumulate(d_w)
        return self.scale * matmul(d_z, self.wn.T)


def _forward_features(m: ModelBundle, x: Mat, d: str, caches: dict | None = None) -> Mat:
    if d not in m.branches:
        raise KeyError(f"unknown branch {d!r}; have {m.branch_ids}")
    tc = [] if caches is not None else None
    bc = [] if caches is not None else None
    h = _blocks_forward(m.trunk, x, tc)
    h = _blocks_forward(m.branches[d].blocks, h, bc)
    if m.arch.normalize:
        hn, r = _rows_normalize_fwd(h)
    else:
        hn, r = h, None
    if caches is not None:
        caches.update(trunk=tc, branch=bc, h_norm=hn, h_r=r)
    return hn


def extract_features(m: ModelBundle, x: Mat, d: str) -> Mat:
    """Features h(x) through the trunk and branch d (row-normalized if configured)."""
    return _forward_features(m, x, d)


def all_branch_features(m: ModelBundle, x: Mat) -> dict[str, Mat]:
    """Per-branch features with the trunk evaluated once."""
    trunk_out = _blocks_forward(m.trunk, x)
    out = {}
    for d, br in m.branches.items():
        h = _blocks_forward(br.blocks, trunk_out)
        out[d] = l2_normalize_rows(h) if m.arch.normalize else h
    return out


def branch_probs(m: ModelBundle, x: Mat, d: str) -> Mat:
    return softmax_rows(head_logits(m, extract_features(m, x, d), d))


def predict_branch(m: ModelBundle, x: Mat, d: str) -> np.ndarray:
    """Within-branch prediction mapped to global class ids."""
    z = head_logits(m, extract_features(m, x, d), d)
    labels = np.asarray(m.branches[d].labels, dtype=np.int64)
    return labels[np.argmax(z, axis=1)]


def _branch_fb(m: ModelBundle, d: str, x: Mat, y_local: np.ndarray) -> float:
    """Forward + backward for cross-entropy on branch d. Returns the loss."""
    caches: dict = {}
    h = _forward_features(m, x, d, caches)
    ctx = _HeadCtx(m.branches[d].head, h, m.arch.cosine_scale, m.arch.normalize)
    loss, d_z = ce_mean_and_grad(ctx.z, y_local)
    d_h = ctx.backward(d_z)
    if m.arch.normalize:
        d_h = _rows_normalize_bwd(d_h, caches["h_norm"], caches["h_r"])
    d_mid = _blocks_backward(m.branches[d].blocks, d_h, caches["branch"])
    _blocks_backward(m.trunk, d_mid, caches["trunk"], need_dx=False)
    return loss


def _run_epochs(m: ModelBundle, d: str, data: LabeledSet, cfg: SgdConfig, seed: int) -> list[float]:
    local = m.branches[d].local_index()
    y_local = np.array([local[int(c)] for c in data.y], dtype=np.int64)
    params = m.params()
    log = []
    for epoch in range(cfg.epochs):
        perm = rng_for(seed, "shuffle", epoch).permutation(data.n)
        batch_losses = []
        for start in range(0, data.n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss = _branch_fb(m, d, data.x[idx], y_local[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            sgd_step(params, epoch, cfg)
            batch_losses.append(loss)
        log.append(float(np.mean(batch_losses)))
    return log


def pretrain_base(data: LabeledSet, arch: ArchSpec, cfg: SgdConfig, seed: int) -> ModelBundle:
    """Train trunk, base branch, and base head jointly with cross-entropy."""
    labels = data.classes()
    if len(labels) < 2:
        raise SpecError("pretraining needs at least 2 classes")
    rng = rng_for(seed, "init")
    trunk, prev = [], arch.input_dim
    for i, dim in enumerate(arch.trunk_dims):
        trunk.append(_init_block(prev, dim, rng, f"trunk{i}"))
        prev = dim
    blocks = []
    for i, dim in enumerate(arch.branch_dims):
        blocks.append(_init_block(prev, dim, rng, f"b.block{i}"))
        prev = dim
    head = _init_head(arch.feature_dim, len(labels), rng, "b.head")
    m = ModelBundle(arch=arch, trunk=trunk, branches={"b": Branch(blocks, head, labels)})
    m.train_logs["pretrain"] = _run_epochs(m, "b", data, cfg, seed)
    return m


def clone_bundle(m: ModelBundle) -> ModelBundle:
    """Deep copy with fresh parameter arrays (frozen flags preserved)."""
    return copy.deepcopy(m)


def _clone_blocks(blocks: list[Block], prefix: str) -> list[Block]:
    out = []
    for i, b in enumerate(blocks):
        out.append(
            Block(
                Param(b.weight.value.copy(), name=f"{prefix}.block{i}.weight"),
                Param(b.bias.value.copy(), name=f"{prefix}.block{i}.bias"),
            )
        )
    return out


def add_branch_stage1(m: ModelBundle, novel: LabeledSet, cfg: SgdConfig, seed: int) -> ModelBundle:
    """Clone the base branch, finetune the clone and a fresh head on novel data.

    The trunk, all prior branches, and all prior heads are frozen and come out
    bitwise unchanged.
    """
    if novel.n == 0:
        raise SpecError("novel set is empty")
    m.set_frozen(True)
    new_id = f"n{len(m.branches)}"
    blocks = _clone_blocks(m.branches["b"].blocks, new_id)
    labels = novel.classes()
    head = _init_head(m.arch.feature_dim, len(labels), rng_for(seed, "head"), f"{new_id}.head")
    m.branches[new_id] = Branch(blocks, head, labels)
    m.train_logs[f"stage1.{new_id}"] = _run_epochs(m, new_id, novel, cfg, seed)
    return m


def finetune_k_blocks(
    m: ModelBundle,
    novel: LabeledSet,
    k_blocks: int,
    cfg: SgdConfig,
    seed: int,
    eval_set: LabeledSet | None = None,
) -> tuple[ModelBundle, float]:
    """Freeze-vs-finetune probe: unfreeze the top k blocks + a fresh novel head.

    Works on a copy; k_blocks counts from the output end of the trunk+base
    branch chain, so 0 is the fully frozen representation. Returns the tuned
    copy (a novel-classes-only classifier) and its accuracy on ``eval_set``
    (the training set when omitted).
    """
    chain_len = len(m.trunk) + len(m.branches["b"].blocks)
    if not 0 <= k_blocks <= chain_len:
        raise SpecError(f"k_blocks must be in [0, {chain_len}]")
    out = clone_bundle(m)
    out.set_frozen(True)
    chain = out.trunk + out.branches["b"].blocks
    for b in chain[chain_len - k_blocks :]:
        for p in b.params():
            p.frozen = False
    labels = novel.classes()
    head = _init_head(out.arch.feature_dim, len(labels), rng_for(seed, "head"), "ft.head")
    out.branches["b"] = Branch(out.branches["b"].blocks, head, labels)
    out.branches = {"b": out.branches["b"]}
    out.train_logs = {"finetune": _run_epochs(out, "b", novel, cfg, seed)}
    probe = eval_set if eval_set is not None else novel
    acc = float((predict_branch(out, probe.x, "b") == probe.y).mean())
    return out, acc


def full_finetune_baseline(m: ModelBundle, novel: LabeledSet, cfg: SgdConfig, seed: int) -> ModelBundle:
    """Naive CIL baseline: everything trainable, all-classes head, novel data only."""
    out = clone_bundle(m)
    all_labels = sorted(set(out.all_labels()) | set(novel.classes()))
    head = _init_head(out.arch.feature_dim, len(all_labels), rng_for(seed, "head"), "ft_all.head")
    out.branches = {"b": Branch(out.branches["b"].blocks, head, all_labels)}
    out.set_frozen(False)
    out.train_logs = {"full_finetune": _run_epochs(out, "b", novel, cfg, seed)}
    return out
