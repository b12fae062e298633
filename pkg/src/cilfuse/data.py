"""Gaussian-mixture datasets and base/novel split scenarios.

A scenario carries a large base label set plus one or more small novel
steps. Base and novel label sets may be disjoint, partially overlapping
(with shared classes split between the two sides randomly, by feature
clustering, or by mixture component = "style"), or fully overlapping.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateDataError, GenerationError, SpecError
from .linalg import Mat, as_mat
from .seeding import derive_seed, rng_for

DEFAULT_STD = 0.15
KINDS = ("disjoint", "overlap_random", "overlap_domain", "overlap_style", "full_overlap")
SAMPLE_SPLITS = ("random", "cluster")

BASE_ORIGIN = 0  # "origin" tags: 0 = base split, t >= 1 = novel step t


@dataclass
class Component:
    mean: np.ndarray
    std: float
    weight: float


@dataclass
class ClassGen:
    """Mixture-of-Gaussians generator for one class."""

    label: int
    components: list[Component]
    p: int

    def __post_init__(self):
        if not self.components:
            raise SpecError(f"class {self.label} has no components")
        w = sum(c.weight for c in self.components)
        if abs(w - 1.0) > 1e-9:
            raise SpecError(f"class {self.label} component weights sum to {w}")
        for c in self.components:
            if c.std <= 0:
                raise SpecError(f"class {self.label} has non-positive std")


@dataclass
class LabeledSet:
    """Rows of inputs with class labels, split origins, and component ids.

    ``origin`` is 0 for base-split samples and t for novel-step-t samples.
    ``comp`` records which mixture component generated each row; it is
    hidden metadata used only by style-split checks.
    """

    x: Mat
    y: np.ndarray
    origin: np.ndarray
    comp: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise SpecError("sample matrix must be 2-D")
        self.y = np.asarray(self.y, dtype=np.int64)
        self.origin = np.asarray(self.origin, dtype=np.int64)
        self.comp = np.asarray(self.comp, dtype=np.int64)
        n = self.x.shape[0]
        if not (len(self.y) == len(self.origin) == len(self.comp) == n):
            raise SpecError("labeled set columns disagree in length")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.y))

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx)
        return LabeledSet(self.x[idx], self.y[idx], self.origin[idx], self.comp[idx])

    def for_class(self, label: int) -> "LabeledSet":
        return self.subset(np.flatnonzero(self.y == label))

    def with_origin(self, origin: int) -> "LabeledSet":
        return LabeledSet(self.x, self.y, np.full(self.n, origin, dtype=np.int64), self.comp)

    @staticmethod
    def empty(p: int) -> "LabeledSet":
        z = np.zeros(0, dtype=np.int64)
        return LabeledSet(np.zeros((0, p)), z, z, z)

    @staticmethod
    def concat(sets: list["LabeledSet"]) -> "LabeledSet":
        sets = [s for s in sets if s.n > 0]
        if not sets:
            raise SpecError("cannot concatenate zero non-empty sets")
        return LabeledSet(
            np.concatenate([s.x for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.origin for s in sets]),
            np.concatenate([s.comp for s in sets]),
        )


@dataclass
class ScenarioSpec:
    kind: str
    n_base_classes: int
    novel_steps: list[int]
    n_overlap: int = 0
    sample_split: str = "random"
    per_class_train: int = 100
    per_class_val: int = 20
    per_class_test: int = 50
    seed: int = 0
    p: int = 8
    # scenario classes are deliberately noisier than the gen_class_means
    # default: fully separable classes make the routing/fusion trade-offs
    # degenerate at desk scale
    class_std: float = 0.3

    def __post_init__(self):
        if self.class_std <= 0:
            raise SpecError("class_std must be positive")
        if self.kind not in KINDS:
            raise SpecError(f"unknown scenario kind {self.kind!r}")
        if self.sample_split not in SAMPLE_SPLITS:
            raise SpecError(f"unknown sample_split {self.sample_split!r}")
        if self.n_base_classes < 2:
            raise SpecError("need at least 2 base classes")
        if not self.novel_steps or any(s < 1 for s in self.novel_steps):
            raise SpecError("novel_steps must be a non-empty list of positive counts")
        if min(self.per_class_train, self.per_class_val, self.per_class_test) < 1:
            raise SpecError("per-class sample counts must be >= 1")
        if self.p < 1:
            raise SpecError("input dimension must be >= 1")
        if self.kind == "disjoint" and self.n_overlap != 0:
            raise SpecError("disjoint scenarios cannot declare overlap classes")
        if self.n_overlap < 0 or self.n_overlap > min([self.n_base_classes] + self.novel_steps):
            raise SpecError("n_overlap exceeds min(base classes, novel step sizes)")
        if self.kind.startswith("overlap_") and self.n_overlap < 1:
            raise SpecError(f"{self.kind} needs n_overlap >= 1")
        if self.kind == "full_overlap" and sum(self.novel_steps) > self.n_base_classes:
            raise SpecError("full overlap steps cannot cover more classes than the base set")
        # overlap classes are drawn without replacement across steps
        if self.kind.startswith("overlap_") and self.n_overlap * len(self.novel_steps) > self.n_base_classes:
            raise SpecError("not enough base classes to give every step distinct overlap classes")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_base_classes": self.n_base_classes,
            "novel_steps": list(self.novel_steps),
            "n_overlap": self.n_overlap,
            "sample_split": self.sample_split,
            "per_class_train": self.per_class_train,
            "per_class_val": self.per_class_val,
            "per_class_test": self.per_class_test,
            "seed": self.seed,
            "p": self.p,
            "class_std": self.class_std,
        }

    @staticmethod
    def from_dict(d: dict) -> "ScenarioSpec":
        return ScenarioSpec(**d)


@dataclass
class Scenario:
    spec: ScenarioSpec
    gens: list[ClassGen]
    base_labels: list[int]
    novel_labels: list[list[int]]    # per step, includes that step's overlap classes
    overlap_labels: list[list[int]]  # per step: base ∩ novel_t
    train_base: LabeledSet
    train_steps: list[LabeledSet]
    val_base: LabeledSet
    val_steps: list[LabeledSet]
    test_base: LabeledSet
    test_steps: list[LabeledSet]

    @property
    def n_steps(self) -> int:
        return len(self.novel_labels)

    def all_labels(self, step: int | None = None) -> list[int]:
        """Label universe after `step` novel steps (0 = base only)."""
        step = self.n_steps if step is None else step
        out = set(self.base_labels)
        for t in range(step):
            out |= set(self.novel_labels[t])
        return sorted(out)

    def overlap_upto(self, step: int) -> list[int]:
        out: set[int] = set()
        for t in range(step):
            out |= set(self.overlap_labels[t])
        return sorted(out)

    def _upto(self, base: LabeledSet, steps: list[LabeledSet], step: int) -> LabeledSet:
        return LabeledSet.concat([base] + steps[:step])

    def train_upto(self, step: int) -> LabeledSet:
        return self._upto(self.train_base, self.train_steps, step)

    def val_upto(self, step: int) -> LabeledSet:
        return self._upto(self.val_base, self.val_steps, step)

    def test_upto(self, step: int) -> LabeledSet:
        return self._upto(self.test_base, self.test_steps, step)


def spacing_delta(n_points: int, p: int) -> float:
    """Minimum pairwise mean distance for the rejection sampler.

    Heuristic: scale the per-axis budget 0.5/sqrt(p) by the linear room each
    point gets when n_points are packed into the volume of [-1,1]^p.
    """
    return (0.5 / np.sqrt(p)) * (2.0 / n_points ** (1.0 / p))


_MAX_PLACEMENT_TRIES = 10_000


def _place_means(constraints: list[str], p: int, seed: int, delta: float | None = None) -> list[np.ndarray]:
    """Draw means uniformly in [-1,1]^p, >= delta apart, honoring half-space tags.

    ``constraints[i]`` is "any", "pos" or "neg"; the latter two restrict the
    first coordinate's sign (domain-changing splits).
    """
    if delta is None:
        delta = spacing_delta(len(constraints), p)
    rng = rng_for(seed, "means")
    placed: list[np.ndarray] = []
    for i, cons in enumerate(constraints):
        for _ in range(_MAX_PLACEMENT_TRIES):
            v = rng.uniform(-1.0, 1.0, size=p)
            if cons == "pos":
                v[0] = abs(v[0])
            elif cons == "neg":
                v[0] = -abs(v[0])
            if all(np.linalg.norm(v - q) >= delta for q in placed):
                placed.append(v)
                break
        else:
            raise GenerationError(
                f"could not place mean {i} with spacing {delta:.4g} after {_MAX_PLACEMENT_TRIES} tries"
            )
    return placed


def gen_class_means(n_classes: int, p: int, seed: int, std: float = DEFAULT_STD) -> list[ClassGen]:
    """Single-component class generators with minimum mean spacing."""
    if n_classes < 2:
        raise SpecError("need at least 2 classes")
    means = _place_means(["any"] * n_classes, p, seed)
    return [ClassGen(label=i, components=[Component(means[i], std, 1.0)], p=p) for i in range(n_classes)]


def sample_set(gens: list[ClassGen], per_class: int, seed: int, origin: int = BASE_ORIGIN) -> LabeledSet:
    """Draw per_class i.i.d. samples from each class generator.

    Per-class RNG streams are derived from (seed, label), so the draws for a
    class do not depend on which other classes are present.
    """
    if per_class < 1:
        raise SpecError("per_class must be >= 1")
    xs, ys, comps = [], [], []
    for g in sorted(gens, key=lambda g: g.label):
        rng = rng_for(seed, "cls", g.label)
        weights = np.array([c.weight for c in g.components])
        comp_idx = rng.choice(len(g.components), size=per_class, p=weights)
        noise = rng.standard_normal((per_class, g.p))
        means = np.stack([g.components[int(k)].mean for k in comp_idx])
        stds = np.array([g.components[int(k)].std for k in comp_idx])[:, None]
        xs.append(means + stds * noise)
        ys.append(np.full(per_class, g.label, dtype=np.int64))
        comps.append(comp_idx.astype(np.int64))
    x = np.concatenate(xs)
    return LabeledSet(x, np.concatenate(ys), np.full(x.shape[0], origin, dtype=np.int64), np.concatenate(comps))


def split_overlap_samples_random(class_samples: LabeledSet, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """50/50 per-class random partition; odd counts give base the extra sample."""
    if class_samples.n == 0:
        raise SpecError("cannot split an empty set")
    base_idx, novel_idx = [], []
    for label in class_samples.classes():
        idx = np.flatnonzero(class_samples.y == label)
        perm = rng_for(seed, "split_random", label).permutation(len(idx))
        cut = (len(idx) + 1) // 2
        base_idx.extend(idx[perm[:cut]])
        novel_idx.extend(idx[perm[cut:]])
    return class_samples.subset(sorted(base_idx)), class_samples.subset(sorted(novel_idx))


def kmeans2(
    features: Mat,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-8,
    return_trace: bool = False,
):
    """Lloyd's algorithm with K=2 and farthest-pair initialization.

    Ties in the farthest pair and in assignments resolve to the lowest index,
    so the result is deterministic (the seed is accepted for interface parity
    but the algorithm draws nothing).
    """
    x = as_mat(features)
    n = x.shape[0]
    if n < 2:
        raise DegenerateDataError("k-means needs at least 2 rows")
    d2 = ((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2)
    far = np.unravel_index(int(np.argmax(d2)), d2.shape)
    if d2[far] == 0.0:
        raise DegenerateDataError("all rows identical; 2-means is undefined")
    cent = np.stack([x[min(far)], x[max(far)]])
    trace: list[float] = []
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = ((x[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(dist, axis=1)
        trace.append(float(dist[np.arange(n), assign].sum()))
        new_cent = cent.copy()
        for k in (0, 1):
            members = assign == k
            if members.any():
                new_cent[k] = x[members].mean(axis=0)
            else:
                # re-seed an empty cluster with the point farthest from the other centroid
                other = 1 - k
                new_cent[k] = x[int(np.argmax(((x - cent[other]) ** 2).sum(axis=1)))]
        shift = float(np.sqrt(((new_cent - cent) ** 2).sum(axis=1)).max())
        cent = new_cent
        if shift < tol:
            break
    dist = ((x[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
    assign = np.argmin(dist, axis=1)
    if return_trace:
        trace.append(float(dist[np.arange(n), assign].sum()))
        return assign, trace
    return assign


def split_overlap_samples_cluster(
    class_samples: LabeledSet, reference_features: Mat, seed: int = 0
) -> tuple[LabeledSet, LabeledSet]:
    """Partition each class by 2-means on reference features.

    The larger cluster becomes the base part; on a tie, the cluster holding
    the lowest-index sample does.
    """
    feats = as_mat(reference_features)
    if feats.shape[0] != class_samples.n:
        raise SpecError("reference features are not row-aligned with the samples")
    base_idx, novel_idx = [], []
    for label in class_samples.classes():
        idx = np.flatnonzero(class_samples.y == label)
        assign = kmeans2(feats[idx], seed=derive_seed(seed, "split_cluster", label))
        n0, n1 = int((assign == 0).sum()), int((assign == 1).sum())
        if n0 > n1:
            base_cluster = 0
        elif n1 > n0:
            base_cluster = 1
        else:
            base_cluster = int(assign[0])
        base_idx.extend(idx[assign == base_cluster])
        novel_idx.extend(idx[assign != base_cluster])
    return class_samples.subset(sorted(base_idx)), class_samples.subset(sorted(novel_idx))


def _assign_class_ids(spec: ScenarioSpec) -> tuple[list[int], list[list[int]], list[list[int]]]:
    """Pick global class ids for base and each novel step."""
    rng = rng_for(spec.seed, "assign")
    base = list(range(spec.n_base_classes))
    available = list(base)
    fresh = spec.n_base_classes
    novel, overlap = [], []
    for size in spec.novel_steps:
        if spec.kind == "disjoint":
            ids = list(range(fresh, fresh + size))
            fresh += size
            ov: list[int] = []
        elif spec.kind == "full_overlap":
            ids = sorted(int(c) for c in rng.choice(available, size=size, replace=False))
            available = [c for c in available if c not in ids]
            ov = list(ids)
        else:
            ov = sorted(int(c) for c in rng.choice(available, size=spec.n_overlap, replace=False))
            available = [c for c in available if c not in ov]
            n_new = size - spec.n_overlap
            ids = sorted(ov + list(range(fresh, fresh + n_new)))
            fresh += n_new
        novel.append(ids)
        overlap.append(ov)
    return base, novel, overlap


def scenario_ingredients(spec: ScenarioSpec) -> tuple[list[int], list[list[int]], list[list[int]], list[ClassGen], dict[str, LabeledSet]]:
    """Class assignment, generators, and raw per-role pools for a spec.

    Deterministic given the spec, so callers (e.g. a reference-model trainer
    for cluster splitting) can regenerate the exact pools independently.
    """
    base, novel, overlap = _assign_class_ids(spec)
    all_ids = sorted(set(base) | {c for step in novel for c in step})
    overlap_any = sorted({c for step in overlap for c in step})

    # half-space tags for the domain-changing split; style overlap classes get
    # two mixture components, everything else one
    constraints: list[tuple[int, int, str]] = []  # (class, comp, tag)
    for c in all_ids:
        tag = "any"
        if spec.kind == "overlap_domain" and c not in overlap_any:
            tag = "pos" if c in base else "neg"
        n_comp = 2 if (spec.kind == "overlap_style" and c in overlap_any) else 1
        for k in range(n_comp):
            constraints.append((c, k, tag))
    means = _place_means([t for _, _, t in constraints], spec.p, derive_seed(spec.seed, "gen"))
    by_class: dict[int, list[np.ndarray]] = {}
    for (c, _, _), m in zip(constraints, means):
        by_class.setdefault(c, []).append(m)
    gens = [
        ClassGen(c, [Component(m, spec.class_std, 1.0 / len(ms)) for m in ms], spec.p)
        for c, ms in sorted(by_class.items())
    ]

    pools = {
        role: sample_set(gens, count, derive_seed(spec.seed, role))
        for role, count in (
            ("train", spec.per_class_train),
            ("val", spec.per_class_val),
            ("test", spec.per_class_test),
        )
    }
    return base, novel, overlap, gens, pools


def build_scenario(spec: ScenarioSpec, reference_features: Callable[[Mat], Mat] | None = None) -> Scenario:
    """Construct a full scenario: generators, pools, and split assignment.

    ``reference_features`` maps raw sample rows to the feature space used for
    cluster-based sample splitting; when omitted, raw inputs are clustered
    directly. It is only consulted for overlap classes with
    sample_split="cluster".
    """
    base, novel, overlap, gens, pools = scenario_ingredients(spec)

    step_of_overlap = {c: t + 1 for t, ov in enumerate(overlap) for c in ov}

    def split_train_pool(label: int) -> tuple[LabeledSet, LabeledSet]:
        pool = pools["train"].for_class(label)
        if spec.kind == "overlap_style":
            comp0 = np.flatnonzero(pool.comp == 0)
            comp1 = np.flatnonzero(pool.comp == 1)
            if len(comp0) == 0 or len(comp1) == 0:
                raise GenerationError(f"style class {label} drew only one component; raise per_class_train")
            return pool.subset(comp0), pool.subset(comp1)
        if spec.sample_split == "cluster":
            feats = reference_features(pool.x) if reference_features is not None else pool.x
            return split_overlap_samples_cluster(pool, feats, seed=derive_seed(spec.seed, "csplit", label))
        return split_overlap_samples_random(pool, derive_seed(spec.seed, "rsplit", label))

    novel_train_parts: dict[int, LabeledSet] = {}
    base_train_parts: list[LabeledSet] = []
    for c in base:
        if c in step_of_overlap:
            b_part, n_part = split_train_pool(c)
            base_train_parts.append(b_part.with_origin(BASE_ORIGIN))
            novel_train_parts[c] = n_part.with_origin(step_of_overlap[c])
        else:
            base_train_parts.append(pools["train"].for_class(c).with_origin(BASE_ORIGIN))

    train_steps = []
    for t, ids in enumerate(novel, start=1):
        parts = []
        for c in ids:
            if c in step_of_overlap and step_of_overlap[c] == t:
                parts.append(novel_train_parts[c])
            else:
                parts.append(pools["train"].for_class(c).with_origin(t))
        train_steps.append(LabeledSet.concat(parts))

    def role_sets(role: str) -> tuple[LabeledSet, list[LabeledSet]]:
        # val/test pools are never split: overlap classes are evaluated on the
        # full class mixture, which lives with the base split they belong to
        base_set = LabeledSet.concat([pools[role].for_class(c) for c in base]).with_origin(BASE_ORIGIN)
        steps = []
        for t, ids in enumerate(novel, start=1):
            fresh_ids = [c for c in ids if c not in base]
            steps.append(
                LabeledSet.concat([pools[role].for_class(c) for c in fresh_ids]).with_origin(t)
                if fresh_ids
                else LabeledSet.empty(spec.p)
            )
        return base_set, steps

    val_base, val_steps = role_sets("val")
    test_base, test_steps = role_sets("test")

    return Scenario(
        spec=spec,
        gens=gens,
        base_labels=base,
        novel_labels=novel,
        overlap_labels=overlap,
        train_base=LabeledSet.concat(base_train_parts),
        train_steps=train_steps,
        val_base=val_base,
        val_steps=val_steps,
        test_base=test_base,
        test_steps=test_steps,
    )


def scenario_from_rows(rows: LabeledSet, spec: ScenarioSpec) -> Scenario:
    """Build a disjoint scenario from precomputed rows (ingested embeddings).

    Classes are taken in ascending label order: the first n_base_classes are
    the base set, subsequent labels fill the novel steps. Each class's rows
    are shuffled under the spec seed and cut into train/val/test counts.
    """
    if spec.kind != "disjoint":
        raise SpecError("ingested rows only support the disjoint scenario kind")
    classes = rows.classes()
    need = spec.n_base_classes + sum(spec.novel_steps)
    if len(classes) < need:
        raise SpecError(f"need {need} classes, ingested data has {len(classes)}")
    per_split = spec.per_class_train + spec.per_class_val + spec.per_class_test

    cut: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for c in classes[:need]:
        idx = np.flatnonzero(rows.y == c)
        if len(idx) < per_split:
            raise SpecError(f"class {c} has {len(idx)} rows, needs {per_split}")
        perm = idx[rng_for(spec.seed, "ingest", int(c)).permutation(len(idx))]
        a, b = spec.per_class_train, spec.per_class_train + spec.per_class_val
        cut[int(c)] = (perm[:a], perm[a:b], perm[b:per_split])

    base = [int(c) for c in classes[: spec.n_base_classes]]
    novel, start = [], spec.n_base_classes
    for size in spec.novel_steps:
        novel.append([int(c) for c in classes[start : start + size]])
        start += size

    def gather(ids: list[int], role: int, origin: int) -> LabeledSet:
        return LabeledSet.concat([rows.subset(cut[c][role]) for c in ids]).with_origin(origin)

    return Scenario(
        spec=spec,
        gens=[],
        base_labels=base,
        novel_labels=novel,
        overlap_labels=[[] for _ in novel],
        train_base=gather(base, 0, BASE_ORIGIN),
        train_steps=[gather(ids, 0, t) for t, ids in enumerate(novel, start=1)],
        val_base=gather(base, 1, BASE_ORIGIN),
        val_steps=[gather(ids, 1, t) for t, ids in enumerate(novel, start=1)],
        test_base=gather(base, 2, BASE_ORIGIN),
        test_steps=[gather(ids, 2, t) for t, ids in enumerate(novel, start=1)],
    )


def _set_to_dict(s: LabeledSet) -> dict:
    return {
        "n": s.n,
        "p": s.p,
        "x": base64.b64encode(np.ascontiguousarray(s.x).tobytes()).decode("ascii"),
        "y": s.y.tolist(),
        "origin": s.origin.tolist(),
        "comp": s.comp.tolist(),
    }


def _set_from_dict(d: dict) -> LabeledSet:
    x = np.frombuffer(base64.b64decode(d["x"]), dtype=np.float64).reshape(d["n"], d["p"]).copy()
    return LabeledSet(x, np.array(d["y"], dtype=np.int64), np.array(d["origin"], dtype=np.int64),
                      np.array(d["comp"], dtype=np.int64))


def scenario_to_json(sc: Scenario) -> bytes:
    """Canonical, versioned JSON encoding (byte-stable for a fixed spec)."""
    doc = {
        "format": "cilfuse-scenario",
        "version": 1,
        "spec": sc.spec.to_dict(),
        "base_labels": sc.base_labels,
        "novel_labels": sc.novel_labels,
        "overlap_labels": sc.overlap_labels,
        "gens": [
            {
                "label": g.label,
                "p": g.p,
                "components": [
                    {
                        "mean": base64.b64encode(np.ascontiguousarray(c.mean).tobytes()).decode("ascii"),
                        "std": c.std,
                        "weight": c.weight,
                    }
                    for c in g.components
                ],
            }
            for g in sc.gens
        ],
        "sets": {
            "train": {"base": _set_to_dict(sc.train_base), "steps": [_set_to_dict(s) for s in sc.train_steps]},
            "val": {"base": _set_to_dict(sc.val_base), "steps": [_set_to_dict(s) for s in sc.val_steps]},
            "test": {"base": _set_to_dict(sc.test_base), "steps": [_set_to_dict(s) for s in sc.test_steps]},
        },
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def scenario_from_json(blob: bytes) -> Scenario:
    doc = json.loads(blob.decode("utf-8"))
    if doc.get("format") != "cilfuse-scenario" or doc.get("version") != 1:
        raise SpecError("not a version-1 cilfuse scenario document")
    gens = [
        ClassGen(
            g["label"],
            [
                Component(np.frombuffer(base64.b64decode(c["mean"]), dtype=np.float64).copy(), c["std"], c["weight"])
                for c in g["components"]
            ],
            g["p"],
        )
        for g in doc["gens"]
    ]
    sets = doc["sets"]
    return Scenario(
        spec=ScenarioSpec.from_dict(doc["spec"]),
        gens=gens,
        base_labels=doc["base_labels"],
        novel_labels=doc["novel_labels"],
        overlap_labels=doc["overlap_labels"],
        train_base=_set_from_dict(sets["train"]["base"]),
        train_steps=[_set_from_dict(s) for s in sets["train"]["steps"]],
        val_base=_set_from_dict(sets["val"]["base"]),
        val_steps=[_set_from_dict(s) for s in sets["val"]["steps"]],
        test_base=_set_from_dict(sets["test"]["base"]),
        test_steps=[_set_from_dict(s) for s in sets["test"]["steps"]],
    )
