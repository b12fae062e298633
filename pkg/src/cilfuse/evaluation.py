"""Metrics, the alpha/beta grid search, and the freeze-vs-finetune sweep.

Split accuracies follow the overlap regime: with no overlap the average is
taken over the base split and every novel step's split; with partial overlap
it is (base + novel + overlap)/3; with full overlap (base + overlap)/2.
Empty splits are reported as absent and excluded from the average, never as
zero.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .backbone import ArchSpec, ModelBundle, all_branch_features, finetune_k_blocks, pretrain_base
from .data import LabeledSet, Scenario, ScenarioSpec, build_scenario
from .errors import SpecError
from .fusion import FusionHead, fused_predict_batch, init_fusion, train_fusion
from .linalg import Mat, SgdConfig
from .memory import ExemplarMemory
from .seeding import derive_seed


def worker_count() -> int:
    """Parallel worker bound: CILFUSE_THREADS, defaulting to machine parallelism."""
    env = os.environ.get("CILFUSE_THREADS", "").strip()
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise SpecError(f"CILFUSE_THREADS must be an integer, got {env!r}") from exc
        if n < 1:
            raise SpecError("CILFUSE_THREADS must be >= 1")
        return n
    return os.cpu_count() or 1


@dataclass
class EvalReport:
    acc_all: float
    acc_avg: float
    acc_base: float | None = None
    acc_novel: float | None = None
    acc_ovlp: float | None = None
    per_split: dict[str, float] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "acc_all": self.acc_all,
            "acc_avg": self.acc_avg,
            "acc_base": self.acc_base,
            "acc_novel": self.acc_novel,
            "acc_ovlp": self.acc_ovlp,
            "per_split": dict(self.per_split),
            "counts": dict(self.counts),
            "config": dict(self.config),
        }


def accuracy(predict: Callable[[Mat], np.ndarray], s: LabeledSet) -> float:
    """Fraction of samples whose predicted global class equals the label."""
    if s.n == 0:
        raise SpecError("accuracy over an empty subset is undefined")
    return float((np.asarray(predict(s.x)) == s.y).mean())


def average_split_accuracies(parts: list[float]) -> float:
    """The aggregate split average: plain mean of the present split accuracies."""
    if not parts:
        raise SpecError("no split accuracies to average")
    return float(np.mean(parts))


def report_from_predictions(
    pred: np.ndarray, data: LabeledSet, scenario: Scenario, step: int, config: dict | None = None
) -> EvalReport:
    """Assemble all split metrics from precomputed predictions on ``data``."""
    pred = np.asarray(pred, dtype=np.int64)
    if len(pred) != data.n:
        raise SpecError("predictions are not aligned with the evaluation set")
    correct = pred == data.y

    overlap = set(scenario.overlap_upto(step))
    base_only = set(scenario.base_labels) - overlap
    novel_sets = [set(s) - set(scenario.base_labels) for s in scenario.novel_labels[:step]]
    novel_only = set().union(*novel_sets) if novel_sets else set()

    def sub_acc(labels: set[int]) -> tuple[float | None, int]:
        mask = np.isin(data.y, sorted(labels))
        n = int(mask.sum())
        return (float(correct[mask].mean()) if n else None, n)

    acc_base, n_base = sub_acc(base_only)
    acc_novel, n_novel = sub_acc(novel_only)
    acc_ovlp, n_ovlp = sub_acc(overlap)

    per_split: dict[str, float] = {}
    counts = {"all": data.n, "base": n_base, "novel": n_novel, "ovlp": n_ovlp}
    if acc_base is not None:
        per_split["b"] = acc_base
    for t, labels in enumerate(novel_sets, start=1):
        a, n = sub_acc(labels)
        counts[f"n{t}"] = n
        if a is not None:
            per_split[f"n{t}"] = a

    if overlap:
        parts = [a for a in (acc_base, acc_novel, acc_ovlp) if a is not None]
    else:
        parts = list(per_split.values())
    acc_avg = average_split_accuracies(parts) if parts else float(correct.mean())

    return EvalReport(
        acc_all=float(correct.mean()),
        acc_avg=acc_avg,
        acc_base=acc_base,
        acc_novel=acc_novel,
        acc_ovlp=acc_ovlp,
        per_split=per_split,
        counts=counts,
        config=config or {},
    )


def metrics_report(
    predict: Callable[[Mat], np.ndarray],
    scenario: Scenario,
    step: int,
    config: dict | None = None,
    subset: str = "test",
) -> EvalReport:
    """Evaluate a predictor over all classes seen up to ``step``."""
    data = scenario.test_upto(step) if subset == "test" else scenario.val_upto(step)
    return report_from_predictions(np.asarray(predict(data.x)), data, scenario, step, config)


def incremental_accuracy(reports: list[EvalReport]) -> tuple[float, float]:
    """Means of acc_all and acc_avg over all steps, including step 0."""
    if not reports:
        raise SpecError("need at least one per-step report")
    return (
        float(np.mean([r.acc_all for r in reports])),
        float(np.mean([r.acc_avg for r in reports])),
    )


OPERATING_POINTS = ("best-acc-all", "best-acc-avg", "best-balanced")


def _objective(op: str, r: EvalReport) -> float:
    if op == "best-acc-all":
        return r.acc_all
    if op == "best-acc-avg":
        return r.acc_avg
    return 0.5 * (r.acc_all + r.acc_avg)


def select_operating_points(cells: dict[tuple[float, float], EvalReport]) -> dict[str, tuple[float, float]]:
    """Argmax per operating point; ties go to the lexicographically smallest cell."""
    if not cells:
        raise SpecError("empty grid")
    ordered = sorted(cells)
    chosen = {}
    for op in OPERATING_POINTS:
        best, best_val = None, -np.inf
        for key in ordered:
            v = _objective(op, cells[key])
            if v > best_val:
                best, best_val = key, v
        chosen[op] = best
    return chosen


@dataclass
class GridResult:
    cells: dict[tuple[float, float], EvalReport]
    chosen: dict[str, tuple[float, float]]
    test_reports: dict[str, EvalReport]
    heads: dict[tuple[float, float], FusionHead] = field(default_factory=dict)


def grid_search(
    m: ModelBundle,
    scenario: Scenario,
    memory: ExemplarMemory,
    step: int,
    alpha_grid: list[float],
    beta_grid: list[float],
    seed: int,
    pooler: str,
    cfg: SgdConfig,
    per_class: int | None = None,
    parallel: bool = True,
) -> GridResult:
    """Train one fusion head per (alpha, beta) cell and pick operating points.

    All cells share the stage-I model and the validation/test feature caches;
    each cell derives its own RNG stream, so parallel and serial execution
    produce identical results.
    """
    if not alpha_grid or not beta_grid:
        raise SpecError("alpha and beta grids must be non-empty")
    alphas, betas = sorted(alpha_grid), sorted(beta_grid)
    novel = scenario.train_steps[step - 1]
    val = scenario.val_upto(step)
    test = scenario.test_upto(step)
    val_feats = all_branch_features(m, val.x)
    test_feats = all_branch_features(m, test.x)

    def run_cell(ai: int, bi: int):
        a, b = alphas[ai], betas[bi]
        cell_seed = derive_seed(seed, "cell", ai, bi)
        f = init_fusion(m, pooler, a, b, cell_seed)
        train_fusion(m, f, memory, novel, cfg, cell_seed, per_class=per_class)
        pred = fused_predict_batch(m, f, val.x, feats=val_feats)
        rep = report_from_predictions(
            pred, val, scenario, step,
            {"method": "fusion", "alpha": a, "beta": b, "pooler": pooler, "seed": seed, "step": step},
        )
        return (a, b), rep, f

    keys = [(ai, bi) for ai in range(len(alphas)) for bi in range(len(betas))]
    cells: dict[tuple[float, float], EvalReport] = {}
    heads: dict[tuple[float, float], FusionHead] = {}
    if parallel and worker_count() > 1 and len(keys) > 1:
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            for key, rep, f in pool.map(lambda kb: run_cell(*kb), keys):
                cells[key], heads[key] = rep, f
    else:
        for ai, bi in keys:
            key, rep, f = run_cell(ai, bi)
            cells[key], heads[key] = rep, f

    chosen = select_operating_points(cells)
    test_reports = {}
    for op, key in chosen.items():
        f = heads[key]
        pred = fused_predict_batch(m, f, test.x, feats=test_feats)
        test_reports[op] = report_from_predictions(
            pred, test, scenario, step,
            {"method": "fusion", "operating_point": op, "alpha": key[0], "beta": key[1],
             "pooler": pooler, "seed": seed, "step": step},
        )
    return GridResult(cells, chosen, test_reports, heads)


def prelim_sweep(
    template: ScenarioSpec,
    base_counts: list[int],
    arch: ArchSpec,
    pretrain_cfg: SgdConfig,
    finetune_cfg: SgdConfig,
    seed: int,
) -> dict:
    """Novel accuracy of finetuning the top k blocks, per base-class count.

    Column k = 0 is the frozen-representation case; columns run 0..n_blocks,
    so there are block count + 1 of them.
    """
    rows = []
    k_values = None
    for n_base in base_counts:
        spec = ScenarioSpec(**{**template.to_dict(), "n_base_classes": n_base})
        scenario = build_scenario(spec)
        m = pretrain_base(scenario.train_base, arch, pretrain_cfg, derive_seed(seed, "pre", n_base))
        chain_len = len(m.trunk) + len(m.branches["b"].blocks)
        k_values = list(range(chain_len + 1))
        novel_train = scenario.train_steps[0]
        novel_test = scenario.test_steps[0]
        accs = []
        for k in k_values:
            _, acc = finetune_k_blocks(
                m, novel_train, k, finetune_cfg, derive_seed(seed, "ft", n_base, k), eval_set=novel_test
            )
            accs.append(acc)
        rows.append(accs)
    return {"base_counts": list(base_counts), "k_blocks": k_values, "novel_acc": rows}


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise SpecError("spearman needs two equal-length sequences of >= 2 values")

    def ranks(v):
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            r[order[i : j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        return r

    rx, ry = ranks(x), ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0:
        return 0.0
    return float((rx * ry).sum() / denom)
