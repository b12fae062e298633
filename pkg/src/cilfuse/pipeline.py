"""Experiment runner: config validation, the full train/eval pipeline per
seed and step, and deterministic report/CSV/SVG emission.

A run is a pure function of the config bytes: identical config + seeds
produce byte-identical report.json.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from . import checkpoint, svgplot
from .backbone import (
    ArchSpec,
    ModelBundle,
    add_branch_stage1,
    extract_features,
    full_finetune_baseline,
    predict_branch,
    pretrain_base,
)
from .data import (
    LabeledSet,
    Scenario,
    ScenarioSpec,
    build_scenario,
    scenario_from_rows,
    scenario_ingredients,
    scenario_to_json,
)
from .errors import ConfigError, ReportError
from .evaluation import EvalReport, grid_search, incremental_accuracy, metrics_report, report_from_predictions
from .featfile import ingest_features
from .fusion import featcat_retrain, logitcat_finetune, logitcat_retrain
from .linalg import SgdConfig
from .memory import ExemplarMemory, select_exemplars
from .routing import Router, routed_predict_batch, routing_accuracy, train_learned_router
from .seeding import derive_seed

METHODS = (
    "finetune",
    "conf-route",
    "learned-route",
    "oracle-route",
    "featcat-rt",
    "logitcat-rt",
    "logitcat-ft",
    "fusion",
)

_DEFAULT_GRID = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]

# stage-II lr/batch are calibrated for the cosine-scaled transfer/routing
# weights: 0.1 leaves them too close to init to move the fused logits at
# desk scale, and the in-phase decay keeps the alpha=1 endpoint stable
_SGD_DEFAULTS = {
    "pretrain": {"base_lr": 0.1, "decay_every": 30, "decay_factor": 0.1, "epochs": 90, "batch_size": 64},
    "stage1": {"base_lr": 0.1, "decay_every": 10, "decay_factor": 0.1, "epochs": 30, "batch_size": 64},
    "stage2": {"base_lr": 0.7, "decay_every": 4, "decay_factor": 0.3, "epochs": 10, "batch_size": 32},
    "router": {"base_lr": 0.7, "decay_every": 4, "decay_factor": 0.3, "epochs": 10, "batch_size": 32},
}
_SGD_OPTIONAL = {"momentum": 0.0, "weight_decay": 0.0}

_SCENARIO_DEFAULTS = {
    "kind": "disjoint",
    "n_base_classes": 40,
    "novel_steps": [8],
    "n_overlap": 0,
    "sample_split": "random",
    "per_class_train": 100,
    "per_class_val": 20,
    "per_class_test": 50,
    "seed": 0,
    "p": 8,
    "class_std": 0.3,
}

_ARCH_DEFAULTS = {"trunk_dims": [64, 64], "branch_dims": [32], "normalize": True, "cosine_scale": 8.0}


def _want(value, kinds, path: str):
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "list": lambda v: isinstance(v, list),
        "dict": lambda v: isinstance(v, dict),
        "null": lambda v: v is None,
    }
    if not any(ok[k](value) for k in kinds):
        raise ConfigError(f"config error at {path}: expected {' or '.join(kinds)}, got {type(value).__name__}")
    return value


def _merge_section(raw: dict, defaults: dict, path: str, kinds: dict) -> dict:
    _want(raw, ["dict"], path)
    for key in raw:
        if key not in defaults:
            raise ConfigError(f"config error at {path}.{key}: unknown key")
    out = {}
    for key, dflt in defaults.items():
        v = raw.get(key, dflt)
        _want(v, kinds[key], f"{path}.{key}")
        out[key] = v
    return out


def validate_config(raw: dict) -> dict:
    """Check types, reject unknown keys (with field paths), fill defaults."""
    _want(raw, ["dict"], "$")
    top_known = {
        "scenario", "arch", "schedules", "methods", "memory_per_class", "pooler",
        "alpha_grid", "beta_grid", "seeds", "output_dir", "warm_start_fusion", "features",
    }
    for key in raw:
        if key not in top_known:
            raise ConfigError(f"config error at $.{key}: unknown key")

    cfg: dict = {}
    scen_kinds = {
        "kind": ["str"], "n_base_classes": ["int"], "novel_steps": ["list"], "n_overlap": ["int"],
        "sample_split": ["str"], "per_class_train": ["int"], "per_class_val": ["int"],
        "per_class_test": ["int"], "seed": ["int"], "p": ["int"], "class_std": ["number"],
    }
    cfg["scenario"] = _merge_section(raw.get("scenario", {}), _SCENARIO_DEFAULTS, "$.scenario", scen_kinds)
    for i, v in enumerate(cfg["scenario"]["novel_steps"]):
        _want(v, ["int"], f"$.scenario.novel_steps[{i}]")

    arch_kinds = {"trunk_dims": ["list"], "branch_dims": ["list"], "normalize": ["bool"], "cosine_scale": ["number"]}
    cfg["arch"] = _merge_section(raw.get("arch", {}), _ARCH_DEFAULTS, "$.arch", arch_kinds)
    for fld in ("trunk_dims", "branch_dims"):
        for i, v in enumerate(cfg["arch"][fld]):
            _want(v, ["int"], f"$.arch.{fld}[{i}]")

    sched_raw = raw.get("schedules", {})
    _want(sched_raw, ["dict"], "$.schedules")
    for key in sched_raw:
        if key not in _SGD_DEFAULTS:
            raise ConfigError(f"config error at $.schedules.{key}: unknown key")
    cfg["schedules"] = {}
    sgd_kinds = {
        "base_lr": ["number"], "decay_every": ["int"], "decay_factor": ["number"],
        "epochs": ["int"], "batch_size": ["int"], "momentum": ["number"], "weight_decay": ["number"],
    }
    for phase, dflt in _SGD_DEFAULTS.items():
        merged = {**dflt, **_SGD_OPTIONAL}
        cfg["schedules"][phase] = _merge_section(sched_raw.get(phase, {}), merged, f"$.schedules.{phase}", sgd_kinds)

    methods = raw.get("methods", ["fusion"])
    _want(methods, ["list"], "$.methods")
    if not methods:
        raise ConfigError("config error at $.methods: method list is empty")
    for i, mth in enumerate(methods):
        if mth not in METHODS:
            raise ConfigError(f"config error at $.methods[{i}]: unknown method {mth!r}")
    cfg["methods"] = list(methods)

    cfg["memory_per_class"] = _want(raw.get("memory_per_class", 10), ["int"], "$.memory_per_class")
    pooler = _want(raw.get("pooler", "max"), ["str"], "$.pooler")
    if pooler not in ("max", "avg"):
        raise ConfigError(f"config error at $.pooler: must be max or avg, got {pooler!r}")
    cfg["pooler"] = pooler

    for fld in ("alpha_grid", "beta_grid"):
        grid = _want(raw.get(fld, list(_DEFAULT_GRID)), ["list"], f"$.{fld}")
        if not grid:
            raise ConfigError(f"config error at $.{fld}: grid is empty")
        for i, v in enumerate(grid):
            _want(v, ["number"], f"$.{fld}[{i}]")
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"config error at $.{fld}[{i}]: {v} outside [0, 1]")
        cfg[fld] = [float(v) for v in grid]

    seeds = _want(raw.get("seeds", [0]), ["list"], "$.seeds")
    for i, s in enumerate(seeds):
        _want(s, ["int"], f"$.seeds[{i}]")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("config error at $.seeds: seeds must be distinct")
    if not seeds:
        raise ConfigError("config error at $.seeds: need at least one seed")
    cfg["seeds"] = list(seeds)

    cfg["output_dir"] = _want(raw.get("output_dir", "out"), ["str"], "$.output_dir")
    cfg["warm_start_fusion"] = _want(raw.get("warm_start_fusion", False), ["bool"], "$.warm_start_fusion")

    features = raw.get("features")
    if features is not None:
        feat_kinds = {"file": ["str"], "manifest": ["str"]}
        features = _merge_section(features, {"file": None, "manifest": None}, "$.features", feat_kinds)
    cfg["features"] = features
    return cfg


def sgd_from(cfg: dict) -> SgdConfig:
    return SgdConfig(**cfg)


def build_scenario_from_config(cfg: dict) -> Scenario:
    spec = ScenarioSpec.from_dict(cfg["scenario"])
    if cfg.get("features"):
        rows = ingest_features(cfg["features"]["file"], cfg["features"]["manifest"])
        return scenario_from_rows(rows, spec)
    needs_reference = spec.sample_split == "cluster" and spec.kind in (
        "overlap_random", "overlap_domain", "full_overlap"
    )
    if not needs_reference:
        return build_scenario(spec)
    # reference model for cluster splitting: trained on all classes' full pools
    _, _, _, _, pools = scenario_ingredients(spec)
    arch = ArchSpec(input_dim=spec.p, **cfg["arch"])
    ref = pretrain_base(pools["train"], arch, sgd_from(cfg["schedules"]["pretrain"]),
                        derive_seed(spec.seed, "reference"))
    return build_scenario(spec, reference_features=lambda x: extract_features(ref, x, "b"))


def _arch_for(cfg: dict, scenario: Scenario) -> ArchSpec:
    arch = dict(cfg["arch"])
    if cfg.get("features"):
        arch["trunk_dims"] = []  # identity trunk: branches read the stored features
    input_dim = scenario.train_base.p
    return ArchSpec(input_dim=input_dim, **arch)


def _report_dict(r: EvalReport) -> dict:
    return r.to_dict()


def _run_seed(cfg: dict, scenario: Scenario, seed: int) -> dict:
    arch = _arch_for(cfg, scenario)
    sched = {k: sgd_from(v) for k, v in cfg["schedules"].items()}
    methods = cfg["methods"]
    m = pretrain_base(scenario.train_base, arch, sched["pretrain"], derive_seed(seed, "pretrain"))

    step0 = metrics_report(lambda x: predict_branch(m, x, "b"), scenario, 0,
                           {"method": "pretrained", "seed": seed, "step": 0})
    memory = select_exemplars(scenario.train_base, cfg["memory_per_class"], derive_seed(seed, "mem", 0))

    out: dict = {"step0": _report_dict(step0), "steps": []}
    inc_reports: dict[str, list[EvalReport]] = {}
    ft_model: ModelBundle | None = None
    final_fusion = None

    for t in range(1, scenario.n_steps + 1):
        novel = scenario.train_steps[t - 1]
        add_branch_stage1(m, novel, sched["stage1"], derive_seed(seed, "stage1", t))
        test = scenario.test_upto(t)
        step_out: dict = {"step": t, "methods": {}}

        def true_split(data: LabeledSet) -> np.ndarray:
            # routing target by class membership; overlap classes count as base
            split = np.zeros(data.n, dtype=np.int64)
            for tt, labels in enumerate(scenario.novel_labels[:t], start=1):
                only = set(labels) - set(scenario.base_labels)
                split[np.isin(data.y, sorted(only))] = tt
            return split

        def record(key: str, rep: EvalReport, extra: dict | None = None):
            entry = {"report": _report_dict(rep)}
            if extra:
                entry.update(extra)
            step_out["methods"][key] = entry
            inc_reports.setdefault(key, []).append(rep)

        for method in methods:
            fingerprint = {"method": method, "seed": seed, "step": t}
            if method == "conf-route":
                router = Router("confidence", None, m.branch_ids)
                rep = metrics_report(lambda x: routed_predict_batch(m, router, x), scenario, t, fingerprint)
                record(method, rep, {"routing_accuracy": routing_accuracy(m, router, test, true_split(test))})
            elif method in ("learned-route", "oracle-route"):
                oracle = method == "oracle-route"
                router = train_learned_router(
                    m, memory, novel, sched["router"], derive_seed(seed, "router", t, method),
                    oracle=oracle, oracle_data=scenario.train_upto(t) if oracle else None,
                )
                rep = metrics_report(lambda x: routed_predict_batch(m, router, x), scenario, t, fingerprint)
                record(method, rep, {"routing_accuracy": routing_accuracy(m, router, test, true_split(test))})
            elif method in ("featcat-rt", "logitcat-rt", "logitcat-ft"):
                trainer = {"featcat-rt": featcat_retrain, "logitcat-rt": logitcat_retrain,
                           "logitcat-ft": logitcat_finetune}[method]
                kwargs = {} if method == "featcat-rt" else {"pooler": cfg["pooler"]}
                predictor = trainer(m, memory, novel, sched["stage2"],
                                    derive_seed(seed, "baseline", t, method), **kwargs)
                record(method, metrics_report(lambda x: predictor.predict(m, x), scenario, t, fingerprint))
            elif method == "finetune":
                src = ft_model if ft_model is not None else m
                ft_model = full_finetune_baseline(src, novel, sched["stage1"], derive_seed(seed, "ft", t))
                record(method, metrics_report(lambda x: predict_branch(ft_model, x, "b"), scenario, t, fingerprint))
            elif method == "fusion":
                grid = grid_search(
                    m, scenario, memory, t, cfg["alpha_grid"], cfg["beta_grid"],
                    derive_seed(seed, "grid", t), cfg["pooler"], sched["stage2"],
                )
                ops = {}
                for op, key in grid.chosen.items():
                    rep = grid.test_reports[op]
                    ops[op] = {"alpha": key[0], "beta": key[1], "report": _report_dict(rep)}
                    inc_reports.setdefault(f"fusion:{op}", []).append(rep)
                cells = {f"{a:g},{b:g}": _report_dict(r) for (a, b), r in sorted(grid.cells.items())}
                step_out["methods"]["fusion"] = {"operating_points": ops, "grid": cells}
                final_fusion = grid.heads[grid.chosen["best-balanced"]]

        out["steps"].append(step_out)
        memory = memory.merged_with(
            select_exemplars(novel, cfg["memory_per_class"], derive_seed(seed, "mem", t),
                             classes=sorted(set(novel.classes()) - set(memory.classes())))
        )

    out["incremental"] = {}
    for key, reps in sorted(inc_reports.items()):
        inc_all, inc_avg = incremental_accuracy([step0] + reps)
        out["incremental"][key] = {"acc_all": inc_all, "acc_avg": inc_avg}
    out["_final_model"] = m
    out["_final_fusion"] = final_fusion
    return out


_METRICS = ("acc_all", "acc_base", "acc_novel", "acc_ovlp", "acc_avg")


def _method_step_reports(seed_out: dict) -> dict[str, dict[int, dict]]:
    """Flatten one seed's results to {method_key: {step: report dict}}."""
    flat: dict[str, dict[int, dict]] = {}
    for step_out in seed_out["steps"]:
        t = step_out["step"]
        for name, entry in step_out["methods"].items():
            if name == "fusion":
                for op, rec in entry["operating_points"].items():
                    flat.setdefault(f"fusion:{op}", {})[t] = rec["report"]
            else:
                flat.setdefault(name, {})[t] = entry["report"]
    return flat


def _aggregate(per_seed: dict) -> dict:
    flats = {seed: _method_step_reports(out) for seed, out in per_seed.items()}
    keys = sorted({k for flat in flats.values() for k in flat})
    steps = sorted({t for flat in flats.values() for by_step in flat.values() for t in by_step})
    agg: dict = {}
    for key in keys:
        agg[key] = {}
        for t in steps:
            stats = {}
            for metric in _METRICS:
                vals = [
                    flat[key][t][metric]
                    for flat in flats.values()
                    if key in flat and t in flat[key] and flat[key][t].get(metric) is not None
                ]
                stats[metric] = (
                    {"mean": float(np.mean(vals)), "std": float(np.std(vals))} if vals else None
                )
            agg[key][str(t)] = stats
    return agg


def _round_tree(obj, nd: int = 4):
    if isinstance(obj, float):
        return round(obj, nd)
    if isinstance(obj, dict):
        return {k: _round_tree(v, nd) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round_tree(v, nd) for v in obj]
    return obj


def run_experiment(cfg: dict, output_dir: Path | str) -> dict:
    """Execute the configured pipeline and write all artifacts.

    Returns the report dict (already rounded, as serialized to report.json).
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    try:
        scenario = build_scenario_from_config(cfg)
        per_seed: dict[str, dict] = {}
        models: dict[int, tuple] = {}
        for seed in cfg["seeds"]:
            seed_out = _run_seed(cfg, scenario, seed)
            models[seed] = (seed_out.pop("_final_model"), seed_out.pop("_final_fusion"))
            per_seed[str(seed)] = seed_out
        report = {
            "format": "cilfuse-report",
            "version": 1,
            "config": cfg,
            "scenario_classes": len(scenario.all_labels()),
            "per_seed": per_seed,
            "aggregate": _aggregate(per_seed),
        }
        report = _round_tree(report)
        (output_dir / "report.json").write_bytes(
            json.dumps(report, sort_keys=True, indent=2).encode("utf-8") + b"\n"
        )
        (output_dir / "scenario.json").write_bytes(scenario_to_json(scenario))
        ckpt_dir = output_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        for seed, (model, fusion) in models.items():
            checkpoint.save_model(model, ckpt_dir / f"seed{seed}.cilm", fusion=fusion)
        write_tables_and_plots(report, output_dir)
        return report
    except Exception as exc:
        manifest = {"error": str(exc), "type": type(exc).__name__}
        (output_dir / "error_manifest.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        raise


def _csv_value(v) -> str:
    return "" if v is None else f"{v:.4f}"


def write_tables_and_plots(report: dict, output_dir: Path | str) -> list[str]:
    """Render metrics.csv and the SVG plots from a report dict."""
    output_dir = Path(output_dir)
    per_seed = report["per_seed"]
    rows = []
    header = ["method", "operating_point", "seed", "step", "acc_all", "acc_base", "acc_novel", "acc_ovlp", "acc_avg"]
    for seed in sorted(per_seed, key=int):
        flat = _method_step_reports(per_seed[seed])
        for key in sorted(flat):
            method, _, op = key.partition(":")
            for t in sorted(flat[key]):
                rep = flat[key][t]
                rows.append([method, op, seed, str(t)] + [_csv_value(rep.get(mx)) for mx in _METRICS])
    for key in sorted(report["aggregate"]):
        method, _, op = key.partition(":")
        for t in sorted(report["aggregate"][key], key=int):
            stats = report["aggregate"][key][t]
            for stat in ("mean", "std"):
                rows.append(
                    [method, op, stat, t]
                    + [_csv_value(stats[mx][stat] if stats[mx] else None) for mx in _METRICS]
                )
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    (output_dir / "metrics.csv").write_text(buf.getvalue(), encoding="utf-8")

    plot_dir = output_dir / "plots"
    plot_dir.mkdir(exist_ok=True)
    written = ["metrics.csv"]

    # per-step overall accuracy, mean across seeds, per method key
    agg = report["aggregate"]
    series = []
    step0_vals = [per_seed[s]["step0"]["acc_all"] for s in per_seed]
    step0_mean = float(np.mean(step0_vals))
    for key in sorted(agg):
        xs, ys = [0.0], [step0_mean]
        for t in sorted(agg[key], key=int):
            if agg[key][t]["acc_all"]:
                xs.append(float(t))
                ys.append(agg[key][t]["acc_all"]["mean"])
        series.append((key, xs, ys))
    if series:
        svg = svgplot.line_plot(series, "Accuracy over incremental steps", "step", "Acc_all")
        (plot_dir / "per_step_acc_all.svg").write_text(svg, encoding="utf-8")
        written.append("plots/per_step_acc_all.svg")

    # alpha/beta sweep from the final step's validation grid (fusion only)
    grids = []
    for seed in per_seed:
        steps = per_seed[seed]["steps"]
        if steps and "fusion" in steps[-1]["methods"]:
            grids.append(steps[-1]["methods"]["fusion"]["grid"])
    if grids:
        cells: dict[tuple[float, float], dict[str, list[float]]] = {}
        for grid in grids:
            for cell_key, rep in grid.items():
                a, b = (float(v) for v in cell_key.split(","))
                for metric in ("acc_all", "acc_base", "acc_novel"):
                    if rep.get(metric) is not None:
                        cells.setdefault((a, b), {}).setdefault(metric, []).append(rep[metric])
        for metric in ("acc_all", "acc_base", "acc_novel"):
            alphas = sorted({a for a, _ in cells})
            series = []
            for a in alphas:
                betas = sorted({b for aa, b in cells if aa == a and metric in cells[(a, b)]})
                if betas:
                    ys = [float(np.mean(cells[(a, b)][metric])) for b in betas]
                    series.append((f"alpha={a:g}", [float(b) for b in betas], ys))
            if series:
                svg = svgplot.line_plot(series, f"Validation {metric} vs beta", "beta", metric)
                name = f"plots/sweep_{metric}.svg"
                (plot_dir / f"sweep_{metric}.svg").write_text(svg, encoding="utf-8")
                written.append(name)
    return written


def render_report(output_dir: Path | str) -> list[str]:
    """Re-render tables and plots from an existing run directory."""
    output_dir = Path(output_dir)
    path = output_dir / "report.json"
    if not path.exists():
        raise ReportError(f"missing artifact: {path}")
    report = json.loads(path.read_text(encoding="utf-8"))
    if report.get("format") != "cilfuse-report":
        raise ReportError(f"{path} is not a cilfuse report")
    return write_tables_and_plots(report, output_dir)
