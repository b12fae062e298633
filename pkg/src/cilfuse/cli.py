"""Command-line front end.

Subcommands: gen-data, pretrain, run, grid, report, ingest. Config values
come from a JSON file; ``--set dotted.path=value`` flags override individual
fields (flag over file).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import checkpoint, pipeline
from .backbone import ArchSpec, pretrain_base
from .data import ScenarioSpec, build_scenario, scenario_to_json
from .errors import ConfigError, FormatError, ReportError, SpecError
from .featfile import ingest_features
from .seeding import derive_seed


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config error: not valid JSON ({exc})")


def _apply_overrides(raw: dict, sets: list[str], output_dir: str | None, seeds: str | None) -> dict:
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"config error: --set expects dotted.path=value, got {item!r}")
        path, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value  # bare strings are convenient on the command line
        node = raw
        keys = path.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"config error at {path}: cannot descend into a non-object")
        node[keys[-1]] = parsed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    if seeds is not None:
        raw["seeds"] = [int(s) for s in seeds.split(",") if s]
    return raw


def _add_config_args(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file")
    sub.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                     help="override a config field (repeatable), e.g. --set scenario.seed=3")
    sub.add_argument("--output-dir", help="override output_dir")
    sub.add_argument("--seeds", help="override seeds, comma-separated")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="cilfuse", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    for name, desc in (
        ("run", "run the full pipeline and write all artifacts"),
        ("grid", "run the fusion grid search only"),
        ("pretrain", "pretrain the base model and save a checkpoint"),
        ("gen-data", "emit the scenario JSON for a config"),
    ):
        sub = subs.add_parser(name, help=desc)
        _add_config_args(sub)
        if name == "pretrain":
            sub.add_argument("--out", required=True, help="checkpoint path")
        if name == "gen-data":
            sub.add_argument("--out", required=True, help="scenario JSON path")

    rep = subs.add_parser("report", help="re-render CSV/plots from report.json")
    rep.add_argument("output_dir")

    ing = subs.add_parser("ingest", help="validate a feature file against its manifest")
    ing.add_argument("file")
    ing.add_argument("manifest")

    args = parser.parse_args(argv)
    try:
        if args.command == "ingest":
            rows = ingest_features(args.file, args.manifest)
            print(f"ok: {rows.n} rows, {rows.p} features, {len(rows.classes())} classes")
            return 0
        if args.command == "report":
            for name in pipeline.render_report(args.output_dir):
                print(f"wrote {name}")
            return 0

        raw = _apply_overrides(_load_config(args.config), args.set, args.output_dir, args.seeds)
        if args.command == "grid":
            raw["methods"] = ["fusion"]
        cfg = pipeline.validate_config(raw)

        if args.command == "gen-data":
            scenario = pipeline.build_scenario_from_config(cfg)
            Path(args.out).write_bytes(scenario_to_json(scenario))
            print(f"wrote {args.out}")
            return 0
        if args.command == "pretrain":
            scenario = pipeline.build_scenario_from_config(cfg)
            arch = pipeline._arch_for(cfg, scenario)
            seed = cfg["seeds"][0]
            m = pretrain_base(scenario.train_base, arch,
                              pipeline.sgd_from(cfg["schedules"]["pretrain"]),
                              derive_seed(seed, "pretrain"))
            checkpoint.save_model(m, args.out)
            print(f"wrote {args.out}")
            return 0

        pipeline.run_experiment(cfg, cfg["output_dir"])
        print(f"wrote artifacts to {cfg['output_dir']}")
        return 0
    except (ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # runtime failure: error manifest already written by the runner
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
