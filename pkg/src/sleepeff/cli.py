"""Command-line entry point: ``sleepeff <command> --config run.json``.

Exit codes: 0 success, 1 runtime or IO failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from . import dataset as ds
from . import experiment as ex
from . import forest as rf
from . import neuralnet as nn
from . import synthdata
from .errors import PipelineError

logger = logging.getLogger("sleepeff")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

CONFIG_KEYS = {
    "schema", "data", "synth", "split", "models", "train", "forest",
    "importance_k", "n_jobs", "output_dir", "figures",
}
DATA_KEYS = {"merged", "activity", "sleep", "survey"}
SPLIT_KEYS = {"fraction", "seed", "by_participant"}
MODEL_KEYS = {"id", "train", "forest"}


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling


def _check_keys(payload, allowed, where):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def load_config(path: Optional[str]) -> tuple[dict, Path]:
    """Parse and validate a run config; relative paths resolve against its folder."""
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    try:
        payload = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    _check_keys(payload, CONFIG_KEYS, "config")
    if "data" in payload:
        _check_keys(payload["data"], DATA_KEYS, "data")
    if "split" in payload:
        _check_keys(payload["split"], SPLIT_KEYS, "split")
    for m in payload.get("models", []):
        _check_keys(m, MODEL_KEYS, "models[]")
        if "id" not in m:
            raise ConfigError("every models[] entry needs an id")
    return payload, p.resolve().parent


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _schema(cfg, base) -> ds.FeatureSchema:
    if "schema" in cfg:
        return ds.FeatureSchema.load(_resolve(base, cfg["schema"]))
    return ds.nethealth_schema()


def _synth_config(cfg, schema, seed_override=None) -> synthdata.SynthConfig:
    payload = dict(cfg.get("synth", {}))
    if seed_override is not None:
        payload["seed"] = seed_override
    try:
        return synthdata.SynthConfig.from_dict(payload, schema=schema)
    except PipelineError as exc:
        raise ConfigError(str(exc)) from None


def _model_configs(cfg, only: Optional[str]) -> list[ex.ModelConfig]:
    try:
        default_train = nn.TrainConfig.from_dict(cfg.get("train", {}))
        default_forest = rf.ForestConfig.from_dict(cfg.get("forest", {}))
        if "n_jobs" in cfg and "n_jobs" not in cfg.get("forest", {}):
            default_forest.n_jobs = int(cfg["n_jobs"])
        entries = cfg.get("models") or [{"id": m} for m in ex.MODEL_IDS]
        models = []
        for entry in entries:
            model_id = entry["id"]
            if model_id == ex.FOREST_ID:
                fc = {**default_forest.to_dict(), **entry.get("forest", {})}
                models.append(ex.ModelConfig(model_id, forest=rf.ForestConfig.from_dict(fc)))
            else:
                tc = {**default_train.to_dict(), **entry.get("train", {})}
                models.append(ex.ModelConfig(model_id, train=nn.TrainConfig.from_dict(tc)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if only:
        wanted = [m.strip() for m in only.split(",") if m.strip()]
        unknown = [m for m in wanted if m not in ex.MODEL_IDS]
        if unknown:
            raise ConfigError(f"unknown model ids: {unknown}")
        by_id = {m.id: m for m in models}
        models = [by_id.get(m) or ex.default_models([m], default_train, default_forest)[0]
                  for m in wanted]
    return models


def _split(cfg, seed_override) -> dict:
    sp = {"fraction": 0.2, "seed": 42, "by_participant": False, **cfg.get("split", {})}
    if seed_override is not None:
        sp["seed"] = seed_override
    return sp


def _out_dir(args, cfg, base) -> Path:
    if args.out:
        return Path(args.out)
    if "output_dir" in cfg:
        return _resolve(base, cfg["output_dir"])
    raise ConfigError("no output directory: pass --out or set output_dir in the config")


def _load_table(cfg, base, schema) -> tuple[ds.MergedTable, dict]:
    data = cfg.get("data")
    if data:
        paths = {k: _resolve(base, v) for k, v in data.items()}
        return ds.preprocess(schema, **paths)
    table, truth = synthdata.generate(_synth_config(cfg, schema))
    return table, {"source": "synth", "rows": len(table), "clip_rate": truth.clip_rate}


def _write_resolved(out: Path, command: str, cfg: dict, base: Path, args, models=None):
    """Write ``resolved_config.json``: a standalone config that replays this run,
    with command-line overrides folded in and every path made absolute."""
    resolved = json.loads(json.dumps(cfg))
    if "schema" in resolved:
        resolved["schema"] = str(_resolve(base, resolved["schema"]).resolve())
    if "data" in resolved:
        resolved["data"] = {k: str(_resolve(base, v).resolve()) for k, v in resolved["data"].items()}
    if args.seed is not None:
        if command == "synth":
            resolved["synth"] = {**resolved.get("synth", {}), "seed": args.seed}
        else:
            resolved["split"] = {**resolved.get("split", {}), "seed": args.seed}
    if args.k is not None:
        resolved["importance_k"] = args.k
    if models is not None:
        resolved["models"] = [
            {"id": m.id, "forest": m.forest.to_dict()} if m.is_forest
            else {"id": m.id, "train": m.train.to_dict()}
            for m in models
        ]
    resolved["output_dir"] = str(out.resolve())
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2) + "\n",
                                             encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg, base) -> int:
    schema = _schema(cfg, base)
    sc = _synth_config(cfg, schema, args.seed)
    out = _out_dir(args, cfg, base)
    table, truth = synthdata.generate(sc)
    paths = synthdata.write_dataset(out, table, truth)
    _write_resolved(out, "synth", cfg, base, args)
    print(f"wrote {len(table)} rows ({table.schema.input_length} features) to {paths['data']}")
    print(f"target mean {table.target.mean():.6f}, clip rate {truth.clip_rate:.4%}")
    return EXIT_OK


def cmd_preprocess(args, cfg, base) -> int:
    schema = _schema(cfg, base)
    out = _out_dir(args, cfg, base)
    table, summary = _load_table(cfg, base, schema)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "merged.csv", decode=True)
    schema.save(out / "schema.json")
    summary["dataset_fingerprint"] = table.fingerprint()
    summary["schema_fingerprint"] = schema.fingerprint()
    (out / "preprocess.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    _write_resolved(out, "preprocess", cfg, base, args)
    print(f"{len(table)} complete rows, {schema.input_length} features -> {out / 'merged.csv'}")
    return EXIT_OK


def _run_suite(args, cfg, base, command, figures=True, checkpoints=True) -> ex.ExperimentReport:
    schema = _schema(cfg, base)
    models = _model_configs(cfg, args.models)
    sp = _split(cfg, args.seed)
    out = _out_dir(args, cfg, base)
    table, summary = _load_table(cfg, base, schema)
    k = args.k if getattr(args, "k", None) else cfg.get("importance_k", 20)
    report = ex.run_suite(
        table, sp["seed"], models, test_fraction=sp["fraction"],
        by_participant=sp["by_participant"], importance_k=k,
    )
    report.manifest["preprocess"] = summary
    ex.emit_report(report, out, checkpoints=checkpoints)
    if figures and cfg.get("figures", True):
        from .plotting import render_report

        render_report(report, out)
    _write_resolved(out, command, cfg, base, args, models)
    return report


def cmd_train(args, cfg, base) -> int:
    report = _run_suite(args, cfg, base, "train", figures=False)
    for row in report.rows:
        train_m = report.manifest["train_metrics"][row.model]
        print(f"{row.model}: train_mae={train_m['mae']:.6f} test_mae={row.mae:.6f}")
    return EXIT_OK


def cmd_suite(args, cfg, base) -> int:
    report = _run_suite(args, cfg, base, "suite")
    print(ex.report_table(report))
    return EXIT_OK


def cmd_importance(args, cfg, base) -> int:
    schema = _schema(cfg, base)
    sp = _split(cfg, args.seed)
    out = _out_dir(args, cfg, base)
    table, _ = _load_table(cfg, base, schema)
    k = args.k or cfg.get("importance_k", 20)
    forest_cfg = _model_configs(cfg, "RF")[0].forest
    report = ex.compute_importance(
        table, sp["seed"], forest_cfg, k, test_fraction=sp["fraction"],
        by_participant=sp["by_participant"],
    )
    ex.emit_importance(report, out)
    if cfg.get("figures", True):
        from .plotting import plot_importance

        plot_importance(report, out / "importance.png")
    _write_resolved(out, "importance", cfg, base, args)
    for rank, (name, score) in enumerate(report.entries, 1):
        print(f"{rank:>3}  {name}  {score:.6f}")
    return EXIT_OK


def cmd_ablate(args, cfg, base) -> int:
    schema = _schema(cfg, base)
    models = _model_configs(cfg, args.models)
    sp = _split(cfg, args.seed)
    out = _out_dir(args, cfg, base)
    table, _ = _load_table(cfg, base, schema)
    k = args.k or cfg.get("importance_k", 20)
    full = ex.run_suite(table, sp["seed"], models, test_fraction=sp["fraction"],
                        by_participant=sp["by_participant"], importance_k=k)
    if full.importance is not None:
        importance = full.importance
    else:
        forest_cfg = _model_configs(cfg, "RF")[0].forest
        importance = ex.compute_importance(table, sp["seed"], forest_cfg, k,
                                           test_fraction=sp["fraction"],
                                           by_participant=sp["by_participant"])
    ablation = ex.run_reduced_feature(
        table, importance, k, models, sp["seed"], full_report=full,
        test_fraction=sp["fraction"], by_participant=sp["by_participant"],
    )
    ex.emit_ablation(ablation, out)
    ex.emit_report(ablation.full, out / "full", checkpoints=False)
    ex.emit_report(ablation.reduced, out / "reduced", checkpoints=False)
    if cfg.get("figures", True):
        from .plotting import plot_ablation

        plot_ablation(ablation, out / "ablation.png")
    _write_resolved(out, "ablate", cfg, base, args, models)
    print(ex.format_table(
        [(r.model, r.mae_full, r.mae_reduced, r.delta) for r in ablation.rows],
        ex.ABLATION_HEADER,
    ))
    for model_id, reason in ablation.skipped.items():
        print(f"skipped {model_id}: {reason}")
    return EXIT_OK


def cmd_report(args, cfg, base) -> int:
    out = _out_dir(args, cfg, base)
    path = out / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"no report.json in {out}")
    report = ex.load_report(path)
    ex.emit_report(report, out, checkpoints=False)
    if cfg.get("figures", True):
        from .plotting import render_report

        render_report(report, out)
    print(ex.report_table(report))
    return EXIT_OK


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset with planted effects"),
    "preprocess": (cmd_preprocess, "load, merge, encode and filter the input files"),
    "train": (cmd_train, "train models and write checkpoints and histories"),
    "suite": (cmd_suite, "train all models on one split and write the MAE/MSE report"),
    "importance": (cmd_importance, "rank features by forest importance"),
    "ablate": (cmd_ablate, "retrain on the top-k features and compare"),
    "report": (cmd_report, "re-print and re-render an existing report"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sleepeff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=str, default=None, help="run config JSON")
        cmd.add_argument("--out", type=str, default=None, help="output directory")
        cmd.add_argument("--models", type=str, default=None, help="comma-separated model ids")
        cmd.add_argument("--k", type=int, default=None, help="number of top features")
        cmd.add_argument("--seed", type=int, default=None,
                         help="overrides the split seed (the generator seed for synth)")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.k is not None and args.k < 1:
        print("error: --k must be a positive integer", file=sys.stderr)
        return EXIT_CONFIG
    handler = COMMANDS[args.command][0]
    try:
        cfg, base = load_config(args.config)
        return handler(args, cfg, base)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.ModelFailure as exc:
        print(f"model {exc.model_id} failed: {exc.cause}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, PipelineError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
