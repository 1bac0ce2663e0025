"""Experiment orchestration: shared split, model training, metrics, importance
ranking, reduced-feature ablation and report files."""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import forest as rf
from . import neuralnet as nn
from .dataset import MergedTable, Split, split_indices, standardize
from .errors import EmptyInput, KTooLarge, LengthMismatch, PipelineError, ShapeError

logger = logging.getLogger(__name__)

BASELINE_ID = "baseline-mean"
FOREST_ID = "RF"
MODEL_IDS = nn.ARCHITECTURE_IDS + (FOREST_ID,)

# Reference test MAEs on the real NetHealth data; informational only.
PUBLISHED_MAE = {
    "A1": 0.0876,
    "A2": 0.0357,
    "A3": 0.0429,
    "A4": 0.0844,
    "A5": 0.0679,
    "A6": 0.9361,
    "RF": 0.0282,
}
PUBLISHED_MAE_TOLERANCE = 0.02


# ---------------------------------------------------------------------------
# metrics


def _pair(predictions, targets):
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if len(p) != len(t):
        raise LengthMismatch(f"{len(p)} predictions but {len(t)} targets")
    if len(p) == 0:
        raise EmptyInput("metrics need at least one prediction")
    return p, t


def mae(predictions, targets) -> float:
    p, t = _pair(predictions, targets)
    return float(np.mean(np.abs(p - t)))


def mse(predictions, targets) -> float:
    p, t = _pair(predictions, targets)
    e = p - t
    return float(np.mean(e * e))


@dataclass(frozen=True)
class MetricPair:
    mae: float
    mse: float

    @classmethod
    def of(cls, predictions, targets) -> "MetricPair":
        return cls(mae(predictions, targets), mse(predictions, targets))


def baseline_mean(train: MergedTable, test: MergedTable) -> MetricPair:
    """Metrics of always predicting the training-target mean."""
    if len(train) == 0:
        raise EmptyInput("baseline needs a non-empty training table")
    return MetricPair.of(np.full(len(test), train.target.mean()), test.target)


# ---------------------------------------------------------------------------
# model configuration


@dataclass
class ModelConfig:
    id: str
    train: Optional[nn.TrainConfig] = None
    forest: Optional[rf.ForestConfig] = None

    def __post_init__(self):
        if self.id == FOREST_ID:
            self.forest = self.forest or rf.ForestConfig()
        elif self.id in nn.ARCHITECTURE_IDS:
            self.train = self.train or nn.TrainConfig()
        else:
            raise ValueError(f"unknown model id {self.id!r}; expected one of {MODEL_IDS}")

    @property
    def is_forest(self) -> bool:
        return self.id == FOREST_ID

    def to_dict(self) -> dict:
        cfg = self.forest if self.is_forest else self.train
        return {"id": self.id, "config": cfg.to_dict()}

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        model_id = payload["id"]
        cfg = payload.get("config", {})
        if model_id == FOREST_ID:
            return cls(model_id, forest=rf.ForestConfig.from_dict(cfg))
        return cls(model_id, train=nn.TrainConfig.from_dict(cfg))


def default_models(
    ids: Sequence[str] = MODEL_IDS,
    train: Optional[nn.TrainConfig] = None,
    forest: Optional[rf.ForestConfig] = None,
) -> list[ModelConfig]:
    out = []
    for model_id in ids:
        if model_id == FOREST_ID:
            out.append(ModelConfig(model_id, forest=forest))
        else:
            out.append(ModelConfig(model_id, train=train))
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class ReportRow:
    model: str
    mae: float
    mse: float


@dataclass
class ImportanceReport:
    entries: list  # [(name, score)], descending
    k: int
    indices: list = field(default_factory=list)
    vector: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "top": [
                {"rank": r + 1, "feature": name, "index": idx, "importance": score}
                for r, ((name, score), idx) in enumerate(zip(self.entries, self.indices))
            ],
            "importance": self.vector,
            "manifest": self.manifest,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ImportanceReport":
        top = payload["top"]
        return cls(
            entries=[(t["feature"], t["importance"]) for t in top],
            k=payload["k"],
            indices=[t["index"] for t in top],
            vector=list(payload.get("importance", [])),
            manifest=payload.get("manifest", {}),
        )


@dataclass
class ExperimentReport:
    rows: list
    manifest: dict
    histories: dict = field(default_factory=dict)
    fitted: dict = field(default_factory=dict)
    importance: Optional[ImportanceReport] = None

    def row(self, model: str) -> ReportRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    def metrics(self) -> dict:
        return {r.model: (r.mae, r.mse) for r in self.rows}

    def to_dict(self) -> dict:
        return {
            "rows": [{"model": r.model, "mae": r.mae, "mse": r.mse} for r in self.rows],
            "manifest": self.manifest,
            "histories": self.histories,
            "importance": self.importance.to_dict() if self.importance else None,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentReport":
        imp = payload.get("importance")
        return cls(
            rows=[ReportRow(r["model"], r["mae"], r["mse"]) for r in payload["rows"]],
            manifest=payload["manifest"],
            histories=payload.get("histories", {}),
            importance=ImportanceReport.from_dict(imp) if imp else None,
        )


@dataclass
class PairedRow:
    model: str
    mae_full: float
    mae_reduced: float

    @property
    def delta(self) -> float:
        return self.mae_reduced - self.mae_full


@dataclass
class AblationReport:
    rows: list
    full: ExperimentReport
    reduced: ExperimentReport
    k: int
    selected: list
    skipped: dict
    manifest: dict

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "selected_features": self.selected,
            "rows": [
                {"model": r.model, "mae_full": r.mae_full, "mae_reduced": r.mae_reduced,
                 "delta": r.delta}
                for r in self.rows
            ],
            "skipped": self.skipped,
            "manifest": self.manifest,
            "full": self.full.to_dict(),
            "reduced": self.reduced.to_dict(),
        }


# ---------------------------------------------------------------------------
# running


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


@dataclass
class _Prepared:
    split: Split
    train: MergedTable
    test: MergedTable
    train_z: MergedTable
    test_z: MergedTable


def _prepare(table, split_seed, test_fraction, by_participant) -> _Prepared:
    s = split_indices(table, test_fraction, split_seed, by_participant)
    train, test = table.take(s.train_idx), table.take(s.test_idx)
    train_z, test_z, _ = standardize(train, test)
    return _Prepared(s, train, test, train_z, test_z)


def _fit_model(cfg: ModelConfig, prep: _Prepared):
    """Returns (test metrics, train metrics, history, fitted model)."""
    if cfg.is_forest:
        fitted = rf.fit_forest(prep.train_z, cfg.forest)
        test_pred = rf.predict_forest(fitted, prep.test_z)
        train_pred = rf.predict_forest(fitted, prep.train_z)
        history = None
    else:
        spec = nn.build_architecture(cfg.id, prep.train_z.schema.input_length)
        params, history = nn.train(spec, prep.train_z, cfg.train)
        fitted = (spec, params)
        test_pred = nn.predict(spec, params, prep.test_z)
        train_pred = nn.predict(spec, params, prep.train_z)
    return (
        MetricPair.of(test_pred, prep.test.target),
        MetricPair.of(train_pred, prep.train.target),
        history,
        fitted,
    )


class ModelFailure(PipelineError):
    def __init__(self, model_id, cause):
        self.model_id = model_id
        self.cause = cause
        super().__init__(f"model {model_id} failed: {cause}")


def run_suite(
    table: MergedTable,
    split_seed: int = 42,
    models: Optional[Sequence[ModelConfig]] = None,
    *,
    test_fraction: float = 0.2,
    by_participant: bool = False,
    importance_k: int = 20,
    n_jobs: int = 1,
    label: str = "full",
) -> ExperimentReport:
    """Train every model on one shared split and score it on the test rows.

    A baseline-mean row is always appended. When a forest is among the models
    its MDI ranking is attached as ``report.importance``.
    """
    models = list(models) if models is not None else default_models()
    ids = [m.id for m in models]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate model ids in {ids}")
    started = _now()
    prep = _prepare(table, split_seed, test_fraction, by_participant)

    def run(cfg):
        try:
            return _fit_model(cfg, prep)
        except Exception as exc:
            raise ModelFailure(cfg.id, exc) from exc

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, models))
    else:
        results = [run(cfg) for cfg in models]

    rows, histories, fitted, train_metrics = [], {}, {}, {}
    for cfg, (test_m, train_m, history, model) in zip(models, results):
        rows.append(ReportRow(cfg.id, test_m.mae, test_m.mse))
        train_metrics[cfg.id] = {"mae": train_m.mae, "mse": train_m.mse}
        fitted[cfg.id] = model
        if history is not None:
            histories[cfg.id] = history
    base = baseline_mean(prep.train, prep.test)
    rows.append(ReportRow(BASELINE_ID, base.mae, base.mse))
    train_base = baseline_mean(prep.train, prep.train)
    train_metrics[BASELINE_ID] = {"mae": train_base.mae, "mse": train_base.mse}

    manifest = {
        "label": label,
        "package_version": __version__,
        "dataset_fingerprint": table.fingerprint(),
        "schema_fingerprint": table.schema.fingerprint(),
        "n_rows": len(table),
        "n_features": table.schema.input_length,
        "feature_names": table.schema.names,
        "split": {
            "seed": split_seed,
            "test_fraction": test_fraction,
            "by_participant": by_participant,
            "n_train": len(prep.split.train_idx),
            "n_test": len(prep.split.test_idx),
            "partition_hash": prep.split.partition_hash(),
        },
        "models": [m.to_dict() for m in models],
        "train_metrics": train_metrics,
        "importance_k": importance_k,
        "timestamps": {"started": started, "finished": _now()},
    }
    report = ExperimentReport(rows, manifest, histories, fitted)
    if FOREST_ID in fitted:
        k = min(importance_k, table.schema.input_length)
        report.importance = importance_from_forest(fitted[FOREST_ID], table.schema.names, k, manifest)
    return report


def importance_from_forest(forest, names, k, manifest=None) -> ImportanceReport:
    vector = rf.feature_importance(forest)
    indices = rf.top_k_indices(vector, k)
    entries = [(names[i], float(vector[i])) for i in indices]
    link = {}
    if manifest:
        link = {
            "dataset_fingerprint": manifest["dataset_fingerprint"],
            "schema_fingerprint": manifest["schema_fingerprint"],
            "split": manifest["split"],
        }
    return ImportanceReport(entries, k, indices, vector.tolist(), link)


def compute_importance(
    table: MergedTable,
    split_seed: int = 42,
    forest_config: Optional[rf.ForestConfig] = None,
    k: int = 20,
    *,
    test_fraction: float = 0.2,
    by_participant: bool = False,
) -> ImportanceReport:
    """Fit the forest on the training split only and rank its features."""
    p = table.schema.input_length
    if not 1 <= k <= p:
        raise KTooLarge(f"k={k} must lie in [1, {p}]")
    forest_config = forest_config or rf.ForestConfig()
    prep = _prepare(table, split_seed, test_fraction, by_participant)
    forest = rf.fit_forest(prep.train_z, forest_config)
    manifest = {
        "dataset_fingerprint": table.fingerprint(),
        "schema_fingerprint": table.schema.fingerprint(),
        "split": {
            "seed": split_seed,
            "test_fraction": test_fraction,
            "by_participant": by_participant,
            "partition_hash": prep.split.partition_hash(),
        },
        "forest": forest_config.to_dict(),
    }
    return importance_from_forest(forest, table.schema.names, k, manifest)


def run_reduced_feature(
    table: MergedTable,
    importance: ImportanceReport,
    k: int = 20,
    models: Optional[Sequence[ModelConfig]] = None,
    split_seed: int = 42,
    *,
    full_report: Optional[ExperimentReport] = None,
    test_fraction: float = 0.2,
    by_participant: bool = False,
    n_jobs: int = 1,
) -> AblationReport:
    """Retrain on the ``k`` most important features and pair the MAEs with the
    full-feature run.

    Architectures whose layer stack does not fit an input of length ``k`` are
    listed in ``skipped`` instead of being trained.
    """
    p = table.schema.input_length
    if not 1 <= k <= p:
        raise KTooLarge(f"k={k} must lie in [1, {p}]")
    if len(importance.vector) != p:
        raise ShapeError(f"importance covers {len(importance.vector)} features, table has {p}")
    models = list(models) if models is not None else default_models()
    if full_report is None:
        full_report = run_suite(
            table, split_seed, models, test_fraction=test_fraction,
            by_participant=by_participant, n_jobs=n_jobs, importance_k=k,
        )
    selected = rf.top_k_indices(importance.vector, k)
    reduced_table = table.select_features(selected)

    skipped = {}
    feasible = []
    for cfg in models:
        if not cfg.is_forest:
            try:
                nn.build_architecture(cfg.id, k)
            except ShapeError as exc:
                skipped[cfg.id] = f"input length {k} too short: {exc}"
                continue
        feasible.append(cfg)
    reduced = run_suite(
        reduced_table, split_seed, feasible, test_fraction=test_fraction,
        by_participant=by_participant, n_jobs=n_jobs, importance_k=k, label="reduced",
    )

    full_mae = {r.model: r.mae for r in full_report.rows}
    rows = [
        PairedRow(r.model, full_mae[r.model], r.mae)
        for r in reduced.rows
        if r.model in full_mae
    ]
    manifest = {
        "k": k,
        "parent": {
            "dataset_fingerprint": full_report.manifest["dataset_fingerprint"],
            "schema_fingerprint": full_report.manifest["schema_fingerprint"],
            "partition_hash": full_report.manifest["split"]["partition_hash"],
        },
        "reduced_schema_fingerprint": reduced_table.schema.fingerprint(),
        "importance": importance.manifest,
        "selected_features": [table.schema.names[i] for i in sorted(selected)],
    }
    return AblationReport(rows, full_report, reduced, k, sorted(selected), skipped, manifest)


def rerun_from_manifest(table: MergedTable, manifest: dict, n_jobs: int = 1) -> ExperimentReport:
    """Repeat a suite from its manifest; the data must carry the same fingerprint."""
    if table.fingerprint() != manifest["dataset_fingerprint"]:
        raise ValueError("dataset fingerprint differs from the manifest")
    sp = manifest["split"]
    models = [ModelConfig.from_dict(m) for m in manifest["models"]]
    return run_suite(
        table,
        sp["seed"],
        models,
        test_fraction=sp["test_fraction"],
        by_participant=sp["by_participant"],
        importance_k=manifest.get("importance_k", 20),
        n_jobs=n_jobs,
        label=manifest.get("label", "full"),
    )


# ---------------------------------------------------------------------------
# report files

REPORT_HEADER = ("model", "mae", "mse")
ABLATION_HEADER = ("model", "mae_full", "mae_reduced", "delta")
HISTORY_HEADER = ("epoch", "train_mae", "train_mse")

IMPORTANCE_JSON_SCHEMA = {
    "type": "object",
    "required": ["k", "top", "importance"],
    "properties": {
        "k": {"type": "integer", "minimum": 1},
        "top": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["rank", "feature", "index", "importance"],
                "properties": {
                    "rank": {"type": "integer", "minimum": 1},
                    "feature": {"type": "string"},
                    "index": {"type": "integer", "minimum": 0},
                    "importance": {"type": "number", "minimum": 0},
                },
            },
        },
        "importance": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "manifest": {"type": "object"},
    },
}


def format_table(rows: Sequence[Sequence], header: Sequence[str]) -> str:
    """Plain-text table; numbers in 6-decimal fixed point, columns as in the CSV."""
    cells = [list(header)] + [
        [f"{v:.6f}" if isinstance(v, float) else str(v) for v in row] for row in rows
    ]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    return "\n".join(lines)


def report_table(report: ExperimentReport) -> str:
    return format_table([(r.model, r.mae, r.mse) for r in report.rows], REPORT_HEADER)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            # repr keeps every bit, so the CSV parses back exactly
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_history(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for e in history:
            writer.writerow([e["epoch"], repr(e["train_mae"]), repr(e["train_mse"])])


def emit_report(report: ExperimentReport, out_dir, checkpoints: bool = True) -> dict:
    """Write report.csv, report.json, one history CSV per CNN and, optionally,
    model checkpoints. Returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "json": out / "report.json", "histories": {}}
    _write_csv(paths["csv"], REPORT_HEADER, [(r.model, r.mae, r.mse) for r in report.rows])
    paths["json"].write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    for model_id, history in report.histories.items():
        path = out / f"history_{model_id}.csv"
        write_history(path, history)
        paths["histories"][model_id] = path
    if report.importance is not None:
        paths["importance"] = emit_importance(report.importance, out)
    if checkpoints and report.fitted:
        ckpt_dir = out / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        schema_fp = report.manifest["schema_fingerprint"]
        cfgs = {m["id"]: m["config"] for m in report.manifest["models"]}
        for model_id, fitted in report.fitted.items():
            metrics = {"test": report.row(model_id).__dict__,
                       "train": report.manifest["train_metrics"][model_id]}
            if model_id == FOREST_ID:
                payload = rf.forest_to_dict(fitted)
                payload.update(schema_fingerprint=schema_fp, metrics=metrics)
                (ckpt_dir / "RF.json").write_text(json.dumps(payload), encoding="utf-8")
            else:
                spec, params = fitted
                nn.save_checkpoint(
                    ckpt_dir / f"{model_id}.json",
                    nn.Checkpoint(spec, params, schema_fp, cfgs[model_id], metrics),
                )
        paths["checkpoints"] = ckpt_dir
    return paths


def emit_importance(importance: ImportanceReport, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "importance.json"
    path.write_text(json.dumps(importance.to_dict(), indent=2) + "\n", encoding="utf-8")
    _write_csv(
        out / "importance.csv",
        ("rank", "feature", "importance"),
        [(i + 1, name, score) for i, (name, score) in enumerate(importance.entries)],
    )
    return path


def emit_ablation(ablation: AblationReport, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "ablation.csv", "json": out / "ablation.json"}
    _write_csv(
        paths["csv"],
        ABLATION_HEADER,
        [(r.model, r.mae_full, r.mae_reduced, r.delta) for r in ablation.rows],
    )
    paths["json"].write_text(json.dumps(ablation.to_dict(), indent=2) + "\n", encoding="utf-8")
    return paths


def load_report(path) -> ExperimentReport:
    with open(path, encoding="utf-8") as fh:
        return ExperimentReport.from_dict(json.load(fh))


def read_report_csv(path) -> list[ReportRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPORT_HEADER:
            raise ValueError(f"unexpected report header {reader.fieldnames}")
        return [ReportRow(r["model"], float(r["mae"]), float(r["mse"])) for r in reader]


def read_history_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"epoch": int(r["epoch"]), "train_mae": float(r["train_mae"]),
             "train_mse": float(r["train_mse"])}
            for r in csv.DictReader(fh)
        ]


def compare_to_published(report: ExperimentReport, tolerance: float = PUBLISHED_MAE_TOLERANCE) -> list[dict]:
    """Per-model comparison against the published MAEs (real data only)."""
    out = []
    for r in report.rows:
        if r.model in PUBLISHED_MAE:
            ref = PUBLISHED_MAE[r.model]
            out.append({"model": r.model, "mae": r.mae, "published_mae": ref,
                        "within_tolerance": abs(r.mae - ref) <= tolerance})
    return out
