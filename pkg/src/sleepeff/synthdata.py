"""Synthetic NetHealth-shaped data with planted feature effects.

Activity-like columns vary per (participant, day) around a participant-level
random offset; survey-like columns are drawn once per participant. The target
is ``clip(base + sum(coef * z_feature) + noise, 0, 1)`` where ``z_feature`` is
the feature standardized over the generated table.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import FeatureSchema, MergedTable, nethealth_schema
from .errors import InvalidConfig

START_DATE = dt.date(2015, 8, 17)

# (feature name, coefficient per standard deviation)
DEFAULT_PLANTED = (
    ("steps", 0.006),
    ("sedentaryminutes", -0.005),
    ("veryactiveminutes", 0.004),
    ("CESDOverall_1", -0.004),
    ("Neuroticism_1", -0.003),
)


@dataclass
class SynthConfig:
    n_participants: int = 200
    days_per_participant: int = 50
    schema: Optional[FeatureSchema] = None
    planted: Optional[list] = None
    noise_sd: float = 0.005
    base_efficiency: float = 0.94
    seed: int = 42

    def __post_init__(self):
        if self.schema is None:
            self.schema = nethealth_schema()
        if self.planted is None:
            names = self.schema.names
            self.planted = [
                {"feature_index": names.index(name), "coefficient": coef}
                for name, coef in DEFAULT_PLANTED
                if name in names
            ]
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.n_participants, int) or self.n_participants < 1:
            raise InvalidConfig("n_participants must be a positive integer")
        if not isinstance(self.days_per_participant, int) or self.days_per_participant < 1:
            raise InvalidConfig("days_per_participant must be a positive integer")
        if not self.noise_sd >= 0:
            raise InvalidConfig("noise_sd must be >= 0")
        if not 0 < self.base_efficiency < 1:
            raise InvalidConfig("base_efficiency must lie in (0, 1)")
        seen = set()
        for item in self.planted:
            try:
                idx = item["feature_index"]
                float(item["coefficient"])
            except (KeyError, TypeError, ValueError):
                raise InvalidConfig(f"bad planted entry {item!r}") from None
            if not isinstance(idx, int) or not 0 <= idx < self.schema.input_length:
                raise InvalidConfig(f"planted feature index {idx!r} out of range")
            if idx in seen:
                raise InvalidConfig(f"planted feature index {idx} listed twice")
            seen.add(idx)

    def to_dict(self) -> dict:
        return {
            "n_participants": self.n_participants,
            "days_per_participant": self.days_per_participant,
            "planted": [dict(p) for p in self.planted],
            "noise_sd": self.noise_sd,
            "base_efficiency": self.base_efficiency,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict, schema: Optional[FeatureSchema] = None) -> "SynthConfig":
        allowed = {"n_participants", "days_per_participant", "planted", "noise_sd",
                   "base_efficiency", "seed"}
        unknown = set(payload) - allowed
        if unknown:
            raise InvalidConfig(f"unknown synth keys: {sorted(unknown)}")
        planted = payload.get("planted")
        if planted is not None:
            schema_ = schema or nethealth_schema()
            resolved = []
            for item in planted:
                item = dict(item)
                if "feature" in item and "feature_index" not in item:
                    try:
                        item["feature_index"] = schema_.index(item.pop("feature"))
                    except ValueError:
                        raise InvalidConfig(f"unknown planted feature {item!r}") from None
                resolved.append(item)
            planted = resolved
        return cls(
            n_participants=payload.get("n_participants", 200),
            days_per_participant=payload.get("days_per_participant", 50),
            schema=schema,
            planted=planted,
            noise_sd=payload.get("noise_sd", 0.005),
            base_efficiency=payload.get("base_efficiency", 0.94),
            seed=payload.get("seed", 42),
        )


@dataclass
class GroundTruth:
    planted: list
    feature_means: list
    feature_sds: list
    participant_effect_sds: list
    realized_means: list
    realized_sds: list
    clip_rate: float
    config: dict = field(default_factory=dict)
    schema_fingerprint: str = ""

    def to_dict(self) -> dict:
        return {
            "planted": self.planted,
            "feature_means": self.feature_means,
            "feature_sds": self.feature_sds,
            "participant_effect_sds": self.participant_effect_sds,
            "realized_means": self.realized_means,
            "realized_sds": self.realized_sds,
            "clip_rate": self.clip_rate,
            "config": self.config,
            "schema_fingerprint": self.schema_fingerprint,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GroundTruth":
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))

    @property
    def planted_indices(self) -> list[int]:
        return [p["feature_index"] for p in self.planted]


def generate(config: SynthConfig) -> tuple[MergedTable, GroundTruth]:
    config.validate()
    schema = config.schema
    rng = np.random.default_rng(config.seed)
    n_p, n_d, p = config.n_participants, config.days_per_participant, schema.input_length
    n = n_p * n_d

    means = rng.uniform(1.0, 100.0, size=p)
    sds = rng.uniform(0.5, 20.0, size=p)
    effect_sds = np.zeros(p)
    X = np.empty((n, p))
    participant_of_row = np.repeat(np.arange(n_p), n_d)

    for j, feat in enumerate(schema.features):
        if feat.kind == "categorical_ordinal":
            codes = np.array(sorted(feat.encoding.values()), dtype=np.float64)
            per_participant = rng.choice(codes, size=n_p)
            X[:, j] = per_participant[participant_of_row]
            means[j] = codes.mean()
            sds[j] = codes.std()
        elif feat.source == "survey":
            per_participant = rng.normal(means[j], sds[j], size=n_p)
            X[:, j] = per_participant[participant_of_row]
        else:
            effect_sds[j] = 0.5 * sds[j]
            offsets = rng.normal(0.0, effect_sds[j], size=n_p)
            daily = rng.normal(0.0, sds[j], size=n)
            X[:, j] = means[j] + offsets[participant_of_row] + daily

    realized_mean = X.mean(axis=0)
    realized_sd = X.std(axis=0)
    signal = np.zeros(n)
    for item in config.planted:
        j = item["feature_index"]
        if realized_sd[j] > 0:
            signal += item["coefficient"] * (X[:, j] - realized_mean[j]) / realized_sd[j]
    noise = rng.normal(0.0, config.noise_sd, size=n) if config.noise_sd > 0 else np.zeros(n)
    raw = config.base_efficiency + signal + noise
    target = np.clip(raw, 0.0, 1.0)
    clip_rate = float(np.mean((raw < 0) | (raw > 1)))

    pids = [f"P{i + 1:04d}" for i in range(n_p)]
    participant_ids = [pids[i] for i in participant_of_row]
    dates = [START_DATE + dt.timedelta(days=d) for d in range(n_d)] * n_p

    table = MergedTable(schema, participant_ids, dates, X, target)
    truth = GroundTruth(
        planted=[
            {
                "feature_index": item["feature_index"],
                "feature": schema.names[item["feature_index"]],
                "coefficient": float(item["coefficient"]),
            }
            for item in config.planted
        ],
        feature_means=means.tolist(),
        feature_sds=sds.tolist(),
        participant_effect_sds=effect_sds.tolist(),
        realized_means=realized_mean.tolist(),
        realized_sds=realized_sd.tolist(),
        clip_rate=clip_rate,
        config=config.to_dict(),
        schema_fingerprint=schema.fingerprint(),
    )
    return table, truth


def write_dataset(out_dir, table: MergedTable, truth: GroundTruth) -> dict:
    """Write ``data.csv``, ``schema.json`` and ``ground_truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "data": out / "data.csv",
        "schema": out / "schema.json",
        "ground_truth": out / "ground_truth.json",
    }
    table.to_csv(paths["data"], decode=True)
    table.schema.save(paths["schema"])
    truth.save(paths["ground_truth"])
    return paths
