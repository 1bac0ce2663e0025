"""Loading, merging, encoding, filtering, standardizing and splitting of
NetHealth-shaped tabular data.

Three raw sources are supported: per-(participant, date) activity rows,
per-(participant, date) sleep rows and per-participant survey rows. They are
joined into a :class:`MergedTable`, whose feature columns follow the order of a
:class:`FeatureSchema` and whose target is the sleep efficiency.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateSleepRecord,
    EmptyJoin,
    EmptyResult,
    InvalidFraction,
    ParseError,
    SchemaMismatch,
    UnknownCategory,
)
from .fingerprint import hexdigest

logger = logging.getLogger(__name__)

SOURCES = ("wearable_activity", "survey")
KINDS = ("numeric", "categorical_ordinal")
MISSING_TOKENS = frozenset({"", "NA", "N/A", "NaN", "nan"})
TARGET_COLUMN = "efficiency"
KEY_COLUMNS = ("participant_id", "date")
SLEEP_REQUIRED = ("minsasleep", "minsawake")
SLEEP_PASSTHROUGH = (
    "timetobed",
    "timeoutofbed",
    "bedtimedur",
    "minstofallasleep",
    "minsafterwakeup",
)


class _Missing:
    """Marker for a cell that was empty or could not be parsed."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "MISSING"

    def __bool__(self):
        return False

    def __reduce__(self):
        return (_Missing, ())


MISSING = _Missing()


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class FeatureDescriptor:
    name: str
    source: str
    kind: str = "numeric"
    encoding: Optional[dict] = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise SchemaMismatch(self.name, f"unknown source {self.source!r}")
        if self.kind not in KINDS:
            raise SchemaMismatch(self.name, f"unknown kind {self.kind!r}")
        if self.kind == "categorical_ordinal":
            if not self.encoding:
                raise SchemaMismatch(self.name, "categorical feature needs an encoding map")
            codes = list(self.encoding.values())
            if len(set(codes)) != len(codes):
                raise SchemaMismatch(self.name, "encoding map is not injective")
        elif self.encoding is not None:
            raise SchemaMismatch(self.name, "numeric feature cannot carry an encoding map")

    @property
    def decoding(self) -> dict:
        return {code: label for label, code in (self.encoding or {}).items()}

    def to_dict(self) -> dict:
        out = {"name": self.name, "source": self.source, "kind": self.kind}
        if self.encoding is not None:
            out["encoding"] = dict(self.encoding)
        return out


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise SchemaMismatch("<schema>", "schema has no features")
        seen = set()
        for f in self.features:
            if f.name in seen:
                raise SchemaMismatch(f.name, "duplicate feature name")
            seen.add(f.name)

    @property
    def input_length(self) -> int:
        return len(self.features)

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def by_source(self, source: str) -> list[FeatureDescriptor]:
        return [f for f in self.features if f.source == source]

    def subset(self, indices: Iterable[int]) -> "FeatureSchema":
        """Schema restricted to ``indices``, kept in original schema order."""
        keep = sorted(set(int(i) for i in indices))
        return FeatureSchema(tuple(self.features[i] for i in keep))

    def to_dict(self) -> dict:
        return {
            "input_length": self.input_length,
            "features": [f.to_dict() for f in self.features],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "FeatureSchema":
        try:
            features = tuple(
                FeatureDescriptor(
                    name=item["name"],
                    source=item["source"],
                    kind=item.get("kind", "numeric"),
                    encoding=item.get("encoding"),
                )
                for item in payload["features"]
            )
        except KeyError as exc:
            raise SchemaMismatch(str(exc), "schema entry lacks a required key") from None
        schema = cls(features)
        declared = payload.get("input_length")
        if declared is not None and declared != schema.input_length:
            raise SchemaMismatch(
                "input_length",
                f"declares {declared} but lists {schema.input_length} features",
            )
        return schema

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def fingerprint(self) -> str:
        return hexdigest(self.canonical_bytes())

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


ACTIVITY_FEATURES = (
    "complypercent", "meanrate", "sdrate", "steps", "floors", "sedentaryminutes",
    "lightlyactiveminutes", "fairlyactiveminutes", "veryactiveminutes", "lowrangemins",
    "fatburnmins", "cardiomins", "peakmins", "lowrangecal", "fatburncal", "cardiocal",
    "peakcal",
)

SURVEY_FEATURES = (
    # bad habits
    "usetobacco_1", "usebeer_1", "usewine_1", "usedrugs_1", "usedrugs_prescr_1",
    "usecaffine_1",
    # personality inventory
    "Extraversion_1", "Agreeableness_1", "Conscientiousness_1", "Neuroticism_1",
    "Openness_1",
    # education
    "hs_1", "hssex_1", "hsgrade_1", "apexams_1", "degreeintent_1", "hrswork_1",
    "ndfirst_1",
    # exercise
    "hsclubrc_1", "exercise_1", "clubsports_1", "varsitysports_1", "swimming_1",
    "Dieting_1", "PhysicalDisability_1",
    # health
    "SelfEsteem_1", "Trust_1", "SRQE_Ext_1", "SRQE_Introj_1", "SRQE_Ident_1",
    "SelfEff_exercise_scale_1", "SelfEff_diet_scale_1", "selfreg_scale_1",
    # mental health
    "STAITraitTotal_1", "CESDOverall_1", "BAIsum_1", "STAITraitGroup_1", "CESDGroup_1",
    "BAIgroup_1", "majorevent_1",
    # origin
    "momdec_1", "momusa_1", "daddec_1", "dadusa_1", "parentstatus_1", "dadage_1",
    "momage_1", "numsib_1", "birthorder_1", "parentincome_1", "parenteduc_1",
    "momrace_1", "dadrace_1", "momrelig_1", "dadrelig_1", "yourelig_1",
    # personal info
    "selsa_rom_1", "selsa_fam_1", "selsa_soc_1",
    # sex
    "gender_1",
    # sleep questionnaires
    "PSQI_duration_1", "PSQIGlobal_1", "PSQIGroup_1", "MEQTotal_1", "MEQGroup_1",
    # second-semester repeats of the time-varying scales
    "SelfEsteem_2", "Trust_2", "CESDOverall_2", "STAITraitTotal_2", "BAIsum_2",
    "PSQIGlobal_2", "PSQI_duration_2", "MEQTotal_2", "selsa_rom_2", "selsa_fam_2",
    "selsa_soc_2",
)

CATEGORICAL_ENCODINGS = {
    "hssex_1": {"coed": 0, "single_sex": 1},
    "STAITraitGroup_1": {"low": 0, "high": 1},
    "CESDGroup_1": {"not_depressed": 0, "depressed": 1},
    "BAIgroup_1": {"low": 0, "moderate": 1, "high": 2},
    "parentstatus_1": {"together": 0, "apart": 1},
    "gender_1": {"female": 0, "male": 1},
    "PSQIGroup_1": {"good": 0, "poor": 1},
    "MEQGroup_1": {
        "definite_evening": 0,
        "moderate_evening": 1,
        "neither": 2,
        "moderate_morning": 3,
        "definite_morning": 4,
    },
}


def nethealth_schema() -> FeatureSchema:
    """The 93-feature preset: 17 Fitbit activity columns then 76 survey columns."""
    features = [FeatureDescriptor(name, "wearable_activity") for name in ACTIVITY_FEATURES]
    for name in SURVEY_FEATURES:
        enc = CATEGORICAL_ENCODINGS.get(name)
        if enc is None:
            features.append(FeatureDescriptor(name, "survey"))
        else:
            features.append(FeatureDescriptor(name, "survey", "categorical_ordinal", dict(enc)))
    return FeatureSchema(tuple(features))


# ---------------------------------------------------------------------------
# target


def compute_efficiency(minsasleep: float, minsawake: float) -> float:
    """Fraction of the sleep period spent asleep."""
    if minsasleep < 0 or minsawake < 0:
        raise ValueError(f"negative minutes: asleep={minsasleep}, awake={minsawake}")
    total = minsasleep + minsawake
    if total <= 0:
        raise DegenerateSleepRecord(
            "minsasleep and minsawake are both 0; the row must be dropped"
        )
    return minsasleep / total


# ---------------------------------------------------------------------------
# raw records


@dataclass
class RecordSet:
    """Parsed CSV rows.

    ``rows`` hold one dict per data row. Numeric columns are floats, the key
    columns are strings (``date`` is a :class:`datetime.date`), categorical
    columns are raw labels or integer codes once encoded. Missing cells hold
    :data:`MISSING`. ``lines`` records the 1-based CSV line of every row.
    """

    columns: list
    rows: list
    lines: list = field(default_factory=list)
    source: str = "<memory>"

    def __len__(self):
        return len(self.rows)

    def provenance(self, i: int, column: str) -> str:
        line = self.lines[i] if self.lines else i + 2
        return f"{self.source}:{line}:{column}"


def _expected_columns(kind: str, schema: FeatureSchema) -> tuple[list, set]:
    """Required and optional columns for one file layout."""
    if kind == "activity":
        return list(KEY_COLUMNS) + [f.name for f in schema.by_source("wearable_activity")], set()
    if kind == "sleep":
        return list(KEY_COLUMNS) + list(SLEEP_REQUIRED), set(SLEEP_PASSTHROUGH)
    if kind == "survey":
        return ["participant_id"] + [f.name for f in schema.by_source("survey")], set()
    if kind == "merged":
        return list(KEY_COLUMNS) + schema.names + [TARGET_COLUMN], set()
    raise ValueError(f"unknown table kind {kind!r}")


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text)


def load_table(path, schema: FeatureSchema, kind: str = "merged") -> RecordSet:
    """Read one CSV file laid out as ``kind`` (activity, sleep, survey or merged).

    Header names must match the expected columns in any order. Empty, ``NA``
    and unparseable numeric cells become :data:`MISSING`; malformed keys and
    ragged rows raise :class:`ParseError`.
    """
    required, optional = _expected_columns(kind, schema)
    descriptors = {f.name: f for f in schema.features}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaMismatch(required[0], "file is empty") from None
        for col in required:
            if col not in header:
                raise SchemaMismatch(col)
        for col in header:
            if col not in required and col not in optional:
                raise SchemaMismatch(col, "unknown column")
        if len(set(header)) != len(header):
            raise SchemaMismatch("<header>", "duplicate column names")

        rows, lines = [], []
        for raw in reader:
            line = reader.line_num
            if not raw:
                continue
            if len(raw) != len(header):
                raise ParseError(line, "<row>", ",".join(raw))
            record = {}
            for col, cell in zip(header, raw):
                cell = cell.strip()
                if col == "participant_id":
                    if cell in MISSING_TOKENS:
                        raise ParseError(line, col, cell)
                    record[col] = cell
                elif col == "date":
                    try:
                        record[col] = _parse_date(cell)
                    except ValueError:
                        raise ParseError(line, col, cell) from None
                elif cell in MISSING_TOKENS:
                    record[col] = MISSING
                elif col in descriptors and descriptors[col].kind == "categorical_ordinal":
                    record[col] = cell
                else:
                    try:
                        value = float(cell)
                    except ValueError:
                        value = MISSING
                    if value is not MISSING and not math.isfinite(value):
                        value = MISSING
                    record[col] = value
            rows.append(record)
            lines.append(line)
    return RecordSet(columns=header, rows=rows, lines=lines, source=str(path))


def encode_survey(records: RecordSet, schema: FeatureSchema) -> RecordSet:
    """Replace categorical labels with their integer codes.

    Numeric columns and missing markers pass through unchanged.
    """
    categorical = {
        f.name: f for f in schema.features if f.kind == "categorical_ordinal"
    }
    cols = [c for c in records.columns if c in categorical]
    out = []
    for row in records.rows:
        new = dict(row)
        for col in cols:
            label = row[col]
            if label is MISSING:
                continue
            enc = categorical[col].encoding
            if label not in enc:
                raise UnknownCategory(col, label)
            new[col] = enc[label]
        out.append(new)
    return RecordSet(records.columns, out, list(records.lines), records.source)


def decode_survey(records: RecordSet, schema: FeatureSchema) -> RecordSet:
    """Inverse of :func:`encode_survey`."""
    categorical = {
        f.name: f.decoding for f in schema.features if f.kind == "categorical_ordinal"
    }
    cols = [c for c in records.columns if c in categorical]
    out = []
    for row in records.rows:
        new = dict(row)
        for col in cols:
            if row[col] is not MISSING:
                new[col] = categorical[col][int(row[col])]
        out.append(new)
    return RecordSet(records.columns, out, list(records.lines), records.source)


# ---------------------------------------------------------------------------
# merged table


@dataclass
class MergedTable:
    """Encoded feature matrix plus sleep-efficiency target.

    ``features`` is a float array of shape (n_rows, schema.input_length) in
    which NaN marks a missing value; ``target`` has shape (n_rows,).
    """

    schema: FeatureSchema
    participant_ids: np.ndarray
    dates: np.ndarray
    features: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.participant_ids = np.asarray(self.participant_ids, dtype=object)
        self.dates = np.asarray(self.dates, dtype=object)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        n = len(self.target)
        if self.features.ndim != 2 or self.features.shape != (n, self.schema.input_length):
            raise SchemaMismatch(
                "<features>",
                f"expected shape ({n}, {self.schema.input_length}), got {self.features.shape}",
            )
        if len(self.participant_ids) != n or len(self.dates) != n:
            raise SchemaMismatch("<keys>", "key columns and target lengths differ")
        if n and (np.any(~np.isfinite(self.target)) or self.target.min() < 0 or self.target.max() > 1):
            raise ValueError("targets must lie in [0, 1]")
        keys = set(zip(self.participant_ids.tolist(), self.dates.tolist()))
        if len(keys) != n:
            raise ValueError("(participant_id, date) pairs must be unique")

    def __len__(self):
        return len(self.target)

    def take(self, indices) -> "MergedTable":
        idx = np.asarray(indices, dtype=np.int64)
        return MergedTable(
            self.schema,
            self.participant_ids[idx],
            self.dates[idx],
            self.features[idx],
            self.target[idx],
        )

    def select_features(self, indices) -> "MergedTable":
        """Table restricted to feature ``indices`` (schema order preserved)."""
        keep = sorted(set(int(i) for i in indices))
        return MergedTable(
            self.schema.subset(keep),
            self.participant_ids,
            self.dates,
            self.features[:, keep],
            self.target,
        )

    def with_features(self, features) -> "MergedTable":
        return MergedTable(self.schema, self.participant_ids, self.dates, features, self.target)

    def to_csv(self, path=None, decode: bool = False) -> bytes:
        """Canonical CSV bytes; written to ``path`` when given.

        Floats are written with ``repr`` so a reload is bit-exact. With
        ``decode`` categorical codes are written back as their labels.
        """
        decoders = [
            f.decoding if decode and f.kind == "categorical_ordinal" else None
            for f in self.schema.features
        ]

        def cell(v, dec):
            if math.isnan(v):
                return "NA"
            if dec is not None:
                return dec[int(v)]
            return repr(float(v))

        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(KEY_COLUMNS) + self.schema.names + [TARGET_COLUMN])
        for pid, date, x, y in zip(self.participant_ids, self.dates, self.features, self.target):
            writer.writerow(
                [pid, _date_str(date)]
                + [cell(v, dec) for v, dec in zip(x.tolist(), decoders)]
                + [repr(float(y))]
            )
        data = buf.getvalue().encode("utf-8")
        if path is not None:
            Path(path).write_bytes(data)
        return data

    def fingerprint(self) -> str:
        return hexdigest(self.to_csv())


def _date_str(value) -> str:
    return value.isoformat() if hasattr(value, "isoformat") else str(value)


def _as_number(value, where: str) -> float:
    if value is MISSING:
        return math.nan
    if isinstance(value, str):
        raise SchemaMismatch(where, f"unencoded categorical label {value!r}")
    return float(value)


def table_from_records(records: RecordSet, schema: FeatureSchema) -> MergedTable:
    """Build a table from an encoded merged-layout record set."""
    pids, dates, feats, target = [], [], [], []
    for i, row in enumerate(records.rows):
        y = row[TARGET_COLUMN]
        if y is MISSING:
            raise ParseError(records.lines[i] if records.lines else i + 2, TARGET_COLUMN, "")
        pids.append(row["participant_id"])
        dates.append(row["date"])
        feats.append([_as_number(row[n], records.provenance(i, n)) for n in schema.names])
        target.append(float(y))
    features = np.array(feats, dtype=np.float64).reshape(len(target), schema.input_length)
    return MergedTable(schema, pids, dates, features, target)


@dataclass
class MergeStats:
    rows: int = 0
    unmatched_activity: int = 0
    unmatched_sleep: int = 0
    degenerate_sleep: int = 0
    missing_target: int = 0
    no_survey_rows: int = 0
    no_survey_participants: list = field(default_factory=list)


def merge_by_participant_date(
    activity: RecordSet, sleep: RecordSet, survey: RecordSet, schema: FeatureSchema
) -> tuple[MergedTable, MergeStats]:
    """Inner-join activity and sleep on (participant, date) and broadcast survey
    answers per participant.

    Survey and categorical columns must already be encoded. Rows whose
    participant has no survey row are dropped and counted, as are sleep rows
    with zero total minutes.
    """
    stats = MergeStats()
    survey_by_pid = {}
    for row in survey.rows:
        pid = row["participant_id"]
        if pid in survey_by_pid:
            raise ValueError(f"participant {pid!r} has more than one survey row")
        survey_by_pid[pid] = row

    sleep_by_key = {}
    for row in sleep.rows:
        key = (row["participant_id"], row["date"])
        if key in sleep_by_key:
            raise ValueError(f"duplicate sleep record for {key}")
        sleep_by_key[key] = row

    activity_names = [f.name for f in schema.by_source("wearable_activity")]
    survey_names = [f.name for f in schema.by_source("survey")]
    names = schema.names

    pids, dates, feats, target = [], [], [], []
    seen = set()
    dropped_pids = {}
    for i, row in enumerate(activity.rows):
        key = (row["participant_id"], row["date"])
        if key in seen:
            raise ValueError(f"duplicate activity record for {key}")
        seen.add(key)
        sl = sleep_by_key.get(key)
        if sl is None:
            stats.unmatched_activity += 1
            continue
        asleep, awake = sl["minsasleep"], sl["minsawake"]
        if asleep is MISSING or awake is MISSING:
            stats.missing_target += 1
            continue
        try:
            eff = compute_efficiency(asleep, awake)
        except DegenerateSleepRecord:
            stats.degenerate_sleep += 1
            continue
        sv = survey_by_pid.get(key[0])
        if sv is None:
            stats.no_survey_rows += 1
            dropped_pids[key[0]] = None
            continue
        values = {n: _as_number(row[n], activity.provenance(i, n)) for n in activity_names}
        for n in survey_names:
            values[n] = _as_number(sv[n], f"survey:{key[0]}:{n}")
        pids.append(key[0])
        dates.append(key[1])
        feats.append([values[n] for n in names])
        target.append(eff)

    stats.unmatched_sleep = sum(1 for k in sleep_by_key if k not in seen)
    stats.no_survey_participants = list(dropped_pids)
    if stats.degenerate_sleep:
        logger.warning("dropped %d sleep records with zero minutes asleep and awake",
                       stats.degenerate_sleep)
    if not target:
        raise EmptyJoin("joining activity, sleep and survey records produced no rows")
    stats.rows = len(target)
    features = np.array(feats, dtype=np.float64).reshape(len(target), schema.input_length)
    return MergedTable(schema, pids, dates, features, target), stats


@dataclass
class RemovalReport:
    participants_dropped: list
    rows_dropped: int


def filter_complete(table: MergedTable) -> tuple[MergedTable, RemovalReport]:
    """Drop every participant with at least one missing feature value."""
    incomplete_rows = np.isnan(table.features).any(axis=1)
    bad = sorted(set(table.participant_ids[incomplete_rows].tolist()))
    bad_set = set(bad)
    keep = np.array([pid not in bad_set for pid in table.participant_ids], dtype=bool)
    if not keep.any():
        raise EmptyResult("every participant has at least one missing value")
    report = RemovalReport(participants_dropped=bad, rows_dropped=int((~keep).sum()))
    if not bad:
        return table, report
    return table.take(np.flatnonzero(keep)), report


# ---------------------------------------------------------------------------
# standardization and splitting


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, table: MergedTable) -> "Standardizer":
        if len(table) == 0:
            raise ValueError("cannot standardize from an empty training table")
        mean = table.features.mean(axis=0)
        sd = table.features.std(axis=0)
        return cls(mean, sd)

    def apply(self, table: MergedTable) -> MergedTable:
        scale = np.where(self.sd > 0, self.sd, 1.0)
        return table.with_features((table.features - self.mean) / scale)


def standardize(train: MergedTable, apply_to: MergedTable):
    """Population z-score with statistics fitted on ``train`` only.

    Returns ``(train_z, apply_to_z, standardizer)``. Zero-variance features are
    centered but not scaled; the target is never touched.
    """
    st = Standardizer.fit(train)
    return st.apply(train), st.apply(apply_to), st


@dataclass(frozen=True)
class Split:
    train_idx: np.ndarray
    test_idx: np.ndarray

    def partition_hash(self) -> str:
        data = (
            np.asarray(self.train_idx, dtype="<i8").tobytes()
            + b"|"
            + np.asarray(self.test_idx, dtype="<i8").tobytes()
        )
        return hexdigest(data)


def split_indices(
    table: MergedTable, test_fraction: float, seed: int, by_participant: bool = False
) -> Split:
    if not (isinstance(test_fraction, (int, float)) and 0 < test_fraction < 1):
        raise InvalidFraction(f"test_fraction must lie in (0, 1), got {test_fraction!r}")
    n = len(table)
    if n < 2:
        raise ValueError("need at least 2 rows to split")
    rng = np.random.default_rng(seed)
    if by_participant:
        pids = np.array(sorted(set(table.participant_ids.tolist())), dtype=object)
        if len(pids) < 2:
            raise ValueError("need at least 2 participants for a participant-level split")
        n_test = min(max(int(round(test_fraction * len(pids))), 1), len(pids) - 1)
        test_pids = set(rng.permutation(pids)[:n_test].tolist())
        mask = np.array([p in test_pids for p in table.participant_ids], dtype=bool)
    else:
        n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
        mask = np.zeros(n, dtype=bool)
        mask[rng.permutation(n)[:n_test]] = True
    return Split(np.flatnonzero(~mask), np.flatnonzero(mask))


def split(table: MergedTable, test_fraction: float, seed: int, by_participant: bool = False):
    """Seeded random train/test split. Returns ``(train, test)``."""
    s = split_indices(table, test_fraction, seed, by_participant)
    return table.take(s.train_idx), table.take(s.test_idx)


# ---------------------------------------------------------------------------
# high-level loaders


def load_merged(path, schema: FeatureSchema) -> MergedTable:
    """Load a merged-layout CSV (keys, features, efficiency) and encode it."""
    return table_from_records(encode_survey(load_table(path, schema, "merged"), schema), schema)


def preprocess(
    schema: FeatureSchema,
    *,
    merged=None,
    activity=None,
    sleep=None,
    survey=None,
) -> tuple[MergedTable, dict]:
    """Run load, encode, merge and filter from files.

    Either ``merged`` or all of ``activity``, ``sleep`` and ``survey`` must be
    given. Returns the complete table and a summary of what was dropped.
    """
    summary = {}
    if merged is not None:
        table = load_merged(merged, schema)
    else:
        if activity is None or sleep is None or survey is None:
            raise ValueError("activity, sleep and survey paths are all required")
        act = encode_survey(load_table(activity, schema, "activity"), schema)
        slp = load_table(sleep, schema, "sleep")
        sur = encode_survey(load_table(survey, schema, "survey"), schema)
        table, stats = merge_by_participant_date(act, slp, sur, schema)
        summary["merge"] = {
            "rows": stats.rows,
            "unmatched_activity": stats.unmatched_activity,
            "unmatched_sleep": stats.unmatched_sleep,
            "degenerate_sleep": stats.degenerate_sleep,
            "missing_target": stats.missing_target,
            "no_survey_rows": stats.no_survey_rows,
            "no_survey_participants": stats.no_survey_participants,
        }
    table, removal = filter_complete(table)
    summary["filter"] = {
        "participants_dropped": removal.participants_dropped,
        "rows_dropped": removal.rows_dropped,
    }
    summary["rows"] = len(table)
    return table, summary


def write_records_csv(path, records: Sequence[dict], columns: Sequence[str]) -> None:
    """Write raw records (e.g. test fixtures) with MISSING rendered as ``NA``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            cells = []
            for col in columns:
                v = rec.get(col, MISSING)
                if v is MISSING:
                    cells.append("NA")
                elif isinstance(v, float):
                    cells.append(repr(v))
                else:
                    cells.append(_date_str(v) if isinstance(v, dt.date) else str(v))
            writer.writerow(cells)
