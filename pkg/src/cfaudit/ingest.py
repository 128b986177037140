"""Parsing, validation, population filtering and summaries of loan-application records.

Records travel through the pipeline as a pandas DataFrame with one row per
application and the columns in ``RECORD_COLUMNS``.  Absent numeric values are
NaN, which doubles as the missingness flag.  ``ApplicationRecord`` is the
row-level view of the same data.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field, asdict
from typing import Iterable, Iterator, Optional, TextIO

import numpy as np
import pandas as pd

from . import LIENS, LOAN_TYPES, NUMERIC_FIELDS, RACES, SEXES

OTHER_RACE = "Other"
HOME_PURCHASE = "HomePurchase"

RECORD_COLUMNS = [
    "id", "race", "sex", "income", "state", "loan_type", "dti", "ltv", "lien",
    "approved", "interest_rate", "purpose", "year",
]
FLOAT_COLUMNS = ["income", "dti", "ltv", "interest_rate"]
REQUIRED_FIELDS = ("race", "sex", "state", "loan_type", "lien", "outcome")
# Parsed numerics keep at most this many fractional digits.
DECIMALS = 4


@dataclass(frozen=True)
class ApplicationRecord:
    id: str
    race: str
    sex: str
    income: Optional[float]
    state: str
    loan_type: str
    dti: Optional[float]
    ltv: Optional[float]
    lien: str
    approved: bool
    interest_rate: Optional[float] = None
    purpose: Optional[str] = None
    year: Optional[int] = None

    @property
    def missing(self) -> frozenset:
        """Names of the optional numeric fields that are absent."""
        return frozenset(f for f in (*NUMERIC_FIELDS, "interest_rate") if getattr(self, f) is None)


@dataclass(frozen=True)
class RejectedRow:
    row: int  # 1-based data row number, header excluded
    reason: str
    raw: dict = field(default_factory=dict, compare=False)


class SchemaError(ValueError):
    """Raised when the input header does not carry a mapped column."""


@dataclass
class Schema:
    """Mapping from logical record fields to columns and raw codes of a delimited file.

    ``columns`` maps logical names (race, sex, income, state, loan_type, dti,
    ltv, lien, outcome, interest_rate and optionally id, ethnicity, purpose,
    year) to header names.  ``values`` maps raw codes to canonical values per
    categorical field; ``outcome`` values are ``approved`` or ``denied`` and
    any other raw code excludes the row.  When ``white_ethnicity`` is set, a
    White race code only counts as White if the ethnicity column equals it.
    """

    columns: dict
    values: dict = field(default_factory=dict)
    na_values: tuple = ("", "NA", "N/A", "Exempt", "nan")
    white_ethnicity: Optional[str] = None
    delimiter: str = ","
    name: str = "custom"

    OPTIONAL = ("id", "ethnicity", "purpose", "year")

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        d = dict(d)
        if "na_values" in d:
            d["na_values"] = tuple(str(v) for v in d["na_values"])
        values = {k: {str(raw): v for raw, v in m.items()} for k, m in d.get("values", {}).items()}
        d["values"] = values
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["na_values"] = list(self.na_values)
        return d

    def required_columns(self) -> list:
        return [c for k, c in self.columns.items() if c is not None]


def canonical_schema() -> Schema:
    """Schema of the files written by ``write_records`` and the synthetic generator."""
    ident = {k: k for k in ("id", "race", "sex", "income", "state", "loan_type", "dti",
                            "ltv", "lien", "interest_rate", "purpose", "year")}
    ident["outcome"] = "approved"
    return Schema(
        columns=ident,
        values={
            "race": {r: r for r in (*RACES, OTHER_RACE)},
            "sex": {s: s for s in SEXES},
            "loan_type": {t: t for t in LOAN_TYPES},
            "lien": {x: x for x in LIENS},
            "outcome": {"1": "approved", "0": "denied"},
        },
        na_values=("",),
        name="canonical",
    )


def hmda_2019_schema() -> Schema:
    """Schema for the public HMDA 2019 loan/application register (snapshot columns)."""
    return Schema(
        columns={
            "race": "derived_race",
            "ethnicity": "derived_ethnicity",
            "sex": "derived_sex",
            "income": "income",
            "state": "state_code",
            "loan_type": "loan_type",
            "dti": "debt_to_income_ratio",
            "ltv": "loan_to_value_ratio",
            "lien": "lien_status",
            "outcome": "action_taken",
            "interest_rate": "interest_rate",
            "purpose": "loan_purpose",
            "year": "activity_year",
        },
        values={
            "race": {"Black or African American": "Black", "White": "White"},
            "sex": {"Male": "Male", "Female": "Female", "Joint": "Joint",
                    "Sex Not Available": "NotAvailable"},
            "loan_type": {"1": "Conventional", "2": "FHA", "3": "VA", "4": "RHS_FSA"},
            "lien": {"1": "FirstLien", "2": "SubordinateLien"},
            # 1 originated, 2 approved but not accepted, 3 denied; 4-8 excluded
            "outcome": {"1": "approved", "2": "approved", "3": "denied"},
            "purpose": {"1": HOME_PURCHASE},
        },
        white_ethnicity="Not Hispanic or Latino",
        name="hmda2019",
    )


SCHEMAS = {"canonical": canonical_schema, "hmda2019": hmda_2019_schema}


def load_schema(spec) -> Schema:
    """Resolve a schema from a preset name, a dict, or ``None`` (canonical)."""
    if spec is None:
        return canonical_schema()
    if isinstance(spec, Schema):
        return spec
    if isinstance(spec, str):
        try:
            return SCHEMAS[spec]()
        except KeyError:
            raise SchemaError(f"unknown schema preset {spec!r}") from None
    return Schema.from_dict(spec)


_RANGE_BAND = re.compile(r"^(\d+(?:\.\d+)?)%?\s*-\s*<?\s*(\d+(?:\.\d+)?)%?$")
_BELOW_BAND = re.compile(r"^<\s*(\d+(?:\.\d+)?)%?$")
_ABOVE_BAND = re.compile(r"^>\s*(\d+(?:\.\d+)?)%?$")


def parse_number(text: str, banded: bool = False) -> float:
    """Parse a decimal, optionally accepting HMDA percentage bands.

    Bands map to their midpoint: ``"20%-<30%"`` -> 25, ``"<20%"`` -> 10.
    An open upper band ``">60%"`` maps to its bound plus 5.
    """
    s = text.strip()
    if banded:
        m = _RANGE_BAND.match(s)
        if m:
            return round((float(m.group(1)) + float(m.group(2))) / 2, DECIMALS)
        m = _BELOW_BAND.match(s)
        if m:
            return round(float(m.group(1)) / 2, DECIMALS)
        m = _ABOVE_BAND.match(s)
        if m:
            return round(float(m.group(1)) + 5, DECIMALS)
    if s.endswith("%"):
        s = s[:-1]
    x = float(s)
    if not math.isfinite(x):
        raise ValueError(f"non-finite number {text!r}")
    return round(x, DECIMALS)


def _skip_comments(stream: Iterable[str]) -> Iterator[str]:
    lines = iter(stream)
    for line in lines:
        if not line.startswith("#"):
            yield line
            break
    yield from lines


class _RowError(Exception):
    pass


def _parse_row(row: dict, schema: Schema, na: set) -> dict:
    cols = schema.columns
    vals = schema.values

    def raw(name):
        col = cols.get(name)
        if col is None:
            return None
        v = row.get(col)
        if v is None or v.strip() in na:
            return None
        return v.strip()

    for name in REQUIRED_FIELDS:
        if name in cols and raw(name) is None and name != "race":
            raise _RowError(f"missing required value: {name}")

    out = {}
    race_raw = raw("race")
    race = vals.get("race", {}).get(race_raw, OTHER_RACE) if race_raw is not None else OTHER_RACE
    if race == "White" and schema.white_ethnicity is not None:
        if raw("ethnicity") != schema.white_ethnicity:
            race = OTHER_RACE
    out["race"] = race

    for name, domain in (("sex", SEXES), ("loan_type", LOAN_TYPES), ("lien", LIENS)):
        r = raw(name)
        v = vals.get(name, {}).get(r, r) if vals.get(name) else r
        if v not in domain:
            raise _RowError(f"out-of-domain value: {name}={r}")
        out[name] = v
    state = raw("state")
    out["state"] = state.upper() if state is not None else "NA"

    outcome = vals.get("outcome", {}).get(raw("outcome"))
    if outcome not in ("approved", "denied"):
        raise _RowError(f"excluded outcome code: {raw('outcome')}")
    out["approved"] = outcome == "approved"

    for name in FLOAT_COLUMNS:
        r = raw(name)
        if r is None:
            out[name] = np.nan
            continue
        try:
            x = parse_number(r, banded=(name == "dti"))
        except ValueError:
            raise _RowError(f"unparseable value: {name}={r}") from None
        if x < 0:
            raise _RowError(f"out-of-range value: {name}={r}")
        out[name] = x

    p = raw("purpose")
    out["purpose"] = vals.get("purpose", {}).get(p, p) if p is not None else None
    y = raw("year")
    if y is not None:
        try:
            out["year"] = int(y)
        except ValueError:
            raise _RowError(f"unparseable value: year={y}") from None
    else:
        out["year"] = None
    return out


def parse_records(stream: TextIO, schema: Optional[Schema] = None):
    """Parse a delimited text stream into a records frame plus rejected rows.

    Every data row lands in exactly one of the two outputs.  Leading ``#``
    lines (provenance headers) are skipped.  Raises ``SchemaError`` when the
    header lacks a mapped column.
    """
    schema = load_schema(schema)
    reader = csv.DictReader(_skip_comments(stream), delimiter=schema.delimiter)
    header = reader.fieldnames or []
    absent = [c for c in schema.required_columns() if c not in header]
    optional_cols = {schema.columns.get(k) for k in Schema.OPTIONAL}
    fatal = [c for c in absent if c not in optional_cols]
    if fatal:
        raise SchemaError(f"input header lacks mapped column(s): {', '.join(fatal)}")
    columns = {k: c for k, c in schema.columns.items() if c not in absent}
    schema = Schema(**{**schema.__dict__, "columns": columns})
    na = set(schema.na_values)

    parsed, rejects, seen = [], [], set()
    for i, row in enumerate(reader, start=1):
        if None in row:  # more fields than header
            rejects.append(RejectedRow(i, "malformed row: extra fields", dict(row)))
            continue
        try:
            rec = _parse_row(row, schema, na)
        except _RowError as e:
            rejects.append(RejectedRow(i, str(e), dict(row)))
            continue
        rid = row[columns["id"]].strip() if "id" in columns else f"row{i}"
        if not rid:
            rejects.append(RejectedRow(i, "missing required value: id", dict(row)))
            continue
        if rid in seen:
            rejects.append(RejectedRow(i, f"duplicate id: {rid}", dict(row)))
            continue
        seen.add(rid)
        rec["id"] = rid
        parsed.append(rec)
    return make_frame(parsed), rejects


def read_records(path, schema=None):
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_records(fh, schema)


def make_frame(rows) -> pd.DataFrame:
    """Build a records frame with canonical column order and dtypes."""
    df = pd.DataFrame(rows if isinstance(rows, dict) else list(rows), columns=RECORD_COLUMNS)
    for c in FLOAT_COLUMNS:
        df[c] = df[c].astype("float64")
    df["approved"] = df["approved"].astype(bool)
    df["year"] = df["year"].astype("Int64")
    df["purpose"] = df["purpose"].astype(object).where(df["purpose"].notna(), None)
    for c in ("id", "race", "sex", "state", "loan_type", "lien"):
        df[c] = df[c].astype(object)
    return df.reset_index(drop=True)


def records_to_frame(records: Iterable[ApplicationRecord]) -> pd.DataFrame:
    rows = []
    for r in records:
        d = asdict(r)
        for c in FLOAT_COLUMNS:
            if d[c] is None:
                d[c] = np.nan
        rows.append(d)
    return make_frame(rows)


def frame_to_records(df: pd.DataFrame) -> list:
    out = []
    for row in df[RECORD_COLUMNS].itertuples(index=False):
        d = row._asdict()
        for c in FLOAT_COLUMNS:
            if pd.isna(d[c]):
                d[c] = None
            else:
                d[c] = float(d[c])
        d["approved"] = bool(d["approved"])
        d["year"] = None if pd.isna(d["year"]) else int(d["year"])
        d["purpose"] = None if d["purpose"] is None or pd.isna(d["purpose"]) else d["purpose"]
        out.append(ApplicationRecord(**d))
    return out


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)) or v is pd.NA:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_records(df: pd.DataFrame, stream: TextIO, header_lines: Iterable[str] = ()) -> None:
    """Serialize a records frame in the canonical schema."""
    for line in header_lines:
        stream.write(f"# {line}\n")
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for row in df[RECORD_COLUMNS].itertuples(index=False):
        w.writerow([_fmt(v) for v in row])


def records_to_csv(df: pd.DataFrame, header_lines: Iterable[str] = ()) -> str:
    buf = io.StringIO()
    write_records(df, buf, header_lines)
    return buf.getvalue()


def filter_population(df: pd.DataFrame, year: int = 2019) -> pd.DataFrame:
    """Keep Black and non-Hispanic White home-purchase applications of ``year``.

    Purpose and year only constrain rows that carry them.
    """
    keep = df["race"].isin(RACES)
    purpose = df["purpose"]
    keep &= purpose.isna() | (purpose == HOME_PURCHASE)
    yr = df["year"]
    keep &= (yr.isna() | (yr == year)).fillna(True).astype(bool)
    return df.loc[keep].reset_index(drop=True)


@dataclass
class DatasetSummary:
    total_count: int
    count_by_race: dict
    approved_by_race: dict
    approval_rate_overall: Optional[float]
    approval_rate_by_race: dict
    mean_interest_rate_by_race: dict
    rate_count_by_race: dict
    missing_rate_per_field: dict

    def to_dict(self) -> dict:
        return asdict(self)

    def to_frame(self) -> pd.DataFrame:
        """Long-format table: one (metric, group, value) row per entry."""
        rows = [("total_count", "all", self.total_count),
                ("approval_rate", "all", self.approval_rate_overall)]
        for r in sorted(self.count_by_race):
            rows += [
                ("count", r, self.count_by_race[r]),
                ("approval_rate", r, self.approval_rate_by_race.get(r)),
                ("mean_interest_rate", r, self.mean_interest_rate_by_race.get(r)),
            ]
        rows += [("missing_rate", f, v) for f, v in self.missing_rate_per_field.items()]
        return pd.DataFrame(rows, columns=["metric", "group", "value"])


def _ratio(num, den):
    return None if den == 0 else num / den


def summarize(df: pd.DataFrame) -> DatasetSummary:
    """Counts, approval rates, mean interest rates and missingness of a records frame.

    Undefined rates (empty denominators) are ``None``.
    """
    n = len(df)
    counts = df.groupby("race").size()
    approved = df.groupby("race")["approved"].sum()
    rate_n = df.groupby("race")["interest_rate"].count()
    rate_sum = df.groupby("race")["interest_rate"].sum()
    races = sorted(counts.index)
    count_by_race = {r: int(counts[r]) for r in races}
    approved_by_race = {r: int(approved[r]) for r in races}
    return DatasetSummary(
        total_count=n,
        count_by_race=count_by_race,
        approved_by_race=approved_by_race,
        approval_rate_overall=_ratio(int(df["approved"].sum()), n),
        approval_rate_by_race={r: _ratio(approved_by_race[r], count_by_race[r]) for r in races},
        mean_interest_rate_by_race={r: _ratio(float(rate_sum[r]), int(rate_n[r])) for r in races},
        rate_count_by_race={r: int(rate_n[r]) for r in races},
        missing_rate_per_field={
            c: _ratio(int(df[c].isna().sum()), n) for c in FLOAT_COLUMNS
        },
    )


def merge_summaries(a: DatasetSummary, b: DatasetSummary) -> DatasetSummary:
    """Count-weighted combination of two summaries of disjoint datasets."""
    n = a.total_count + b.total_count
    races = sorted(set(a.count_by_race) | set(b.count_by_race))

    def add(x, y, r):
        return x.get(r, 0) + y.get(r, 0)

    counts = {r: add(a.count_by_race, b.count_by_race, r) for r in races}
    appr = {r: add(a.approved_by_race, b.approved_by_race, r) for r in races}
    rate_n = {r: add(a.rate_count_by_race, b.rate_count_by_race, r) for r in races}

    def rate_total(s, r):
        m = s.mean_interest_rate_by_race.get(r)
        return 0.0 if m is None else m * s.rate_count_by_race[r]

    missing = {}
    for c in FLOAT_COLUMNS:
        ma = (a.missing_rate_per_field[c] or 0.0) * a.total_count
        mb = (b.missing_rate_per_field[c] or 0.0) * b.total_count
        missing[c] = _ratio(ma + mb, n)
    return DatasetSummary(
        total_count=n,
        count_by_race=counts,
        approved_by_race=appr,
        approval_rate_overall=_ratio(sum(appr.values()), n),
        approval_rate_by_race={r: _ratio(appr[r], counts[r]) for r in races},
        mean_interest_rate_by_race={
            r: _ratio(rate_total(a, r) + rate_total(b, r), rate_n[r]) for r in races
        },
        rate_count_by_race=rate_n,
        missing_rate_per_field=missing,
    )


def rejects_frame(rejects) -> pd.DataFrame:
    return pd.DataFrame([(r.row, r.reason) for r in rejects], columns=["row", "reason"])
