"""Ablation harness for the four training variants.

A1  all features, pre-matched data
A2  no race, pre-matched data
A3  no race, matched training pairs
A4  A3 with labels swapped at random within each training pair

All variants are scored on the same held-out matched pairs, which are never
randomized.  Pre-matched training data excludes every individual that
appears in a test pair.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np
import pandas as pd

from . import NUMERIC_FIELDS, RACES, __version__
from .matching import BinningSpec, MatchedPairSet, impute_means, match_exact
from .metrics import MetricsReport, auc, metrics_report, rmse
from .models import DEFAULT_GRIDS, FeaturePolicy, cross_validate, encode, fit_model, predict
from .randomize import RandomizationPlan, swap_labels

log = logging.getLogger(__name__)

VARIANTS = {
    "A1": "A1_AllFeatures",
    "A2": "A2_NoRace",
    "A3": "A3_MatchedNoRace",
    "A4": "A4_MatchedNoRaceRandomized",
}
TASKS = {"approval": "approved", "rate": "interest_rate"}
TASK_MODELS = {"approval": ("classifier", "forest"), "rate": ("linear", "forest")}


def derive_seed(seed: int, stage: str) -> int:
    """Stage-specific sub-seed from the global seed."""
    h = hashlib.sha256(f"{seed}/{stage}".encode()).digest()
    return int.from_bytes(h[:4], "little")


@dataclass
class ExperimentConfig:
    seed: int = 0
    holdout: float = 0.25
    task: str = "approval"
    models: Optional[tuple] = None
    variants: tuple = tuple(VARIANTS)
    grids: dict = field(default_factory=dict)
    k_folds: int = 3
    binning: BinningSpec = field(default_factory=BinningSpec)
    coarsened_mode: bool = False
    hidden: int = 0
    histogram_bin_width: Optional[float] = None
    threads: int = 1
    keep_going: bool = False

    def __post_init__(self):
        if not 0.0 < self.holdout < 1.0:
            raise ValueError("holdout must lie in (0, 1)")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {sorted(TASKS)}")
        if self.models is None:
            self.models = TASK_MODELS[self.task]
        self.models = tuple(self.models)
        bad = [m for m in self.models if m not in TASK_MODELS[self.task]]
        if bad:
            raise ValueError(f"model(s) {bad} do not apply to the {self.task} task")
        self.variants = tuple(self.variants)
        unknown = [v for v in self.variants if v not in VARIANTS]
        if unknown:
            raise ValueError(f"unknown variants {unknown}")

    @property
    def label(self) -> str:
        return TASKS[self.task]

    @property
    def metric(self) -> str:
        return "AUC" if self.task == "approval" else "RMSE"

    def grid_for(self, kind: str):
        return self.grids.get(kind, DEFAULT_GRIDS[kind])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["binning"] = self.binning.to_dict()
        d["models"] = list(self.models)
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        if "binning" in d and not isinstance(d["binning"], BinningSpec):
            d["binning"] = BinningSpec.from_dict(d["binning"])
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()


def split_pairs(pairs: pd.DataFrame, holdout_fraction: float, seed: int):
    """Seeded pair-level partition into (train, test); both members move together."""
    n = len(pairs)
    n_test = int(math.floor(holdout_fraction * n + 0.5))
    if n_test == 0 or n_test == n:
        raise ValueError(f"holdout {holdout_fraction} of {n} pairs leaves an empty side")
    perm = np.random.default_rng(seed).permutation(n)
    test_mask = np.zeros(n, dtype=bool)
    test_mask[perm[:n_test]] = True
    pairs = pairs.reset_index(drop=True)
    return pairs[~test_mask].reset_index(drop=True), pairs[test_mask].reset_index(drop=True)


def pair_members(pairs: pd.DataFrame) -> list:
    return list(pairs["black_id"]) + list(pairs["white_id"])


@dataclass
class TrainingSet:
    records: pd.DataFrame
    policy: FeaturePolicy
    randomize: bool = False


def build_training_set(variant: str, all_records: pd.DataFrame, train_pairs: pd.DataFrame,
                       test_pairs: pd.DataFrame, base_policy: Optional[FeaturePolicy] = None) -> TrainingSet:
    """Leak-free training records and feature policy for one ablation variant."""
    base = base_policy or FeaturePolicy()
    if variant in ("A1", "A2"):
        test_ids = set(pair_members(test_pairs))
        recs = all_records[~all_records["id"].isin(test_ids)].reset_index(drop=True)
        policy = FeaturePolicy(include_race=(variant == "A1"), features=base.features,
                               coarsened_mode=base.coarsened_mode, binning=base.binning, vocab=base.vocab)
        return TrainingSet(recs, policy)
    if variant in ("A3", "A4"):
        by_id = all_records.set_index("id")
        recs = by_id.loc[pair_members(train_pairs)].reset_index()
        policy = FeaturePolicy(include_race=False, features=base.features,
                               coarsened_mode=base.coarsened_mode, binning=base.binning, vocab=base.vocab)
        return TrainingSet(recs, policy, randomize=(variant == "A4"))
    raise ValueError(f"unknown variant {variant!r}")


def emit_histograms(pairs, bin_width: float, anchor: float = 0.0) -> pd.DataFrame:
    """Counts of Black-side and White-side predictions in bins ``[a + k w, a + (k+1) w)``.

    ``pairs`` is an ``(n, 2)`` array of (Black score, White score).  Both
    sides share one bin range, empty bins included.
    """
    if not bin_width > 0:
        raise ValueError("bin width must be positive")
    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    if len(arr) == 0:
        raise ValueError("no prediction pairs")
    # rounding absorbs representation error at bin edges (e.g. 0.3 / 0.1)
    idx = np.floor(np.round((arr - anchor) / bin_width, 9)).astype(np.int64)
    lo, hi = int(idx.min()), int(idx.max())
    bins = np.arange(lo, hi + 1)
    black = np.bincount(idx[:, 0] - lo, minlength=len(bins))
    white = np.bincount(idx[:, 1] - lo, minlength=len(bins))
    return pd.DataFrame({
        "bin_left": np.round(anchor + bins * bin_width, 12),
        "bin_right": np.round(anchor + (bins + 1) * bin_width, 12),
        "black": black,
        "white": white,
    })


MODEL_NAMES = {"linear": "Linear Regression", "forest": "Random Forest"}


def model_display_name(kind: str, hidden: int = 0) -> str:
    if kind == "classifier":
        return "Neural Network" if hidden > 0 else "Logistic Regression"
    return MODEL_NAMES[kind]


@dataclass
class CellResult:
    model: str
    variant: str
    report: Optional[MetricsReport]
    hyperparams: dict
    y_hat_b: np.ndarray
    y_hat_w: np.ndarray
    y_b: np.ndarray
    y_w: np.ndarray
    error: Optional[str] = None


@dataclass
class AblationReport:
    task: str
    metric: str
    cells: list
    provenance: dict
    hidden: int = 0

    def table(self) -> pd.DataFrame:
        """One row per cell: CFU, overall metric, then the metric per group."""
        m = self.metric
        rows = []
        for c in self.cells:
            r = c.report
            rows.append({
                "Model": model_display_name(c.model, self.hidden),
                "Algorithm": f"Algorithm {c.variant[1]}",
                "Test CFU": None if r is None else r.cfu,
                f"Test {m}": None if r is None else r.metric,
                f"Test {m} /Whites": None if r is None else r.metric_white,
                f"Test {m} /Blacks": None if r is None else r.metric_black,
                "Test pairs": None if r is None else r.n,
                "Error": c.error or "",
            })
        return pd.DataFrame(rows)

    def to_csv(self) -> str:
        return self.table().to_csv(index=False, lineterminator="\n", float_format="%.10g")

    def to_markdown(self) -> str:
        t = self.table()
        title = "Mortgage Approval Prediction Results" if self.task == "approval" else "Interest Rate Prediction Results"
        cols = [c for c in t.columns if c not in ("Error",)]
        lines = [f"## {title}", "", "| " + " | ".join(cols) + " |",
                 "|" + "|".join("---" for _ in cols) + "|"]
        for _, row in t.iterrows():
            cells = []
            for c in cols:
                v = row[c]
                if isinstance(v, float):
                    cells.append("" if math.isnan(v) else (f"{v:.4f}" if c == "Test CFU" else f"{v:.3f}"))
                elif v is None:
                    cells.append("n/a")
                else:
                    cells.append(str(v))
            lines.append("| " + " | ".join(cells) + " |")
        errs = [f"- {r['Model']} / {r['Algorithm']}: {r['Error']}" for _, r in t.iterrows() if r["Error"]]
        if errs:
            lines += ["", "Failed cells:", *errs]
        return "\n".join(lines) + "\n"

    def cell(self, model: str, variant: str) -> CellResult:
        for c in self.cells:
            if c.model == model and c.variant == variant:
                return c
        raise KeyError((model, variant))


@dataclass
class AblationRun:
    report: AblationReport
    pairs: MatchedPairSet
    train_pairs: pd.DataFrame
    test_pairs: pd.DataFrame
    plan: RandomizationPlan
    training_ids: dict  # variant -> list of ids used for training


class CellError(RuntimeError):
    def __init__(self, model: str, variant: str, cause: Exception):
        super().__init__(f"{model}/{variant}: {cause}")
        self.model, self.variant, self.cause = model, variant, cause


def data_fingerprint(df: pd.DataFrame) -> str:
    h = pd.util.hash_pandas_object(df.reset_index(drop=True), index=False).to_numpy()
    return hashlib.sha256(h.tobytes()).hexdigest()


def _fill_population_means(df: pd.DataFrame) -> pd.DataFrame:
    out = df.copy()
    for v in NUMERIC_FIELDS:
        col = out[v]
        if col.isna().any():
            observed = col.dropna()
            if observed.empty:
                raise ValueError(f"variable {v!r} is missing in every record")
            out[v] = col.fillna(math.fsum(observed) / len(observed))
    return out


def prepare_records(records: pd.DataFrame, pairs: MatchedPairSet, coarsened_mode: bool) -> pd.DataFrame:
    """Matched rows get matched-set means, remaining rows population means.

    Coarsened mode keeps raw values: missing values get their own bracket.
    """
    if coarsened_mode:
        return records.copy()
    return _fill_population_means(impute_means(pairs, records))


def _labels(df: pd.DataFrame, col: str) -> np.ndarray:
    return df[col].to_numpy(dtype=float)


def run_ablation(config: ExperimentConfig, records: pd.DataFrame,
                 pairs: Optional[MatchedPairSet] = None) -> AblationRun:
    """Train and score every requested (model, variant) cell.

    The split, the randomization plan and the test set are computed once and
    shared by all cells.
    """
    seed = config.seed
    label = config.label
    population = records[records["race"].isin(RACES)].reset_index(drop=True)
    if pairs is None:
        pairs = match_exact(population, config.binning, derive_seed(seed, "match"))
    if len(pairs) == 0:
        raise ValueError("no matched pairs")
    if label == "interest_rate" and population["interest_rate"].notna().sum() == 0:
        raise ValueError("task 'rate' needs interest rates but none are observed")

    prepared = prepare_records(population, pairs, config.coarsened_mode)
    train_pairs, test_pairs = split_pairs(pairs.pairs, config.holdout, derive_seed(seed, "split"))

    if label == "interest_rate":
        has_rate = set(prepared.loc[prepared["interest_rate"].notna(), "id"])
        keep = lambda p: p[p["black_id"].isin(has_rate) & p["white_id"].isin(has_rate)].reset_index(drop=True)
        train_task, test_task = keep(train_pairs), keep(test_pairs)
        if len(test_task) == 0:
            raise ValueError("no test pair has an observed interest rate for both members")
    else:
        train_task, test_task = train_pairs, test_pairs

    randomized, plan = swap_labels(train_task, prepared, label, derive_seed(seed, "randomize"))
    by_id = prepared.set_index("id")
    test_b = by_id.loc[list(test_task["black_id"])].reset_index()
    test_w = by_id.loc[list(test_task["white_id"])].reset_index()

    base = FeaturePolicy(coarsened_mode=config.coarsened_mode, binning=config.binning)
    cells, training_ids = [], {}
    for kind in config.models:
        for variant in config.variants:
            # exclusion uses every test pair so no individual leaks via the unfiltered split
            ts = build_training_set(variant, randomized if variant == "A4" else prepared,
                                    train_task if variant in ("A3", "A4") else train_pairs,
                                    test_pairs, base)
            train = ts.records
            if label == "interest_rate":
                train = train[train["interest_rate"].notna()].reset_index(drop=True)
            training_ids[variant] = list(train["id"])
            try:
                cells.append(_run_cell(config, kind, variant, train, ts.policy, test_b, test_w))
            except Exception as e:  # noqa: BLE001 - reported per cell
                if not config.keep_going:
                    raise CellError(kind, variant, e) from e
                log.warning("cell %s/%s failed: %s", kind, variant, e)
                empty = np.zeros(0)
                cells.append(CellResult(kind, variant, None, {}, empty, empty, empty, empty, str(e)))

    provenance = {
        "version": __version__,
        "seed": seed,
        "sub_seeds": {s: derive_seed(seed, s) for s in ("match", "split", "randomize", "cv", "fit")},
        "config_hash": config.config_hash(),
        "data_fingerprint": data_fingerprint(records),
        "n_records": int(len(population)),
        "n_pairs": int(len(pairs)),
        "n_train_pairs": int(len(train_task)),
        "n_test_pairs": int(len(test_task)),
        "hyperparams": {f"{c.model}/{c.variant}": c.hyperparams for c in cells},
    }
    report = AblationReport(config.task, config.metric, cells, provenance, hidden=config.hidden)
    return AblationRun(report, pairs, train_pairs, test_pairs, plan, training_ids)


def _run_cell(config: ExperimentConfig, kind: str, variant: str, train: pd.DataFrame,
              policy: FeaturePolicy, test_b: pd.DataFrame, test_w: pd.DataFrame) -> CellResult:
    label = config.label
    task = "classify" if config.task == "approval" else "regress"
    y = _labels(train, label)
    grid = config.grid_for(kind)
    if kind == "classifier":
        grid = _with_hidden(grid, config.hidden)
    hp = cross_validate(train, y, policy, kind, grid, config.k_folds,
                        derive_seed(config.seed, f"cv/{kind}/{variant}"), task, config.threads)
    fitted = policy.fitted(train)
    model = fit_model(kind, encode(train, fitted), y, hp, derive_seed(config.seed, f"fit/{kind}/{variant}"),
                      task, fitted, config.threads)
    y_hat_b = predict(model, encode(test_b, fitted))
    y_hat_w = predict(model, encode(test_w, fitted))
    y_b, y_w = _labels(test_b, label), _labels(test_w, label)
    report = metrics_report(y_hat_b, y_hat_w, y_b, y_w, config.metric)
    log.info("%s/%s: cfu=%.4f %s=%.4f", kind, variant, report.cfu, config.metric, report.metric)
    return CellResult(kind, variant, report, hp, y_hat_b, y_hat_w, y_b, y_w)


def _with_hidden(grid, hidden: int):
    if isinstance(grid, dict):
        return {**grid, "hidden": [hidden]} if "hidden" not in grid else grid
    return [{"hidden": hidden, **g} for g in grid]


def bootstrap_gap_ci(cell: CellResult, metric: str, n_boot: int = 500, seed: int = 0,
                     level: float = 0.95):
    """Percentile bootstrap CI of (White metric - Black metric), resampling test pairs."""
    score = auc if metric == "AUC" else rmse
    n = len(cell.y_hat_b)
    rng = np.random.default_rng(seed)
    gaps = []
    for _ in range(n_boot):
        i = rng.integers(0, n, n)
        try:
            gaps.append(score(cell.y_hat_w[i], cell.y_w[i]) - score(cell.y_hat_b[i], cell.y_b[i]))
        except ValueError:
            continue
    a = (1.0 - level) / 2.0
    return float(np.quantile(gaps, a)), float(np.quantile(gaps, 1.0 - a))


def histograms(report: AblationReport, bin_width: Optional[float] = None) -> pd.DataFrame:
    """Histogram tables of every successful cell, stacked with model/variant columns."""
    width = bin_width or (0.05 if report.task == "approval" else 0.1)
    parts = []
    for c in report.cells:
        if c.report is None:
            continue
        h = emit_histograms(np.column_stack([c.y_hat_b, c.y_hat_w]), width)
        h.insert(0, "algorithm", f"Algorithm {c.variant[1]}")
        h.insert(0, "model", model_display_name(c.model, report.hidden))
        parts.append(h)
    if not parts:
        return pd.DataFrame(columns=["model", "algorithm", "bin_left", "bin_right", "black", "white"])
    return pd.concat(parts, ignore_index=True)
