"""Coarsened exact matching of Black and White applications.

Numeric covariates are cut into brackets, every application gets an exact
match key (bin indices, categorical values and a missingness bitmask), and
within each key bucket Black applications are paired 1:1 with White ones
without replacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .ingest import ApplicationRecord

CATEGORICAL_KEY = ("sex", "state", "loan_type", "lien")

DEFAULT_EDGES = {
    "income": (32.0, 53.0, 107.0, 374.0),
    "dti": (0.0, 20.0, 30.0, 36.0, 40.0, 45.0, 50.0, 60.0),
    "ltv": (40.0, 60.0, 79.0, 81.0, 90.0, 100.0),
}


@dataclass(frozen=True)
class BinningSpec:
    """Bracket edges per numeric variable.

    ``k`` edges give ``k + 1`` bins ``(-inf, e1], (e1, e2], ..., (ek, inf)``.
    Extra variables (an ``age`` column, say) may be added as long as the
    records frame carries a column of the same name.
    """

    edges: dict = field(default_factory=lambda: dict(DEFAULT_EDGES))

    def __post_init__(self):
        clean = {}
        for name, e in self.edges.items():
            e = tuple(float(x) for x in e)
            if not e:
                raise ValueError(f"{name}: no edges")
            if not all(math.isfinite(x) for x in e):
                raise ValueError(f"{name}: edges must be finite")
            if any(b <= a for a, b in zip(e, e[1:])):
                raise ValueError(f"{name}: edges must be strictly increasing")
            clean[name] = e
        object.__setattr__(self, "edges", clean)

    @property
    def variables(self) -> tuple:
        return tuple(self.edges)

    def bin_index(self, name: str, value: Optional[float]) -> Optional[int]:
        if value is None or (isinstance(value, float) and math.isnan(value)):
            return None
        # number of edges strictly below value == index of its (lo, hi] bin
        return int(np.searchsorted(self.edges[name], value, side="left"))

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "BinningSpec":
        if not d:
            return cls()
        return cls(edges={**DEFAULT_EDGES, **d})

    def to_dict(self) -> dict:
        return {k: list(v) for k, v in self.edges.items()}


@dataclass(frozen=True)
class CoarsenedKey:
    bins: tuple  # (variable, bin index or None) in BinningSpec order
    categories: tuple  # (field, value) for CATEGORICAL_KEY
    missing_mask: int  # bit i set when the i-th binned variable is absent


def coarsen(record: ApplicationRecord, spec: BinningSpec = BinningSpec(), extra: Optional[dict] = None) -> CoarsenedKey:
    """Exact-match key of a single record; race and outcomes never enter it."""
    bins, mask = [], 0
    for i, name in enumerate(spec.variables):
        value = extra[name] if extra and name in extra else getattr(record, name)
        b = spec.bin_index(name, value)
        if b is None:
            mask |= 1 << i
        bins.append((name, b))
    cats = tuple((c, getattr(record, c)) for c in CATEGORICAL_KEY)
    return CoarsenedKey(bins=tuple(bins), categories=cats, missing_mask=mask)


def coarsen_frame(df: pd.DataFrame, spec: BinningSpec = BinningSpec()) -> pd.DataFrame:
    """Vectorized ``coarsen``: one key column per component, missing bins as -1."""
    out = pd.DataFrame(index=df.index)
    for c in CATEGORICAL_KEY:
        out[c] = df[c].values
    mask = np.zeros(len(df), dtype=np.int64)
    for i, name in enumerate(spec.variables):
        x = df[name].to_numpy(dtype=float)
        miss = np.isnan(x)
        b = np.searchsorted(np.asarray(spec.edges[name]), x, side="left").astype(np.int64)
        b[miss] = -1
        out[f"{name}_bin"] = b
        mask |= miss.astype(np.int64) << i
    out["missing_mask"] = mask
    return out


def key_columns(spec: BinningSpec) -> list:
    return [*CATEGORICAL_KEY, *(f"{v}_bin" for v in spec.variables), "missing_mask"]


@dataclass
class MatchedPairSet:
    pairs: pd.DataFrame  # pair_id, black_id, white_id, key columns
    unmatched_black: list
    unused_white: list
    seed: int
    spec: BinningSpec = field(default_factory=BinningSpec)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def matched_ids(self) -> list:
        return list(self.pairs["black_id"]) + list(self.pairs["white_id"])

    def subset(self, pair_ids) -> pd.DataFrame:
        return self.pairs.set_index("pair_id").loc[list(pair_ids)].reset_index()

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "binning": self.spec.to_dict(),
            "pairs": self.pairs.to_dict(orient="records"),
            "unmatched_black": list(self.unmatched_black),
            "unused_white": list(self.unused_white),
        }


def match_exact(df: pd.DataFrame, spec: BinningSpec = BinningSpec(), seed: int = 0) -> MatchedPairSet:
    """1:1 exact matching without replacement inside coarsened key buckets.

    Within a bucket holding ``b`` Black and ``w`` White applications,
    ``min(b, w)`` pairs are formed; partners are a seeded uniform random
    bijection between random subsets of both sides.  Output pairs are sorted
    by key and then Black id, and ``pair_id`` numbers them in that order.
    """
    df = df.reset_index(drop=True)
    if len(df) == 0:
        return MatchedPairSet(pd.DataFrame(columns=["pair_id", "black_id", "white_id", *key_columns(spec)]),
                              [], [], seed, spec)
    keys = coarsen_frame(df, spec)
    kcols = key_columns(spec)
    bucket = keys.groupby(kcols, sort=True, dropna=False).ngroup().to_numpy()
    is_black = (df["race"] == "Black").to_numpy()
    is_white = (df["race"] == "White").to_numpy()
    ids = df["id"].to_numpy(dtype=object)

    rng = np.random.default_rng(seed)
    priority = rng.permutation(len(df))
    side = np.where(is_black, 0, np.where(is_white, 1, 2))
    order = np.lexsort((priority, side, bucket))
    b_sorted, s_sorted = bucket[order], side[order]
    # rank of each row inside its (bucket, side) run
    start = np.r_[True, (b_sorted[1:] != b_sorted[:-1]) | (s_sorted[1:] != s_sorted[:-1])]
    run_id = np.cumsum(start) - 1
    run_start = np.flatnonzero(start)
    rank = np.arange(len(order)) - run_start[run_id]

    n_buckets = int(bucket.max()) + 1
    n_b = np.bincount(bucket[is_black], minlength=n_buckets)
    n_w = np.bincount(bucket[is_white], minlength=n_buckets)
    n_pairs = np.minimum(n_b, n_w)
    take = (s_sorted < 2) & (rank < n_pairs[b_sorted])

    sel = order[take]
    sel_side, sel_bucket, sel_rank = s_sorted[take], b_sorted[take], rank[take]
    black_rows = sel[sel_side == 0]
    white_rows = sel[sel_side == 1]
    # both sides come out ordered by (bucket, rank), so they align position-wise
    assert np.array_equal(sel_bucket[sel_side == 0], sel_bucket[sel_side == 1])
    assert np.array_equal(sel_rank[sel_side == 0], sel_rank[sel_side == 1])

    pairs = keys.iloc[black_rows][kcols].reset_index(drop=True)
    pairs.insert(0, "white_id", ids[white_rows])
    pairs.insert(0, "black_id", ids[black_rows])
    pairs["_bucket"] = bucket[black_rows]
    pairs = pairs.sort_values(["_bucket", "black_id"], kind="mergesort").drop(columns="_bucket")
    pairs.insert(0, "pair_id", np.arange(len(pairs), dtype=np.int64))
    pairs = pairs.reset_index(drop=True)

    used = np.zeros(len(df), dtype=bool)
    used[sel] = True
    return MatchedPairSet(
        pairs=pairs,
        unmatched_black=list(ids[is_black & ~used]),
        unused_white=list(ids[is_white & ~used]),
        seed=seed,
        spec=spec,
    )


def impute_means(pairs: MatchedPairSet, df: pd.DataFrame, variables=None) -> pd.DataFrame:
    """Fill missing numerics of matched records with the matched-set mean.

    Means are taken over every matched record with an observed value, both
    races pooled.  Unmatched rows are returned unchanged.  Raises
    ``ValueError`` if a variable is missing in every matched record.
    """
    variables = tuple(variables or pairs.spec.variables)
    out = df.copy()
    matched = out["id"].isin(set(pairs.matched_ids)).to_numpy()
    for v in variables:
        col = out[v].to_numpy(dtype=float).copy()
        vals = col[matched]
        observed = vals[~np.isnan(vals)]
        if observed.size == 0:
            raise ValueError(f"variable {v!r} is missing in every matched record")
        if observed.size == vals.size:
            continue
        mean = math.fsum(observed) / observed.size
        fill = matched & np.isnan(col)
        col[fill] = mean
        out[v] = col
    return out


def balance_report(df: pd.DataFrame, pairs: MatchedPairSet) -> pd.DataFrame:
    """Approval rate and mean interest rate per race, before and after matching."""
    matched = df[df["id"].isin(set(pairs.matched_ids))]
    rows = []
    for stage, part in (("all", df), ("matched", matched)):
        for race in ("Black", "White"):
            g = part[part["race"] == race]
            rows.append({
                "stage": stage,
                "race": race,
                "n": len(g),
                "approval_rate": g["approved"].mean() if len(g) else np.nan,
                "n_rate": int(g["interest_rate"].count()),
                "mean_interest_rate": g["interest_rate"].mean() if g["interest_rate"].count() else np.nan,
            })
    return pd.DataFrame(rows)


def balance_gaps(report: pd.DataFrame) -> pd.DataFrame:
    """White minus Black difference of each balance statistic per stage."""
    piv = report.set_index(["stage", "race"])
    out = {}
    for stage in ("all", "matched"):
        w, b = piv.loc[(stage, "White")], piv.loc[(stage, "Black")]
        out[stage] = {
            "approval_gap": w["approval_rate"] - b["approval_rate"],
            "interest_rate_gap": w["mean_interest_rate"] - b["mean_interest_rate"],
        }
    return pd.DataFrame(out).T


PROXY_FEATURES = ("sex", "income", "state", "loan_type", "dti", "ltv", "lien")


def proxy_auc(pairs: MatchedPairSet, df: pd.DataFrame, holdout_fraction: float = 0.25,
              seed: int = 0, hyperparams: Optional[dict] = None) -> float:
    """AUC of a forest predicting race from the seven non-race features of matched data.

    Pairs are split so both members land on the same side; the model is
    trained on the training pairs' members and scored on held-out ones.
    Missing numerics should be imputed first (see ``impute_means``).
    """
    from .experiment import split_pairs
    from .metrics import auc
    from .models import FeaturePolicy, encode, fit_forest, predict

    if len(pairs) < 10:
        raise ValueError(f"proxy_auc needs at least 10 pairs, got {len(pairs)}")
    train, test = split_pairs(pairs.pairs, holdout_fraction, seed)
    by_id = df.set_index("id")

    def members(p):
        ids = list(p["black_id"]) + list(p["white_id"])
        part = by_id.loc[ids].reset_index()
        return part, (part["race"] == "Black").to_numpy(dtype=float)

    tr, y_tr = members(train)
    te, y_te = members(test)
    policy = FeaturePolicy(include_race=False).fitted(tr)
    hp = {"n_trees": 50, "max_depth": 8, "min_leaf": 5, "feature_subsample": "sqrt"}
    hp.update(hyperparams or {})
    model = fit_forest(encode(tr, policy), y_tr, hp, seed=seed, task="classify")
    return auc(predict(model, encode(te, policy)), y_te)
