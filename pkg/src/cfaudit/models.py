"""Feature encoding and the predictor suite.

Three model kinds share one handle type:

* ``linear``     ridge regression (interest rate)
* ``classifier`` logistic regression, or a one-hidden-layer tanh network
                 when ``hidden > 0`` (approval)
* ``forest``     bagged CART trees, regression or class-fraction probabilities
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd
from scipy.optimize import minimize
from scipy.special import expit

from . import LIENS, LOAN_TYPES, NUMERIC_FIELDS, RACES, SEXES
from .matching import BinningSpec
from .metrics import auc, rmse
from .tree import Tree, fit_trees

FORMAT_VERSION = 1

STATES = (
    "AK", "AL", "AR", "AS", "AZ", "CA", "CO", "CT", "DC", "DE", "FL", "GA", "GU", "HI",
    "IA", "ID", "IL", "IN", "KS", "KY", "LA", "MA", "MD", "ME", "MI", "MN", "MO", "MP",
    "MS", "MT", "NC", "ND", "NE", "NH", "NJ", "NM", "NV", "NY", "OH", "OK", "OR", "PA",
    "PR", "RI", "SC", "SD", "TN", "TX", "UT", "VA", "VI", "VT", "WA", "WI", "WV", "WY",
    "NA",
)
DEFAULT_VOCAB = {
    "sex": SEXES,
    "state": STATES,
    "loan_type": LOAN_TYPES,
    "lien": LIENS,
    "race": RACES,
}
DEFAULT_FEATURES = ("sex", "income", "state", "loan_type", "dti", "ltv", "lien")
LABELS = ("approved", "interest_rate")


@dataclass(frozen=True)
class FeaturePolicy:
    """Which features are encoded and how.

    Categoricals are one-hot against ``vocab``; numerics are standardized
    with the training statistics in ``stats`` (see ``fitted``).  In
    coarsened mode numerics are replaced by their bracket index, with -1 for
    missing values.
    """

    include_race: bool = True
    features: tuple = DEFAULT_FEATURES
    coarsened_mode: bool = False
    binning: BinningSpec = field(default_factory=BinningSpec)
    vocab: dict = field(default_factory=lambda: dict(DEFAULT_VOCAB))
    stats: Optional[dict] = None

    def __post_init__(self):
        feats = tuple(f for f in self.features if f != "race")
        if set(feats) & set(LABELS):
            raise ValueError("outcome labels cannot be features")
        if self.include_race:
            feats = feats + ("race",)
        object.__setattr__(self, "features", feats)

    @property
    def numeric(self) -> tuple:
        return tuple(f for f in self.features if f not in self.vocab)

    @property
    def columns(self) -> list:
        cols = []
        for f in self.features:
            if f in self.vocab:
                cols += [f"{f}={v}" for v in self.vocab[f]]
            else:
                cols.append(f"{f}_bin" if self.coarsened_mode else f)
        return cols

    def _raw_numeric(self, df: pd.DataFrame, name: str) -> np.ndarray:
        x = df[name].to_numpy(dtype=float)
        if self.coarsened_mode:
            b = np.searchsorted(np.asarray(self.binning.edges[name]), x, side="left").astype(float)
            b[np.isnan(x)] = -1.0
            return b
        if np.isnan(x).any():
            raise ValueError(f"missing values in numeric feature {name!r}; impute first")
        return x

    def fitted(self, df: pd.DataFrame) -> "FeaturePolicy":
        """Copy with standardization statistics taken from ``df``."""
        stats = {}
        for name in self.numeric:
            x = self._raw_numeric(df, name)
            mean = float(x.mean()) if len(x) else 0.0
            std = float(x.std()) if len(x) else 1.0
            stats[name] = (mean, std if std > 0 else 1.0)
        return replace(self, stats=stats)

    def without_race(self) -> "FeaturePolicy":
        return replace(self, include_race=False)

    def to_dict(self) -> dict:
        return {
            "include_race": self.include_race,
            "features": list(self.features),
            "coarsened_mode": self.coarsened_mode,
            "binning": self.binning.to_dict(),
            "vocab": {k: list(v) for k, v in self.vocab.items()},
            "stats": None if self.stats is None else {k: list(v) for k, v in self.stats.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturePolicy":
        return cls(
            include_race=d["include_race"],
            features=tuple(d["features"]),
            coarsened_mode=d["coarsened_mode"],
            binning=BinningSpec(edges=d["binning"]),
            vocab={k: tuple(v) for k, v in d["vocab"].items()},
            stats=None if d["stats"] is None else {k: tuple(v) for k, v in d["stats"].items()},
        )


@dataclass
class FeatureMatrix:
    values: np.ndarray
    columns: list
    row_ids: list

    @property
    def shape(self):
        return self.values.shape


def encode(df: pd.DataFrame, policy: FeaturePolicy) -> FeatureMatrix:
    """Encode a records frame; raises on unseen categories or missing numerics."""
    if policy.stats is None and policy.numeric:
        raise ValueError("policy has no standardization statistics; call fitted() first")
    blocks = []
    for f in policy.features:
        if f in policy.vocab:
            vocab = list(policy.vocab[f])
            codes = pd.Categorical(df[f], categories=vocab).codes
            if (codes < 0).any():
                bad = sorted(set(df[f][codes < 0].astype(str)))
                raise ValueError(f"unseen {f} categories: {bad}")
            block = np.zeros((len(df), len(vocab)))
            block[np.arange(len(df)), codes] = 1.0
        else:
            mean, std = policy.stats[f]
            block = ((policy._raw_numeric(df, f) - mean) / std)[:, None]
        blocks.append(block)
    values = np.hstack(blocks) if blocks else np.zeros((len(df), 0))
    return FeatureMatrix(values=np.ascontiguousarray(values), columns=policy.columns,
                         row_ids=list(df["id"]))


@dataclass
class ModelHandle:
    kind: str  # linear | classifier | forest
    params: dict
    policy: Optional[FeaturePolicy]
    hyperparams: dict
    seed: int = 0
    task: str = "regress"

    @property
    def trees(self) -> list:
        return self.params["trees"]

    def to_json(self) -> str:
        params = dict(self.params)
        if self.kind == "forest":
            params["trees"] = [t.to_dict() for t in self.trees]
        else:
            params = {k: np.asarray(v).tolist() for k, v in params.items()}
        doc = {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "task": self.task,
            "seed": self.seed,
            "hyperparams": self.hyperparams,
            "policy": None if self.policy is None else self.policy.to_dict(),
            "params": params,
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelHandle":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {doc.get('format_version')!r}")
        if doc["kind"] == "forest":
            params = {"trees": [Tree.from_dict(t) for t in doc["params"]["trees"]]}
        else:
            params = {k: np.asarray(v, dtype=float) for k, v in doc["params"].items()}
        policy = None if doc["policy"] is None else FeaturePolicy.from_dict(doc["policy"])
        return cls(kind=doc["kind"], params=params, policy=policy,
                   hyperparams=doc["hyperparams"], seed=doc["seed"], task=doc["task"])


def _as_array(X) -> np.ndarray:
    return X.values if isinstance(X, FeatureMatrix) else np.asarray(X, dtype=float)


def _policy_of(X) -> Optional[FeaturePolicy]:
    return getattr(X, "policy", None)


# ---------------------------------------------------------------- linear


def fit_linear(X, y, hyperparams: Optional[dict] = None, policy: Optional[FeaturePolicy] = None) -> ModelHandle:
    """Ridge regression with an unpenalized intercept.

    Solved as a least-squares problem on the centered design stacked with
    ``sqrt(l2) * I``, which stays well posed under collinear one-hot blocks.
    """
    hp = {"l2": 1e-2, **(hyperparams or {})}
    A = _as_array(X)
    y = np.asarray(y, dtype=float)
    if A.shape[0] == 0:
        raise ValueError("fit_linear on empty input")
    if A.shape[0] != len(y):
        raise ValueError("X and y differ in length")
    xm = A.mean(axis=0)
    ym = y.mean()
    d = A.shape[1]
    lam = float(hp["l2"])
    if lam < 0:
        raise ValueError("l2 must be >= 0")
    aug = np.vstack([A - xm, math.sqrt(lam) * np.eye(d)])
    rhs = np.concatenate([y - ym, np.zeros(d)])
    coef = np.linalg.lstsq(aug, rhs, rcond=None)[0]
    intercept = ym - xm @ coef
    return ModelHandle("linear", {"coef": coef, "intercept": np.array(intercept)}, policy, hp,
                       task="regress")


# ------------------------------------------------------------ classifier


def logistic_loss_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float):
    """Mean log-loss plus ``l2/2 * |w|^2`` and its gradient; ``theta = (w, b)``."""
    w, b = theta[:-1], theta[-1]
    z = X @ w + b
    # log(1 + e^z) - y z, computed stably
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * (w @ w)
    r = (expit(z) - y) / len(y)
    grad = np.empty_like(theta)
    grad[:-1] = X.T @ r + l2 * w
    grad[-1] = r.sum()
    return loss, grad


def _mlp_unpack(theta, d, h):
    W1 = theta[: d * h].reshape(d, h)
    b1 = theta[d * h: d * h + h]
    w2 = theta[d * h + h: d * h + 2 * h]
    b2 = theta[-1]
    return W1, b1, w2, b2


def mlp_loss_grad(theta: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float, hidden: int):
    d = X.shape[1]
    W1, b1, w2, b2 = _mlp_unpack(theta, d, hidden)
    H = np.tanh(X @ W1 + b1)
    z = H @ w2 + b2
    loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * ((W1 * W1).sum() + w2 @ w2)
    r = (expit(z) - y) / len(y)
    gW2 = H.T @ r + l2 * w2
    gb2 = r.sum()
    dH = np.outer(r, w2) * (1.0 - H * H)
    gW1 = X.T @ dH + l2 * W1
    gb1 = dH.sum(axis=0)
    return loss, np.concatenate([gW1.ravel(), gb1, gW2, [gb2]])


def fit_classifier(X, y, hyperparams: Optional[dict] = None, seed: int = 0,
                   policy: Optional[FeaturePolicy] = None) -> ModelHandle:
    """Probability classifier fitted by L-BFGS on the penalized log-loss.

    ``hidden=0`` (default) is logistic regression; ``hidden>0`` adds one
    tanh hidden layer of that width.
    """
    hp = {"l2": 1e-4, "hidden": 0, "tol": 1e-9, "max_iter": 2000, **(hyperparams or {})}
    A = _as_array(X)
    y = np.asarray(y, dtype=float)
    if A.shape[0] == 0:
        raise ValueError("fit_classifier on empty input")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("classifier labels must be 0/1")
    if y.min() == y.max():
        raise ValueError("classifier needs both classes in y")
    d, h = A.shape[1], int(hp["hidden"])
    l2 = float(hp["l2"])
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    if h == 0:
        theta0 = np.zeros(d + 1)
        fun = lambda t: logistic_loss_grad(t, A, y, l2)
    else:
        rng = np.random.default_rng(seed)
        theta0 = np.concatenate([
            rng.normal(0.0, 1.0 / math.sqrt(max(d, 1)), d * h),
            np.zeros(h),
            rng.normal(0.0, 1.0 / math.sqrt(h), h),
            [0.0],
        ])
        fun = lambda t: mlp_loss_grad(t, A, y, l2, h)
    res = minimize(fun, theta0, jac=True, method="L-BFGS-B",
                   options={"gtol": float(hp["tol"]), "ftol": 1e-15, "maxiter": int(hp["max_iter"])})
    return ModelHandle("classifier", {"theta": res.x}, policy, hp, seed=seed, task="classify")


# ---------------------------------------------------------------- forest


def fit_forest(X, y, hyperparams: Optional[dict] = None, seed: int = 0, task: str = "regress",
               policy: Optional[FeaturePolicy] = None, threads: int = 1) -> ModelHandle:
    hp = {"n_trees": 50, "max_depth": None, "min_leaf": 1, "feature_subsample": "sqrt",
          **(hyperparams or {})}
    if task not in ("regress", "classify"):
        raise ValueError(f"unknown forest task {task!r}")
    A = _as_array(X)
    y = np.asarray(y, dtype=float)
    if task == "classify" and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("classification labels must be 0/1")
    trees = fit_trees(A, y, int(hp["n_trees"]), seed, hp["max_depth"], int(hp["min_leaf"]),
                      hp["feature_subsample"], threads=threads)
    return ModelHandle("forest", {"trees": trees}, policy, hp, seed=seed, task=task)


# --------------------------------------------------------------- predict


def _predict_rows(handle: ModelHandle, A: np.ndarray) -> np.ndarray:
    if handle.kind == "linear":
        return (A * handle.params["coef"]).sum(axis=1) + float(handle.params["intercept"])
    if handle.kind == "classifier":
        theta = handle.params["theta"]
        h = int(handle.hyperparams.get("hidden", 0))
        if h == 0:
            return expit((A * theta[:-1]).sum(axis=1) + theta[-1])
        W1, b1, w2, b2 = _mlp_unpack(theta, A.shape[1], h)
        return expit(np.tanh(A @ W1 + b1) @ w2 + b2)
    if handle.kind == "forest":
        return tree_predictions(handle, A).mean(axis=0)
    raise ValueError(f"unknown model kind {handle.kind!r}")


def tree_predictions(handle: ModelHandle, X) -> np.ndarray:
    """Per-tree outputs, shape ``(n_trees, n_rows)``."""
    A = _as_array(X)
    return np.stack([t.predict(A) for t in handle.trees])


def predict(handle: ModelHandle, X) -> np.ndarray:
    """Scores for each row: probabilities for classifiers, values for regressors.

    Duplicate rows are scored once, so identical inputs always get bitwise
    identical outputs.
    """
    if isinstance(X, FeatureMatrix) and handle.policy is not None:
        if list(X.columns) != handle.policy.columns:
            raise ValueError("feature columns do not match the model's policy")
    A = _as_array(X)
    if A.ndim != 2:
        raise ValueError("X must be 2-D")
    expected = _n_inputs(handle)
    if expected is not None and A.shape[1] != expected:
        raise ValueError(f"expected {expected} feature columns, got {A.shape[1]}")
    if len(A) == 0:
        return np.zeros(0)
    uniq, inverse = np.unique(A, axis=0, return_inverse=True)
    out = _predict_rows(handle, uniq)[inverse.ravel()]
    if handle.task == "classify":
        out = np.clip(out, 0.0, 1.0)
    return out


def _n_inputs(handle: ModelHandle) -> Optional[int]:
    if handle.kind == "linear":
        return len(handle.params["coef"])
    if handle.kind == "classifier":
        h = int(handle.hyperparams.get("hidden", 0))
        n = len(handle.params["theta"])
        return n - 1 if h == 0 else (n - 2 * h - 1) // h
    if handle.policy is not None:
        return len(handle.policy.columns)
    return None


# ------------------------------------------------------ cross-validation


DEFAULT_GRIDS = {
    "forest": {"n_trees": [50, 200], "max_depth": [8, 16, None], "min_leaf": [1, 20]},
    "linear": {"l2": [1e-8, 1e-2, 1.0]},
    "classifier": {"l2": [1e-4, 1e-2, 1.0]},
}


def expand_grid(grid) -> list:
    """A dict of lists becomes its Cartesian product; a list of dicts passes through."""
    if isinstance(grid, dict):
        keys = list(grid)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(grid[k] for k in keys))]
    return [dict(g) for g in grid]


def simplicity_key(kind: str, hp: dict) -> tuple:
    """Smaller is simpler: fewer trees, shallower, larger leaves, stronger penalty."""
    if kind == "forest":
        depth = hp.get("max_depth")
        return (hp.get("n_trees", 0), math.inf if depth is None else depth, -hp.get("min_leaf", 1))
    return (hp.get("hidden", 0), -float(hp.get("l2", 0.0)))


def kfold_indices(n: int, k: int, seed: int) -> list:
    """Seeded partition of ``range(n)`` into ``k`` validation folds."""
    if k < 2:
        raise ValueError("k_folds must be >= 2")
    if n < k:
        raise ValueError(f"cannot make {k} folds from {n} rows")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, k)]


def fit_model(kind: str, X, y, hyperparams: dict, seed: int, task: str,
              policy: Optional[FeaturePolicy] = None, threads: int = 1) -> ModelHandle:
    if kind == "linear":
        return fit_linear(X, y, hyperparams, policy=policy)
    if kind == "classifier":
        return fit_classifier(X, y, hyperparams, seed=seed, policy=policy)
    if kind == "forest":
        return fit_forest(X, y, hyperparams, seed=seed, task=task, policy=policy, threads=threads)
    raise ValueError(f"unknown model kind {kind!r}")


def task_of(kind: str, label: str) -> str:
    return "classify" if label == "approved" else "regress"


def cv_scores(df: pd.DataFrame, y, policy: FeaturePolicy, kind: str, grid, k_folds: int,
              seed: int, task: str, threads: int = 1) -> list:
    """Per grid point: (hyperparams, per-fold validation scores)."""
    y = np.asarray(y, dtype=float)
    folds = kfold_indices(len(df), k_folds, seed)
    if task == "classify":
        for f in folds:
            if np.unique(y[f]).size < 2:
                raise ValueError("a cross-validation fold is single-class")
    out = []
    for hp in expand_grid(grid):
        scores = []
        for i, val in enumerate(folds):
            train = np.setdiff1d(np.arange(len(df)), val, assume_unique=True)
            tr, va = df.iloc[train], df.iloc[val]
            pol = policy.fitted(tr)
            model = fit_model(kind, encode(tr, pol), y[train], hp, seed, task, pol, threads)
            pred = predict(model, encode(va, pol))
            scores.append(auc(pred, y[val]) if task == "classify" else rmse(pred, y[val]))
        out.append((hp, scores))
    return out


def cross_validate(df: pd.DataFrame, y, policy: FeaturePolicy, kind: str, grid, k_folds: int = 3,
                   seed: int = 0, task: str = "regress", threads: int = 1) -> dict:
    """Grid point with the best mean validation AUC (classify) or RMSE (regress).

    Exact ties resolve toward the simpler model.
    """
    points = expand_grid(grid)
    if not points:
        raise ValueError("empty hyperparameter grid")
    if len(points) == 1:
        return points[0]
    results = cv_scores(df, y, policy, kind, points, k_folds, seed, task, threads)
    results.sort(key=lambda r: simplicity_key(kind, r[0]))
    best, best_score = None, None
    for hp, scores in results:
        s = float(np.mean(scores))
        s = -s if task == "classify" else s
        if best_score is None or s < best_score:
            best, best_score = hp, s
    return best
