"""Synthetic applications drawn from the lending causal graph.

Sampling order: (race, sex) jointly; financials (income, LTV, DTI) from
demographics plus noise; a latent credit score that is never emitted;
approval through a logistic link; interest rate for approved applications
through a linear model; missingness last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, asdict, replace

import numpy as np
import pandas as pd

from . import LIENS, LOAN_TYPES, SEXES
from .ingest import HOME_PURCHASE, make_frame

# Rows per random stream; chunk c draws from child c of the seed sequence.
# (A plain [seed, 0] entropy list would collide with default_rng(seed).)
CHUNK = 1 << 16


@dataclass(frozen=True)
class GeneratorParams:
    n: int = 20_000
    seed: int = 0
    p_black: float = 0.114
    # demographics
    sex_probs: tuple = (0.42, 0.23, 0.30, 0.05)  # Male, Female, Joint, NotAvailable
    race_sex_assoc: float = 0.0  # probability mass moved from Joint to Female for Black applicants
    states: tuple = ("CA", "TX", "FL", "GA", "NY", "IL", "NC", "OH")
    state_probs: tuple = (0.2, 0.16, 0.14, 0.12, 0.11, 0.1, 0.09, 0.08)
    loan_type_probs: tuple = (0.72, 0.18, 0.07, 0.03)
    lien_probs: tuple = (0.97, 0.03)
    # financials (native units)
    income_median: float = 90.0
    income_sigma: float = 0.5
    joint_income_factor: float = 1.4
    income_shift: float = 0.0  # thousands of USD, Black minus White
    ltv_mean: float = 82.0
    ltv_sd: float = 12.0
    ltv_shift: float = 0.0
    dti_mean: float = 36.0
    dti_sd: float = 9.0
    dti_shift: float = 0.0
    # latent credit score
    cs_mean: float = 700.0
    cs_sd: float = 50.0
    cs_shift: float = 0.0
    # approval, log-odds
    app_intercept: float = 2.4
    app_income: float = 0.4  # per log(income / median)
    app_ltv: float = -0.2  # per 10 points
    app_dti: float = -0.5  # per 10 points
    app_cs: float = 0.8  # per credit-score sd
    delta_app: float = 0.0
    # interest rate, percent
    rate_intercept: float = 3.9
    rate_income: float = -0.1
    rate_ltv: float = 0.05
    rate_dti: float = 0.04
    rate_cs: float = -0.15
    delta_rate: float = 0.0
    rate_noise: float = 0.35
    # missingness
    missing_income: float = 0.0
    missing_dti: float = 0.0
    missing_ltv: float = 0.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        probs = [self.p_black, self.missing_income, self.missing_dti, self.missing_ltv]
        if not all(0.0 <= p <= 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        for name in ("income_sigma", "ltv_sd", "dti_sd", "cs_sd", "rate_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("sex_probs", "state_probs", "loan_type_probs", "lien_probs"):
            p = np.asarray(getattr(self, name), dtype=float)
            if (p < 0).any() or not math.isclose(p.sum(), 1.0, abs_tol=1e-9):
                raise ValueError(f"{name} must be a probability vector")
        if len(self.states) != len(self.state_probs):
            raise ValueError("states and state_probs differ in length")
        if not 0.0 <= self.race_sex_assoc <= self.sex_probs[2]:
            raise ValueError("race_sex_assoc must lie in [0, P(Joint)]")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        d = dict(d or {})
        preset = d.pop("preset", None)
        base = PRESETS[preset] if preset else cls()
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown generator parameters: {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return replace(base, **d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


PRESETS = {
    "null": GeneratorParams(p_black=0.5),
    "paper-like": GeneratorParams(
        p_black=0.114,
        race_sex_assoc=0.08,
        income_shift=-20.0,
        ltv_shift=3.0,
        dti_shift=3.0,
        cs_shift=-25.0,
        delta_app=-0.3,
        delta_rate=0.12,
        missing_income=0.01,
        missing_dti=0.03,
        missing_ltv=0.02,
    ),
}


def preset(name: str, **overrides) -> GeneratorParams:
    return replace(PRESETS[name], **overrides)


def _chunk(p: GeneratorParams, start: int, size: int, rng: np.random.Generator) -> dict:
    black = rng.random(size) < p.p_black
    base = np.asarray(p.sex_probs, dtype=float)
    shifted = base.copy()
    shifted[1] += p.race_sex_assoc
    shifted[2] -= p.race_sex_assoc
    u = rng.random(size)
    sex_idx = np.where(black,
                       np.searchsorted(np.cumsum(shifted)[:-1], u, side="right"),
                       np.searchsorted(np.cumsum(base)[:-1], u, side="right"))
    state_idx = rng.choice(len(p.states), size=size, p=p.state_probs)
    loan_idx = rng.choice(len(LOAN_TYPES), size=size, p=p.loan_type_probs)
    lien_idx = rng.choice(len(LIENS), size=size, p=p.lien_probs)

    b = black.astype(float)
    joint = sex_idx == SEXES.index("Joint")
    income = np.exp(rng.normal(math.log(p.income_median), p.income_sigma, size))
    income = income * np.where(joint, p.joint_income_factor, 1.0) + p.income_shift * b
    income = np.maximum(np.round(income), 1.0)
    ltv = np.clip(rng.normal(p.ltv_mean, p.ltv_sd, size) + p.ltv_shift * b, 5.0, 150.0)
    ltv = np.round(ltv, 3)
    dti = np.clip(np.round(rng.normal(p.dti_mean, p.dti_sd, size) + p.dti_shift * b), 0.0, 80.0)
    credit = rng.normal(p.cs_mean, p.cs_sd, size) + p.cs_shift * b
    cs_z = (credit - p.cs_mean) / p.cs_sd if p.cs_sd > 0 else np.zeros(size)

    log_inc = np.log(income / p.income_median)
    logit = (p.app_intercept + p.app_income * log_inc + p.app_ltv * (ltv - 80.0) / 10.0
             + p.app_dti * (dti - 36.0) / 10.0 + p.app_cs * cs_z + p.delta_app * b)
    approved = rng.random(size) < 1.0 / (1.0 + np.exp(-logit))
    rate = (p.rate_intercept + p.rate_income * log_inc + p.rate_ltv * (ltv - 80.0) / 10.0
            + p.rate_dti * (dti - 36.0) / 10.0 + p.rate_cs * cs_z + p.delta_rate * b
            + rng.normal(0.0, p.rate_noise, size))
    rate = np.where(approved, np.round(np.maximum(rate, 0.0), 3), np.nan)

    for arr, q in ((income, p.missing_income), (dti, p.missing_dti), (ltv, p.missing_ltv)):
        arr[rng.random(size) < q] = np.nan

    return {
        "id": [f"syn{start + i:07d}" for i in range(size)],
        "race": np.where(black, "Black", "White").astype(object),
        "sex": np.asarray(SEXES, dtype=object)[sex_idx],
        "income": income,
        "state": np.asarray(p.states, dtype=object)[state_idx],
        "loan_type": np.asarray(LOAN_TYPES, dtype=object)[loan_idx],
        "dti": dti,
        "ltv": ltv,
        "lien": np.asarray(LIENS, dtype=object)[lien_idx],
        "approved": approved,
        "interest_rate": rate,
    }


def generate(params: GeneratorParams) -> pd.DataFrame:
    """Records frame of ``params.n`` synthetic applications; deterministic in ``params``."""
    parts = []
    for c, start in enumerate(range(0, params.n, CHUNK)):
        size = min(CHUNK, params.n - start)
        rng = np.random.default_rng(np.random.SeedSequence(params.seed, spawn_key=(c,)))
        parts.append(_chunk(params, start, size, rng))
    cols = {k: np.concatenate([np.asarray(p[k], dtype=object if k in ("id",) else None) for p in parts])
            for k in parts[0]}
    cols["purpose"] = [HOME_PURCHASE] * params.n
    cols["year"] = [2019] * params.n
    return make_frame(cols)
