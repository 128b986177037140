"""Within-pair label swapping for matched training pairs."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
import pandas as pd

LABEL_COLUMNS = {"approval": "approved", "rate": "interest_rate"}


def _label_column(label: str) -> str:
    if label in LABEL_COLUMNS.values():
        return label
    try:
        return LABEL_COLUMNS[label]
    except KeyError:
        raise ValueError(f"unknown label {label!r}") from None


def swap_draw(seed: int, label: str, pair_id: int) -> bool:
    """Fair coin keyed by (seed, label, pair id); independent of processing order."""
    h = hashlib.blake2b(f"{seed}:{label}:{pair_id}".encode(), digest_size=8).digest()
    return bool(h[0] & 1)


@dataclass
class RandomizationPlan:
    seed: int
    label: str
    entries: list  # (pair_id, black_id, white_id, swapped)

    @property
    def n_swapped(self) -> int:
        return sum(1 for e in self.entries if e[3])

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "label": self.label,
            "pairs": [{"pair_id": int(p), "black_id": b, "white_id": w, "swapped": bool(s)}
                      for p, b, w, s in self.entries],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RandomizationPlan":
        d = json.loads(text)
        return cls(d["seed"], d["label"],
                   [(e["pair_id"], e["black_id"], e["white_id"], e["swapped"]) for e in d["pairs"]])


def apply_plan(df: pd.DataFrame, plan: RandomizationPlan) -> pd.DataFrame:
    """Exchange the label between members of every pair marked swapped.

    The operation is its own inverse.
    """
    col = _label_column(plan.label)
    out = df.copy()
    pos = pd.Series(np.arange(len(out)), index=out["id"])
    swapped = [(b, w) for _, b, w, s in plan.entries if s]
    if not swapped:
        return out
    bi = pos.loc[[b for b, _ in swapped]].to_numpy()
    wi = pos.loc[[w for _, w in swapped]].to_numpy()
    values = out[col].to_numpy().copy()
    values[bi], values[wi] = values[wi], values[bi].copy()
    out[col] = values
    return out


def swap_labels(training_pairs: pd.DataFrame, df: pd.DataFrame, label: str, seed: int):
    """Swap ``label`` within each training pair with probability 1/2.

    Returns the updated records frame and the plan that reproduces (or,
    applied again, undoes) the swap.  Raises ``ValueError`` if any pair
    member lacks the label.
    """
    col = _label_column(label)
    by_id = df.set_index("id")[col]
    members = list(training_pairs["black_id"]) + list(training_pairs["white_id"])
    missing = by_id.loc[members].isna()
    if missing.any():
        raise ValueError(f"{int(missing.sum())} pair member(s) lack label {col!r}; exclude those pairs first")
    entries = [
        (int(p), b, w, swap_draw(seed, col, int(p)))
        for p, b, w in zip(training_pairs["pair_id"], training_pairs["black_id"], training_pairs["white_id"])
    ]
    plan = RandomizationPlan(seed=seed, label=col, entries=entries)
    return apply_plan(df, plan), plan
