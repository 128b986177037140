from collections import Counter, defaultdict

import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from cfaudit.ingest import ApplicationRecord, frame_to_records, make_frame
from cfaudit.matching import (
    BinningSpec, balance_gaps, balance_report, coarsen, coarsen_frame, impute_means, key_columns,
    match_exact, proxy_auc,
)
from cfaudit.synth import generate, preset

from conftest import random_small_frame


def _rec(**kw):
    base = dict(id="x", race="Black", sex="Male", income=60.0, state="CA", loan_type="FHA",
                dti=36.0, ltv=80.0, lien="FirstLien", approved=True, interest_rate=4.0)
    base.update(kw)
    return ApplicationRecord(**base)


def _bins(key):
    return dict(key.bins)


def test_coarsen_examples():
    assert _bins(coarsen(_rec(income=60.0)))["income"] == 2
    assert _bins(coarsen(_rec(income=32.0)))["income"] == 0
    k = coarsen(_rec(ltv=None))
    assert _bins(k)["ltv"] is None
    assert k.missing_mask == 1 << BinningSpec().variables.index("ltv")


def test_key_ignores_race_and_outcomes():
    a = coarsen(_rec(race="Black", approved=True, interest_rate=3.0))
    b = coarsen(_rec(race="White", approved=False, interest_rate=None))
    assert a == b


def test_binning_spec_validation():
    with pytest.raises(ValueError):
        BinningSpec(edges={"income": [1, 1]})
    with pytest.raises(ValueError):
        BinningSpec(edges={"income": [1, float("inf")]})
    spec = BinningSpec(edges={"income": [10]})
    assert spec.bin_index("income", 10) == 0 and spec.bin_index("income", 10.0001) == 1


def _brute_force_pair_count(df, spec=BinningSpec()):
    """Group records by their key with a plain dictionary and apply the per-key min rule."""
    tally = defaultdict(Counter)
    for r in frame_to_records(df):
        tally[coarsen(r, spec)][r.race] += 1
    return sum(min(c["Black"], c["White"]) for c in tally.values())


def test_single_bucket_three_black_five_white():
    df = make_frame({
        "id": [f"i{k}" for k in range(8)], "race": ["Black"] * 3 + ["White"] * 5,
        "sex": ["Male"] * 8, "income": [60.0] * 8, "state": ["CA"] * 8,
        "loan_type": ["FHA"] * 8, "dti": [36.0] * 8, "ltv": [80.0] * 8,
        "lien": ["FirstLien"] * 8, "approved": [True] * 8, "interest_rate": [4.0] * 8,
        "purpose": [None] * 8, "year": [None] * 8,
    })
    m = match_exact(df, seed=1)
    assert len(m) == 3 and len(m.unused_white) == 2 and m.unmatched_black == []


def test_twenty_records_four_buckets(rng):
    df = random_small_frame(rng, 20, n_states=1, missing=0.0)
    df["income"] = np.repeat([20.0, 60.0], 10)
    df["dti"] = np.tile(np.repeat([15.0, 37.0], 5), 2)
    df["ltv"] = 80.0
    df["sex"], df["loan_type"] = "Male", "FHA"
    m = match_exact(df, seed=4)
    assert df.groupby(["income", "dti"]).ngroups == 4
    assert len(m) == _brute_force_pair_count(df)


def test_pairs_share_keys_and_seed_changes_partners_only():
    df = generate(preset("paper-like", n=3000, seed=2))
    a, b = match_exact(df, seed=1), match_exact(df, seed=2)
    assert len(a) == len(b)
    kc = key_columns(BinningSpec())
    assert Counter(map(tuple, a.pairs[kc].values)) == Counter(map(tuple, b.pairs[kc].values))
    assert list(a.pairs["white_id"]) != list(b.pairs["white_id"])
    keys = coarsen_frame(df).set_index(df["id"])
    pd.testing.assert_frame_equal(
        keys.loc[a.pairs["black_id"]].reset_index(drop=True),
        keys.loc[a.pairs["white_id"]].reset_index(drop=True),
    )


def test_matching_is_deterministic_and_sorted():
    df = generate(preset("paper-like", n=2000, seed=3))
    a, b = match_exact(df, seed=9), match_exact(df, seed=9)
    pd.testing.assert_frame_equal(a.pairs, b.pairs)
    assert list(a.pairs["pair_id"]) == list(range(len(a)))


def test_race_swap_symmetry():
    df = generate(preset("paper-like", n=2000, seed=4))
    swapped = df.copy()
    swapped["race"] = df["race"].map({"Black": "White", "White": "Black"})
    assert len(match_exact(df, seed=0)) == len(match_exact(swapped, seed=0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 50), st.integers(0, 2**16))
def test_pair_count_matches_exhaustive_grouping(data_seed, n, match_seed):
    df = random_small_frame(np.random.default_rng(data_seed), n)
    m = match_exact(df, seed=match_seed)
    assert len(m) == _brute_force_pair_count(df)
    ids = m.matched_ids
    assert len(ids) == len(set(ids))
    assert len(m) <= int((df["race"] == "Black").sum())


def test_impute_two_point_mean():
    df = make_frame({
        "id": ["a", "b", "c", "d"], "race": ["Black", "White", "Black", "White"],
        "sex": ["Male"] * 4, "income": [2.0, 4.0, np.nan, np.nan], "state": ["CA"] * 4,
        "loan_type": ["FHA"] * 4, "dti": [1.0] * 4, "ltv": [1.0] * 4, "lien": ["FirstLien"] * 4,
        "approved": [True] * 4, "interest_rate": [np.nan] * 4, "purpose": [None] * 4, "year": [None] * 4,
    })
    m = match_exact(df, BinningSpec(edges={"income": [100.0], "dti": [0.0], "ltv": [0.0]}))
    out = impute_means(m, df)
    assert list(out["income"]) == [2.0, 4.0, 3.0, 3.0]


def test_impute_noop_and_all_missing(rng):
    df = random_small_frame(rng, 40, missing=0.0)
    m = match_exact(df)
    pd.testing.assert_frame_equal(impute_means(m, df), df)
    df2 = df.copy()
    df2["dti"] = np.nan
    m2 = match_exact(df2)
    if len(m2):
        with pytest.raises(ValueError, match="dti"):
            impute_means(m2, df2)


def test_impute_matches_naive_accumulator():
    df = generate(preset("paper-like", n=300, seed=8, p_black=0.5, missing_income=0.2,
                         missing_dti=0.2, missing_ltv=0.2))
    m = match_exact(df, BinningSpec(edges={"income": [1e9], "dti": [1e9], "ltv": [1e9]}), seed=0)
    assert len(m) > 10
    out = impute_means(m, df)
    matched = set(m.matched_ids)
    for v in ("income", "dti", "ltv"):
        total, count = 0.0, 0
        for rid, x in zip(df["id"], df[v]):
            if rid in matched and not math.isnan(x):
                total += x
                count += 1
        mean = total / count
        for rid, before, after in zip(df["id"], df[v], out[v]):
            if rid not in matched:
                assert (math.isnan(before) and math.isnan(after)) or before == after
            elif math.isnan(before):
                assert after == pytest.approx(mean, rel=1e-12)
            else:
                assert after == before
        post = out.loc[out["id"].isin(matched), v]
        assert post.mean() == pytest.approx(mean, rel=1e-9)


def test_balance_full_retention_equal():
    df = random_small_frame(np.random.default_rng(0), 30, missing=0.0)
    df["race"] = ["Black", "White"] * 15
    df[["sex", "state", "loan_type"]] = ["Male", "CA", "FHA"]
    df["income"], df["dti"], df["ltv"] = 60.0, 36.0, 80.0
    m = match_exact(df)
    assert len(m) == 15
    rep = balance_report(df, m)
    before = rep[rep.stage == "all"].drop(columns="stage").reset_index(drop=True)
    after = rep[rep.stage == "matched"].drop(columns="stage").reset_index(drop=True)
    pd.testing.assert_frame_equal(before, after)


def test_balance_gap_null_effects_within_ci():
    df = generate(preset("null", n=20_000, seed=21))
    m = match_exact(df, seed=1)
    rep = balance_report(df, m).set_index(["stage", "race"])
    w, b = rep.loc[("matched", "White")], rep.loc[("matched", "Black")]
    se = math.sqrt(w.approval_rate * (1 - w.approval_rate) / w.n + b.approval_rate * (1 - b.approval_rate) / b.n)
    assert abs(w.approval_rate - b.approval_rate) < 1.96 * se


def test_proxy_auc_identical_members_is_half():
    rng = np.random.default_rng(2)
    df = random_small_frame(rng, 400, missing=0.0)
    df["race"] = ["Black", "White"] * 200
    # pair members copy each other's features
    for c in ("sex", "income", "state", "loan_type", "dti", "ltv"):
        df[c] = np.repeat(df[c].to_numpy()[::2], 2)
    m = match_exact(df, seed=0)
    assert len(m) == 200
    assert abs(proxy_auc(m, df, 0.25, seed=1) - 0.5) <= 0.05


def test_proxy_auc_needs_ten_pairs(rng):
    df = random_small_frame(rng, 6, missing=0.0)
    with pytest.raises(ValueError, match="10 pairs"):
        proxy_auc(match_exact(df), df)


def test_proxy_auc_paper_like_bounded():
    df = generate(preset("paper-like", n=20_000, seed=13))
    m = match_exact(df, seed=0)
    assert proxy_auc(m, impute_means(m, df), 0.25, seed=0) <= 0.58


def test_paper_like_gaps_shrink_after_matching():
    df = generate(preset("paper-like", n=20_000, seed=14))
    gaps = balance_gaps(balance_report(df, match_exact(df, seed=0)))
    assert 0 < gaps.loc["matched", "approval_gap"] < gaps.loc["all", "approval_gap"]
