import numpy as np
import pandas as pd
import pytest

from cfaudit.ingest import make_frame
from cfaudit.synth import generate, preset

CRITERIA = {}


def record_criterion(number, description, ok, detail=""):
    """Remember one acceptance-criterion outcome for the terminal summary."""
    CRITERIA[number] = (description, bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        description, ok, detail = CRITERIA[number]
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] criterion {number:>2}: {description}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)


def random_small_frame(rng, n, n_states=2, missing=0.2):
    """Tiny records frame with few categories so key collisions are common."""
    def maybe_missing(values):
        values = values.astype(float)
        values[rng.random(n) < missing] = np.nan
        return values

    return make_frame({
        "id": [f"r{i}" for i in range(n)],
        "race": rng.choice(["Black", "White"], n).astype(object),
        "sex": rng.choice(["Male", "Female"], n).astype(object),
        "income": maybe_missing(rng.choice([20.0, 32.0, 60.0, 200.0], n)),
        "state": rng.choice(["CA", "TX", "NY"][:n_states], n).astype(object),
        "loan_type": rng.choice(["Conventional", "FHA"], n).astype(object),
        "dti": maybe_missing(rng.choice([15.0, 36.0, 37.0], n)),
        "ltv": maybe_missing(rng.choice([80.0, 95.0], n)),
        "lien": np.array(["FirstLien"] * n, dtype=object),
        "approved": rng.random(n) < 0.7,
        "interest_rate": np.where(rng.random(n) < 0.8, rng.normal(4, 0.5, n).round(3), np.nan),
        "purpose": [None] * n,
        "year": [None] * n,
    })


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def paper_like_small():
    return generate(preset("paper-like", n=4000, seed=11))


@pytest.fixture(scope="session")
def null_small():
    return generate(preset("null", n=4000, seed=11))
