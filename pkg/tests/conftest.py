import csv

import numpy as np
import pytest

from crossgee.design import Dataset


def crossover_dataset(n_per_seq=3, sequences=("AB", "BA"), L=2, rng=None, response=None, baseline=False):
    """Balanced long-format dataset; responses are standard normal unless given."""
    rng = np.random.default_rng(0) if rng is None else rng
    rows = {k: [] for k in ("subject", "period", "occasion", "response", "sequence", "treatment")}
    sid = 0
    for seq in sequences:
        for _ in range(n_per_seq):
            sid += 1
            for j, trt in enumerate(seq, start=1):
                for k in range(1, L + 1):
                    rows["subject"].append(f"s{sid}")
                    rows["period"].append(j)
                    rows["occasion"].append(k)
                    rows["sequence"].append(seq)
                    rows["treatment"].append(trt)
    N = len(rows["subject"])
    rows["response"] = rng.standard_normal(N) if response is None else np.asarray(response, float)
    kw = {}
    if baseline:
        kw["baseline"] = rng.standard_normal(N)
    return Dataset(**{k: np.asarray(v, dtype=object if k in ("subject", "sequence", "treatment") else None)
                      for k, v in rows.items()}, **kw)


def write_csv(path, ds, extra=None):
    rows = ds.to_rows()
    if extra:
        for r, e in zip(rows, extra):
            r.update(e)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return path


@pytest.fixture
def small_dataset():
    return crossover_dataset()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
