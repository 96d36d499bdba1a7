"""Monte-Carlo studies for Gaussian crossover data with Kronecker correlation.

Each replicate draws its own effects, between-period matrix and
within-period AR(1) parameter, then simulates ``n`` subjects per sequence
with ``Corr(Y_i) = Psi kron R1(alpha1)`` and

    mu[i, j, k] = intercept + period[j] + time[k] + seq_period[s(i), j].

Replicate ``(n, rep)`` of a study uses its own RNG stream spawned from the
master seed, so a study gives the same numbers for any worker count.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from string import ascii_uppercase

import numpy as np
from threadpoolctl import threadpool_limits

from . import correlation as corr
from .design import Dataset, ModelFormula, build_design_matrix
from .engine import FitOptions, fit
from .errors import ConfigError, CrossGEEError, PsdError, RejectionError
from .selection import compare_structures

log = logging.getLogger(__name__)

DEFAULT_N_GRID = (2, 5, 10, 25, 50, 100)
FULL_N_GRID = tuple(range(2, 101))
FOUR_STRUCTURES = ("independence", "ar1", "exchangeable", "kron_ar1")
SIM_FORMULA = "intercept, period, occasion, sequence, sequence*period"
Z_95 = 1.96

_STUDY_KEYS = {"selection": 1, "coverage": 2, "consistency": 3}


@dataclass(frozen=True)
class SimScenario:
    P: int = 3
    L: int = 5
    S: int = 2
    n_grid: tuple = DEFAULT_N_GRID
    reps: int = 100
    sigma2: float = 1.0
    intercept: float = 0.0
    seed: int = 12345
    structures: tuple = FOUR_STRUCTURES
    true_structure: str = "kron_ar1"
    formula: str = SIM_FORMULA
    max_tries: int = 10_000
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "n_grid", tuple(int(v) for v in self.n_grid))
        object.__setattr__(self, "structures", tuple(self.structures))
        for name in ("P", "L", "S", "reps", "max_tries", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"scenario field {name} must be positive")
        if not self.n_grid or min(self.n_grid) < 1:
            raise ConfigError("n_grid must hold positive replicate counts")
        if list(self.n_grid) != sorted(self.n_grid):
            raise ConfigError("n_grid must be sorted ascending")
        if self.sigma2 < 0:
            raise ConfigError("sigma2 must be non-negative")
        if self.S > len(ascii_uppercase):
            raise ConfigError("at most 26 sequences are supported")


@dataclass
class ScenarioParameters:
    period_effects: np.ndarray  # (P,)
    time_effects: np.ndarray  # (L,)
    seq_period_effects: np.ndarray  # (S, P)
    psi: np.ndarray
    alpha1: float
    psi_tries: int = 1

    def within(self, L: int) -> np.ndarray:
        return corr.build(corr.AR1(self.alpha1), 1, L)

    def correlation(self, L: int) -> np.ndarray:
        return np.kron(self.psi, self.within(L))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def replicate_stream(seed: int, study: str, n: int, rep: int) -> np.random.Generator:
    """Independent generator for replicate ``rep`` at ``n`` of ``study``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_STUDY_KEYS[study], int(n), int(rep)))
    return np.random.default_rng(ss)


def sample_psi(P: int, rng, max_tries: int = 10_000):
    """Rejection-sample a correlation matrix with U(-1, 1) off-diagonals.

    Returns ``(psi, tries)``.
    """
    rng = _rng(rng)
    if P == 1:
        return np.ones((1, 1)), 1
    rows, cols = np.tril_indices(P, -1)
    for tries in range(1, max_tries + 1):
        psi = np.eye(P)
        vals = rng.uniform(-1.0, 1.0, rows.size)
        psi[rows, cols] = vals
        psi[cols, rows] = vals
        if np.linalg.eigvalsh(psi)[0] >= 0.0:
            return psi, tries
    raise RejectionError(f"no PSD between-period matrix in {max_tries} draws")


def draw_scenario_parameters(scenario: SimScenario, seed) -> ScenarioParameters:
    rng = _rng(seed)
    period = rng.standard_normal(scenario.P)
    time = rng.standard_normal(scenario.L)
    seq_period = rng.standard_normal((scenario.S, scenario.P))
    psi, tries = sample_psi(scenario.P, rng, scenario.max_tries)
    # |alpha1| < 1 has probability one under U(-1, 1); the loop only guards the boundary
    while True:
        alpha1 = float(rng.uniform(-1.0, 1.0))
        if abs(alpha1) < 1.0:
            break
    return ScenarioParameters(period, time, seq_period, psi, alpha1, tries)


def sequence_labels(P: int, S: int) -> list:
    letters = ascii_uppercase[: max(P, S)]
    return ["".join(letters[(s + j) % len(letters)] for j in range(P)) for s in range(S)]


def _sqrt_psd(M: np.ndarray) -> np.ndarray:
    lam, vec = np.linalg.eigh(M)
    if lam[0] < -corr.PSD_TOL:
        raise PsdError(f"simulation correlation is not PSD (smallest eigenvalue {lam[0]:.3g})")
    return (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.T


def generate_dataset(scenario: SimScenario, params: ScenarioParameters, n: int, rng) -> Dataset:
    """Simulate ``n`` subjects per sequence."""
    rng = _rng(rng)
    P, L, S = scenario.P, scenario.L, scenario.S
    m = P * L
    root = _sqrt_psd(params.correlation(L))
    n_sub = S * n
    seqs = sequence_labels(P, S)
    seq_idx = np.repeat(np.arange(S), n)
    mean_cell = (
        scenario.intercept
        + params.period_effects[:, None]
        + params.time_effects[None, :]
    ).reshape(-1)
    mean = mean_cell[None, :] + np.repeat(params.seq_period_effects[seq_idx], L, axis=1)
    z = rng.standard_normal((n_sub, m))
    y = mean + math.sqrt(scenario.sigma2) * (z @ root)

    subj = np.repeat(np.arange(1, n_sub + 1), m)
    period = np.tile(np.repeat(np.arange(1, P + 1), L), n_sub)
    occasion = np.tile(np.tile(np.arange(1, L + 1), P), n_sub)
    seq_lab = np.array(seqs, dtype=object)[np.repeat(seq_idx, m)]
    trt = np.array([seqs[s][j - 1] for s, j in zip(np.repeat(seq_idx, m), period)], dtype=object)
    return Dataset(subj, period, occasion, y.reshape(-1), seq_lab, trt)


def true_means(scenario: SimScenario, params: ScenarioParameters, dataset: Dataset) -> np.ndarray:
    seq_pos = {lab: s for s, lab in enumerate(sequence_labels(scenario.P, scenario.S))}
    s = np.array([seq_pos[v] for v in dataset.sequence])
    j = dataset.period_index
    k = dataset.occasion_index
    return (
        scenario.intercept + params.period_effects[j] + params.time_effects[k] + params.seq_period_effects[s, j]
    )


def true_coefficients(X: np.ndarray, mu: np.ndarray) -> np.ndarray:
    beta, *_ = np.linalg.lstsq(X, mu, rcond=None)
    return beta


def interval_covers(estimate: float, se: float, truth: float, z: float = Z_95):
    """Return ``(covered, degenerate)`` for the Wald interval ``estimate +- z * se``."""
    if not math.isfinite(se) or not math.isfinite(estimate):
        return True, True
    return abs(estimate - truth) <= z * se, False


def wilson_interval(k: int, n: int, z: float = Z_95):
    if n == 0:
        return math.nan, math.nan
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


# -- results ----------------------------------------------------------------


@dataclass
class SimRow:
    n: int
    structure: str
    metric: str
    value: float
    lo: float = math.nan
    hi: float = math.nan


@dataclass
class SimResult:
    rows: list = field(default_factory=list)

    def add(self, *args, **kw):
        self.rows.append(SimRow(*args, **kw))

    def extend(self, other: "SimResult"):
        self.rows.extend(other.rows)
        return self

    def get(self, n, structure, metric) -> SimRow:
        for r in self.rows:
            if r.n == n and r.structure == structure and r.metric == metric:
                return r
        raise KeyError((n, structure, metric))

    def value(self, n, structure, metric) -> float:
        return self.get(n, structure, metric).value

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["n", "structure", "metric", "value", "lo", "hi"])
        for r in self.rows:
            w.writerow([r.n, r.structure, r.metric, _fmt(r.value), _fmt(r.lo), _fmt(r.hi)])
        return buf.getvalue()


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v)) if math.isfinite(v) else ""


# -- replicate tasks ----------------------------------------------------------


def _replicate_data(scenario: SimScenario, study: str, n: int, rep: int):
    rng = replicate_stream(scenario.seed, study, n, rep)
    params = draw_scenario_parameters(scenario, rng)
    ds = generate_dataset(scenario, params, n, rng)
    formula = ModelFormula.parse(scenario.formula)
    design = build_design_matrix(ds, formula)
    return params, ds, formula, design


def _selection_task(scenario: SimScenario, task):
    n, rep = task
    with threadpool_limits(1):
        try:
            _, ds, formula, design = _replicate_data(scenario, "selection", n, rep)
            report = compare_structures(ds, formula, "gaussian", scenario.structures, design=design)
            return report.winner, ""
        except CrossGEEError as exc:
            return None, exc.qualified()


def _coverage_task(scenario: SimScenario, task):
    n, rep = task
    out = {}
    with threadpool_limits(1):
        try:
            params, ds, formula, design = _replicate_data(scenario, "coverage", n, rep)
        except CrossGEEError as exc:
            return None, exc.qualified()
        X, labels = design
        truth = true_coefficients(X, true_means(scenario, params, ds))
        opts = FitOptions(strict=False)
        try:
            ind = fit(ds, formula, "gaussian", "independence", opts, design=design)
        except CrossGEEError as exc:
            return None, exc.qualified()
        for name in scenario.structures:
            try:
                f = ind if name == "independence" else fit(
                    ds, formula, "gaussian", name, opts, independence_fit=ind, design=design
                )
            except CrossGEEError as exc:
                out[name] = exc.qualified()
                continue
            if not f.converged:
                out[name] = "not converged"
                continue
            res = [interval_covers(b, se, t) for b, se, t in zip(f.coef, f.robust_se, truth)]
            naive = [interval_covers(b, se, t)[0] for b, se, t in zip(f.coef, f.model_se, truth)]
            out[name] = (
                np.array([c for c, _ in res], dtype=bool),
                np.array([d for _, d in res], dtype=bool),
                np.array(naive, dtype=bool),
            )
    return (list(labels), out), ""


def _consistency_task(scenario: SimScenario, task):
    n, rep = task
    with threadpool_limits(1):
        try:
            params, ds, formula, design = _replicate_data(scenario, "consistency", n, rep)
            f = fit(ds, formula, "gaussian", scenario.true_structure, FitOptions(strict=False), design=design)
        except CrossGEEError as exc:
            return None, exc.qualified()
        err = float(np.linalg.norm(f.working_corr - params.correlation(scenario.L)))
        return err, ""


def _run(fn, scenario: SimScenario, tasks, workers=None):
    workers = scenario.workers if workers is None else workers
    call = partial(fn, scenario)
    if workers <= 1 or len(tasks) <= 1:
        return [call(t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(call, tasks, chunksize=chunk))


def _log_failures(study, tasks, results):
    for (n, rep), (_, err) in zip(tasks, results):
        if err:
            log.warning("%s replicate n=%d rep=%d failed: %s", study, n, rep, err)


# -- studies ----------------------------------------------------------------


def run_selection_study(scenario: SimScenario, workers=None) -> SimResult:
    """Share of replicates in which each structure attains the smallest QIC."""
    tasks = [(n, rep) for n in scenario.n_grid for rep in range(scenario.reps)]
    results = _run(_selection_task, scenario, tasks, workers)
    _log_failures("selection", tasks, results)
    out = SimResult()
    for n in scenario.n_grid:
        winners = [w for (nn, _), (w, _) in zip(tasks, results) if nn == n]
        ok = [w for w in winners if w is not None]
        failed = len(winners) - len(ok)
        for s in scenario.structures:
            k = sum(1 for w in ok if w == s)
            lo, hi = wilson_interval(k, len(ok))
            out.add(n, s, "selection_proportion", k / len(ok) if ok else math.nan, lo, hi)
        out.add(n, "all", "selection_failed_reps", failed)
    return out


def is_period_or_sequence(label: str) -> bool:
    return label.startswith("period[") or label.startswith("sequence[")


def run_coverage_study(scenario: SimScenario, n: int, reps: int, workers=None) -> SimResult:
    """Empirical coverage of 95% robust Wald intervals per structure and coefficient.

    ``coverage_period_sequence`` pools the period and sequence coefficients.
    ``coverage_period_sequence_model_se`` repeats that with model-based SEs.
    """
    tasks = [(n, rep) for rep in range(reps)]
    results = _run(_coverage_task, scenario, tasks, workers)
    _log_failures("coverage", tasks, results)
    labels = None
    hits = {s: [] for s in scenario.structures}
    degen = {s: [] for s in scenario.structures}
    naive = {s: [] for s in scenario.structures}
    failed = {s: 0 for s in scenario.structures}
    for payload, _ in results:
        if payload is None:
            for s in scenario.structures:
                failed[s] += 1
            continue
        labs, per = payload
        labels = labels or labs
        for s in scenario.structures:
            v = per.get(s)
            if isinstance(v, tuple):
                hits[s].append(v[0])
                degen[s].append(v[1])
                naive[s].append(v[2])
            else:
                failed[s] += 1
    out = SimResult()
    for s in scenario.structures:
        if not hits[s]:
            out.add(n, s, "coverage_failed_reps", failed[s])
            continue
        H = np.array(hits[s])
        Dg = np.array(degen[s])
        for j, lab in enumerate(labels):
            k = int(H[:, j].sum())
            lo, hi = wilson_interval(k, H.shape[0])
            out.add(n, s, f"coverage[{lab}]", k / H.shape[0], lo, hi)
        cols = [j for j, lab in enumerate(labels) if is_period_or_sequence(lab)]
        if cols:
            out.add(n, s, "coverage_period_sequence", float(H[:, cols].mean()))
            # same intervals with model-based SEs, for comparison only
            out.add(n, s, "coverage_period_sequence_model_se", float(np.array(naive[s])[:, cols].mean()))
        out.add(n, s, "degenerate_intervals", int(Dg.sum()))
        out.add(n, s, "coverage_failed_reps", failed[s])
    return out


def run_consistency_study(scenario: SimScenario, n_grid=(10, 30, 100), reps: int = 50, workers=None) -> SimResult:
    """Median Frobenius error of the fitted Kronecker working correlation per ``n``."""
    tasks = [(n, rep) for n in n_grid for rep in range(reps)]
    results = _run(_consistency_task, scenario, tasks, workers)
    _log_failures("consistency", tasks, results)
    out = SimResult()
    for n in n_grid:
        errs = np.array([e for (nn, _), (e, _) in zip(tasks, results) if nn == n and e is not None])
        failed = sum(1 for (nn, _), (e, _) in zip(tasks, results) if nn == n and e is None)
        if errs.size:
            q25, med, q75 = np.percentile(errs, [25, 50, 75])
            out.add(n, scenario.true_structure, "median_frobenius_error", float(med), float(q25), float(q75))
        out.add(n, scenario.true_structure, "consistency_failed_reps", failed)
    return out


def with_workers(scenario: SimScenario, workers: int) -> SimScenario:
    return replace(scenario, workers=int(workers))
