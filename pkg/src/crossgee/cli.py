"""Command-line interface: ``crossgee {fit,compare,simulate}``.

Configuration files use INI syntax (``configparser``)::

    [run]
    command   = compare            ; fit | compare | simulate
    data      = cows.csv           ; relative to the config file
    formula   = intercept, baseline, time(2), period, treatment, carryover(1), carryover(1)*time(1)
    family    = gaussian
    link      = identity           ; optional, canonical link by default
    structure = independence, ar1, exchangeable, ar1_full, exch_full, kron_ar1, kron_exch
    out       = results
    seed      = 1
    threads   = 1

    [columns]                      ; canonical name = CSV header
    subject = cow

    [references]                   ; factor = reference level
    treatment = B

    [options]
    tol = 1e-6
    max_iter = 200
    paper_literal_residual_scale = false

    [simulation]
    P = 3
    L = 5
    S = 2
    n_grid = 2, 5, 10, 25, 50, 100 ; or full_grid = true for 2..100
    reps = 100
    sigma2 = 1
    studies = selection, coverage, consistency
    coverage_n = 50
    coverage_reps = 500
    consistency_grid = 10, 30, 100
    consistency_reps = 50

Command-line flags override the file.  ``structure = all`` expands to the
seven named structures.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import correlation as corr
from . import simulation as sim
from .design import Dataset, ModelFormula
from .engine import FitOptions, coefficients_csv, fit, matrix_csv
from .errors import CrossGEEError, DuplicateError, ParseError, RunConfigError, SchemaError
from .expfam import get_family
from .selection import compare_structures

log = logging.getLogger("crossgee")

REQUIRED = ("subject", "period", "occasion", "treatment", "sequence", "response")
OPTIONAL = ("time", "baseline", "pretreatment")
STUDIES = ("selection", "coverage", "consistency")
_TRUE = ("1", "true", "yes", "on", "y", "t")


def _truthy(text) -> bool:
    return str(text).strip().lower() in _TRUE


def ingest_csv(path, columns: dict | None = None) -> Dataset:
    """Read a long-format CSV into a validated :class:`Dataset`.

    ``columns`` maps canonical names (``subject``, ``period``, ``occasion``,
    ``treatment``, ``sequence``, ``response`` and optionally ``time``,
    ``baseline``, ``pretreatment``) to header names; unmapped names are
    looked up verbatim.  Rows whose ``pretreatment`` flag is set are averaged
    per subject-period into the baseline column and dropped from the
    responses.  Remaining columns become covariates.
    """
    columns = dict(columns or {})
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, header row required") from None
        body = list(reader)
    if not any(header):
        raise SchemaError(f"{path}: empty header row")
    pos = {h: i for i, h in enumerate(header)}

    def where(name):
        return pos.get(columns.get(name, name))

    missing = [f"{n} (as {columns.get(n, n)!r})" for n in REQUIRED if where(n) is None]
    if missing:
        raise SchemaError(f"{path}: missing required columns: {', '.join(missing)}")
    mapped = {where(n) for n in REQUIRED + OPTIONAL if where(n) is not None}
    extra = [h for i, h in enumerate(header) if i not in mapped]

    recs = {n: [] for n in REQUIRED + OPTIONAL}
    cov = {h: [] for h in extra}
    for lineno, row in enumerate(body, start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}, row {lineno}: expected {len(header)} fields, got {len(row)}")
        get = lambda n: row[where(n)].strip()  # noqa: E731
        for n in ("subject", "treatment", "sequence"):
            recs[n].append(get(n))
        for n in ("period", "occasion"):
            try:
                recs[n].append(int(float(get(n))))
            except ValueError:
                raise ParseError(f"{path}, row {lineno}: {n} {get(n)!r} is not an integer") from None
        for n in ("response", "time", "baseline"):
            if n != "response" and where(n) is None:
                continue
            try:
                recs[n].append(float(get(n)))
            except ValueError:
                raise ParseError(f"{path}, row {lineno}: {n} {get(n)!r} is not numeric") from None
        if where("pretreatment") is not None:
            recs["pretreatment"].append(_truthy(get("pretreatment")))
        for h in extra:
            cov[h].append(row[pos[h]].strip())
    if not recs["subject"]:
        raise SchemaError(f"{path}: no data rows")

    arr = {n: np.array(v, dtype=object if n in ("subject", "treatment", "sequence") else None) for n, v in recs.items() if v}
    baseline = arr.get("baseline")
    if "pretreatment" in arr:
        flag = arr.pop("pretreatment").astype(bool)
        if baseline is not None:
            raise SchemaError(f"{path}: give either a baseline column or a pretreatment flag, not both")
        baseline = _baseline_from_flags(arr, flag, path)
        keep = ~flag
        arr = {n: v[keep] for n, v in arr.items()}
        cov = {h: np.array(v, dtype=object)[keep] for h, v in cov.items()}
        baseline = baseline[keep]

    try:
        return Dataset(
            arr["subject"],
            arr["period"],
            arr["occasion"],
            arr["response"],
            arr["sequence"],
            arr["treatment"],
            time=arr.get("time"),
            baseline=baseline,
            covariates={h: np.array(v, dtype=object) for h, v in cov.items()},
        )
    except DuplicateError as exc:
        raise DuplicateError(f"{path}: {exc}") from None


def _baseline_from_flags(arr, flag, path):
    key = [(s, p) for s, p in zip(arr["subject"], arr["period"])]
    sums, counts = {}, {}
    for k, f, y in zip(key, flag, arr["response"]):
        if f:
            sums[k] = sums.get(k, 0.0) + y
            counts[k] = counts.get(k, 0) + 1
    out = np.empty(len(key))
    for i, k in enumerate(key):
        if k not in counts:
            raise SchemaError(f"{path}: subject {k[0]!r} has no pretreatment rows in period {k[1]}")
        out[i] = sums[k] / counts[k]
    return out


# -- configuration ----------------------------------------------------------


@dataclass
class RunConfig:
    command: str
    data: Path | None = None
    formula: str = "intercept"
    family: str = "gaussian"
    link: str | None = None
    structures: list = field(default_factory=lambda: ["independence"])
    columns: dict = field(default_factory=dict)
    references: dict = field(default_factory=dict)
    options: FitOptions = field(default_factory=FitOptions)
    seed: int = 12345
    out: Path = Path("results")
    threads: int = 1
    simulation: dict = field(default_factory=dict)

    def validate(self):
        if self.command not in ("fit", "compare", "simulate"):
            raise RunConfigError(f"unknown command {self.command!r}")
        if self.command != "simulate":
            if self.data is None:
                raise RunConfigError(f"{self.command} needs a data file (--data)")
            if not Path(self.data).is_file():
                raise RunConfigError(f"data file {str(self.data)!r} does not exist")
        for s in self.structures:
            corr.structure_from_name(s)
        if self.command == "fit" and len(self.structures) != 1:
            raise RunConfigError("fit takes exactly one structure")
        if self.command == "compare" and len(self.structures) < 2:
            raise RunConfigError("compare needs at least two structures")
        if self.threads < 1:
            raise RunConfigError("--threads must be positive")
        get_family(self.family, self.link)
        return self


def _split(text):
    return [t.strip() for t in str(text).replace(";", ",").split(",") if t.strip()]


def _structures(text):
    items = _split(text)
    if items == ["all"]:
        return list(corr.STRUCTURE_NAMES)
    return [i.lower() for i in items]


def load_config(path, command=None) -> RunConfig:
    """Parse an INI config file into a :class:`RunConfig`."""
    path = Path(path)
    if not path.is_file():
        raise RunConfigError(f"config file {str(path)!r} does not exist")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise RunConfigError(f"{path}: {exc}") from None
    run = cp["run"] if cp.has_section("run") else {}
    cfg = RunConfig(command or run.get("command", "fit"))
    base = path.parent
    if "data" in run:
        cfg.data = base / run["data"]
    if "out" in run:
        cfg.out = base / run["out"]
    cfg.formula = run.get("formula", cfg.formula)
    cfg.family = run.get("family", cfg.family)
    cfg.link = run.get("link") or None
    if "structure" in run:
        cfg.structures = _structures(run["structure"])
    try:
        cfg.seed = int(run.get("seed", cfg.seed))
        cfg.threads = int(run.get("threads", cfg.threads))
        if cp.has_section("options"):
            o = cp["options"]
            cfg.options = FitOptions(
                tol=float(o.get("tol", 1e-6)),
                max_iter=int(o.get("max_iter", 200)),
                paper_literal_residual_scale=_truthy(o.get("paper_literal_residual_scale", "false")),
            )
    except ValueError as exc:
        raise RunConfigError(f"{path}: {exc}") from None
    if cp.has_section("columns"):
        cfg.columns = dict(cp["columns"])
    if cp.has_section("references"):
        cfg.references = dict(cp["references"])
    if cp.has_section("simulation"):
        cfg.simulation = dict(cp["simulation"])
    return cfg


def scenario_from(cfg: RunConfig):
    """Build the scenario and study settings from the ``[simulation]`` section."""
    s = cfg.simulation
    try:
        if _truthy(s.get("full_grid", "false")):
            grid = sim.FULL_N_GRID
        elif "n_grid" in s:
            grid = tuple(int(v) for v in _split(s["n_grid"]))
        else:
            grid = sim.DEFAULT_N_GRID
        scenario = sim.SimScenario(
            P=int(s.get("P", 3)),
            L=int(s.get("L", 5)),
            S=int(s.get("S", 2)),
            n_grid=grid,
            reps=int(s.get("reps", 100)),
            sigma2=float(s.get("sigma2", 1.0)),
            intercept=float(s.get("intercept", 0.0)),
            seed=cfg.seed,
            structures=tuple(_structures(s["structures"])) if "structures" in s else sim.FOUR_STRUCTURES,
            workers=cfg.threads,
        )
        studies = [v.lower() for v in _split(s.get("studies", "selection"))]
        extra = {
            "coverage_n": int(s.get("coverage_n", 50)),
            "coverage_reps": int(s.get("coverage_reps", 500)),
            "consistency_grid": tuple(int(v) for v in _split(s.get("consistency_grid", "10, 30, 100"))),
            "consistency_reps": int(s.get("consistency_reps", 50)),
        }
    except ValueError as exc:
        raise RunConfigError(f"[simulation]: {exc}") from None
    unknown = [v for v in studies if v not in STUDIES]
    if unknown:
        raise RunConfigError(f"unknown studies {unknown}; expected {STUDIES}")
    return scenario, studies, extra


# -- commands ---------------------------------------------------------------


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_fit(out: Path, f):
    _write(out / "fit.json", f.to_json())
    _write(out / "coefficients.csv", coefficients_csv(f))
    _write(out / "working_correlation.csv", matrix_csv(f.working_corr))
    if f.psi is not None:
        _write(out / "psi.csv", matrix_csv(f.psi))


def run(cfg: RunConfig) -> int:
    """Execute a validated configuration; returns the process exit status."""
    cfg.validate()
    out = Path(cfg.out)
    if cfg.command == "simulate":
        scenario, studies, extra = scenario_from(cfg)
        result = sim.SimResult()
        if "selection" in studies:
            result.extend(sim.run_selection_study(scenario))
        if "coverage" in studies:
            result.extend(sim.run_coverage_study(scenario, extra["coverage_n"], extra["coverage_reps"]))
        if "consistency" in studies:
            result.extend(
                sim.run_consistency_study(scenario, extra["consistency_grid"], extra["consistency_reps"])
            )
        _write(out / "sim_results.csv", result.to_csv())
        print(f"wrote {out / 'sim_results.csv'} ({len(result.rows)} rows)")
        return 0

    dataset = ingest_csv(cfg.data, cfg.columns)
    formula = ModelFormula.parse(cfg.formula, cfg.references)
    family = get_family(cfg.family, cfg.link)
    if cfg.command == "fit":
        f = fit(dataset, formula, family, cfg.structures[0], cfg.options)
        _write_fit(out, f)
        print(f"{f.structure}: QIC = {f.qic:.4f}, {f.iterations} iterations")
        return 0

    report = compare_structures(dataset, formula, family, cfg.structures, cfg.options)
    _write(out / "comparison.csv", report.to_csv())
    _write(out / "comparison.txt", report.to_text())
    _write_fit(out, report.fits[report.winner])
    sys.stdout.write(report.to_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossgee", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("fit", "fit one working-correlation structure"),
        ("compare", "fit several structures and rank them by QIC"),
        ("simulate", "run the Monte-Carlo studies"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--data", help="long-format CSV file")
        p.add_argument("--formula", help="comma separated list of terms")
        p.add_argument("--family", help="gaussian, poisson, binomial or gamma")
        p.add_argument("--link", help="identity, log, logit or inverse")
        p.add_argument("--structure", action="append", help="structure name(s); repeat or comma separate")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker processes for simulations")
        if name == "simulate":
            p.add_argument("--studies", help="selection, coverage, consistency")
            p.add_argument("--reps", type=int)
            p.add_argument("--n-grid", help="comma separated replicates per sequence")
            p.add_argument("--full-grid", action="store_true", help="use n = 2..100")
    return parser


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config, args.command) if args.config else RunConfig(args.command)
    if args.data:
        cfg.data = Path(args.data)
    if args.formula:
        cfg.formula = args.formula
    if args.family:
        cfg.family = args.family
    if args.link:
        cfg.link = args.link
    if args.structure:
        cfg.structures = [s for item in args.structure for s in _structures(item)]
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out:
        cfg.out = Path(args.out)
    if args.threads is not None:
        cfg.threads = args.threads
    if args.command == "simulate":
        if args.studies:
            cfg.simulation["studies"] = args.studies
        if args.reps is not None:
            cfg.simulation["reps"] = str(args.reps)
        if args.n_grid:
            cfg.simulation["n_grid"] = args.n_grid
        if args.full_grid:
            cfg.simulation["full_grid"] = "true"
    return cfg


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(config_from_args(args))
    except CrossGEEError as exc:
        print(f"error: {exc.qualified()}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: cli.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
