"""Crossover data model and design-matrix construction.

A :class:`Dataset` holds long-format observations sorted canonically by
(subject, period, occasion).  A :class:`ModelFormula` is an ordered list of
:class:`Term` objects; :func:`build_design_matrix` turns the pair into a
dummy-coded matrix whose rows follow the dataset order.

Carryover of order ``u`` in period ``j`` is the treatment given in period
``j - u``.  Carryover columns are indicators of the non-reference treatments,
so "no predecessor" and "predecessor was the reference treatment" share the
zero level; coding every treatment would alias the carryover columns with the
period dummies in any crossover design.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .errors import BalanceError, ConfigError, DuplicateError, RankError, SchemaError


def natural_key(label):
    """Sort key ordering numbers numerically, also inside labels (``s2`` < ``s10``)."""
    s = str(label)
    try:
        return (0, float(s), ())
    except ValueError:
        pass
    parts = tuple((0, int(t), "") if t.isdigit() else (1, 0, t) for t in re.split(r"(\d+)", s) if t)
    return (1, 0.0, parts)


def _sorted_unique(values):
    return sorted(set(values), key=natural_key)


@dataclass(frozen=True)
class CrossoverLayout:
    """Design skeleton: which treatment each sequence receives in each period."""

    sequences: dict  # sequence label -> tuple of P treatment labels
    treatments: tuple
    n_per_sequence: dict
    L: int = 1

    def __post_init__(self):
        if not self.sequences:
            raise ConfigError("layout needs at least one sequence")
        lengths = {len(v) for v in self.sequences.values()}
        if len(lengths) != 1:
            raise ConfigError(f"all sequences must have the same number of periods, got {sorted(lengths)}")
        known = set(self.treatments)
        for seq, trts in self.sequences.items():
            unknown = [t for t in trts if t not in known]
            if unknown:
                raise ConfigError(f"sequence {seq!r} uses undeclared treatments {unknown}")
        for seq in self.sequences:
            if self.n_per_sequence.get(seq, 0) < 0:
                raise ConfigError(f"negative subject count for sequence {seq!r}")

    @property
    def S(self) -> int:
        return len(self.sequences)

    @property
    def P(self) -> int:
        return len(next(iter(self.sequences.values())))

    @property
    def q(self) -> int:
        return len(self.treatments)

    @property
    def n(self) -> int:
        return int(sum(self.n_per_sequence.values()))

    @classmethod
    def from_strings(cls, sequences, n_per_sequence=1, L: int = 1):
        """``from_strings(["AB", "BA"], 4)`` builds a 2x2 layout with four subjects per sequence."""
        seqs = {s: tuple(s) for s in sequences}
        trts = tuple(_sorted_unique(t for s in seqs.values() for t in s))
        if isinstance(n_per_sequence, int):
            n_per_sequence = {s: n_per_sequence for s in seqs}
        return cls(seqs, trts, dict(n_per_sequence), L)


NONE = None  # carryover level for "no predecessor"


def expand_carryover(layout: CrossoverLayout, order: int) -> dict:
    """Carryover labels for every sequence and period.

    Returns ``{sequence: [labels_period_1, ..., labels_period_P]}`` where each
    entry is a tuple ``(lag_1, ..., lag_order)`` of treatment labels, ``None``
    standing for a lag that reaches before period 1.  Subjects share the
    labels of their sequence.
    """
    if order < 1:
        raise ConfigError(f"carryover order must be positive, got {order}")
    if order >= layout.P:
        raise ConfigError(f"carryover order {order} must be smaller than the number of periods {layout.P}")
    out = {}
    for seq, trts in layout.sequences.items():
        out[seq] = [
            tuple(trts[j - u] if j - u >= 0 else NONE for u in range(1, order + 1))
            for j in range(layout.P)
        ]
    return out


@dataclass
class Dataset:
    """Long-format crossover observations.

    Rows are sorted by (subject, period, occasion) on construction, using a
    natural ordering of subject labels.  Period and occasion values may be any
    integers; they are mapped to 0-based indices through their sorted unique
    values.
    """

    subject: np.ndarray
    period: np.ndarray
    occasion: np.ndarray
    response: np.ndarray
    sequence: np.ndarray
    treatment: np.ndarray
    time: np.ndarray | None = None
    baseline: np.ndarray | None = None
    covariates: dict = field(default_factory=dict)

    def __post_init__(self):
        self.subject = np.asarray([str(s) for s in self.subject], dtype=object)
        N = self.subject.size
        if N == 0:
            raise SchemaError("dataset has no rows")
        self.period = np.asarray(self.period).astype(int)
        self.occasion = np.asarray(self.occasion).astype(int)
        self.response = np.asarray(self.response, dtype=float)
        self.sequence = np.asarray([str(s) for s in self.sequence], dtype=object)
        self.treatment = np.asarray([str(s) for s in self.treatment], dtype=object)
        self.time = (
            self.occasion.astype(float) if self.time is None else np.asarray(self.time, dtype=float)
        )
        if self.baseline is not None:
            self.baseline = np.asarray(self.baseline, dtype=float)
        self.covariates = {k: np.asarray(v) for k, v in self.covariates.items()}
        for name in ("period", "occasion", "response", "sequence", "treatment", "time"):
            if getattr(self, name).shape != (N,):
                raise SchemaError(f"column {name!r} has {getattr(self, name).size} rows, expected {N}")
        if self.baseline is not None and self.baseline.shape != (N,):
            raise SchemaError("baseline column length mismatch")
        for k, v in self.covariates.items():
            if v.shape != (N,):
                raise SchemaError(f"covariate {k!r} length mismatch")

        self.subjects = _sorted_unique(self.subject)
        rank = {s: i for i, s in enumerate(self.subjects)}
        self.subject_index = np.array([rank[s] for s in self.subject], dtype=np.int64)
        order = np.lexsort((self.occasion, self.period, self.subject_index))
        self._permute(order)

        self.periods = sorted(set(self.period.tolist()))
        self.occasions = sorted(set(self.occasion.tolist()))
        pmap = {v: i for i, v in enumerate(self.periods)}
        omap = {v: i for i, v in enumerate(self.occasions)}
        self.period_index = np.array([pmap[v] for v in self.period], dtype=np.int64)
        self.occasion_index = np.array([omap[v] for v in self.occasion], dtype=np.int64)
        self._validate()

    def _permute(self, order):
        for name in ("subject", "period", "occasion", "response", "sequence", "treatment", "time", "subject_index"):
            setattr(self, name, getattr(self, name)[order])
        if self.baseline is not None:
            self.baseline = self.baseline[order]
        self.covariates = {k: v[order] for k, v in self.covariates.items()}

    def _validate(self):
        cell = (self.subject_index * self.P + self.period_index) * self.L + self.occasion_index
        dup = np.flatnonzero(np.diff(cell) == 0)
        if dup.size:
            r = dup[0] + 1
            raise DuplicateError(
                f"duplicate observation for subject {self.subject[r]!r}, "
                f"period {self.period[r]}, occasion {self.occasion[r]}"
            )
        self.cell = self.period_index * self.L + self.occasion_index

        seq_of = {}
        trt_of = {}
        for i in range(self.N):
            s = self.subject[i]
            if seq_of.setdefault(s, self.sequence[i]) != self.sequence[i]:
                raise SchemaError(f"subject {s!r} appears in more than one sequence")
            key = (s, self.period[i])
            if trt_of.setdefault(key, self.treatment[i]) != self.treatment[i]:
                raise SchemaError(f"subject {s!r} has more than one treatment in period {self.period[i]}")
        self.subject_sequence = [seq_of[s] for s in self.subjects]

        sequences = {}
        for (s, per), t in trt_of.items():
            seq = seq_of[s]
            slot = sequences.setdefault(seq, [None] * self.P)
            j = self.periods.index(per)
            if slot[j] is None:
                slot[j] = t
            elif slot[j] != t:
                raise SchemaError(
                    f"sequence {seq!r} assigns different treatments in period {per} ({slot[j]!r} vs {t!r})"
                )
        for seq, slot in sequences.items():
            if any(t is None for t in slot):
                raise SchemaError(f"sequence {seq!r} is not observed in every period")
        seq_order = _sorted_unique(sequences)
        counts = {seq: 0 for seq in seq_order}
        for seq in self.subject_sequence:
            counts[seq] += 1
        self.layout = CrossoverLayout(
            {seq: tuple(sequences[seq]) for seq in seq_order},
            tuple(_sorted_unique(self.treatment)),
            counts,
            self.L,
        )
        self.cells_per_subject = np.bincount(self.subject_index, minlength=self.n)

    @property
    def N(self) -> int:
        return int(self.subject.size)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def P(self) -> int:
        return len(self.periods)

    @property
    def L(self) -> int:
        return len(self.occasions)

    @property
    def balanced(self) -> bool:
        return bool(np.all(self.cells_per_subject == self.P * self.L))

    def require_balance(self, why: str = "this structure"):
        if not self.balanced:
            short = int(np.argmin(self.cells_per_subject))
            raise BalanceError(
                f"{why} needs complete P x L data; subject {self.subjects[short]!r} has "
                f"{self.cells_per_subject[short]} of {self.P * self.L} cells"
            )

    def carryover_labels(self, order: int) -> list:
        """Per-row tuples of lagged treatment labels (``None`` before period 1)."""
        table = expand_carryover(self.layout, order)
        return [table[self.sequence[i]][self.period_index[i]] for i in range(self.N)]

    def centered_time(self) -> np.ndarray:
        """Occasion time minus its mean within each subject-period."""
        key = self.subject_index * self.P + self.period_index
        sums = np.bincount(key, weights=self.time, minlength=self.n * self.P)
        cnt = np.bincount(key, minlength=self.n * self.P)
        return self.time - sums[key] / np.maximum(cnt[key], 1)

    def to_rows(self):
        """Rows as dictionaries, in canonical order."""
        rows = []
        for i in range(self.N):
            row = {
                "subject": self.subject[i],
                "period": int(self.period[i]),
                "occasion": int(self.occasion[i]),
                "treatment": self.treatment[i],
                "sequence": self.sequence[i],
                "response": float(self.response[i]),
                "time": float(self.time[i]),
            }
            if self.baseline is not None:
                row["baseline"] = float(self.baseline[i])
            rows.append(row)
        return rows


# -- formula --------------------------------------------------------------

_FACTORS = ("period", "treatment", "sequence", "occasion")
_TERM_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\(\s*([^)]*)\s*\))?\s*$")


@dataclass(frozen=True)
class Term:
    """One formula term.

    ``kind`` is one of ``intercept``, ``period``, ``treatment``, ``sequence``,
    ``occasion``, ``baseline``, ``time`` (``arg`` = polynomial degree),
    ``carryover`` (``arg`` = highest lag), ``covariate`` (``arg`` = column
    name) or ``interaction`` (``parts`` = two terms).
    """

    kind: str
    arg: object = None
    parts: tuple = ()

    def __str__(self):
        if self.kind == "interaction":
            return "*".join(str(p) for p in self.parts)
        return self.kind if self.arg is None else f"{self.kind}({self.arg})"


def parse_term(text: str) -> Term:
    if "*" in text or ":" in text:
        pieces = [p for p in re.split(r"[*:]", text) if p.strip()]
        if len(pieces) != 2:
            raise ConfigError(f"interaction {text!r} must have exactly two factors")
        parts = tuple(parse_term(p) for p in pieces)
        for p in parts:
            if p.kind in ("intercept", "interaction"):
                raise ConfigError(f"{p.kind} cannot appear inside an interaction ({text!r})")
        return Term("interaction", parts=parts)
    m = _TERM_RE.match(text.lower() if "covariate" not in text else text)
    if not m:
        raise ConfigError(f"cannot parse formula term {text!r}")
    kind, arg = m.group(1).lower(), m.group(2)
    if kind in ("intercept", "baseline") + _FACTORS:
        if arg:
            raise ConfigError(f"term {kind!r} takes no argument")
        return Term(kind)
    if kind in ("time", "carryover"):
        try:
            k = int(arg) if arg else 1
        except ValueError:
            raise ConfigError(f"term {text!r} needs an integer argument") from None
        if k < 1:
            raise ConfigError(f"term {text!r} needs a positive argument")
        return Term(kind, k)
    if kind == "covariate":
        if not arg:
            raise ConfigError("covariate term needs a column name")
        return Term(kind, arg.strip())
    raise ConfigError(f"unknown formula term {text!r}")


@dataclass(frozen=True)
class ModelFormula:
    """Ordered list of terms plus optional reference levels per factor.

    >>> ModelFormula.parse("intercept, period, treatment, carryover(1)")
    """

    terms: tuple
    references: dict = field(default_factory=dict, compare=False)

    @classmethod
    def parse(cls, spec, references=None):
        if isinstance(spec, str):
            spec = [s for s in re.split(r"[,;\n]", spec) if s.strip()]
        terms = tuple(t if isinstance(t, Term) else parse_term(t) for t in spec)
        if not terms:
            raise ConfigError("formula has no terms")
        return cls(terms, dict(references or {}))

    def __str__(self):
        return ", ".join(str(t) for t in self.terms)


def _factor_levels(dataset: Dataset, name: str, references: dict):
    if name == "period":
        levels = [str(p) for p in dataset.periods]
        values = np.array([str(p) for p in dataset.period], dtype=object)
    elif name == "occasion":
        levels = [str(o) for o in dataset.occasions]
        values = np.array([str(o) for o in dataset.occasion], dtype=object)
    elif name == "treatment":
        levels = list(dataset.layout.treatments)
        values = dataset.treatment
    else:
        levels = list(dataset.layout.sequences)
        values = dataset.sequence
    ref = references.get(name)
    if ref is None:
        ref = levels[0]
    ref = str(ref)
    if ref not in levels:
        raise ConfigError(f"reference level {ref!r} not found for {name}; levels are {levels}")
    return values, [lv for lv in levels if lv != ref]


def _term_columns(dataset: Dataset, term: Term, references: dict):
    """Return ``(labels, columns)`` for a single term."""
    N = dataset.N
    kind = term.kind
    if kind == "intercept":
        return ["intercept"], [np.ones(N)]
    if kind in _FACTORS:
        values, levels = _factor_levels(dataset, kind, references)
        return [f"{kind}[{lv}]" for lv in levels], [(values == lv).astype(float) for lv in levels]
    if kind == "baseline":
        if dataset.baseline is None:
            raise ConfigError("formula uses baseline but the dataset has no baseline column")
        return ["baseline"], [dataset.baseline.astype(float)]
    if kind == "covariate":
        if term.arg not in dataset.covariates:
            raise ConfigError(f"covariate {term.arg!r} not present in the dataset")
        try:
            col = dataset.covariates[term.arg].astype(float)
        except ValueError:
            raise ConfigError(f"covariate {term.arg!r} is not numeric") from None
        return [term.arg], [col]
    if kind == "time":
        t = dataset.centered_time()
        labels = ["time" if d == 1 else f"time^{d}" for d in range(1, term.arg + 1)]
        return labels, [t**d for d in range(1, term.arg + 1)]
    if kind == "carryover":
        lagged = dataset.carryover_labels(term.arg)
        _, levels = _factor_levels(dataset, "treatment", references)
        labels, cols = [], []
        for u in range(term.arg):
            for lv in levels:
                labels.append(f"carryover{u + 1}[{lv}]")
                cols.append(np.array([lab[u] == lv for lab in lagged], dtype=float))
        return labels, cols
    if kind == "interaction":
        la, ca = _term_columns(dataset, term.parts[0], references)
        lb, cb = _term_columns(dataset, term.parts[1], references)
        labels, cols = [], []
        for a_lab, a in zip(la, ca):
            for b_lab, b in zip(lb, cb):
                labels.append(f"{a_lab}:{b_lab}")
                cols.append(a * b)
        return labels, cols
    raise ConfigError(f"unknown term kind {kind!r}")


def build_design_matrix(dataset: Dataset, formula: ModelFormula, check_rank: bool = True):
    """Dummy-coded design matrix and its column labels.

    Raises :class:`RankError` naming the columns that are linear combinations
    of earlier ones.
    """
    labels, cols = [], []
    for term in formula.terms:
        lab, col = _term_columns(dataset, term, formula.references)
        labels.extend(lab)
        cols.extend(col)
    if len(set(labels)) != len(labels):
        dupes = sorted({lb for lb in labels if labels.count(lb) > 1})
        raise ConfigError(f"formula produces duplicate columns {dupes}")
    X = np.column_stack(cols) if cols else np.empty((dataset.N, 0))
    if check_rank:
        aliased = aliased_columns(X, labels)
        if aliased:
            raise RankError(
                f"design matrix is rank deficient; aliased columns: {', '.join(aliased)}", aliased
            )
    return X, labels


def aliased_columns(X: np.ndarray, labels) -> list:
    """Columns that add nothing to the span of the columns before them."""
    if X.shape[1] == 0:
        return []
    scale = np.linalg.norm(X, axis=0)
    tol = max(X.shape) * np.finfo(float).eps * 1e3
    aliased = []
    basis = np.empty((X.shape[0], 0))
    for j in range(X.shape[1]):
        if scale[j] == 0:
            aliased.append(labels[j])
            continue
        v = X[:, j] / scale[j]
        if basis.shape[1]:
            v = v - basis @ (basis.T @ v)
            v = v - basis @ (basis.T @ v)
        norm = np.linalg.norm(v)
        if norm <= tol:
            aliased.append(labels[j])
        else:
            basis = np.column_stack([basis, v / norm])
    return aliased
