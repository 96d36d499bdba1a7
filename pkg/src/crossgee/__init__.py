"""GEE for crossover designs with repeated measures and Kronecker working correlation."""

from .correlation import (
    AR1,
    Exchangeable,
    Independence,
    Kronecker,
    Unstructured,
    build,
    factored_inverse,
    kronecker,
    project_to_psd,
    structure_from_name,
)
from .design import CrossoverLayout, Dataset, ModelFormula, build_design_matrix, expand_carryover
from .engine import (
    FitOptions,
    GeeFit,
    estimate_alpha1,
    estimate_dispersion,
    estimate_psi,
    fit,
    pearson_residuals,
    psi_moments,
    sandwich_covariance,
    wald_table,
)
from .expfam import Family, get_family
from .selection import ComparisonReport, compare_structures, qic

__version__ = "0.1.0"
