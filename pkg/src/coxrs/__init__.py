"""Overfitting in Cox regression with right censoring: simulation, ML fits,
replica-symmetric predictions and de-biased estimators."""

from .cox import CoxFit, CoxFitError, breslow, fit_cox, nelson_aalen, overfit_markers
from .debias import DebiasResult, censoring_cumhaz, debias_solve, debiased_cumhaz, \
    frailty_cumhaz_fixed_point
from .rs_quadrature import DiscreteOutcomeModel, discretize, solve_rs_quadrature
from .rs_solver import RSSolution, build_population, rs_predicted_curve, solve_rs
from .survival import CensoringSpec, HazardSpec, StepFunction, SurvivalDataset, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "CoxFit", "CoxFitError", "breslow", "fit_cox", "nelson_aalen", "overfit_markers",
    "DebiasResult", "censoring_cumhaz", "debias_solve", "debiased_cumhaz",
    "frailty_cumhaz_fixed_point", "DiscreteOutcomeModel", "discretize", "solve_rs_quadrature",
    "RSSolution", "build_population", "rs_predicted_curve", "solve_rs",
    "CensoringSpec", "HazardSpec", "StepFunction", "SurvivalDataset", "generate_dataset",
]
