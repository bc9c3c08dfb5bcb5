"""Cox partial-likelihood regression, Breslow estimator and overfitting markers.

Risk sets use the convention that subject ``j`` is at risk at ``t_i`` iff
``t_j >= t_i`` (a subject is in its own risk set); exact ties therefore share
one risk set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .survival import StepFunction, SurvivalDataset

__all__ = [
    "CoxFitError",
    "NumericalError",
    "CoxFit",
    "OverfitMarkers",
    "partial_log_likelihood",
    "plik_gradient_hessian",
    "fit_cox",
    "breslow",
    "nelson_aalen",
    "overfit_markers",
]

log = logging.getLogger(__name__)


class CoxFitError(RuntimeError):
    """The data admit no (identifiable) partial-likelihood maximiser."""


class NumericalError(FloatingPointError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


class _RiskSets:
    """Sorted view of a dataset with tie-aware risk-set bookkeeping."""

    def __init__(self, times, events):
        # (time, event-first) ordering keeps the layout deterministic under ties
        self.order = np.lexsort((-np.asarray(events), times))
        self.t = np.asarray(times)[self.order]
        self.d = np.asarray(events)[self.order].astype(float)
        # first/last sorted index sharing each subject's time
        self.first = np.searchsorted(self.t, self.t, side="left")
        self.last = np.searchsorted(self.t, self.t, side="right") - 1

    def tail_sum(self, x):
        """``sum_{j: t_j >= t_i} x_j`` for every sorted subject ``i``."""
        rc = np.cumsum(x[::-1], axis=0)[::-1]
        return rc[self.first]

    def head_sum(self, x):
        """``sum_{i: t_i <= t_j} x_i`` for every sorted subject ``j``."""
        return np.cumsum(x, axis=0)[self.last]


def _check_inputs(beta, data):
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.size != data.p:
        raise ValueError(f"beta has length {beta.size}, data has p={data.p}")
    if not np.all(np.isfinite(beta)):
        raise NumericalError("non-finite entries in beta")
    return beta


def partial_log_likelihood(beta, data: SurvivalDataset) -> float:
    """``sum_i event_i [beta.z_i - log((1/n) sum_{t_j >= t_i} exp(beta.z_j))]``."""
    beta = _check_inputs(beta, data)
    rs = _RiskSets(data.times, data.events)
    eta = data.covariates[rs.order] @ beta
    log_tail = np.logaddexp.accumulate(eta[::-1])[::-1][rs.first]
    ev = rs.d > 0
    return float(np.sum(eta[ev] - log_tail[ev] + np.log(data.n)))


def _derivatives(beta, Z, rs: _RiskSets, want_hessian=True):
    eta = Z @ beta
    e = np.exp(eta - eta.max())
    R = rs.tail_sum(e)
    zbar = rs.tail_sum(e[:, None] * Z) / R[:, None]
    grad = rs.d @ (Z - zbar)
    if not want_hessian:
        return grad, None
    # sum_i d_i/R_i sum_{j in R_i} e_j z_j z_j^T  ==  Z^T diag(e_j c_j) Z
    c = rs.head_sum(rs.d / R)
    hess = -(Z * (e * c)[:, None]).T @ Z + (zbar * rs.d[:, None]).T @ zbar
    return grad, 0.5 * (hess + hess.T)


def plik_gradient_hessian(beta, data: SurvivalDataset):
    """Gradient and Hessian of :func:`partial_log_likelihood`.

    gradient ``= sum_i event_i (z_i - zbar_i)``, Hessian ``= -sum_i event_i V_i``
    with ``zbar_i``, ``V_i`` the exp(beta.z)-weighted mean and covariance over
    the risk set of ``i``.
    """
    beta = _check_inputs(beta, data)
    rs = _RiskSets(data.times, data.events)
    return _derivatives(beta, data.covariates[rs.order], rs)


@dataclass(frozen=True)
class CoxFit:
    beta_hat: np.ndarray
    breslow: StepFunction
    converged: bool
    iterations: int
    final_gradient_norm: float
    separation_detected: bool
    log_likelihood: float = float("nan")
    trace: list = field(default_factory=list, repr=False, compare=False)


def _newton_direction(grad, hess, jitter=1e-10):
    info = -hess
    try:
        cf = linalg.cho_factor(info, lower=True, check_finite=True)
        return linalg.cho_solve(cf, grad)
    except (linalg.LinAlgError, ValueError):
        scale = max(1.0, float(np.max(np.abs(np.diag(info)))))
        info = info + jitter * scale * np.eye(info.shape[0])
        return linalg.solve(info, grad, assume_a="sym")


def fit_cox(data: SurvivalDataset, max_iter: int = 100, grad_tol: float = 1e-8,
            step_damping: float = 0.5, max_halvings: int = 30,
            divergence_radius: float = 50.0) -> CoxFit:
    """Maximise the partial likelihood by damped Newton ascent from ``beta = 0``.

    Converged means sup-norm gradient ``<= grad_tol``. When the maximiser does
    not exist (monotone likelihood), either ``|beta|`` leaves
    ``divergence_radius`` or the gradient vanishes only asymptotically; both
    are caught and the fit is returned with ``separation_detected=True`` and
    ``converged=False``.

    Raises
    ------
    CoxFitError
        No events, or a covariate constant across subjects.
    NumericalError
        Non-finite likelihood or derivatives during the iteration.
    """
    if not np.any(data.events):
        raise CoxFitError("no uncensored events: partial likelihood is constant")
    Z_all = data.covariates
    const = np.flatnonzero(np.ptp(Z_all, axis=0) == 0) if data.n > 1 else np.arange(data.p)
    if const.size:
        raise CoxFitError(
            f"non-identifiable: covariate column(s) {const.tolist()} constant, "
            "the partial likelihood does not depend on them"
        )
    rs = _RiskSets(data.times, data.events)
    Z = Z_all[rs.order]
    n = data.n

    def loglik(b):
        eta = Z @ b
        tail = np.logaddexp.accumulate(eta[::-1])[::-1][rs.first]
        ev = rs.d > 0
        return float(np.sum(eta[ev] - tail[ev] + np.log(n)))

    beta = np.zeros(data.p)
    ll = loglik(beta)
    trace = []
    converged = separated = False
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        grad, hess = _derivatives(beta, Z, rs)
        gnorm = float(np.max(np.abs(grad)))
        if not (np.isfinite(gnorm) and np.all(np.isfinite(hess))):
            raise NumericalError(f"non-finite derivatives at iteration {it}", trace)
        step = _newton_direction(grad, hess)
        trace.append((it, ll, gnorm, float(np.linalg.norm(step))))
        if gnorm <= grad_tol:
            converged = True
            break
        scale = 1.0
        for _ in range(max_halvings):
            cand = beta + scale * step
            ll_new = loglik(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * abs(ll):
                break
            scale *= step_damping
        else:
            break
        if not np.isfinite(ll_new):
            raise NumericalError(f"non-finite partial likelihood at iteration {it}", trace)
        stalled = np.array_equal(cand, beta)
        beta, ll = cand, ll_new
        if np.linalg.norm(beta) > divergence_radius:
            separated = True
            break
        if stalled:
            break

    if not separated and np.any(beta):
        # a finite maximiser of a concave objective makes doubling beta strictly
        # worse; along an unbounded ascent ray the likelihood keeps creeping up
        if loglik(2.0 * beta) >= ll - 1e-9 * max(1.0, abs(ll)):
            separated = True
    if separated:
        converged = False
        log.warning("partial likelihood unbounded along beta (|beta| = %.3g after %d "
                    "iterations): no finite maximiser", np.linalg.norm(beta), it)

    return CoxFit(
        beta_hat=beta,
        breslow=breslow(data, beta),
        converged=converged,
        iterations=it,
        final_gradient_norm=gnorm,
        separation_detected=separated,
        log_likelihood=ll,
        trace=trace,
    )


def breslow(data: SurvivalDataset, beta) -> StepFunction:
    """Breslow cumulative baseline hazard at association vector ``beta``.

    Jumps ``1 / sum_{t_j >= t_i} exp(beta.z_j)`` at each uncensored ``t_i``.
    """
    beta = _check_inputs(beta, data)
    rs = _RiskSets(data.times, data.events)
    e = np.exp(data.covariates[rs.order] @ beta)
    R = rs.tail_sum(e)
    ev = rs.d > 0
    return StepFunction.from_jumps(rs.t[ev], 1.0 / R[ev])


def nelson_aalen(times, events) -> StepFunction:
    """``sum_{t_i <= t} event_i / #{j: t_j >= t_i}``."""
    rs = _RiskSets(np.asarray(times, dtype=float), np.asarray(events))
    at_risk = rs.tail_sum(np.ones(rs.t.size))
    ev = rs.d > 0
    return StepFunction.from_jumps(rs.t[ev], 1.0 / at_risk[ev])


@dataclass(frozen=True)
class OverfitMarkers:
    kappa_hat: float
    v_hat: float
    second_moment: float


def overfit_markers(beta_hat, beta0, A=None, covariates=None) -> OverfitMarkers:
    """Bias factor, noise amplitude and in-sample second moment of ``beta_hat``.

    ``kappa = beta0.A.beta_hat / beta0.A.beta0``,
    ``v**2 = beta_hat.A.beta_hat - kappa**2 beta0.A.beta0`` and
    ``second_moment = mean_i (beta_hat.z_i)**2`` (nan without covariates).
    ``A`` defaults to the identity.
    """
    b = np.asarray(beta_hat, dtype=float)
    b0 = np.asarray(beta0, dtype=float)
    Ab0 = b0 if A is None else np.asarray(A) @ b0
    Ab = b if A is None else np.asarray(A) @ b
    s2 = float(b0 @ Ab0)
    if not s2 > 0:
        raise ValueError("kappa is undefined for a zero-signal beta0")
    kappa = float(b @ Ab0) / s2
    v2 = float(b @ Ab) - kappa * kappa * s2
    v2 = max(v2, 0.0)
    m2 = float("nan") if covariates is None else float(np.mean((np.asarray(covariates) @ b) ** 2))
    return OverfitMarkers(kappa, float(np.sqrt(v2)), m2)
