"""Replica-symmetric order parameters by population dynamics.

A population of ``m`` members ``(t, event, y, z)`` is drawn once from the
data-generating model with true linear predictor ``S*y``. Each member carries
an inferred linear predictor

    xi = a - W(u^2 Lambda(t) exp(a)),   a = u^2 event + v z + w y,

and the order parameters ``(u, v, w)`` together with the inferred cumulative
hazard ``Lambda`` are iterated to a joint fixed point with damping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .special_math import lambert_w_exp
from .survival import CensoringSpec, HazardSpec, StepFunction, sample_outcomes

__all__ = [
    "RSSolverError",
    "RSConvergenceError",
    "RSPopulation",
    "RSSolution",
    "build_population",
    "xi_update",
    "lambda_update",
    "solve_u",
    "solve_rs",
    "rs_predicted_curve",
    "MIN_POPULATION",
]

log = logging.getLogger(__name__)

MIN_POPULATION = 10_000


class RSSolverError(RuntimeError):
    """No admissible solution; typically ``zeta`` is beyond the existence range."""


class RSConvergenceError(RuntimeError):
    def __init__(self, message, history, partial=None):
        super().__init__(message)
        self.history = history
        self.partial = partial


@dataclass
class RSPopulation:
    """Population members sorted by time (events first among ties)."""

    times: np.ndarray
    events: np.ndarray
    y: np.ndarray
    z: np.ndarray
    xi: np.ndarray
    S: float
    hazard: HazardSpec | None = None
    censoring: CensoringSpec | None = None

    def __post_init__(self):
        self._first = np.searchsorted(self.times, self.times, side="left")
        self._last = np.searchsorted(self.times, self.times, side="right") - 1

    @property
    def m(self) -> int:
        return self.times.size

    def tail_sum(self, x):
        return np.cumsum(x[::-1])[::-1][self._first]


def build_population(m: int, S: float, hazard: HazardSpec, censoring: CensoringSpec,
                     rng=None, min_size: int = MIN_POPULATION) -> RSPopulation:
    """Sample ``m`` members ``(t, event, y, z)``, with ``y, z ~ N(0, 1)``."""
    if m < min_size:
        raise ValueError(f"population size {m} below the floor {min_size}")
    rng = np.random.default_rng(rng)
    y = rng.standard_normal(m)
    z = rng.standard_normal(m)
    t, d = sample_outcomes(S * y, hazard, censoring, rng)
    order = np.lexsort((-d, t))
    return RSPopulation(t[order], d[order].astype(float), y[order], z[order],
                        np.zeros(m), float(S), hazard, censoring)


def _lambda_values(pop: RSPopulation, lam) -> np.ndarray:
    if isinstance(lam, StepFunction):
        return lam(pop.times)
    lam = np.asarray(lam, dtype=float)
    if lam.ndim == 0:
        return np.full(pop.m, float(lam))
    return lam


def _w_of(pop, u, v, w, lam_vals):
    """Lambert-W term and the affine part ``a`` for every member."""
    a = u * u * pop.events + v * pop.z + w * pop.y
    pos = lam_vals > 0
    if u == 0 or not pos.any():
        return np.zeros(pop.m), a
    log_arg = np.full(pop.m, -np.inf)
    log_arg[pos] = np.log(u * u * lam_vals[pos]) + a[pos]
    return lambert_w_exp(log_arg), a


def xi_update(pop: RSPopulation, u: float, v: float, w: float, lam) -> np.ndarray:
    """Recompute and store ``xi`` for every member; ``lam`` is a StepFunction,
    an array of values at the member times, or a constant."""
    if u < 0:
        raise ValueError("u must be non-negative")
    lam_vals = _lambda_values(pop, lam)
    if np.any(lam_vals < 0) or not np.all(np.isfinite(lam_vals)):
        bad = int(np.flatnonzero(~(lam_vals >= 0) | ~np.isfinite(lam_vals))[0])
        raise ValueError(f"member {bad}: Lambda(t) = {lam_vals[bad]!r} outside [0, inf)")
    W, a = _w_of(pop, u, v, w, lam_vals)
    pop.xi = a - W
    return pop.xi


def _lambda_member_values(pop: RSPopulation, xi) -> tuple[np.ndarray, int]:
    denom = pop.tail_sum(np.exp(xi))
    ok = denom > 0
    dropped = int(np.count_nonzero((pop.events > 0) & ~ok))
    jumps = np.where((pop.events > 0) & ok, pop.events / np.where(ok, denom, 1.0), 0.0)
    return np.cumsum(jumps)[pop._last], dropped


def lambda_update(pop: RSPopulation, xi=None) -> StepFunction:
    """Population Breslow estimator ``sum_l event_l / sum_{t_j >= t_l} exp(xi_j)``."""
    xi = pop.xi if xi is None else xi
    vals, dropped = _lambda_member_values(pop, xi)
    if dropped:
        log.warning("lambda_update: dropped %d jump(s) with empty weighted risk set", dropped)
    ev = pop.events > 0
    return StepFunction.from_jumps(pop.times[ev], np.diff(vals, prepend=0.0)[ev])


def solve_u(zeta: float, v: float, w: float, lam, pop: RSPopulation,
            u0: float | None = None, tol: float = 1e-12) -> float:
    """Solve ``mean 1/(1 + u^2 Lambda(t) e^xi) = 1 - zeta`` for ``u >= 0``.

    ``xi`` is recomputed for every trial ``u``. Newton steps are safeguarded
    by a bisection bracket ``[0, u_hi]`` whose upper end grows geometrically.
    On return ``pop.xi`` holds ``xi`` at the solution.
    """
    if not 0 < zeta < 1:
        raise ValueError(f"zeta must lie in (0, 1), got {zeta}")
    lam_vals = _lambda_values(pop, lam)
    target = 1.0 - zeta
    dlog = pop.events  # d log(arg)/du = 2/u + 2 u event

    def f_and_df(u):
        W, a = _w_of(pop, u, v, w, lam_vals)
        g = 1.0 / (1.0 + W)
        fu = g.mean() - target
        dW = W * g * (2.0 / u + 2.0 * u * dlog)
        return fu, -np.mean(g * g * dW), a - W

    lo, hi = 0.0, max(u0 or 0.5, 1e-3)
    f_hi, df_hi, xi_hi = f_and_df(hi)
    while f_hi > 0:
        lo = hi
        hi *= 2.0
        if hi > 1e6:
            raise RSSolverError(
                f"no bracket for u: mean 1/(1+W) stays above 1 - zeta = {target:.6g}; "
                "zeta is likely beyond the range where the ML estimator exists"
            )
        f_hi, df_hi, xi_hi = f_and_df(hi)
    u = hi if u0 is None else min(max(u0, lo), hi)
    fu, dfu, xi = (f_hi, df_hi, xi_hi) if u == hi else f_and_df(u)
    for _ in range(200):
        if abs(fu) <= tol:
            break
        if fu > 0:
            lo = u
        else:
            hi = u
        u_new = u - fu / dfu if dfu < 0 else 0.5 * (lo + hi)
        if not lo < u_new < hi:
            u_new = 0.5 * (lo + hi)
        if abs(u_new - u) <= 1e-15 * u:
            break
        u = u_new
        fu, dfu, xi = f_and_df(u)
    pop.xi = xi
    return float(u)


@dataclass
class RSSolution:
    zeta: float
    S: float
    u_star: float
    v_star: float
    w_star: float
    lambda_rs: StepFunction
    residuals: dict
    population: RSPopulation | None = field(default=None, repr=False)
    mean_xi_squared: float = float("nan")
    sweeps: int = 0
    converged: bool = True
    history: list = field(default_factory=list, repr=False)
    # iterate of Lambda at the solver's own support points, for warm starts
    lambda_outcomes: np.ndarray | None = field(default=None, repr=False)

    @property
    def kappa_star(self) -> float:
        return self.w_star / self.S if self.S > 0 else float("nan")

    @property
    def second_moment(self) -> float:
        """Predicted ``mean_i (beta_hat . z_i)^2``: ``w^2 + (1 - zeta) v^2``."""
        return self.w_star ** 2 + (1.0 - self.zeta) * self.v_star ** 2


def _w_target(pop, zeta, u, v, w, lam_vals, xi, form):
    if form == "mean_y_xi":
        return float(np.mean(pop.y * xi))
    # Gaussian integration by parts in y of E[y (u^2 event - W)] = 0, which
    # brings in the martingale residual event - L0(t) exp(S y)
    W = u * u * pop.events + v * pop.z + w * pop.y - xi
    g = u * u * pop.events - W
    resid = pop.events - pop.hazard.cumhaz(pop.times) * np.exp(pop.S * pop.y)
    return float(pop.S * np.mean(g * resid) / np.mean(W / (1.0 + W)))


def solve_rs(zeta: float, S: float, hazard: HazardSpec, censoring: CensoringSpec,
             m: int = 100_000, damping: float = 0.5, tol: float = 1e-6,
             max_sweeps: int = 500, rng=None, w_update: str = "auto",
             population: RSPopulation | None = None, init=None) -> RSSolution:
    """Damped fixed-point iteration of the population RS equations.

    Each sweep: xi -> Lambda (population Breslow) -> v -> w -> u (exact
    solve of the ``1 - zeta`` equation). ``w_update`` selects the
    integration-by-parts form (``"ibp"``, needs a closed-form hazard) or the
    ``mean(y xi)`` form; ``"auto"`` picks ``"ibp"`` when possible.

    Raises
    ------
    RSConvergenceError
        ``max_sweeps`` exhausted; carries the residual history.
    RSSolverError
        The u-equation has no root.
    """
    if not 0 < zeta < 1:
        raise ValueError(f"zeta must lie in (0, 1), got {zeta}")
    if S < 0:
        raise ValueError("S must be non-negative")
    if population is None:
        population = build_population(m, S, hazard, censoring, rng)
    pop = population
    if w_update == "auto":
        w_update = "ibp" if (pop.hazard is not None and pop.hazard.closed_form and S > 0) else "mean_y_xi"
    if w_update == "ibp" and (pop.hazard is None or not pop.hazard.closed_form):
        raise ValueError("the integration-by-parts w-update needs a closed-form hazard")

    u, v, w = (0.1, 0.1, S) if init is None else init
    lam, _ = _lambda_member_values(pop, np.zeros(pop.m))
    eta = damping
    history = []
    converged = False
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        xi = xi_update(pop, u, v, w, lam)
        lam_new, dropped = _lambda_member_values(pop, xi)
        if dropped:
            log.warning("sweep %d: dropped %d Lambda jump(s)", sweep, dropped)
        d_lam = np.max(np.abs(lam_new - lam)) / max(np.max(lam), 1e-300)
        lam = (1 - eta) * lam + eta * lam_new

        g = xi - v * pop.z - w * pop.y
        v_new = float(np.sqrt(np.mean(g * g) / zeta))
        w_new = _w_target(pop, zeta, u, v, w, lam, xi, w_update)
        v_old, w_old, u_old = v, w, u
        v = (1 - eta) * v + eta * v_new
        w = (1 - eta) * w + eta * w_new
        u = solve_u(zeta, v, w, lam, pop, u0=u)

        change = max(abs(u - u_old) / max(u, 1e-12), abs(v - v_old) / max(v, 1e-12),
                     abs(w - w_old) / max(abs(w), 1e-12), eta * d_lam)
        history.append({"sweep": sweep, "u": u, "v": v, "w": w, "change": change})
        if not np.isfinite(change):
            raise RSConvergenceError(f"non-finite iterate at sweep {sweep}", history)
        if change <= tol:
            converged = True
            break

    xi = pop.xi
    lam_check, _ = _lambda_member_values(pop, xi)
    W = u * u * pop.events + v * pop.z + w * pop.y - xi
    g = xi - v * pop.z - w * pop.y
    residuals = {
        "v": abs(zeta * v * v - np.mean(g * g)) / (zeta * v * v),
        "u": abs(np.mean(1.0 / (1.0 + W)) - (1 - zeta)),
        "w": abs(w - _w_target(pop, zeta, u, v, w, lam, xi, w_update)) / max(abs(w), 1e-12),
        "lambda": float(np.max(np.abs(lam_check - lam)) / max(np.max(lam), 1e-300)),
    }
    ev = pop.events > 0
    lam_step = StepFunction.from_jumps(pop.times[ev], np.diff(lam, prepend=0.0)[ev])
    sol = RSSolution(zeta, float(S), u, v, w, lam_step, residuals, pop,
                     float(np.mean(xi * xi)), sweep, converged, history)
    if not converged:
        raise RSConvergenceError(
            f"RS iteration not converged after {max_sweeps} sweeps "
            f"(last relative change {history[-1]['change']:.3g})", history, sol)
    return sol


def rs_predicted_curve(solution: RSSolution, hazard: HazardSpec | None = None) -> np.ndarray:
    """``(L0(t), Lambda(t))`` at the population's event times, sorted by ``L0``."""
    pop = solution.population
    if hazard is None:
        if pop is None or pop.hazard is None:
            raise ValueError("no true hazard available for the predicted curve")
        hazard = pop.hazard
    t = solution.lambda_rs.jump_times
    out = np.column_stack([hazard.cumhaz(t), solution.lambda_rs(t)])
    return out[np.argsort(out[:, 0], kind="stable")]
