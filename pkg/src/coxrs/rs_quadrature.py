"""Deterministic solver for the replica-symmetric equations.

Instead of a sampled population, the outcome distribution is discretised on
time atoms ``tau_1 < ... < tau_K`` carrying event-hazard jumps ``a_k`` and
censoring-hazard jumps ``c_k``. Given ``y`` (``r = exp(S y)``) and cumulative
sums ``A_k``, ``C_k``, ties resolved in favour of the event:

    P(t = tau_k, event)    = (exp(-A_{k-1} r) - exp(-A_k r)) exp(-C_{k-1})
    P(t = tau_k, censored) = (exp(-C_{k-1}) - exp(-C_k)) exp(-A_k r)

and the mass surviving both processes past ``tau_K`` is censored at
``tau_K``. Expectations over ``y`` use a Gauss rule; expectations over ``z``
are tabulated once per value of ``v`` as smooth functions of the scalar
``c = log(u^2 Lambda) + u^2 event + w y``.

With step hazards estimated from data this is the inner solver of the
debiasing procedure; with closed-form hazards it reproduces the population
solution up to an ``O(1/K)`` discretisation error.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .rs_solver import RSConvergenceError, RSSolution, RSSolverError
from .special_math import gaussian_rule, lambert_w_exp
from .survival import CensoringKind, CensoringSpec, HazardSpec, StepFunction

__all__ = [
    "DiscreteOutcomeModel",
    "GaussianSmoother",
    "discretize",
    "solve_rs_quadrature",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscreteOutcomeModel:
    """Outcomes ``(atom, event)`` with their probabilities and ``y``-scores.

    ``prob[o, j]`` is ``P(outcome o | y = y_j)`` and ``score[o, j]`` is
    ``d/dy log P(outcome o | y)`` at the rule's nodes ``y_j``.
    """

    tau: np.ndarray
    atom: np.ndarray
    event: np.ndarray
    prob: np.ndarray
    score: np.ndarray
    y: np.ndarray
    y_weights: np.ndarray
    S: float

    @classmethod
    def from_jumps(cls, tau, event_jumps, censor_jumps, S: float,
                   y_order: int = 32) -> "DiscreteOutcomeModel":
        tau = np.asarray(tau, dtype=float)
        a = np.asarray(event_jumps, dtype=float)
        cj = np.asarray(censor_jumps, dtype=float)
        if not (tau.shape == a.shape == cj.shape) or tau.ndim != 1 or tau.size == 0:
            raise ValueError("tau, event_jumps and censor_jumps must be equal-length 1-d arrays")
        if np.any(np.diff(tau) <= 0):
            raise ValueError("atoms must be strictly increasing")
        if np.any(a < 0) or np.any(cj < 0) or not np.all(np.isfinite(a)):
            raise ValueError("hazard jumps must be non-negative (event jumps finite)")
        if not np.any(a > 0):
            raise ValueError("the event hazard has no mass on the atoms")
        rule = gaussian_rule(order=y_order)
        y = rule.nodes
        r = np.exp(S * y)[None, :]
        A = np.cumsum(a)
        A_prev = np.concatenate(([0.0], A[:-1]))
        C = np.cumsum(cj)
        C_prev = np.concatenate(([0.0], C[:-1]))
        G_prev = np.exp(-C_prev)[:, None]
        G = np.exp(-C)[:, None]
        S_prev = np.exp(-A_prev[:, None] * r)
        S_now = np.exp(-A[:, None] * r)

        ar = a[:, None] * r
        p_ev = S_prev * -np.expm1(-ar) * G_prev
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            s_ev = S * r * (np.where(ar > 0, a[:, None] / np.expm1(ar), 0.0) - A_prev[:, None])
        p_c = (G_prev - G) * S_now
        p_c[-1] += (S_now[-1] * G[-1]) if np.isfinite(C[-1]) else 0.0
        s_c = -S * r * A[:, None]

        ev = a > 0
        ce = cj > 0
        ce[-1] = True
        atom = np.concatenate([np.flatnonzero(ev), np.flatnonzero(ce)])
        event = np.concatenate([np.ones(ev.sum()), np.zeros(ce.sum())])
        prob = np.concatenate([p_ev[ev], p_c[ce]])
        score = np.concatenate([s_ev[ev], s_c[ce]])
        # sort by atom, events first within an atom
        order = np.lexsort((1 - event, atom))
        return cls(tau, atom[order], event[order], prob[order], score[order],
                   y, rule.weights, float(S))

    @property
    def joint(self) -> np.ndarray:
        """``P(outcome, y_j)`` including the Gauss weight of ``y_j``."""
        return self.prob * self.y_weights[None, :]

    @property
    def event_fraction(self) -> float:
        return float(self.joint[self.event > 0].sum())


def discretize(S: float, hazard: HazardSpec, censoring: CensoringSpec, n_atoms: int = 2000,
               horizon: float | None = None, y_order: int = 32) -> DiscreteOutcomeModel:
    """Discrete outcome model for any pair of hazards.

    Step hazards are used on their own jump locations (the union of both).
    Closed-form hazards are discretised on a uniform grid of ``n_atoms``
    points up to ``horizon`` (default: the end of uniform censoring, else
    ``L0^{-1}(30)``); survivors past the horizon count as censored there.
    """
    if hazard.closed_form or censoring.kind is not CensoringKind.EMPIRICAL_STEP:
        if horizon is None:
            if censoring.kind is CensoringKind.UNIFORM_INTERVAL:
                horizon = censoring.t_max
            elif hazard.closed_form:
                horizon = float(hazard.inverse(30.0))
            else:
                horizon = float(hazard.step.jump_times[-1])
        grid = horizon * np.arange(1, n_atoms + 1) / n_atoms
        if not hazard.closed_form:
            grid = np.union1d(grid, hazard.step.jump_times[hazard.step.jump_times <= horizon])
        tau = grid
    else:
        parts = [censoring.step.jump_times]
        if not hazard.closed_form:
            parts.append(hazard.step.jump_times)
        tau = np.unique(np.concatenate(parts))
        if hazard.closed_form:
            tau = np.union1d(tau, tau[-1] * np.arange(1, n_atoms + 1) / n_atoms)
    edges = np.concatenate(([0.0], tau))
    a = np.diff(hazard.cumhaz(edges))
    with np.errstate(invalid="ignore"):
        cum_c = censoring.cumhaz(edges)
        cj = np.diff(cum_c)
    cj = np.where(np.isnan(cj), np.inf, cj)  # inf - inf at the end of the support
    return DiscreteOutcomeModel.from_jumps(tau, a, cj, S, y_order)


class GaussianSmoother:
    """``G_f(c) = E_z f(W(exp(c + v z)))`` for ``f`` in ``{W, W^2, 1/(1+W)}``.

    Values and exact ``c``-derivatives (``dW/dc = W/(1+W)``) are tabulated on
    a uniform grid over ``[c_lo, c_hi]`` and combined by cubic Hermite
    interpolation. Below ``c_floor`` the small-argument asymptotics are used;
    other points outside the table are evaluated directly.
    """

    def __init__(self, v: float, c_lo: float, c_hi: float, z_order: int = 64,
                 step: float = 0.05, c_floor: float = -40.0):
        rule = gaussian_rule(order=z_order)
        self.v = float(v)
        self._z, self._zw = rule.nodes, rule.weights
        self.c_floor = c_floor
        self.lo = max(float(c_lo), c_floor)
        self.hi = max(float(c_hi), self.lo + step)
        self.step = step
        n = int(np.ceil((self.hi - self.lo) / step)) + 1
        self.hi = self.lo + (n - 1) * step
        self._val, self._der = self._direct(self.lo + step * np.arange(n))

    def covers(self, c_lo, c_hi) -> bool:
        return (c_lo >= self.lo or c_lo < self.c_floor) and c_hi <= self.hi

    def _direct(self, c):
        W = lambert_w_exp(c[:, None] + self.v * self._z[None, :])
        g = 1.0 / (1.0 + W)
        dW = W * g
        val = np.stack([W @ self._zw, (W * W) @ self._zw, g @ self._zw], axis=-1)
        der = np.stack([dW @ self._zw, (2.0 * W * dW) @ self._zw, -(dW * g * g) @ self._zw],
                       axis=-1)
        return val, der

    def _interp(self, c, cols, derivative):
        t = (c - self.lo) / self.step
        i = np.minimum(t.astype(np.intp), self._val.shape[0] - 2)
        s = t - i
        s2 = s * s
        om = 1.0 - s
        h00 = (1.0 + 2.0 * s) * om * om
        h10 = s * om * om * self.step
        h01 = s2 * (3.0 - 2.0 * s)
        h11 = s2 * (s - 1.0) * self.step
        out = []
        for k in cols:
            f0, f1 = self._val[i, k], self._val[i + 1, k]
            d0, d1 = self._der[i, k], self._der[i + 1, k]
            out.append(h00 * f0 + h10 * d0 + h01 * f1 + h11 * d1)
            if derivative:
                out.append(6.0 * (s2 - s) * (f0 - f1) / self.step
                           + (3.0 * s2 - 4.0 * s + 1.0) * d0 + (3.0 * s2 - 2.0 * s) * d1)
        return out

    def evaluate(self, c, cols=(0, 1, 2), derivative: bool = False):
        """Columns ``cols`` of ``(G_W, G_W2, G_I)`` at ``c``; with
        ``derivative`` each value is followed by its ``c``-derivative."""
        c = np.asarray(c, dtype=float)
        flat = c.ravel()
        width = len(cols) * (2 if derivative else 1)
        out = np.empty((width, flat.size))
        low = flat < self.c_floor
        mid = (flat >= self.lo) & (flat <= self.hi)
        rest = ~(low | mid)
        if mid.all():
            out[:] = self._interp(flat, cols, derivative)
        else:
            if mid.any():
                out[:, mid] = self._interp(flat[mid], cols, derivative)
            if low.any():
                cl = flat[low]
                e = np.exp(cl + 0.5 * self.v ** 2)
                e2 = np.exp(2.0 * cl + 2.0 * self.v ** 2)
                asym = {0: (e, e), 1: (e2, 2.0 * e2), 2: (1.0 - e, -e)}
                rows = [x for k in cols for x in (asym[k] if derivative else asym[k][:1])]
                out[:, low] = rows
            if rest.any():
                val, der = self._direct(flat[rest])
                rows = [x for k in cols for x in ((val[:, k], der[:, k]) if derivative
                                                  else (val[:, k],))]
                out[:, rest] = rows
        return tuple(row.reshape(c.shape) for row in out)

    def __call__(self, c):
        """``(G_W, G_W2, G_I)`` at ``c``; ``c = -inf`` (zero hazard) gives ``0, 0, 1``."""
        return self.evaluate(c)


def _lambda_from_mass(model, mass, first, last, p_out):
    """Breslow-type update; ``mass[o]`` is the ``exp(xi)``-weighted outcome mass."""
    R = np.cumsum(mass[::-1])[::-1][first]
    jumps = np.where((model.event > 0) & (R > 0), p_out / np.where(R > 0, R, 1.0), 0.0)
    return np.cumsum(jumps)[last]


def solve_rs_quadrature(zeta: float, model: DiscreteOutcomeModel, damping: float = 0.5,
                        tol: float = 1e-7, max_sweeps: int = 1000, init=None,
                        lambda_init=None, w_update: str = "ibp", z_order: int = 40,
                        smoother_step: float = 0.1) -> RSSolution:
    """Damped fixed-point iteration of the RS equations on a discrete model.

    Sweep order as in :func:`coxrs.rs_solver.solve_rs`. ``w_update="ibp"``
    uses the exact ``y``-score of the discrete model; ``"mean_y_xi"`` uses
    ``E[y xi]``. ``init=(u, v, w)`` and ``lambda_init`` (values at the
    outcomes) allow warm starts.
    """
    if not 0 < zeta < 1:
        raise ValueError(f"zeta must lie in (0, 1), got {zeta}")
    if w_update not in ("ibp", "mean_y_xi"):
        raise ValueError(f"unknown w_update {w_update!r}")
    S = model.S
    P = model.joint
    p_out = P.sum(axis=1)
    y = model.y[None, :]
    D = model.event[:, None]
    first = np.searchsorted(model.atom, model.atom, side="left")
    last = np.searchsorted(model.atom, model.atom, side="right") - 1

    u, v, w = (0.1, 0.1, S) if init is None else init
    if lambda_init is None:
        lam = _lambda_from_mass(model, p_out, first, last, p_out)
    else:
        lam = np.asarray(lambda_init, dtype=float).copy()

    def base(lam, w):
        # log(Lambda) + w y, -inf where Lambda vanishes
        with np.errstate(divide="ignore"):
            return np.log(lam)[:, None] + w * y

    smoother = None

    def get_smoother(v, c):
        nonlocal smoother
        fin = c[np.isfinite(c)]
        lo, hi = (float(fin.min()), float(fin.max())) if fin.size else (0.0, 0.0)
        if smoother is None or smoother.v != v or not smoother.covers(lo, hi):
            smoother = GaussianSmoother(v, lo - 2.0, hi + 2.0, z_order, smoother_step)
        return smoother

    def moments(u, v, w, lam):
        c = base(lam, w) + np.log(u * u) + u * u * D
        return get_smoother(v, c)(c), c

    history = []
    converged = False
    sweep = 0
    for sweep in range(1, max_sweeps + 1):
        (GW, GW2, GI), c = moments(u, v, w, lam)
        pos = (lam > 0)[:, None]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            e_xi = np.where(pos, GW / (u * u * np.where(pos, lam[:, None], 1.0)),
                            np.exp(u * u * D + w * y + 0.5 * v * v))
        lam_new = _lambda_from_mass(model, (P * e_xi).sum(axis=1), first, last, p_out)
        d_lam = np.max(np.abs(lam_new - lam)) / max(np.max(lam), 1e-300)
        lam = (1 - damping) * lam + damping * lam_new

        # v and w from xi at the pre-update Lambda, as in the population sweep
        u2D = u * u * D
        Eg2 = float((P * (u2D * u2D - 2.0 * u2D * GW + GW2)).sum())
        v_new = np.sqrt(Eg2 / zeta)
        if w_update == "ibp":
            w_new = float((P * model.score * (u2D - GW)).sum() / (P * (1.0 - GI)).sum())
        else:
            w_new = float((P * y * (u2D + w * y - GW)).sum())
        u_old, v_old, w_old = u, v, w
        v = (1 - damping) * v + damping * v_new
        w = (1 - damping) * w + damping * w_new
        u = _solve_u(zeta, v, w, lam, P, D, base, get_smoother, u)

        change = max(abs(u - u_old) / max(u, 1e-12), abs(v - v_old) / max(v, 1e-12),
                     abs(w - w_old) / max(abs(w), 1e-12), damping * d_lam)
        history.append({"sweep": sweep, "u": u, "v": v, "w": w, "change": change})
        if not np.isfinite(change):
            raise RSConvergenceError(f"non-finite iterate at sweep {sweep}", history)
        if change <= tol:
            converged = True
            break

    (GW, GW2, GI), c = moments(u, v, w, lam)
    u2D = u * u * D
    a0 = u2D + w * y
    # E_z xi^2 with E_z[z W] = v E_z[W/(1+W)] (Stein)
    xi2 = float((P * (a0 * a0 + v * v - 2.0 * a0 * GW - 2.0 * v * v * (1.0 - GI) + GW2)).sum())
    Eg2 = float((P * (u2D * u2D - 2.0 * u2D * GW + GW2)).sum())
    if w_update == "ibp":
        w_t = float((P * model.score * (u2D - GW)).sum() / (P * (1.0 - GI)).sum())
    else:
        w_t = float((P * y * (u2D + w * y - GW)).sum())
    pos = (lam > 0)[:, None]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        e_xi = np.where(pos, GW / (u * u * np.where(pos, lam[:, None], 1.0)),
                        np.exp(u2D + w * y + 0.5 * v * v))
    lam_chk = _lambda_from_mass(model, (P * e_xi).sum(axis=1), first, last, p_out)
    residuals = {
        "v": abs(zeta * v * v - Eg2) / (zeta * v * v),
        "u": abs(float((P * GI).sum()) - (1 - zeta)),
        "w": abs(w - w_t) / max(abs(w), 1e-12),
        "lambda": float(np.max(np.abs(lam_chk - lam)) / max(np.max(lam), 1e-300)),
    }
    ev = model.event > 0
    lam_step = StepFunction.from_jumps(model.tau[model.atom[ev]],
                                       np.diff(np.concatenate(([0.0], lam)))[ev])
    sol = RSSolution(zeta, S, float(u), float(v), float(w), lam_step, residuals, None, xi2,
                     sweep, converged, history)
    sol.lambda_outcomes = lam
    if not converged:
        raise RSConvergenceError(
            f"RS iteration not converged after {max_sweeps} sweeps "
            f"(last relative change {history[-1]['change']:.3g})", history, sol)
    return sol


def _solve_u(zeta, v, w, lam, P, D, base, get_smoother, u0, tol=1e-13):
    target = 1.0 - zeta
    b = base(lam, w)
    fin = np.isfinite(b)
    P_fin = np.where(fin, P, 0.0)
    const = float(P[~fin].sum())
    b = np.where(fin, b, 0.0)

    def f_df(u):
        c = b + np.log(u * u) + u * u * D
        GI, dGI = get_smoother(v, np.where(fin, c, -np.inf)).evaluate(c, (2,), True)
        fu = float((P_fin * GI).sum()) + const - target
        dfu = float((P_fin * dGI * (2.0 / u + 2.0 * u * D)).sum())
        return fu, dfu

    if const >= target:
        raise RSSolverError(
            f"no root for u: {const:.4g} of the mass has zero cumulative hazard, "
            f"which already exceeds 1 - zeta = {target:.4g}")
    lo, hi = 0.0, max(u0, 1e-3)
    fh, dfh = f_df(hi)
    while fh > 0:
        lo = hi
        hi *= 2.0
        if hi > 1e6:
            raise RSSolverError("no bracket for u; zeta is likely beyond the existence range")
        fh, dfh = f_df(hi)
    u = min(max(u0, lo), hi)
    fu, dfu = (fh, dfh) if u == hi else f_df(u)
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
        fu, dfu = f_df(u)
    return float(u)
