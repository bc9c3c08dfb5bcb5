"""Lambert W, Gaussian quadrature rules and the marginal frailty integrals."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from enum import Enum

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.special import logsumexp

__all__ = [
    "QuadratureKind",
    "QuadratureRule",
    "make_quadrature",
    "gaussian_rule",
    "lambert_w",
    "lambert_w_exp",
    "log_phi_delta",
    "phi_delta",
    "phi_ratio",
    "DEFAULT_ORDER",
]

DEFAULT_ORDER = 60

# hermegauss weights overflow somewhere above 300 nodes
_MAX_ORDER = {"gauss_hermite_probabilist": 300, "gauss_legendre": 2000}


class QuadratureKind(str, Enum):
    GAUSS_HERMITE_PROBABILIST = "gauss_hermite_probabilist"
    GAUSS_LEGENDRE = "gauss_legendre"


@dataclass(frozen=True)
class QuadratureRule:
    """Nodes and weights of a Gauss rule.

    ``measure`` records what the weights integrate against: ``"normal"`` for
    the standard normal density, ``"uniform[-1,1]"`` for plain Lebesgue
    measure on ``[-1, 1]``.
    """

    nodes: np.ndarray
    weights: np.ndarray
    kind: QuadratureKind
    order: int
    measure: str = field(default="normal")

    def __post_init__(self):
        for name in ("nodes", "weights"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def expect(self, f):
        """Integrate ``f`` against the rule's measure."""
        return np.dot(self.weights, f(self.nodes))


def make_quadrature(kind, order: int) -> QuadratureRule:
    """Build a Gauss rule of the given kind and number of nodes.

    ``gauss_hermite_probabilist`` integrates against the standard normal
    density (weights sum to one); ``gauss_legendre`` against Lebesgue measure
    on ``[-1, 1]``. Both are exact for polynomials of degree ``2*order - 1``.
    """
    kind = QuadratureKind(kind)
    if not isinstance(order, (int, np.integer)) or order < 1:
        raise ValueError(f"quadrature order must be a positive integer, got {order!r}")
    if order > _MAX_ORDER[kind.value]:
        raise ValueError(
            f"order {order} exceeds the largest supported {kind.value} order "
            f"({_MAX_ORDER[kind.value]})"
        )
    if kind is QuadratureKind.GAUSS_HERMITE_PROBABILIST:
        x, w = hermegauss(int(order))
        w = w / w.sum()
        measure = "normal"
    else:
        x, w = leggauss(int(order))
        measure = "uniform[-1,1]"
    return QuadratureRule(x, w, kind, int(order), measure)


@lru_cache(maxsize=64)
def gaussian_rule(kind="gauss_hermite_probabilist", order: int = DEFAULT_ORDER,
                  half_width: float = 12.0) -> QuadratureRule:
    """Rule for expectations over a standard normal variable.

    For Gauss-Legendre the normal density is folded into the weights on the
    truncated interval ``[-half_width, half_width]``.
    """
    base = make_quadrature(kind, order)
    if base.kind is QuadratureKind.GAUSS_HERMITE_PROBABILIST:
        return base
    x = half_width * base.nodes
    w = half_width * base.weights * np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return QuadratureRule(x, w, base.kind, base.order, "normal")


# ---------------------------------------------------------------------------
# Lambert W, principal branch on [0, inf)


def _halley_log(log_x, w):
    # Halley on f(w) = log(w) + w - log_x; well conditioned at every scale
    for _ in range(10):
        f = np.log(w) + w - log_x
        fp = 1.0 / w + 1.0
        step = 2.0 * f * fp / (2.0 * fp * fp + f / (w * w))
        w_new = np.maximum(w - step, 0.5 * w)
        done = np.all(np.abs(w_new - w) <= 4e-16 * w_new)
        w = w_new
        if done:
            break
    return w


_SERIES_BELOW = np.log(0.25)
_ASYMPTOTIC_ABOVE = 3.0
# below this log-argument W(x) = x - x**2 to double precision
_TINY_BELOW = -36.0


def _initial_guess(log_x):
    w = np.empty_like(log_x)
    small = log_x < _SERIES_BELOW
    large = log_x > _ASYMPTOTIC_ABOVE
    mid = ~(small | large)
    x = np.exp(log_x[small])
    w[small] = x * (1.0 - x * (1.0 - 1.5 * x))
    lx = log_x[large]
    ll = np.log(lx)
    w[large] = lx - ll + ll / lx
    l1 = np.log1p(np.exp(log_x[mid]))
    w[mid] = l1 * (1.0 - np.log1p(l1) / (2.0 + l1))
    return w


def lambert_w_exp(log_x):
    """``W(exp(log_x))`` without forming ``exp(log_x)``.

    ``-inf`` maps to 0. Useful when the argument of W is naturally a product of
    exponentials that would overflow.
    """
    log_x = np.asarray(log_x, dtype=float)
    if np.isnan(log_x).any() or np.isposinf(log_x).any():
        raise ValueError("lambert_w_exp needs finite log-arguments (or -inf)")
    flat = log_x.ravel()
    out = np.zeros_like(flat)
    tiny = np.isfinite(flat) & (flat < _TINY_BELOW)
    x = np.exp(flat[tiny])
    out[tiny] = x * (1.0 - x)
    rest = flat >= _TINY_BELOW
    if rest.any():
        lx = flat[rest]
        out[rest] = _halley_log(lx, _initial_guess(lx))
    out = out.reshape(log_x.shape)
    return out if out.ndim else float(out)


def lambert_w(x):
    """Principal branch of the Lambert W function for ``x >= 0``.

    Solves ``w * exp(w) = x`` by Halley iteration from a series (small ``x``),
    Winitzki (moderate ``x``) or log-loglog (large ``x``) starting point.

    Raises
    ------
    ValueError
        If any element is negative or not finite.
    """
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise ValueError("lambert_w is only defined here for finite x >= 0")
    with np.errstate(divide="ignore"):
        log_x = np.log(x)
    return lambert_w_exp(log_x)


# ---------------------------------------------------------------------------
# phi_Delta(x, s) = int Dy exp(Delta*s*y - x*exp(s*y))


def log_phi_delta(x, s: float, delta, rule: QuadratureRule | None = None):
    """Logarithm of ``phi_delta``; stays finite where ``phi_delta`` underflows.

    ``delta`` may be any non-negative integer (the fixed-point equation for
    the frailty cumulative hazard needs ``delta + 1``).
    """
    if rule is None:
        rule = gaussian_rule(order=DEFAULT_ORDER)
    if rule.measure != "normal":
        raise ValueError("phi_delta needs a rule for the standard normal measure")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise ValueError("phi_delta requires finite x >= 0")
    if s < 0:
        raise ValueError("phi_delta requires s >= 0")
    delta = np.asarray(delta)
    sy = s * rule.nodes
    expo = (np.log(rule.weights) + delta[..., None] * sy
            - x[..., None] * np.exp(sy))
    return logsumexp(expo, axis=-1)


def phi_delta(x, s: float, delta, rule: QuadratureRule | None = None):
    return np.exp(log_phi_delta(x, s, delta, rule))


def phi_ratio(x, s: float, delta, rule: QuadratureRule | None = None):
    """``phi_{delta+1}(x, s) / phi_delta(x, s)``, evaluated in log space."""
    delta = np.asarray(delta)
    return np.exp(log_phi_delta(x, s, delta + 1, rule) - log_phi_delta(x, s, delta, rule))
