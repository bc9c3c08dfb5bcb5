"""Survival data model: step functions, hazard/censoring specs, simulation.

Event times are drawn by exact inverse transform, ``T = L0^{-1}(E exp(-h))``
with ``E ~ Exp(1)`` and ``h`` the true linear predictor; censoring times are
drawn independently and ``t = min(T, C)``, ``event = 1[T < C]``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .special_math import DEFAULT_ORDER, QuadratureRule, gaussian_rule, make_quadrature

__all__ = [
    "GenerationError",
    "StepFunction",
    "HazardKind",
    "HazardSpec",
    "CensoringKind",
    "CensoringSpec",
    "SurvivalDataset",
    "sample_covariates",
    "sample_outcomes",
    "generate_dataset",
    "expected_event_fraction",
    "write_dataset",
    "read_dataset",
]


class GenerationError(RuntimeError):
    """Raised when a survival time cannot be drawn from the given specs."""


class StepFunction:
    """Right-continuous, non-decreasing, piecewise-constant function on t >= 0.

    Stores the jump locations and the cumulative value reached at each jump;
    the function is 0 before the first jump.

    Parameters
    ----------
    jump_times : array_like
        Strictly increasing jump locations.
    cumulative_values : array_like
        Function value on ``[jump_times[k], jump_times[k+1])``.
    """

    __slots__ = ("jump_times", "cumulative_values")

    def __init__(self, jump_times, cumulative_values):
        t = np.array(jump_times, dtype=float).ravel()
        v = np.array(cumulative_values, dtype=float).ravel()
        if t.shape != v.shape:
            raise ValueError("jump_times and cumulative_values differ in length")
        if t.size and (np.any(np.diff(t) <= 0) or not np.all(np.isfinite(t))):
            raise ValueError("jump_times must be finite and strictly increasing")
        if v.size and (v[0] < 0 or np.any(np.diff(v) < 0)):
            raise ValueError("cumulative_values must be non-negative and non-decreasing")
        t.setflags(write=False)
        v.setflags(write=False)
        self.jump_times = t
        self.cumulative_values = v

    @classmethod
    def from_jumps(cls, times, increments) -> "StepFunction":
        """Build from (possibly tied, unsorted) jump locations and sizes.

        Tied locations are merged and zero-size jumps dropped.
        """
        times = np.asarray(times, dtype=float).ravel()
        increments = np.asarray(increments, dtype=float).ravel()
        keep = increments > 0
        times, increments = times[keep], increments[keep]
        if times.size == 0:
            return cls.zero()
        uniq, inv = np.unique(times, return_inverse=True)
        sizes = np.bincount(inv, weights=increments, minlength=uniq.size)
        return cls(uniq, np.cumsum(sizes))

    @classmethod
    def zero(cls) -> "StepFunction":
        return cls([], [])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right") - 1
        vals = np.concatenate(([0.0], self.cumulative_values))
        out = vals[idx + 1]
        return out if out.ndim else float(out)

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.cumulative_values, prepend=0.0)

    @property
    def final_value(self) -> float:
        return float(self.cumulative_values[-1]) if self.cumulative_values.size else 0.0

    def inverse(self, x):
        """Generalized inverse: smallest ``t`` with ``self(t) >= x``.

        Returns 0 for ``x <= 0`` and ``inf`` when ``x`` exceeds the final value.
        """
        x = np.asarray(x, dtype=float)
        idx = np.searchsorted(self.cumulative_values, x, side="left")
        padded = np.concatenate((self.jump_times, [np.inf]))
        out = np.where(x <= 0, 0.0, padded[idx])
        return out if out.ndim else float(out)

    def scaled(self, factor: float) -> "StepFunction":
        return StepFunction(self.jump_times, factor * self.cumulative_values)

    def __len__(self):
        return self.jump_times.size

    def __repr__(self):
        return f"StepFunction(n_jumps={len(self)}, final_value={self.final_value:.6g})"


# ---------------------------------------------------------------------------
# hazards


class HazardKind(str, Enum):
    LOG_LOGISTIC = "log_logistic"
    WEIBULL_LIKE = "weibull_like"
    EMPIRICAL_STEP = "empirical_step"


@dataclass(frozen=True)
class HazardSpec:
    """Baseline cumulative hazard ``L0``.

    ``log_logistic``: ``L0(t) = log(1 + t**2)``; ``weibull_like``:
    ``L0(t) = t**2 / 2``; ``empirical_step``: a :class:`StepFunction`.
    """

    kind: HazardKind
    step: StepFunction | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", HazardKind(self.kind))
        if self.kind is HazardKind.EMPIRICAL_STEP and self.step is None:
            raise ValueError("empirical_step hazard needs a StepFunction")

    @classmethod
    def log_logistic(cls):
        return cls(HazardKind.LOG_LOGISTIC)

    @classmethod
    def weibull_like(cls):
        return cls(HazardKind.WEIBULL_LIKE)

    @classmethod
    def empirical(cls, step: StepFunction):
        return cls(HazardKind.EMPIRICAL_STEP, step)

    @property
    def closed_form(self) -> bool:
        return self.kind is not HazardKind.EMPIRICAL_STEP

    def cumhaz(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind is HazardKind.LOG_LOGISTIC:
            return np.log1p(t * t)
        if self.kind is HazardKind.WEIBULL_LIKE:
            return 0.5 * t * t
        return self.step(t)

    def inverse(self, x):
        """Inverse cumulative hazard; ``inf`` past the last empirical jump."""
        x = np.asarray(x, dtype=float)
        if self.kind is HazardKind.LOG_LOGISTIC:
            with np.errstate(over="ignore"):
                return np.sqrt(np.expm1(x))
        if self.kind is HazardKind.WEIBULL_LIKE:
            return np.sqrt(2.0 * x)
        return self.step.inverse(x)

    def to_dict(self):
        d = {"kind": self.kind.value}
        if self.step is not None:
            d["jump_times"] = self.step.jump_times.tolist()
            d["cumulative_values"] = self.step.cumulative_values.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        step = None
        if d["kind"] == HazardKind.EMPIRICAL_STEP.value:
            step = StepFunction(d["jump_times"], d["cumulative_values"])
        return cls(d["kind"], step)


class CensoringKind(str, Enum):
    UNIFORM_INTERVAL = "uniform_interval"
    NONE = "none"
    EMPIRICAL_STEP = "empirical_step"


@dataclass(frozen=True)
class CensoringSpec:
    """Non-informative right censoring.

    ``uniform_interval`` draws ``C ~ U[0, t_max]`` (cumulative censoring
    hazard ``-log(1 - t/t_max)``); ``none`` never censors; ``empirical_step``
    uses a step cumulative hazard.
    """

    kind: CensoringKind
    t_max: float | None = None
    step: StepFunction | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", CensoringKind(self.kind))
        if self.kind is CensoringKind.UNIFORM_INTERVAL:
            if self.t_max is None or not self.t_max > 0:
                raise ValueError("uniform_interval censoring needs t_max > 0")
        if self.kind is CensoringKind.EMPIRICAL_STEP and self.step is None:
            raise ValueError("empirical_step censoring needs a StepFunction")

    @classmethod
    def uniform(cls, t_max: float = 4.0):
        return cls(CensoringKind.UNIFORM_INTERVAL, t_max=float(t_max))

    @classmethod
    def none(cls):
        return cls(CensoringKind.NONE)

    @classmethod
    def empirical(cls, step: StepFunction):
        return cls(CensoringKind.EMPIRICAL_STEP, step=step)

    def cumhaz(self, t):
        t = np.asarray(t, dtype=float)
        if self.kind is CensoringKind.NONE:
            return np.zeros_like(t)
        if self.kind is CensoringKind.UNIFORM_INTERVAL:
            with np.errstate(divide="ignore"):
                return np.where(t < self.t_max, -np.log1p(-np.minimum(t, self.t_max) / self.t_max),
                                np.inf)
        return self.step(t)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind is CensoringKind.NONE:
            return np.full(n, np.inf)
        if self.kind is CensoringKind.UNIFORM_INTERVAL:
            return rng.uniform(0.0, self.t_max, size=n)
        return self.step.inverse(rng.exponential(size=n))

    def to_dict(self):
        d = {"kind": self.kind.value}
        if self.t_max is not None:
            d["t_max"] = self.t_max
        if self.step is not None:
            d["jump_times"] = self.step.jump_times.tolist()
            d["cumulative_values"] = self.step.cumulative_values.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        step = None
        if d["kind"] == CensoringKind.EMPIRICAL_STEP.value:
            step = StepFunction(d["jump_times"], d["cumulative_values"])
        return cls(d["kind"], d.get("t_max"), step)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class SurvivalDataset:
    """Right-censored observations ``(t_i, event_i, z_i)``."""

    times: np.ndarray
    events: np.ndarray
    covariates: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        t = np.array(self.times, dtype=float).ravel()
        d = np.array(self.events).ravel()
        z = np.array(self.covariates, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        if not (t.size == d.size == z.shape[0]):
            raise ValueError("times, events and covariates must have n rows each")
        if not np.all(np.isfinite(t)) or np.any(t <= 0):
            raise ValueError("all times must be finite and positive")
        if not np.all(np.isin(d, (0, 1))):
            raise ValueError("event indicators must be 0 or 1")
        if not np.all(np.isfinite(z)):
            raise ValueError("covariates must be finite")
        for name, arr in (("times", t), ("events", d.astype(np.int8)), ("covariates", z)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.times.size

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def zeta(self) -> float:
        return self.p / self.n

    @property
    def event_fraction(self) -> float:
        return float(self.events.mean())


def sample_covariates(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. standard normal ``n x p`` covariate matrix."""
    if n < 1 or p < 1:
        raise ValueError(f"need n, p >= 1, got n={n}, p={p}")
    return rng.standard_normal((n, p))


def sample_outcomes(linear_predictor, hazard: HazardSpec, censoring: CensoringSpec,
                    rng: np.random.Generator):
    """Draw ``(t, event)`` given true linear predictors ``h_i``.

    Returns
    -------
    times, events : ndarray
    """
    h = np.asarray(linear_predictor, dtype=float)
    n = h.size
    T = hazard.inverse(rng.exponential(size=n) * np.exp(-h))
    C = censoring.sample(n, rng)
    events = (T < C).astype(np.int8)
    times = np.minimum(T, C)
    lost = ~np.isfinite(times)
    if lost.any():
        # neither process fired inside the support of the empirical hazards:
        # park the subject, censored, at the last jump
        ends = [s.jump_times[-1] for s in (hazard.step, censoring.step)
                if s is not None and len(s)]
        if not ends:
            first = int(np.flatnonzero(lost)[0])
            raise GenerationError(
                f"draw {first}: no finite event or censoring time (E*exp(-h) = "
                f"{float(np.exp(-h[first])):.6g} times an Exp(1) variate lies beyond "
                f"the hazard's range and censoring is '{censoring.kind.value}')"
            )
        times[lost] = max(ends)
        events[lost] = 0
    # the inverse of log1p/sqrt maps a zero exponential draw to t = 0
    times = np.maximum(times, np.finfo(float).tiny)
    return times, events


def generate_dataset(n: int, p: int, beta0, hazard: HazardSpec, censoring: CensoringSpec,
                     rng: np.random.Generator | int | None = None) -> SurvivalDataset:
    """Simulate a proportional-hazards data set with Gaussian covariates.

    ``beta0`` may be a p-vector or a scalar ``S`` (meaning ``S * e_1``).
    """
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    beta0 = np.asarray(beta0, dtype=float)
    if beta0.ndim == 0:
        beta0 = np.concatenate(([float(beta0)], np.zeros(p - 1)))
    if beta0.shape != (p,):
        raise ValueError(f"beta0 must have length p={p}")
    Z = sample_covariates(n, p, rng)
    times, events = sample_outcomes(Z @ beta0, hazard, censoring, rng)
    meta = {
        "n": n,
        "p": p,
        "seed": None if seed is None else int(seed),
        "beta0": beta0.tolist(),
        "S": float(np.linalg.norm(beta0)),
        "hazard": hazard.to_dict(),
        "censoring": censoring.to_dict(),
    }
    return SurvivalDataset(times, events, Z, meta)


def expected_event_fraction(S: float, hazard: HazardSpec, censoring: CensoringSpec,
                            rule: QuadratureRule | None = None,
                            time_order: int = 64) -> float:
    """Probability that an observation is an event rather than censored.

    ``1 - int_0^tmax dt/tmax int Dy exp(-L0(t) exp(S y))`` for uniform
    censoring, evaluated by Gauss-Legendre in t and ``rule`` in y.
    """
    if not hazard.closed_form:
        raise ValueError("expected_event_fraction needs a closed-form hazard")
    if censoring.kind is CensoringKind.NONE:
        return 1.0
    if censoring.kind is not CensoringKind.UNIFORM_INTERVAL:
        raise ValueError("expected_event_fraction supports uniform or no censoring only")
    if rule is None:
        rule = gaussian_rule(order=DEFAULT_ORDER)
    tq = make_quadrature("gauss_legendre", time_order)
    tmax = censoring.t_max
    t = 0.5 * tmax * (tq.nodes + 1.0)
    surv = np.exp(-hazard.cumhaz(t)[:, None] * np.exp(S * rule.nodes)[None, :]) @ rule.weights
    return float(1.0 - 0.5 * np.dot(tq.weights, surv))


# ---------------------------------------------------------------------------
# file format


def write_dataset(path, data: SurvivalDataset) -> Path:
    """Write ``time,event,z1..zp`` CSV plus a ``.meta.json`` sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "event"] + [f"z{j + 1}" for j in range(data.p)])
        for t, d, z in zip(data.times, data.events, data.covariates):
            w.writerow([repr(float(t)), int(d)] + [repr(float(v)) for v in z])
    meta = {"n": data.n, "p": data.p, **data.meta}
    sidecar = path.with_name(path.name + ".meta.json")
    sidecar.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_dataset(path) -> SurvivalDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[:2] != ["time", "event"]:
        raise ValueError(f"{path}: header must start with 'time,event'")
    arr = np.array(body, dtype=float).reshape(len(body), len(header))
    sidecar = path.with_name(path.name + ".meta.json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return SurvivalDataset(arr[:, 0], arr[:, 1].astype(np.int8), arr[:, 2:], meta)
