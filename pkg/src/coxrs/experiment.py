"""Replicated simulation studies and their plot-ready output.

A study is described by a flat ``key = value`` configuration. Each replicate
generates a data set, fits the Cox model and records the overfitting
markers; depending on the scenario it is also de-biased. RS predictions are
computed once per value of ``zeta``. Replicate ``r`` draws from the RNG
substream ``SeedSequence([seed, r])``, so results do not depend on how
replicates are scheduled.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cox import fit_cox, overfit_markers
from .debias import debias_solve
from .rs_solver import rs_predicted_curve, solve_rs
from .survival import CensoringSpec, HazardSpec, generate_dataset

__all__ = [
    "SCENARIOS",
    "ExperimentConfig",
    "ExperimentReport",
    "run_experiment",
    "emit_plotdata",
    "checkpoint_times",
    "summarize",
]

log = logging.getLogger(__name__)

SCENARIOS = ("figure1_cumhaz", "figure2_overlaps", "figure3_debias_cumhaz",
             "figure4_S_hist", "figure56_beta_hist", "custom")
_NEEDS_RS = {"figure1_cumhaz", "figure2_overlaps"}
_NEEDS_DEBIAS = {"figure3_debias_cumhaz", "figure4_S_hist", "figure56_beta_hist"}
_NEEDS_STAIRCASES = {"figure1_cumhaz", "figure3_debias_cumhaz"}
# RS solves use substreams disjoint from the replicates'
_RS_STREAM = 2 ** 31


@dataclass
class ExperimentConfig:
    """Study configuration.

    ``zeta`` is a tuple of ratios ``p/n``; ``p`` is ``round(zeta * n)``
    unless a single explicit ``p`` is given. ``rs``/``debias`` force those
    stages on for the ``custom`` scenario.
    """

    scenario: str = "custom"
    n: int = 400
    p: int | None = None
    zeta: tuple = (0.25,)
    hazard: str = "log_logistic"
    t_max: float = 4.0
    S: float = 1.0
    replicates: int = 100
    seed: int = 0
    m: int = 100_000
    damping: float = 0.5
    tol: float = 1e-6
    max_sweeps: int = 500
    debias_path: str = "quadrature"
    rs: bool = False
    debias: bool = False
    checkpoints: int = 20
    threads: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if isinstance(self.zeta, (int, float)):
            self.zeta = (float(self.zeta),)
        self.zeta = tuple(float(z) for z in self.zeta)
        if self.p is not None:
            if len(self.zeta) > 1:
                raise ValueError("give either p or a zeta grid, not both")
            self.zeta = (self.p / self.n,)
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not all(0 < z < 1 for z in self.zeta):
            raise ValueError(f"zeta values must lie in (0, 1), got {self.zeta}")
        HazardSpec(self.hazard)
        CensoringSpec.uniform(self.t_max)

    def p_for(self, zeta: float) -> int:
        return int(self.p) if self.p is not None else int(round(zeta * self.n))

    @property
    def hazard_spec(self) -> HazardSpec:
        return HazardSpec(self.hazard)

    @property
    def censoring_spec(self) -> CensoringSpec:
        return CensoringSpec.uniform(self.t_max)

    @property
    def wants_rs(self) -> bool:
        return self.scenario in _NEEDS_RS or self.rs

    @property
    def wants_debias(self) -> bool:
        return self.scenario in _NEEDS_DEBIAS or self.debias

    @classmethod
    def from_mapping(cls, mapping) -> "ExperimentConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in mapping.items():
            key = key.strip().replace("-", "_")
            if key not in kinds:
                raise ValueError(f"unknown configuration key {key!r}")
            kw[key] = _parse_value(key, raw)
        return cls(**kw)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        mapping = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            mapping[key.strip()] = value.strip()
        return cls.from_mapping(mapping)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"


_INT_KEYS = {"n", "p", "replicates", "seed", "m", "max_sweeps", "checkpoints", "threads"}
_FLOAT_KEYS = {"t_max", "S", "damping", "tol"}
_BOOL_KEYS = {"rs", "debias"}


def _parse_value(key, raw):
    if not isinstance(raw, str):
        return tuple(raw) if key == "zeta" and not isinstance(raw, (int, float)) else raw
    if key == "zeta":
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if key in _INT_KEYS:
        return int(float(raw))
    if key in _FLOAT_KEYS:
        return float(raw)
    if key in _BOOL_KEYS:
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    return raw


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list = field(default_factory=list)
    summaries: list = field(default_factory=list)
    theory: dict = field(default_factory=dict)
    staircases: dict = field(default_factory=dict, repr=False)
    failures: int = 0

    def rows_for(self, zeta, ok_only=True):
        return [r for r in self.rows
                if r["zeta"] == zeta and (r["status"] == "ok" or not ok_only)]

    def column(self, zeta, name):
        return np.array([r[name] for r in self.rows_for(zeta)], dtype=float)


def _replicate(cfg: ExperimentConfig, zeta: float, r: int):
    p = cfg.p_for(zeta)
    row = {"zeta": zeta, "p": p, "replicate": r, "status": "ok", "error": ""}
    stair = None
    try:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r]))
        data = generate_dataset(cfg.n, p, cfg.S, cfg.hazard_spec, cfg.censoring_spec, rng)
        fit = fit_cox(data)
        row.update(event_fraction=data.event_fraction, converged=fit.converged,
                   separation=fit.separation_detected, iterations=fit.iterations)
        if fit.separation_detected or not fit.converged:
            row["status"] = "failed"
            row["error"] = "separation" if fit.separation_detected else "fit not converged"
            return row, None
        mk = overfit_markers(fit.beta_hat, data.meta["beta0"], covariates=data.covariates)
        row.update(kappa_hat=mk.kappa_hat, v_hat=mk.v_hat, second_moment=mk.second_moment,
                   beta_hat_1=float(fit.beta_hat[0]),
                   beta_hat_2=float(fit.beta_hat[1]) if p > 1 else float("nan"))
        if cfg.scenario in _NEEDS_STAIRCASES:
            stair = {"t": fit.breslow.jump_times, "breslow": fit.breslow.cumulative_values}
        if cfg.wants_debias:
            res = debias_solve(data, fit, path=cfg.debias_path, m=cfg.m, seed=cfg.seed)
            row.update(S_star=res.S_star, u_star=res.u_star, v_star=res.v_star,
                       w_star=res.w_star, kappa_star=res.kappa_star,
                       beta_tilde_1=float(res.beta_tilde[0]),
                       beta_tilde_2=float(res.beta_tilde[1]) if p > 1 else float("nan"),
                       zero_tilde_sd=float(np.std(res.beta_tilde[1:])) if p > 2 else float("nan"),
                       predicted_sd=res.predicted_sd, at_lower_edge=res.at_lower_edge)
            if stair is not None:
                stair["tilde_t"] = res.lambda_tilde.jump_times
                stair["tilde"] = res.lambda_tilde.cumulative_values
                stair["kappa_star"] = res.kappa_star
    except Exception as exc:  # recorded per replicate, the run continues
        log.warning("zeta=%g replicate %d failed: %s", zeta, r, exc)
        row["status"] = "failed"
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row, stair


def _replicate_task(args):
    cfg_dict, zeta, r = args
    return _replicate(ExperimentConfig(**cfg_dict), zeta, r)


def summarize(rows, exclude=("zeta", "p", "replicate")) -> list:
    """Mean, sd (ddof 1) and standard error of every numeric column per ``zeta``."""
    out = []
    for zeta in sorted({r["zeta"] for r in rows}):
        group = [r for r in rows if r["zeta"] == zeta]
        ok = [r for r in group if r["status"] == "ok"]
        keys = [k for k in (ok[0] if ok else {}) if k not in exclude
                and isinstance(ok[0][k], (int, float, np.floating)) and not isinstance(ok[0][k], bool)]
        for k in keys:
            x = np.array([r[k] for r in ok], dtype=float)
            x = x[np.isfinite(x)]
            if x.size == 0:
                continue
            sd = float(np.std(x, ddof=1)) if x.size > 1 else float("nan")
            out.append({"zeta": zeta, "quantity": k, "mean": float(np.mean(x)), "sd": sd,
                        "se": sd / math.sqrt(x.size), "count": int(x.size),
                        "failed": len(group) - len(ok)})
    return out


def checkpoint_times(event_times, count: int = 20, lo: float = 0.1, hi: float = 0.9):
    """``count`` quantiles of the pooled event times, spread over ``[lo, hi]``."""
    return np.quantile(np.asarray(event_times, dtype=float), np.linspace(lo, hi, count))


def _rs_theory(cfg: ExperimentConfig, zeta: float, k: int) -> dict:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _RS_STREAM + k]))
    try:
        sol = solve_rs(zeta, cfg.S, cfg.hazard_spec, cfg.censoring_spec, m=cfg.m,
                       damping=cfg.damping, tol=cfg.tol, max_sweeps=cfg.max_sweeps, rng=rng)
    except Exception as exc:
        log.warning("RS solve failed at zeta=%g: %s", zeta, exc)
        return {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    curve = rs_predicted_curve(sol, cfg.hazard_spec)
    return {"status": "ok", "u": sol.u_star, "v": sol.v_star, "w": sol.w_star,
            "kappa": sol.kappa_star, "sweeps": sol.sweeps,
            "mean_xi_squared": sol.mean_xi_squared, "second_moment": sol.second_moment,
            "residuals": {k2: float(v) for k2, v in sol.residuals.items()},
            "curve": curve, "lambda_rs": sol.lambda_rs}


def run_experiment(config: ExperimentConfig, progress=None) -> ExperimentReport:
    """Run every replicate for every ``zeta`` and the per-``zeta`` RS solves."""
    cfg = config
    report = ExperimentReport(cfg)
    tasks = [(z, r) for z in cfg.zeta for r in range(cfg.replicates)]
    if cfg.threads > 1:
        cfg_dict = asdict(cfg)
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(_replicate_task, [(cfg_dict, z, r) for z, r in tasks]))
    else:
        results = []
        for i, (z, r) in enumerate(tasks):
            results.append(_replicate(cfg, z, r))
            if progress:
                progress(i + 1, len(tasks))
    for (z, r), (row, stair) in zip(tasks, results):
        report.rows.append(row)
        if stair is not None:
            report.staircases[(z, r)] = stair
    report.failures = sum(r["status"] != "ok" for r in report.rows)
    report.summaries = summarize(report.rows)
    if cfg.wants_rs:
        for k, z in enumerate(cfg.zeta):
            report.theory[z] = _rs_theory(cfg, z, k)
    return report


# ---------------------------------------------------------------------------
# output


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header, rows) -> int:
    try:
        with path.open("w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            n = 0
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
                n += 1
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return n


def _ztag(z):
    return f"zeta{z:g}"


def emit_plotdata(report: ExperimentReport | None, out_dir) -> dict:
    """Write per-figure CSVs and ``manifest.json``; returns the manifest.

    Files (only those the scenario produces):

    - ``replicates.csv``: one row per replicate, every recorded column.
    - ``summary.csv``: ``zeta,quantity,mean,sd,se,count,failed``.
    - ``theory.csv``: ``zeta,u,v,w,kappa,sweeps,status``.
    - ``figure1_staircases_<zeta>.csv``: ``replicate,Lambda0,LambdaBreslow``;
      ``figure1_theory_<zeta>.csv``: ``Lambda0,LambdaRS``.
    - ``figure2_overlaps.csv``: ``zeta,mean_kappa_hat,sd_kappa_hat,kappa_star,
      mean_v_hat,sd_v_hat,v_star``.
    - ``figure3_staircases_<zeta>.csv``: ``replicate,t,Lambda0,LambdaBreslow,
      LambdaBreslowOverKappa`` and ``figure3_tilde_<zeta>.csv``:
      ``replicate,t,Lambda0,LambdaTilde``.
    - ``figure4_S_hist_<zeta>.csv``: ``bin_center,count`` (bins of width 0.1
      centred on multiples of 0.1).
    - ``figure56_beta_<zeta>.csv``: ``replicate,beta_hat_1,beta_tilde_1,
      beta_hat_2,beta_tilde_2,predicted_sd``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"files": []}

    def add(name, header, rows, description):
        n = _write_csv(out / name, header, rows)
        manifest["files"].append({"file": name, "rows": n, "columns": list(header),
                                  "description": description})

    if report is not None and report.rows:
        cfg = report.config
        manifest["config"] = {k: (list(v) if isinstance(v, tuple) else v)
                              for k, v in asdict(cfg).items()}
        cols = []
        for r in report.rows:
            cols.extend(k for k in r if k not in cols)
        add("replicates.csv", cols, ([r.get(k, "") for k in cols] for r in report.rows),
            "per-replicate results; failed replicates keep their error message")
        sk = ["zeta", "quantity", "mean", "sd", "se", "count", "failed"]
        add("summary.csv", sk, ([s[k] for k in sk] for s in report.summaries),
            "summary statistics over successful replicates")
        H = cfg.hazard_spec
        if report.theory:
            add("theory.csv", ["zeta", "u", "v", "w", "kappa", "sweeps", "status"],
                ([z, t.get("u", ""), t.get("v", ""), t.get("w", ""), t.get("kappa", ""),
                  t.get("sweeps", ""), t["status"]] for z, t in sorted(report.theory.items())),
                "RS order parameters per zeta")
        for z in cfg.zeta:
            tag = _ztag(z)
            stairs = sorted((r, s) for (zz, r), s in report.staircases.items() if zz == z)
            if cfg.scenario == "figure1_cumhaz":
                add(f"figure1_staircases_{tag}.csv", ["replicate", "Lambda0", "LambdaBreslow"],
                    ([r, L0, L] for r, s in stairs
                     for L0, L in zip(H.cumhaz(s["t"]), s["breslow"])),
                    "Breslow estimator against the true cumulative hazard")
                th = report.theory.get(z, {})
                if th.get("status") == "ok":
                    curve = th["curve"]
                    idx = np.unique(np.linspace(0, len(curve) - 1, min(len(curve), 2000)).astype(int))
                    add(f"figure1_theory_{tag}.csv", ["Lambda0", "LambdaRS"],
                        (tuple(curve[i]) for i in idx), "RS-predicted (Lambda0, Lambda) curve")
            if cfg.scenario == "figure3_debias_cumhaz":
                add(f"figure3_staircases_{tag}.csv",
                    ["replicate", "t", "Lambda0", "LambdaBreslow", "LambdaBreslowOverKappa"],
                    ([r, t, L0, L, L / s.get("kappa_star", float("nan"))] for r, s in stairs
                     for t, L0, L in zip(s["t"], H.cumhaz(s["t"]), s["breslow"])),
                    "Breslow estimator and its kappa-rescaled version")
                add(f"figure3_tilde_{tag}.csv", ["replicate", "t", "Lambda0", "LambdaTilde"],
                    ([r, t, L0, L] for r, s in stairs if "tilde" in s
                     for t, L0, L in zip(s["tilde_t"], H.cumhaz(s["tilde_t"]), s["tilde"])),
                    "de-biased (marginal-likelihood) cumulative hazard")
            if cfg.scenario == "figure4_S_hist":
                S = report.column(z, "S_star") if report.rows_for(z) else np.array([])
                centers, counts = s_histogram(S)
                add(f"figure4_S_hist_{tag}.csv", ["bin_center", "count"],
                    zip(centers, counts), "histogram of the inferred signal strength")
            if cfg.scenario == "figure56_beta_hist":
                keys = ["replicate", "beta_hat_1", "beta_tilde_1", "beta_hat_2",
                        "beta_tilde_2", "predicted_sd"]
                add(f"figure56_beta_{tag}.csv", keys,
                    ([r[k] for k in keys] for r in report.rows_for(z)),
                    "ML and de-biased association components")
        if cfg.scenario == "figure2_overlaps":
            def stat(z, q, k):
                for s in report.summaries:
                    if s["zeta"] == z and s["quantity"] == q:
                        return s[k]
                return float("nan")
            add("figure2_overlaps.csv",
                ["zeta", "mean_kappa_hat", "sd_kappa_hat", "kappa_star", "mean_v_hat",
                 "sd_v_hat", "v_star"],
                ([z, stat(z, "kappa_hat", "mean"), stat(z, "kappa_hat", "sd"),
                  report.theory.get(z, {}).get("kappa", float("nan")),
                  stat(z, "v_hat", "mean"), stat(z, "v_hat", "sd"),
                  report.theory.get(z, {}).get("v", float("nan"))] for z in cfg.zeta),
                "simulated markers against RS predictions")
        manifest["failures"] = report.failures
    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {out / 'manifest.json'}: {exc}") from exc
    return manifest


def s_histogram(values, width: float = 0.1):
    """Counts in bins ``[k w - w/2, k w + w/2)`` for the occupied ``k``."""
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return np.array([]), np.array([], dtype=int)
    k = np.floor(values / width + 0.5).astype(int)
    ks = np.arange(k.min(), k.max() + 1)
    counts = np.array([(k == j).sum() for j in ks])
    return np.round(ks * width, 10), counts
