"""
A small replicated study
========================

The ``experiment`` module runs replicated studies and writes CSV files that
are ready to plot. This script runs a reduced version of the overlap study
and prints the simulated markers next to the RS predictions.

Run with ``python notebooks/03_study_bundle.py [outdir]`` (about a minute).
"""

# %%
import sys
import tempfile

from coxrs.experiment import ExperimentConfig, emit_plotdata, run_experiment

cfg = ExperimentConfig(scenario="figure2_overlaps", zeta=(0.1, 0.2, 0.3), n=400,
                       replicates=10, seed=1, m=50_000, damping=1.0)
report = run_experiment(cfg)

# %%
for z in cfg.zeta:
    k, v = report.column(z, "kappa_hat"), report.column(z, "v_hat")
    th = report.theory[z]
    print(f"zeta={z}: kappa_hat {k.mean():.3f} +- {k.std(ddof=1):.3f} (RS {th['kappa']:.3f}),"
          f" v_hat {v.mean():.3f} +- {v.std(ddof=1):.3f} (RS {th['v']:.3f})")

# %%
out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="coxrs-")
manifest = emit_plotdata(report, out)
for f in manifest["files"]:
    print(f"{out}/{f['file']}: {f['rows']} rows, {f['description']}")
