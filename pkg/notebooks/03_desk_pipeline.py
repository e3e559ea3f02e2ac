# %% [markdown]
# # End-to-end desk run
#
# Runs every pipeline stage for one preset and prints the main table. The
# smoke preset finishes in seconds; diffreact-dense takes a few minutes on
# one core. Usage: ``python notebooks/03_desk_pipeline.py [preset] [outdir]``.

# %%
import sys

from ccmlab.pipeline import Experiment, load_config, run_all, verify

preset = sys.argv[1] if len(sys.argv) > 1 else "smoke"
out = sys.argv[2] if len(sys.argv) > 2 else f"runs/{preset}"
exp = Experiment(load_config(preset), out)
for stage, m in run_all(exp).items():
    res = m.get("result", {})
    print(f"{stage:20s} {m['outputs_digest'][:12]}  {'ok' if res.get('ok', True) else 'INVARIANT FAILURE'}")

# %% summary and digest check
with open(exp.path("report", "summary.txt")) as f:
    print(f.read())
print("verify:", verify(out) or "all digests match")
