"""A complete small sweep, from config to rendered tables, through the pipeline API."""

# %%
import tempfile
from pathlib import Path

from uqbed.pipeline import evaluate_all, execute_sweep, load_config, render_report

root = Path(__file__).resolve().parents[1]
config = load_config(root / "configs" / "smoke.toml",
                     ["algorithms=['erm','mcdropout','oc']", "trials=2", "data_seeds=2", "epochs=20"])
print(f"{config.run_count} runs planned")

# %% Train (re-running over the same directory skips finished runs).
out = Path(tempfile.mkdtemp(prefix="uqbed-demo-"))
stats = {}
runs = execute_sweep(config, out, stats)
print(stats, [r.status for r in runs].count("done"), "done")
execute_sweep(config, out, stats)
print("second pass:", stats)

# %% Evaluate every cell and print the tables.
outcome = evaluate_all(config, out, runs)
docs = render_report(outcome.records, "text", outcome.failed_runs)
print(docs["in_domain"])
print(docs["out_domain"].split("\n\n")[0])
print("skipped:", outcome.skipped)
print("artifacts in", out)
