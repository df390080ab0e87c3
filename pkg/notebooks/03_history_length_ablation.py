# %% [markdown]
# # How much history does the encoder need?
#
# The history length `L` sets both the training window and the amount of
# context available at prediction time. This script runs the ablation over
# `L` in {5, 10, 20, 50, 100} through the command-line entry point, exactly
# as a user would, with a deliberately tiny training budget.
#
# With so few steps the numbers mostly show that the protocol works end to
# end; they say little about which `L` is best.

# %%
import tempfile
from pathlib import Path

from clode import cli

work = Path(tempfile.mkdtemp(prefix="clode-ablation-"))
cli.main(["gen-data", "--agents", "6", "--steps", "200", "--seed", "0", "--out", str(work / "train")])
cli.main(["gen-data", "--agents", "6", "--steps", "200", "--seed", "1", "--out", str(work / "test")])

# %%
cli.main([
    "ablate", "--data", str(work / "train"), "--eval-data", str(work / "test"),
    "--history-lens", "5,10,20,50,100", "--dims", "small", "--max-steps", "100",
    "--seed", "0", "--out", str(work / "ablate"),
])

# %% [markdown]
# `ablation_summary.csv` has one row per history length at the report step
# (2.5 s). `ablation.csv` holds the full per-step curves.
#
# The `m` column counts evaluation samples. A window needs `L + 26` steps, so
# longer histories fit fewer windows into a 200-step trajectory. The rows are
# therefore not scored on identical sample sets.

# %%
print((work / "ablate" / "ablation_summary.csv").read_text())
