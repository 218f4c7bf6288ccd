# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
# ---

# %% [markdown]
# # End-to-end run through the command line
#
# The same steps as `ambiforge <command> --config run.json --profile desk`,
# shrunk so the whole chain finishes in about a minute: ATFs, linear
# encoder, dataset, training of both neural variants, evaluation and report.

# %%
import json
import tempfile
from pathlib import Path

from ambiforge.cli import main

root = Path(tempfile.mkdtemp())
config = root / "run.json"
config.write_text(json.dumps({
    "paths": {"work_dir": str(root / "work")},
    "atf": {"grid_size": 120},
    "dataset": {"num_scenes": 20, "duration": 1.0, "max_image_order": 6},
    "training": {"epochs": 3, "batch_size": 4, "segment_seconds": 0.5},
    "model": {"hidden": 16},
    "eval": {"split": "validation", "grid_size": 100},
}))

# %%
for command in ("gen-atf", "design-linear", "gen-dataset", "train", "evaluate", "report"):
    code = main([command, "--config", str(config), "--profile", "desk"])
    assert code == 0, command

# %% [markdown]
# Training history of the residual model and the summary table.

# %%
work = root / "work"
for row in json.loads((work / "models" / "residual" / "history.json").read_text()):
    print(row)
print((work / "report" / "table.json").read_text())
