# %% [markdown]
# Regression with a Gaussian head on a user-supplied table
#
# Linear data needs little depth; the posterior should stay shallow.

# %%
import sys
import tempfile
from pathlib import Path

import numpy as np

from udn import experiments as ex

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 200
rng = np.random.default_rng(0)
x = rng.normal(size=(400, 4))
y = x @ np.array([1.0, -0.5, 2.0, 0.0]) + 0.1 * rng.normal(size=400)

out = Path(tempfile.mkdtemp())
table = out / "linear.csv"
np.savetxt(table, np.column_stack([x, y]), delimiter=",", header="a,b,c,d,y", comments="")

for model in ("udn", "fixed:2"):
    s = ex.run_regress({"data": table, "target": "y", "model": model, "repeats": 3,
                        "train": {"epochs": epochs}}, out)
    print(f"{model:8s} RMSE {s['rmse_mean']:.3f} ± {s['rmse_sd']:.3f}  E[depth] {s['mean_depth']:.2f}")
