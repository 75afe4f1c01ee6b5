# %% [markdown]
# Spirals: the posterior depth follows the rotation speed
#
# A short run per omega.  The full protocol (4000 epochs, 5 seeds) is
# ``udn spiral --sweep 0:30:2 --seeds 5 --model udn --model fixed:3``.

# %%
import sys

import numpy as np

from udn.datasets import spiral_splits
from udn.model import dense_generator
from udn.trainer import TrainConfig, best_epoch_selection, evaluate, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 300
gen = dense_generator(2, 32, 2)

for omega in (2.0, 10.0, 20.0):
    data = spiral_splits(omega, seed=0)
    state, rec = train(TrainConfig(epochs=epochs, seed=0), gen, data)
    _, best = best_epoch_selection(rec.validation, rec.checkpoints)
    acc = evaluate(best, gen, data.subset("test"))["accuracy"]
    lam = rec.lambdas()
    print(f"omega={omega:4.1f}  test acc={acc:.3f}  E[depth]={state.depth_dist().mean():5.2f}"
          f"  lambda {lam[0]:.2f} -> {state.lam:.2f}  layers={state.created_count}")

# %% the lambda trajectory of the last run, every tenth of the way
print(np.round(rec.posterior_means()[:: max(1, epochs // 10)], 2))
