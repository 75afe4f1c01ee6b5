# %% [markdown]
# The depth-marginalised ELBO
#
# One pass through the layers yields every head's output, so the
# expectation over depth costs the same as a single forward.

# %%
import numpy as np

from udn.model import VariationalState, dense_generator, elbo, grow_to, param_names
from udn.truncated_poisson import DepthPrior

rng = np.random.default_rng(1)
gen = dense_generator(in_dim=2, width=8, num_classes=2)
state = VariationalState.initial(lambda_init=2.0)
m = state.depth_dist().support_max()
grow_to(state, gen, m + 2, seed=0)  # two spare layers beyond the support
print("m(q) =", m, " created =", state.created_count)

x = rng.normal(size=(32, 2))
y = (x[:, 0] * x[:, 1] > 0).astype(int)
bd = elbo(state, gen, x, y, n_total=320, prior=DepthPrior(0.5))
print("ELBO", round(bd.total, 3), " hidden layers evaluated:", bd.graph.stats["hidden"])
print("q over depths:", np.round(bd.q, 3))
print("per-depth log-likelihood:", np.round(bd.loglik_per_depth, 2))

# %% only the active layers receive gradient
bd.graph.backward(bd.node)
for k in range(1, state.created_count + 1):
    norm = sum(np.abs(state.store.grad(n)).sum() for n in param_names(k))
    print(f"layer {k}: |grad| = {norm:.4f}")
print("d ELBO / d log lambda =", float(state.store.grad("lambda_raw")))
