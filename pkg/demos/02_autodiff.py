# %% [markdown]
# Reverse-mode differentiation on numpy arrays
#
# Every operation appends a node to a tape; backward sweeps it in reverse.

# %%
import numpy as np

from udn import autodiff as ad

rng = np.random.default_rng(0)
store = ad.ParamStore()
store.add("w", rng.normal(size=(3, 2)))
store.add("b", np.zeros(2))

x = rng.normal(size=(5, 3))
y = rng.integers(0, 2, size=5)


def loss():
    g = ad.Graph()
    logits = ad.forward_dense(g.constant(x), g.param(store, "w"), g.param(store, "b"), "identity")
    return g, ad.categorical_loglik(logits, y) * -1.0


g, out = loss()
g.backward(out)
print("loss", out.item())
print("d loss / d w\n", store.grad("w"))

# %% compare one coordinate against a central difference
h = 1e-6
store["w"][0, 1] += h
up = loss()[1].item()
store["w"][0, 1] -= 2 * h
down = loss()[1].item()
store["w"][0, 1] += h
print("fd", (up - down) / (2 * h), "ad", store.grad("w")[0, 1])

# %% a few Adam steps
for _ in range(50):
    store.zero_grad()
    g, out = loss()
    g.backward(out)
    ad.step(store, "adam", 0.05)
print("loss after 50 steps", loss()[1].item())
