# %% [markdown]
# Truncated Poisson over depth
#
# q(l; lam) is Poisson(lam) cut at its 95% quantile and renormalised.
# Each member has a finite support, yet the mode can sit at any depth.

# %%
import numpy as np

from udn.truncated_poisson import DepthPrior, TruncatedPoissonDist, verify_theorem1

for lam in (0.5, 1.0, 5.0, 20.0):
    q = TruncatedPoissonDist(lam, 0.95, shift=1)
    print(f"lam={lam:5.1f}  m(q)={q.support_max():3d}  E[depth]={q.mean():6.2f}  mode={q.mode()}")

# %% the pmf is a proper distribution on 1..m(q)
q = TruncatedPoissonDist(3.0, 0.95, shift=1)
print(np.round(q.pmf(), 4), q.pmf().sum())

# %% the support grows roughly linearly in lam
report = verify_theorem1(k_max=70)
print("smallest margin to 1.3(k-1)+5:", report.margins.min())
print(report.to_csv().splitlines()[:4])

# %% prior on depth: l - 1 ~ Poisson(0.5), no truncation
prior = DepthPrior(0.5)
print(np.round(prior.pmf(np.arange(1, 7)), 4))
