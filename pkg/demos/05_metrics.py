"""
Metrics against closed forms
============================

FID and R-precision are checked here on Gaussian features where the answer
is known in advance.
"""
from __future__ import annotations

import numpy as np

from compmotion.evaluation import diversity, fid, mm_dist, r_precision

rng = np.random.default_rng(0)

# %%
# Shifting the mean by m adds ||m||^2; scaling the covariance by 4 in 2-D
# adds Tr(I + 4I - 2*2I) = 2.
m = np.array([1.0, -2.0])
a = rng.standard_normal((10_000, 2))
print(f"mean shift: fid={fid(a, rng.standard_normal((10_000, 2)) + m):.3f}  expected {m @ m:.3f}")
print(f"scale x2:   fid={fid(a, 2 * rng.standard_normal((10_000, 2))):.3f}  expected 2.000")

# %%
# Random features retrieve the right text 1 time in 32.
n = 2000
rp = r_precision(rng.normal(size=(n, 32)), rng.normal(size=(n, 32)), pool_size=32)
print("random top-1/2/3:", {k: round(v, 4) for k, v in rp.items()}, "chance:", [round(k / 32, 4) for k in (1, 2, 3)])

# %%
# Matched features retrieve perfectly and sit at distance zero.
f = rng.normal(size=(200, 32))
print("matched top-1:", r_precision(f, f)[1], " mm_dist:", mm_dist(f, f))

# %%
# Diversity of unit Gaussians in d dimensions approaches sqrt(2 d).
g = rng.normal(size=(600, 32))
print(f"diversity {diversity(g):.2f} vs sqrt(64) = 8")
