"""
Naming a head's output space with text
======================================

We plant structure in a synthetic head: its outputs vary mostly along two
"text" directions out of a pool of forty. The greedy search should pick those
two first and explain almost all of the variance with them.
"""

import numpy as np

from clipdecomp.textspan import TextEmbeddingBank, explained_variance, textspan

rng = np.random.default_rng(2)
dim, K = 12, 200
pool = rng.standard_normal((40, dim))
pool /= np.linalg.norm(pool, axis=1, keepdims=True)
names = [f"description {i}" for i in range(40)]
names[7], names[23] = "a photo taken at the beach", "a photo with red color"

coeffs = rng.standard_normal((K, 2)) * [3.0, 1.5]
C = coeffs @ pool[[7, 23]] + 0.05 * rng.standard_normal((K, dim))

basis = textspan(C, TextEmbeddingBank(names, pool.astype(np.float32)), m=5, layer=0, head=0)
for desc, cum in zip(basis.descriptions, basis.cumulative_variances):
    print(f"{desc:32s} cumulative variance {cum / basis.total_variance:6.1%}")
print(f"explained by all 5: {explained_variance(C, basis) / basis.total_variance:.1%}")
