"""
Splitting an image representation into additive pieces
======================================================

A random toy ViT stands in for CLIP. We run it once, decompose the output
into the initial class-token term, one term per MLP and one term per
(token, layer, head), and check that the pieces add back up.
"""

import numpy as np

from clipdecomp import (
    decompose_image,
    random_image,
    random_model,
    reconstruct,
    reference_forward,
)
from clipdecomp.decomposition import head_contributions, token_contributions

rng = np.random.default_rng(0)
model = random_model(rng, num_layers=4, num_heads=4, width=32, output_dim=16, patch_size=4, grid=(4, 4), ln_pre=True)
image = random_image(rng, model.config, "toy")

out = reference_forward(model, image)
d = decompose_image(model, image)
print("output dim:", out.shape, " msa terms:", d.msa_terms.shape)

err = np.linalg.norm(reconstruct(d) - out) / np.linalg.norm(out)
print(f"relative reconstruction error: {err:.2e}")

# how much of the output does each layer write directly?
norms = np.linalg.norm(d.msa_terms.astype(float).sum(axis=(0, 2)), axis=1)
mlp = np.linalg.norm(d.mlp_terms, axis=1)
for l in range(model.config.num_layers):
    print(f"layer {l}: |MSA| = {norms[l]:.3f}   |MLP| = {mlp[l]:.3f}")

# the same numbers regrouped by head, or by token position
heads = head_contributions(d)
tokens = token_contributions(d)
print("head sums match token sums:", np.allclose(heads.sum(axis=(0, 1)), tokens.sum(axis=0), atol=1e-5))
