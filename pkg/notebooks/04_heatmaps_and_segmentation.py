"""
Patch heatmaps and segmentation scores
======================================

Token contributions dotted with a text direction give one score per patch.
Here the image is built so that a square block of patches carries a strong
signal along one direction. The block's patches get the highest scores (AP 1),
while the mean-threshold mask also picks up a few neighbours.
"""

import numpy as np

from clipdecomp import decompose_image, random_model
from clipdecomp.applications import (
    binarize,
    joint_heatmap,
    seg_metrics,
    token_heatmap,
    upsample,
)
from clipdecomp.model import ImageInput

rng = np.random.default_rng(3)
model = random_model(rng, num_layers=2, num_heads=2, width=16, output_dim=8, patch_size=2, grid=(4, 4), scale=2.0)

pixels = 0.1 * rng.standard_normal((3, 8, 8)).astype(np.float32)
pixels[:, :4, :4] += 2.0
truth = np.zeros((8, 8), dtype=bool)
truth[:4, :4] = True
d = decompose_image(model, ImageInput(pixels, "square"))

# direction: the mean contribution of the bright patches minus the rest
tok = d.msa_terms.astype(float).sum(axis=(1, 2))[1:].reshape(4, 4, -1)
inside = np.zeros((4, 4), dtype=bool)
inside[:2, :2] = True
direction = tok[inside].mean(0) - tok[~inside].mean(0)

h = token_heatmap(d, direction)
print(np.round(h.grid, 2))
print(seg_metrics(h, binarize(h), truth, patch_upsample=2))
print(upsample(binarize(h), 2).astype(int))

# the per-head maps add up to the token map
parts = sum(joint_heatmap(d, l, k, direction).grid for l in range(2) for k in range(2))
print("joint maps sum to token map:", np.allclose(parts, h.grid, atol=1e-6))
