"""
Retrieval by a single head, and worst-group accuracy
====================================================

Images are ranked by the inner product of one head's contribution with a
query's. Then a toy "spurious cue" setup shows how worst-group accuracy is
reported per subgroup.
"""

import numpy as np

from clipdecomp import decompose_image, random_image, random_model
from clipdecomp.applications import retrieve_by_head, worst_group_accuracy

rng = np.random.default_rng(4)
model = random_model(rng, num_layers=3, num_heads=2, width=16, output_dim=8, patch_size=2, grid=(3, 3))
gallery = [decompose_image(model, random_image(rng, model.config, f"g{i}")) for i in range(30)]

res = retrieve_by_head(gallery[0], gallery, l=2, h=1, k=5)
for rank, (i, s) in enumerate(zip(res.ids, res.scores)):
    print(rank, i, round(s, 3))

labels = rng.integers(0, 2, 200)
background = np.where(rng.random(200) < 0.9, labels, 1 - labels)  # background agrees with the label 90% of the time
predictions = background  # a classifier that only looks at the background
groups = [f"class{y}_bg{b}" for y, b in zip(labels, background)]
worst, table = worst_group_accuracy(predictions, labels, groups)
print(table)
print("worst group:", worst)
