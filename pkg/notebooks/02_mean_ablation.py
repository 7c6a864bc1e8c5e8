"""
Mean-ablating MLPs, layers and single heads
===========================================

Replace chosen ledger terms by their average over a set of images and see how
zero-shot predictions move. With random weights the "classes" are random
directions, so the point is the mechanics, not the accuracy.
"""

import numpy as np

from clipdecomp import (
    AblationSpec,
    apply_ablation,
    build_mean_bank,
    decompose_image,
    random_image,
    random_model,
)
from clipdecomp.decomposition import ClassBank, classify_batch, reconstruct

rng = np.random.default_rng(1)
model = random_model(rng, num_layers=4, num_heads=4, width=32, output_dim=16, patch_size=4, grid=(3, 3), scale=2.0)
decomps = [decompose_image(model, random_image(rng, model.config, f"im{i}")) for i in range(40)]
bank = build_mean_bank(decomps, source="toy set")
classes = ClassBank([f"class {k}" for k in range(5)], rng.standard_normal((5, 16)).astype(np.float32))

base = classify_batch(np.stack([reconstruct(d) for d in decomps]), classes)


def agreement(spec):
    preds = classify_batch(np.stack([apply_ablation(d, spec, bank) for d in decomps]), classes)
    return float(np.mean(preds == base))


print("empty spec:", agreement(AblationSpec()))
print("all MLPs:", agreement(AblationSpec(mlps=True)))
for k in range(1, 5):
    print(f"MSA layers 0..{k - 1}:", agreement(AblationSpec(msa_prefix=k)))
print("class-token column:", agreement(AblationSpec(cls_token=True)))
print("head (3, 2) zeroed:", agreement(AblationSpec(heads=frozenset({(3, 2)}), mode="zero")))
