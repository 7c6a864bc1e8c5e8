"""Direct-effect ledger of the image representation, and mean ablation on it.

``decompose_image`` runs one forward pass and records every additive term of
the output at the class token, already mapped into the joint space:

* ``init_term``: the class token's initial residual state,
* ``mlp_terms[l]``: the MLP output of layer ``l``,
* ``msa_terms[i, l, h]``: what head ``h`` of layer ``l`` moved from token ``i``.

The final layer norm is linearized around the class token's own statistics:
its multiplicative part is folded into the projection and its additive part is
shared equally by all ``msa_terms``. Each layer's attention output bias is a
constant with no token of origin; it is booked on the class-token slot of
head 0 (``msa_terms[0, l, 0]``). With these conventions the terms add up to
``reference_forward`` exactly, up to float rounding.
"""

from __future__ import annotations

from collections.abc import Iterable
from dataclasses import dataclass, field, replace

import numpy as np

from clipdecomp.kernel import ACCUM, DimensionError, layer_norm, layer_norm_stats
from clipdecomp.model import ImageInput, ViTModel, _attention, _embed, _mlp, _pixels


@dataclass(frozen=True, eq=False)
class DecomposedRepresentation:
    init_term: np.ndarray  # (d',)
    mlp_terms: np.ndarray  # (L, d')
    msa_terms: np.ndarray  # (N+1, L, H, d')
    ln_stats: np.ndarray  # (mean, std) of the final class-token state
    grid: tuple[int, int]
    image_id: str = ""

    def __post_init__(self):
        n1, L, H, dp = self.msa_terms.shape
        if self.init_term.shape != (dp,) or self.mlp_terms.shape != (L, dp):
            raise DimensionError(
                f"inconsistent term shapes: init {self.init_term.shape}, "
                f"mlp {self.mlp_terms.shape}, msa {self.msa_terms.shape}"
            )
        if self.grid[0] * self.grid[1] != n1 - 1:
            raise DimensionError(f"grid {self.grid} does not match {n1 - 1} image tokens")

    @property
    def num_layers(self) -> int:
        return self.msa_terms.shape[1]

    @property
    def num_heads(self) -> int:
        return self.msa_terms.shape[2]

    @property
    def num_tokens(self) -> int:
        return self.msa_terms.shape[0]

    @property
    def output_dim(self) -> int:
        return self.msa_terms.shape[3]

    def term_shapes(self) -> dict[str, list[int]]:
        return {
            "init_term": list(self.init_term.shape),
            "mlp_terms": list(self.mlp_terms.shape),
            "msa_terms": list(self.msa_terms.shape),
        }


@dataclass(frozen=True, eq=False)
class MeanBank:
    init_term: np.ndarray
    mlp_terms: np.ndarray
    msa_terms: np.ndarray
    count: int
    source: str = ""

    def check_matches(self, d: DecomposedRepresentation) -> None:
        if (
            self.init_term.shape != d.init_term.shape
            or self.mlp_terms.shape != d.mlp_terms.shape
            or self.msa_terms.shape != d.msa_terms.shape
        ):
            raise DimensionError(
                f"mean bank shapes {self.msa_terms.shape} do not match decomposition {d.msa_terms.shape}"
            )


@dataclass(frozen=True)
class AblationSpec:
    """Which ledger terms to replace.

    ``msa_prefix=k`` selects every head of the first ``k`` layers. ``heads``
    holds explicit ``(layer, head)`` pairs, zero-based. ``cls_token`` selects
    the class-token rows ``msa_terms[0]``.
    """

    mlps: bool = False
    msa_prefix: int = 0
    heads: frozenset[tuple[int, int]] = field(default_factory=frozenset)
    cls_token: bool = False
    init: bool = False
    mode: str = "mean"

    def __post_init__(self):
        if self.mode not in ("mean", "zero"):
            raise ValueError(f"ablation mode must be 'mean' or 'zero', got {self.mode!r}")
        object.__setattr__(self, "heads", frozenset((int(l), int(h)) for l, h in self.heads))

    def union(self, other: AblationSpec) -> AblationSpec:
        if other.mode != self.mode:
            raise ValueError("cannot combine ablations with different modes")
        return AblationSpec(
            mlps=self.mlps or other.mlps,
            msa_prefix=max(self.msa_prefix, other.msa_prefix),
            heads=self.heads | other.heads,
            cls_token=self.cls_token or other.cls_token,
            init=self.init or other.init,
            mode=self.mode,
        )

    def validate(self, num_layers: int, num_heads: int) -> None:
        if not 0 <= self.msa_prefix <= num_layers:
            raise IndexError(f"msa_prefix {self.msa_prefix} outside 0..{num_layers}")
        for l, h in self.heads:
            if not (0 <= l < num_layers and 0 <= h < num_heads):
                raise IndexError(f"head ({l}, {h}) outside a {num_layers} x {num_heads} model")

    def msa_mask(self, num_tokens: int, num_layers: int, num_heads: int) -> np.ndarray:
        """Boolean ``(N+1, L, H)`` mask of the selected attention terms."""
        self.validate(num_layers, num_heads)
        mask = np.zeros((num_tokens, num_layers, num_heads), dtype=bool)
        mask[:, : self.msa_prefix, :] = True
        for l, h in self.heads:
            mask[:, l, h] = True
        if self.cls_token:
            mask[0] = True
        return mask

    def to_dict(self) -> dict:
        return {
            "mlps": self.mlps,
            "msa_prefix": self.msa_prefix,
            "heads": sorted([l, h] for l, h in self.heads),
            "cls_token": self.cls_token,
            "init": self.init,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> AblationSpec:
        known = {"mlps", "msa_prefix", "heads", "cls_token", "init", "mode"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown ablation spec keys: {sorted(unknown)}")
        kw = dict(data)
        kw["heads"] = frozenset(tuple(x) for x in kw.get("heads", []))
        return cls(**kw)


@dataclass(frozen=True, eq=False)
class ClassBank:
    names: list[str]
    embeddings: np.ndarray  # (classes, d')

    def __post_init__(self):
        if self.embeddings.ndim != 2 or len(self.names) != self.embeddings.shape[0]:
            raise DimensionError(
                f"{len(self.names)} class names for embeddings of shape {self.embeddings.shape}"
            )
        if np.any(np.linalg.norm(self.embeddings.astype(ACCUM), axis=1) == 0):
            raise ValueError("class bank contains a zero-norm embedding")


def decompose_image(model: ViTModel, image) -> DecomposedRepresentation:
    m = model.f64
    cfg = m.config
    if cfg.num_patches < 1:
        raise DimensionError("decomposition needs at least one image token")
    z = _embed(m, _pixels(model, image))
    n = z.shape[0]
    H, dh = cfg.num_heads, cfg.head_dim

    init_state = z[0].copy()
    mlp_out = np.empty((cfg.num_layers, cfg.width))
    # per layer and head: token i's value vector pushed through the output
    # projection and weighted by the class token's attention to it
    head_moves = np.empty((n, cfg.num_layers, H, cfg.width))
    for l, layer in enumerate(m.layers):
        x = layer_norm(z, layer.ln1_weight, layer.ln1_bias, cfg.ln_eps)
        attn, v = _attention(layer, x, H)
        for h in range(H):
            w_o = layer.attn_out_weight[:, h * dh : (h + 1) * dh]
            head_moves[:, l, h, :] = attn[h, 0][:, None] * (v[h] @ w_o.T)
        heads = (attn @ v).transpose(1, 0, 2).reshape(n, cfg.width)
        z = z + heads @ layer.attn_out_weight.T + layer.attn_out_bias
        delta = _mlp(m, layer, z)
        mlp_out[l] = delta[0]
        z = z + delta
        head_moves[0, l, 0, :] += layer.attn_out_bias

    final = z[0]
    mu, sd = layer_norm_stats(final)
    scale = m.ln_final_weight / np.sqrt(sd**2 + cfg.ln_eps)
    shift = m.ln_final_bias - mu * scale
    p_eff = m.proj * scale[None, :]
    share = (m.proj @ shift) / (n * cfg.num_layers * H)

    msa = head_moves @ p_eff.T + share
    return DecomposedRepresentation(
        init_term=(p_eff @ init_state).astype(np.float32),
        mlp_terms=(mlp_out @ p_eff.T).astype(np.float32),
        msa_terms=msa.astype(np.float32),
        ln_stats=np.array([mu, sd], dtype=np.float32),
        grid=cfg.grid,
        image_id=image.image_id if isinstance(image, ImageInput) else "",
    )


def reconstruct(d: DecomposedRepresentation) -> np.ndarray:
    """Sum of all ledger terms, accumulated in float64."""
    total = d.init_term.astype(ACCUM)
    total = total + d.mlp_terms.astype(ACCUM).sum(axis=0)
    total = total + d.msa_terms.astype(ACCUM).reshape(-1, d.output_dim).sum(axis=0)
    return total.astype(np.float32)


def _check_layer_head(d: DecomposedRepresentation, l: int, h: int) -> None:
    if not (0 <= l < d.num_layers and 0 <= h < d.num_heads):
        raise IndexError(f"head ({l}, {h}) outside a {d.num_layers} x {d.num_heads} model")


def head_contribution(d: DecomposedRepresentation, l: int, h: int) -> np.ndarray:
    _check_layer_head(d, l, h)
    return d.msa_terms[:, l, h, :].astype(ACCUM).sum(axis=0).astype(np.float32)


def head_contributions(d: DecomposedRepresentation) -> np.ndarray:
    """All head contributions at once, ``(L, H, d')``."""
    return d.msa_terms.astype(ACCUM).sum(axis=0).astype(np.float32)


def token_contribution(d: DecomposedRepresentation, i: int) -> np.ndarray:
    if not 0 <= i < d.num_tokens:
        raise IndexError(f"token {i} outside 0..{d.num_tokens - 1}")
    return d.msa_terms[i].astype(ACCUM).reshape(-1, d.output_dim).sum(axis=0).astype(np.float32)


def token_contributions(d: DecomposedRepresentation) -> np.ndarray:
    """All token contributions at once, ``(N+1, d')``."""
    return d.msa_terms.astype(ACCUM).sum(axis=(1, 2)).astype(np.float32)


def build_mean_bank(decomps: Iterable[DecomposedRepresentation], source: str = "") -> MeanBank:
    sums = None
    count = 0
    for d in decomps:
        parts = (d.init_term, d.mlp_terms, d.msa_terms)
        if sums is None:
            sums = [p.astype(ACCUM) for p in parts]
        else:
            if any(s.shape != p.shape for s, p in zip(sums, parts)):
                raise DimensionError(f"decomposition {d.image_id!r} has shape {d.msa_terms.shape}, expected {sums[2].shape}")
            for s, p in zip(sums, parts):
                s += p
        count += 1
    if count == 0:
        raise ValueError("cannot build a mean bank from an empty set of decompositions")
    init, mlp, msa = (s / count for s in sums)
    return MeanBank(
        init_term=init.astype(np.float32),
        mlp_terms=mlp.astype(np.float32),
        msa_terms=msa.astype(np.float32),
        count=count,
        source=source,
    )


def ablate_terms(d: DecomposedRepresentation, spec: AblationSpec, bank: MeanBank | None) -> DecomposedRepresentation:
    """Return a copy of the ledger with the selected terms replaced.

    Layer-norm statistics stay frozen at the unablated pass; only the final
    sum changes.
    """
    if spec.mode == "mean":
        if bank is None:
            raise ValueError("mean ablation needs a mean bank")
        bank.check_matches(d)
    if spec.mode == "mean":
        src_init, src_mlp, src_msa = bank.init_term, bank.mlp_terms, bank.msa_terms
    else:
        src_init, src_mlp, src_msa = (np.zeros_like(t) for t in (d.init_term, d.mlp_terms, d.msa_terms))
    mask = spec.msa_mask(d.num_tokens, d.num_layers, d.num_heads)
    msa = np.where(mask[..., None], src_msa, d.msa_terms).astype(np.float32)
    mlp = (src_mlp if spec.mlps else d.mlp_terms).copy()
    init = (src_init if spec.init else d.init_term).copy()
    return replace(d, init_term=init, mlp_terms=mlp, msa_terms=msa)


def apply_ablation(d: DecomposedRepresentation, spec: AblationSpec, bank: MeanBank | None) -> np.ndarray:
    return reconstruct(ablate_terms(d, spec, bank))


def zero_shot_classify(rep: np.ndarray, bank: ClassBank) -> int:
    """Index of the class with the highest cosine similarity; ties go to the lowest index."""
    return int(classify_batch(np.asarray(rep)[None, :], bank)[0])


def classify_batch(reps: np.ndarray, bank: ClassBank) -> np.ndarray:
    r = np.asarray(reps, dtype=ACCUM)
    norms = np.linalg.norm(r, axis=1)
    if np.any(norms == 0):
        raise ValueError("cannot classify a zero-norm representation")
    e = np.asarray(bank.embeddings, dtype=ACCUM)
    e = e / np.linalg.norm(e, axis=1, keepdims=True)
    sims = (r / norms[:, None]) @ e.T
    return np.argmax(sims, axis=1)
