"""TextSpan: greedy text bases for attention-head outputs.

Given the contributions of one head over ``K`` images (rows of ``C``) and a pool
of ``M`` text embeddings (rows of ``R``), pick, one at a time, the text direction
along which the head output varies most, then deflate both ``C`` and ``R`` by
that direction. The selected directions form an orthonormal basis whose span
explains as much of the head's variance as the pool allows.
"""

from __future__ import annotations

import warnings
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from clipdecomp.decomposition import (
    DecomposedRepresentation,
    MeanBank,
    head_contributions,
)
from clipdecomp.kernel import ACCUM, DimensionError, orthonormal_basis

PROVENANCES = ("general-pool", "common-words", "class-specific", "random-vectors")

# deflated candidates shorter than this fraction of the initial pool scale are
# considered exhausted
RESIDUAL_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class TextEmbeddingBank:
    descriptions: list[str]
    embeddings: np.ndarray  # (M, d')
    provenance: str = "general-pool"

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise DimensionError(f"text bank needs a non-empty M x d' matrix, got {self.embeddings.shape}")
        if len(self.descriptions) != self.embeddings.shape[0]:
            raise DimensionError(
                f"{len(self.descriptions)} descriptions for {self.embeddings.shape[0]} embeddings"
            )
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}")
        if np.any(np.linalg.norm(self.embeddings.astype(ACCUM), axis=1) == 0):
            raise ValueError("text bank contains a zero-norm embedding")

    def __len__(self) -> int:
        return len(self.descriptions)


@dataclass(frozen=True, eq=False)
class HeadBasis:
    indices: list[int]
    descriptions: list[str]
    components: np.ndarray  # (m, d'), orthonormal rows
    step_variances: list[float]
    total_variance: float
    layer: int | None = None
    head: int | None = None
    provenance: str = ""
    truncated: bool = False
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def cumulative_variances(self) -> list[float]:
        return np.cumsum(self.step_variances).tolist()

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "head": self.head,
            "provenance": self.provenance,
            "truncated": self.truncated,
            "total_variance": self.total_variance,
            "selections": [
                {"index": i, "description": t, "variance": v, "cumulative_variance": cv}
                for i, t, v, cv in zip(
                    self.indices, self.descriptions, self.step_variances, self.cumulative_variances
                )
            ],
        }


def project_rows_to_span(r: np.ndarray, c: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Orthogonal projection of every row of ``r`` onto the row space of ``c``."""
    c = np.asarray(c)
    if c.ndim != 2 or c.shape[0] < 1:
        raise DimensionError(f"span needs at least one row, got shape {c.shape}")
    basis = orthonormal_basis(c.astype(ACCUM), tol)
    r64 = np.asarray(r, dtype=ACCUM)
    return (r64 @ basis.T) @ basis


def textspan(
    c: np.ndarray,
    bank: TextEmbeddingBank,
    m: int,
    layer: int | None = None,
    head: int | None = None,
    tol: float = 1e-8,
) -> HeadBasis:
    """Greedy basis of ``m`` text directions for the head outputs ``c`` (``K x d'``).

    The pool is projected onto the span of ``c`` first. Each round picks the
    candidate whose dot products with the current (deflated) rows of ``c`` have
    the highest population variance; ties go to the lowest index. Candidates
    whose residual norm drops below ``1e-8`` of the initial pool scale are
    skipped; if none remain, the basis is returned early with
    ``truncated=True`` and a warning.
    """
    C = np.array(c, dtype=ACCUM)
    if C.ndim != 2 or C.shape[0] < 2:
        raise DimensionError(f"textspan needs at least 2 head outputs, got shape {C.shape}")
    if C.shape[1] != bank.embeddings.shape[1]:
        raise DimensionError(f"head outputs have dim {C.shape[1]}, text bank {bank.embeddings.shape[1]}")
    if m > len(bank):
        raise ValueError(f"requested {m} descriptions from a pool of {len(bank)}")
    if m < 0:
        raise ValueError("basis size must be non-negative")

    centered = C - C.mean(axis=0)
    total = float((centered**2).sum() / C.shape[0])
    R = project_rows_to_span(bank.embeddings, C, tol)
    floor = RESIDUAL_FLOOR * float(np.linalg.norm(R, axis=1).max())

    indices: list[int] = []
    components: list[np.ndarray] = []
    step_vars: list[float] = []
    truncated = False
    for _ in range(m):
        norms = np.linalg.norm(R, axis=1)
        alive = (norms >= floor) & (norms > 0)
        if not alive.any():
            truncated = True
            warnings.warn(
                f"text pool exhausted after {len(indices)} of {m} directions",
                RuntimeWarning,
                stacklevel=2,
            )
            break
        scores = R @ C.T
        var = ((scores - scores.mean(axis=1, keepdims=True)) ** 2).mean(axis=1)
        var[~alive] = -np.inf
        j = int(np.argmax(var))

        u = R[j].copy()
        for _ in range(2):
            for q in components:
                u -= (q @ u) * q
        u /= np.linalg.norm(u)

        proj = C @ u
        step_vars.append(float(((proj - proj.mean()) ** 2).mean()))
        C -= np.outer(proj, u)
        R -= np.outer(R @ u, u)
        indices.append(j)
        components.append(u)

    comp = np.array(components, dtype=ACCUM).reshape(len(components), C.shape[1])
    return HeadBasis(
        indices=indices,
        descriptions=[bank.descriptions[j] for j in indices],
        components=comp,
        step_variances=step_vars,
        total_variance=total,
        layer=layer,
        head=head,
        provenance=bank.provenance,
        truncated=truncated,
    )


def explained_variance(c: np.ndarray, basis: HeadBasis) -> float:
    """Mean squared norm of the centered rows of ``c`` after projection onto the basis span."""
    C = np.asarray(c, dtype=ACCUM)
    if C.ndim != 2 or C.shape[0] < 2:
        raise DimensionError(f"explained variance needs at least 2 rows, got shape {C.shape}")
    if len(basis) == 0:
        return 0.0
    coords = (C - C.mean(axis=0)) @ np.asarray(basis.components, dtype=ACCUM).T
    return float((coords**2).sum() / C.shape[0])


def project_contribution(c_head: np.ndarray, basis: HeadBasis) -> np.ndarray:
    """Orthogonal projection of one head contribution onto the basis span."""
    b = np.asarray(basis.components, dtype=ACCUM)
    v = np.asarray(c_head, dtype=ACCUM)
    return ((v @ b.T) @ b).astype(np.float32)


def projected_representation(
    d: DecomposedRepresentation,
    bases: Mapping[tuple[int, int], HeadBasis],
    bank: MeanBank,
) -> np.ndarray:
    """Representation rebuilt from text-projected heads, everything else mean-ablated.

    Every head in ``bases`` contributes the projection of its own output onto
    its text basis; all other heads, the MLPs and the initial term are replaced
    by their bank means.
    """
    bank.check_matches(d)
    heads = head_contributions(d)
    return project_heads({lh: heads[lh] for lh in bases}, bases, bank)


def project_heads(
    head_outputs: Mapping[tuple[int, int], np.ndarray],
    bases: Mapping[tuple[int, int], HeadBasis],
    bank: MeanBank,
) -> np.ndarray:
    """Same as :func:`projected_representation`, from the kept heads' outputs only.

    ``head_outputs`` maps each head in ``bases`` to its ``d'`` contribution, so
    a caller streaming over images only has to keep those vectors.
    """
    L, H = bank.msa_terms.shape[1:3]
    keep = np.zeros((L, H), dtype=bool)
    for l, h in bases:
        keep[l, h] = True
    total = bank.init_term.astype(ACCUM) + bank.mlp_terms.astype(ACCUM).sum(axis=0)
    mean_heads = bank.msa_terms.astype(ACCUM).sum(axis=0)
    total += mean_heads[~keep].sum(axis=0)
    for lh, basis in sorted(bases.items()):
        total += project_contribution(head_outputs[lh], basis).astype(ACCUM)
    return total.astype(np.float32)


def stack_head_outputs(decomps: list[DecomposedRepresentation], layer: int, head: int) -> np.ndarray:
    """``K x d'`` matrix of one head's contribution across images."""
    if not decomps:
        raise ValueError("no decompositions given")
    return np.stack([head_contributions(d)[layer, head] for d in decomps])
