"""On-disk formats other than the model archive.

* Text banks (also used for class banks): a JSON-lines file, one
  ``{"index", "description", "provenance"}`` record per row, with the
  embeddings in ``<bank path>.nta`` under the name ``embeddings``.
* Decompositions and mean banks: a tensor archive plus a JSON manifest at the
  same path with a ``.json`` suffix.
* Images: binary P6 PPM, or a tensor archive holding ``image`` (3 x H x W) or
  ``images`` (B x 3 x H x W).
* Heatmaps: JSON (shape + row-major floats) or 8-bit PGM.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from clipdecomp.applications import Heatmap
from clipdecomp.archive import FormatError, load_archive, save_archive
from clipdecomp.decomposition import ClassBank, DecomposedRepresentation, MeanBank
from clipdecomp.model import ImageInput
from clipdecomp.textspan import HeadBasis, TextEmbeddingBank

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def dump_json(obj, path: str | os.PathLike | None = None) -> str:
    """Canonical JSON text: sorted keys, fixed indentation, trailing newline."""
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(path: str | os.PathLike) -> Path:
    return Path(path).with_suffix(".json")


def bank_tensor_path(path: str | os.PathLike) -> Path:
    return Path(str(path) + ".nta")


# -- text and class banks ----------------------------------------------------


def save_text_bank(bank: TextEmbeddingBank, path: str | os.PathLike) -> None:
    lines = [
        json.dumps({"index": i, "description": t, "provenance": bank.provenance}, sort_keys=True)
        for i, t in enumerate(bank.descriptions)
    ]
    Path(path).write_text("\n".join(lines) + "\n")
    save_archive({"embeddings": np.asarray(bank.embeddings)}, bank_tensor_path(path))


def _read_bank_records(path) -> tuple[list[str], list[str], np.ndarray]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{lineno}: invalid JSON line") from exc
    for pos, rec in enumerate(records):
        if rec.get("index", pos) != pos:
            raise FormatError(f"{path}: record {pos} has index {rec.get('index')}")
    tensors = load_archive(bank_tensor_path(path))
    if "embeddings" not in tensors:
        raise FormatError(f"{bank_tensor_path(path)}: missing tensor 'embeddings'")
    texts = [r.get("description", r.get("name", "")) for r in records]
    provs = [r.get("provenance", "") for r in records]
    return texts, provs, tensors["embeddings"]


def load_text_bank(path: str | os.PathLike) -> TextEmbeddingBank:
    texts, provs, emb = _read_bank_records(path)
    kinds = set(provs)
    if len(kinds) > 1:
        raise FormatError(f"{path}: mixed provenance tags {sorted(kinds)}")
    prov = kinds.pop() if kinds else "general-pool"
    return TextEmbeddingBank(texts, emb, prov or "general-pool")


def load_class_bank(path: str | os.PathLike) -> ClassBank:
    texts, _, emb = _read_bank_records(path)
    return ClassBank(texts, emb)


def save_class_bank(bank: ClassBank, path: str | os.PathLike) -> None:
    lines = [json.dumps({"index": i, "description": t}, sort_keys=True) for i, t in enumerate(bank.names)]
    Path(path).write_text("\n".join(lines) + "\n")
    save_archive({"embeddings": np.asarray(bank.embeddings)}, bank_tensor_path(path))


# -- decompositions and mean banks ---------------------------------------------


def save_decompositions(
    decomps: list[DecomposedRepresentation], path: str | os.PathLike, model_hash: str = ""
) -> None:
    if not decomps:
        raise ValueError("nothing to save")
    save_archive(
        {
            "init_term": np.stack([d.init_term for d in decomps]),
            "mlp_terms": np.stack([d.mlp_terms for d in decomps]),
            "msa_terms": np.stack([d.msa_terms for d in decomps]),
            "ln_stats": np.stack([d.ln_stats for d in decomps]),
        },
        path,
    )
    dump_json(
        {
            "kind": "decomposition",
            "model_hash": model_hash,
            "image_ids": [d.image_id for d in decomps],
            "grid": list(decomps[0].grid),
            "term_shapes": decomps[0].term_shapes(),
        },
        manifest_path(path),
    )


def _read_manifest(path, kind: str) -> dict:
    mpath = manifest_path(path)
    if not mpath.exists():
        raise FormatError(f"missing manifest {mpath}")
    meta = json.loads(mpath.read_text())
    if meta.get("kind") != kind:
        raise FormatError(f"{mpath}: expected a {kind} manifest, found {meta.get('kind')!r}")
    return meta


def load_decompositions(path: str | os.PathLike) -> list[DecomposedRepresentation]:
    meta = _read_manifest(path, "decomposition")
    t = load_archive(path)
    for name in ("init_term", "mlp_terms", "msa_terms", "ln_stats"):
        if name not in t:
            raise FormatError(f"{path}: missing tensor {name!r}")
    ids = meta["image_ids"]
    if len(ids) != t["init_term"].shape[0]:
        raise FormatError(f"{path}: manifest lists {len(ids)} images, archive holds {t['init_term'].shape[0]}")
    grid = tuple(meta["grid"])
    return [
        DecomposedRepresentation(
            init_term=t["init_term"][b],
            mlp_terms=t["mlp_terms"][b],
            msa_terms=t["msa_terms"][b],
            ln_stats=t["ln_stats"][b],
            grid=grid,
            image_id=ids[b],
        )
        for b in range(len(ids))
    ]


def load_many_decompositions(paths) -> list[DecomposedRepresentation]:
    out = []
    for p in paths:
        out.extend(load_decompositions(p))
    return out


def save_mean_bank(bank: MeanBank, path: str | os.PathLike, model_hash: str = "") -> None:
    save_archive(
        {"init_term": bank.init_term, "mlp_terms": bank.mlp_terms, "msa_terms": bank.msa_terms}, path
    )
    dump_json(
        {
            "kind": "mean_bank",
            "count": bank.count,
            "source": bank.source,
            "model_hash": model_hash,
            "term_shapes": {
                "init_term": list(bank.init_term.shape),
                "mlp_terms": list(bank.mlp_terms.shape),
                "msa_terms": list(bank.msa_terms.shape),
            },
        },
        manifest_path(path),
    )


def load_mean_bank(path: str | os.PathLike) -> MeanBank:
    meta = _read_manifest(path, "mean_bank")
    t = load_archive(path)
    return MeanBank(t["init_term"], t["mlp_terms"], t["msa_terms"], int(meta["count"]), meta.get("source", ""))


def save_head_basis(basis: HeadBasis, stem: str | os.PathLike) -> None:
    """``<stem>.json`` with the selections, ``<stem>.nta`` with the components."""
    stem = Path(stem)
    dump_json(basis.to_json(), stem.with_suffix(".json"))
    save_archive({"components": np.asarray(basis.components, dtype=np.float64)}, stem.with_suffix(".nta"))


def load_head_basis(stem: str | os.PathLike) -> HeadBasis:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    comps = load_archive(stem.with_suffix(".nta"))["components"]
    sel = meta["selections"]
    return HeadBasis(
        indices=[s["index"] for s in sel],
        descriptions=[s["description"] for s in sel],
        components=comps,
        step_variances=[s["variance"] for s in sel],
        total_variance=meta["total_variance"],
        layer=meta.get("layer"),
        head=meta.get("head"),
        provenance=meta.get("provenance", ""),
        truncated=meta.get("truncated", False),
    )


# -- images ------------------------------------------------------------------


def _ppm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header", pos)
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def decode_ppm(buf: bytes) -> np.ndarray:
    """Raw ``3 x H x W`` uint8 pixels of a binary P6 PPM."""
    if buf[:2] != b"P6":
        raise FormatError(f"not a binary PPM: magic {buf[:2]!r}", 0)
    tokens, pos = _ppm_tokens(buf, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"bad PPM header {tokens!r}") from exc
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    need = w * h * 3
    if len(buf) - pos < need:
        raise FormatError(f"PPM pixel data truncated: need {need} bytes, have {len(buf) - pos}", pos)
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(h, w, 3).transpose(2, 0, 1)


def encode_ppm(pixels: np.ndarray) -> bytes:
    """``3 x H x W`` uint8 pixels to P6 bytes."""
    c, h, w = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode() + np.ascontiguousarray(pixels.transpose(1, 2, 0), dtype=np.uint8).tobytes()


def read_ppm(
    path: str | os.PathLike,
    image_size: tuple[int, int] | None = None,
    mean=CLIP_MEAN,
    std=CLIP_STD,
) -> ImageInput:
    raw = decode_ppm(Path(path).read_bytes())
    if image_size is not None and raw.shape[1:] != tuple(image_size):
        raise FormatError(
            f"{path}: image is {raw.shape[1]}x{raw.shape[2]} (HxW), model expects {image_size[0]}x{image_size[1]}"
        )
    x = raw.astype(np.float64) / 255.0
    x = (x - np.asarray(mean, dtype=np.float64)[:, None, None]) / np.asarray(std, dtype=np.float64)[:, None, None]
    return ImageInput(x.astype(np.float32), Path(path).stem)


def load_images(path: str | os.PathLike, image_size=None, mean=CLIP_MEAN, std=CLIP_STD) -> list[ImageInput]:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return [read_ppm(path, image_size, mean, std)]
    t = load_archive(path)
    if "image" in t:
        batch = t["image"][None]
    elif "images" in t:
        batch = t["images"]
    else:
        raise FormatError(f"{path}: expected tensor 'image' or 'images'")
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise FormatError(f"{path}: images must be (B,) 3 x H x W, got {batch.shape}")
    if image_size is not None and batch.shape[2:] != tuple(image_size):
        raise FormatError(f"{path}: image size {batch.shape[2:]}, model expects {tuple(image_size)}")
    if len(batch) == 1 and "image" in t:
        return [ImageInput(batch[0].astype(np.float32), path.stem)]
    return [ImageInput(b.astype(np.float32), f"{path.stem}:{i}") for i, b in enumerate(batch)]


# -- heatmaps ----------------------------------------------------------------


def save_heatmap_json(h: Heatmap, path: str | os.PathLike) -> None:
    dump_json(h.to_json(), path)


def load_heatmap_json(path: str | os.PathLike) -> Heatmap:
    return Heatmap.from_json(json.loads(Path(path).read_text()))


def heatmap_to_pgm(h: Heatmap, scale: int = 1) -> bytes:
    """8-bit binary PGM, min-max scaled; a constant map renders black."""
    g = np.asarray(h.grid, dtype=np.float64)
    lo, hi = g.min(), g.max()
    norm = (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)
    img = np.round(norm * 255).astype(np.uint8)
    if scale > 1:
        img = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
    rows, cols = img.shape
    return f"P5\n{cols} {rows}\n255\n".encode() + img.tobytes()
