"""CLIP-ViT image encoder: weights, archive I/O and the reference forward pass.

Tensor names inside a model archive are listed in ``NAMES.md``. Hyperparameters
that cannot be read off tensor shapes (head count, patch size, image size,
layer-norm epsilon, activation) live in a JSON sidecar next to the archive:
``model.nta`` pairs with ``model.json``.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from clipdecomp.archive import encode_archive, load_archive, save_archive
from clipdecomp.kernel import (
    ACCUM,
    ACTIVATIONS,
    DimensionError,
    layer_norm,
    softmax_row,
)

LAYER_PARTS = ("ln1", "qkv", "attn_out", "ln2", "mlp_up", "mlp_down")


class ModelError(ValueError):
    """Missing or inconsistent tensors in a model archive."""


@dataclass(frozen=True)
class ViTConfig:
    num_layers: int
    num_heads: int
    width: int
    output_dim: int
    patch_size: int
    image_size: tuple[int, int]
    ln_eps: float = 1e-5
    mlp_hidden: int | None = None
    activation: str = "gelu_tanh"

    def __post_init__(self):
        if self.num_layers < 1 or self.num_heads < 1:
            raise ValueError("num_layers and num_heads must be >= 1")
        if self.width % self.num_heads:
            raise ValueError(f"width {self.width} not divisible by num_heads {self.num_heads}")
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not a multiple of patch size {self.patch_size}")
        if self.num_patches < 1:
            raise ValueError("model needs at least one image patch")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_size[0] // self.patch_size, self.image_size[1] // self.patch_size

    @property
    def num_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def head_dim(self) -> int:
        return self.width // self.num_heads

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else 4 * self.width


@dataclass(frozen=True, eq=False)
class LayerWeights:
    ln1_weight: np.ndarray
    ln1_bias: np.ndarray
    qkv_weight: np.ndarray  # (3d, d): rows are [queries; keys; values]
    qkv_bias: np.ndarray
    attn_out_weight: np.ndarray  # (d, d)
    attn_out_bias: np.ndarray
    ln2_weight: np.ndarray
    ln2_bias: np.ndarray
    mlp_up_weight: np.ndarray
    mlp_up_bias: np.ndarray
    mlp_down_weight: np.ndarray
    mlp_down_bias: np.ndarray

    def value_slice(self, head: int, num_heads: int) -> tuple[np.ndarray, np.ndarray]:
        d = self.attn_out_weight.shape[0]
        dh = d // num_heads
        rows = slice(2 * d + head * dh, 2 * d + (head + 1) * dh)
        return self.qkv_weight[rows], self.qkv_bias[rows]

    def out_slice(self, head: int, num_heads: int) -> np.ndarray:
        d = self.attn_out_weight.shape[0]
        dh = d // num_heads
        return self.attn_out_weight[:, head * dh : (head + 1) * dh]

    def w_vo(self, head: int, num_heads: int) -> np.ndarray:
        """The head's value-then-output transition matrix, ``d x d``."""
        w_v, _ = self.value_slice(head, num_heads)
        return self.out_slice(head, num_heads).astype(ACCUM) @ w_v.astype(ACCUM)

    def astype(self, dtype) -> LayerWeights:
        return LayerWeights(**{k: np.asarray(v, dtype=dtype) for k, v in self.__dict__.items()})


@dataclass(frozen=True, eq=False)
class ViTModel:
    config: ViTConfig
    patch_weight: np.ndarray  # (d, 3*p*p), patch flattened as (channel, row, col)
    patch_bias: np.ndarray | None
    cls_token: np.ndarray
    pos_embed: np.ndarray  # (N+1, d)
    layers: tuple[LayerWeights, ...]
    ln_final_weight: np.ndarray
    ln_final_bias: np.ndarray
    proj: np.ndarray  # (d', d)
    ln_pre_weight: np.ndarray | None = None
    ln_pre_bias: np.ndarray | None = None

    def __post_init__(self):
        cfg = self.config
        if len(self.layers) != cfg.num_layers:
            raise ModelError(f"expected {cfg.num_layers} layers, got {len(self.layers)}")
        if self.pos_embed.shape != (cfg.num_patches + 1, cfg.width):
            raise ModelError(
                f"pos_embed: shape {self.pos_embed.shape}, expected {(cfg.num_patches + 1, cfg.width)}"
            )
        for name, arr, shape in self._expected_shapes():
            if arr is not None and tuple(arr.shape) != shape:
                raise ModelError(f"{name}: shape {tuple(arr.shape)}, expected {shape}")

    def _expected_shapes(self):
        cfg = self.config
        d, p, hid = cfg.width, cfg.patch_size, cfg.hidden
        yield "patch_embed.weight", self.patch_weight, (d, 3 * p * p)
        yield "patch_embed.bias", self.patch_bias, (d,)
        yield "cls_token", self.cls_token, (d,)
        yield "ln_pre.weight", self.ln_pre_weight, (d,)
        yield "ln_pre.bias", self.ln_pre_bias, (d,)
        yield "ln_final.weight", self.ln_final_weight, (d,)
        yield "ln_final.bias", self.ln_final_bias, (d,)
        yield "proj", self.proj, (cfg.output_dim, d)
        per_layer = {
            "ln1": ((d,), (d,)),
            "qkv": ((3 * d, d), (3 * d,)),
            "attn_out": ((d, d), (d,)),
            "ln2": ((d,), (d,)),
            "mlp_up": ((hid, d), (hid,)),
            "mlp_down": ((d, hid), (d,)),
        }
        for i, layer in enumerate(self.layers):
            for part, (wshape, bshape) in per_layer.items():
                yield f"layers.{i}.{part}.weight", getattr(layer, f"{part}_weight"), wshape
                yield f"layers.{i}.{part}.bias", getattr(layer, f"{part}_bias"), bshape

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, arr, _ in self._expected_shapes():
            if arr is not None:
                out[name] = arr
        out["pos_embed"] = self.pos_embed
        return dict(sorted(out.items()))

    def sidecar(self) -> dict:
        cfg = self.config
        return {
            "num_heads": cfg.num_heads,
            "patch_size": cfg.patch_size,
            "image_size": list(cfg.image_size),
            "ln_eps": cfg.ln_eps,
            "activation": cfg.activation,
        }

    @cached_property
    def digest(self) -> str:
        """sha256 over the archive encoding and sidecar; identifies the weights."""
        h = hashlib.sha256(encode_archive(self.to_tensors()))
        h.update(json.dumps(self.sidecar(), sort_keys=True).encode())
        return h.hexdigest()

    @cached_property
    def f64(self) -> ViTModel:
        """Float64 copy used by forward passes; built once per model."""

        def cast(a):
            return None if a is None else np.asarray(a, dtype=ACCUM)

        return replace(
            self,
            patch_weight=cast(self.patch_weight),
            patch_bias=cast(self.patch_bias),
            cls_token=cast(self.cls_token),
            pos_embed=cast(self.pos_embed),
            layers=tuple(layer.astype(ACCUM) for layer in self.layers),
            ln_final_weight=cast(self.ln_final_weight),
            ln_final_bias=cast(self.ln_final_bias),
            proj=cast(self.proj),
            ln_pre_weight=cast(self.ln_pre_weight),
            ln_pre_bias=cast(self.ln_pre_bias),
        )


@dataclass(frozen=True, eq=False)
class ImageInput:
    """A preprocessed image, ``3 x H x W``, already resized and channel-normalized."""

    pixels: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DimensionError(f"image must be 3 x H x W, got {self.pixels.shape}")


def model_from_tensors(tensors: dict[str, np.ndarray], sidecar: dict) -> ViTModel:
    def get(name):
        if name not in tensors:
            raise ModelError(f"missing tensor {name!r}")
        return tensors[name]

    proj = get("proj")
    cls = get("cls_token")
    n_layers = 0
    while f"layers.{n_layers}.qkv.weight" in tensors:
        n_layers += 1
    if n_layers == 0:
        raise ModelError("missing tensor 'layers.0.qkv.weight'")
    layers = []
    for i in range(n_layers):
        kw = {}
        for part in LAYER_PARTS:
            kw[f"{part}_weight"] = get(f"layers.{i}.{part}.weight")
            kw[f"{part}_bias"] = get(f"layers.{i}.{part}.bias")
        layers.append(LayerWeights(**kw))
    try:
        config = ViTConfig(
            num_layers=n_layers,
            num_heads=int(sidecar["num_heads"]),
            width=int(cls.shape[0]),
            output_dim=int(proj.shape[0]),
            patch_size=int(sidecar["patch_size"]),
            image_size=tuple(int(s) for s in sidecar["image_size"]),
            ln_eps=float(sidecar.get("ln_eps", 1e-5)),
            mlp_hidden=int(layers[0].mlp_up_weight.shape[0]),
            activation=sidecar.get("activation", "gelu_tanh"),
        )
    except KeyError as exc:
        raise ModelError(f"model sidecar missing key {exc.args[0]!r}") from exc
    has_pre = "ln_pre.weight" in tensors
    return ViTModel(
        config=config,
        patch_weight=get("patch_embed.weight"),
        patch_bias=tensors.get("patch_embed.bias"),
        cls_token=cls,
        pos_embed=get("pos_embed"),
        layers=tuple(layers),
        ln_final_weight=get("ln_final.weight"),
        ln_final_bias=get("ln_final.bias"),
        proj=proj,
        ln_pre_weight=get("ln_pre.weight") if has_pre else None,
        ln_pre_bias=get("ln_pre.bias") if has_pre else None,
    )


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(path).with_suffix(".json")


def load_model(archive_path: str | os.PathLike) -> ViTModel:
    tensors = load_archive(archive_path)
    side = sidecar_path(archive_path)
    if not side.exists():
        raise ModelError(f"missing config sidecar {side}")
    return model_from_tensors(tensors, json.loads(side.read_text()))


def save_model(model: ViTModel, archive_path: str | os.PathLike) -> None:
    save_archive(model.to_tensors(), archive_path)
    sidecar_path(archive_path).write_text(json.dumps(model.sidecar(), indent=2, sort_keys=True) + "\n")


def _pixels(model: ViTModel, image) -> np.ndarray:
    pixels = image.pixels if isinstance(image, ImageInput) else np.asarray(image)
    expected = (3, *model.config.image_size)
    if pixels.shape != expected:
        raise DimensionError(f"image shape {pixels.shape} does not match model input {expected}")
    return pixels


def image_patches(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut ``3 x H x W`` pixels into ``N x (3*p*p)`` rows, patches in row-major order."""
    c, h, w = pixels.shape
    p = patch_size
    x = pixels.reshape(c, h // p, p, w // p, p).transpose(1, 3, 0, 2, 4)
    return x.reshape((h // p) * (w // p), c * p * p)


def patch_embed(model: ViTModel, image) -> np.ndarray:
    """Initial residual stream, ``(N+1) x d``; row 0 is the class token."""
    return _embed(model.f64, _pixels(model, image)).astype(np.float32)


def _embed(m: ViTModel, pixels: np.ndarray) -> np.ndarray:
    patches = image_patches(np.asarray(pixels, dtype=ACCUM), m.config.patch_size)
    tokens = patches @ m.patch_weight.T
    if m.patch_bias is not None:
        tokens += m.patch_bias
    z = np.concatenate([m.cls_token[None, :], tokens], axis=0) + m.pos_embed
    if m.ln_pre_weight is not None:
        z = layer_norm(z, m.ln_pre_weight, m.ln_pre_bias, m.config.ln_eps)
    return z


def attention_weights(layer: LayerWeights, z_in: np.ndarray, num_heads: int, eps: float = 1e-5) -> np.ndarray:
    """Attention patterns ``H x (N+1) x (N+1)`` for the residual stream entering ``layer``.

    The layer's input layer norm is applied here. ``out[h, 0]`` is the class
    token's attention over all tokens.
    """
    x = layer_norm(np.asarray(z_in, dtype=ACCUM), layer.ln1_weight, layer.ln1_bias, eps)
    return _attention(layer, x, num_heads)[0]


def _attention(layer: LayerWeights, x: np.ndarray, num_heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (patterns H x n x n, values H x n x dh) for layer-normed tokens ``x``."""
    n, d = x.shape
    dh = d // num_heads
    qkv = x @ np.asarray(layer.qkv_weight, dtype=ACCUM).T + np.asarray(layer.qkv_bias, dtype=ACCUM)
    q, k, v = (qkv[:, i * d : (i + 1) * d].reshape(n, num_heads, dh).transpose(1, 0, 2) for i in range(3))
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    return softmax_row(scores), v


def _mlp(m: ViTModel, layer: LayerWeights, z: np.ndarray) -> np.ndarray:
    act = ACTIVATIONS[m.config.activation]
    y = layer_norm(z, layer.ln2_weight, layer.ln2_bias, m.config.ln_eps)
    hidden = act(y @ layer.mlp_up_weight.T + layer.mlp_up_bias)
    return hidden @ layer.mlp_down_weight.T + layer.mlp_down_bias


def reference_forward(model: ViTModel, image) -> np.ndarray:
    """Image representation in the joint space (unnormalized), shape ``(d',)``."""
    m = model.f64
    cfg = m.config
    z = _embed(m, _pixels(model, image))
    n = z.shape[0]
    for layer in m.layers:
        x = layer_norm(z, layer.ln1_weight, layer.ln1_bias, cfg.ln_eps)
        attn, v = _attention(layer, x, cfg.num_heads)
        heads = (attn @ v).transpose(1, 0, 2).reshape(n, cfg.width)
        z = z + heads @ layer.attn_out_weight.T + layer.attn_out_bias
        z = z + _mlp(m, layer, z)
    out = m.proj @ layer_norm(z[0], m.ln_final_weight, m.ln_final_bias, cfg.ln_eps)
    return out.astype(np.float32)


def random_model(
    rng: np.random.Generator,
    num_layers: int = 2,
    num_heads: int = 2,
    width: int = 8,
    output_dim: int = 4,
    patch_size: int = 2,
    grid: tuple[int, int] = (2, 2),
    ln_pre: bool = False,
    activation: str = "gelu_tanh",
    scale: float = 0.5,
) -> ViTModel:
    """Random toy model for tests and demos. Weights ~ N(0, scale^2 / fan_in)."""
    d = width
    hid = 4 * d
    cfg = ViTConfig(
        num_layers=num_layers,
        num_heads=num_heads,
        width=d,
        output_dim=output_dim,
        patch_size=patch_size,
        image_size=(grid[0] * patch_size, grid[1] * patch_size),
        mlp_hidden=hid,
        activation=activation,
    )

    def w(*shape, fan_in=None):
        fan = fan_in if fan_in is not None else shape[-1]
        return (rng.standard_normal(shape) * scale / np.sqrt(fan)).astype(np.float32)

    def ln():
        return (1.0 + 0.1 * rng.standard_normal(d)).astype(np.float32), (0.1 * rng.standard_normal(d)).astype(np.float32)

    layers = []
    for _ in range(num_layers):
        g1, b1 = ln()
        g2, b2 = ln()
        layers.append(
            LayerWeights(
                ln1_weight=g1, ln1_bias=b1,
                qkv_weight=w(3 * d, d), qkv_bias=w(3 * d, fan_in=d),
                attn_out_weight=w(d, d), attn_out_bias=w(d, fan_in=d),
                ln2_weight=g2, ln2_bias=b2,
                mlp_up_weight=w(hid, d), mlp_up_bias=w(hid, fan_in=d),
                mlp_down_weight=w(d, hid), mlp_down_bias=w(d, fan_in=hid),
            )
        )
    gf, bf = ln()
    gp, bp = ln() if ln_pre else (None, None)
    return ViTModel(
        config=cfg,
        patch_weight=w(d, 3 * patch_size * patch_size),
        patch_bias=w(d, fan_in=d),
        cls_token=(rng.standard_normal(d)).astype(np.float32),
        pos_embed=(0.5 * rng.standard_normal((cfg.num_patches + 1, d))).astype(np.float32),
        layers=tuple(layers),
        ln_final_weight=gf,
        ln_final_bias=bf,
        proj=w(output_dim, d),
        ln_pre_weight=gp,
        ln_pre_bias=bp,
    )


def random_image(rng: np.random.Generator, config: ViTConfig, image_id: str = "") -> ImageInput:
    return ImageInput(rng.standard_normal((3, *config.image_size)).astype(np.float32), image_id)
