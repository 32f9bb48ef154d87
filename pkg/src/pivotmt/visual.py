"""Shared visual encoder over object features and multimodal decoder context."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .attention import EncodedSequence, MultiHeadAttention
from .autodiff import Tensor
from .nn import Module, init_param, zeros_param

K_MAX = 36


@dataclass
class ImageObjects:
    """K detected objects of one image: features (K, F) and boxes (K, 4).

    Boxes are normalized (x1, y1, x2, y2) corner coordinates.
    """

    image_id: str
    features: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        k = self.features.shape[0]
        if self.features.ndim != 2 or k < 1 or k > K_MAX:
            raise ValueError(f"image {self.image_id}: need 1..{K_MAX} object features, got {self.features.shape}")
        if self.boxes.shape[0] != k:
            raise ValueError(f"image {self.image_id}: {k} features but {self.boxes.shape[0]} boxes")
        b = self.boxes
        if (b < 0).any() or (b > 1).any() or (b[:, 0] > b[:, 2]).any() or (b[:, 1] > b[:, 3]).any():
            raise ValueError(f"image {self.image_id}: boxes must satisfy 0<=x1<=x2<=1, 0<=y1<=y2<=1")

    @property
    def num_objects(self) -> int:
        return self.features.shape[0]

    def to_record(self) -> dict:
        return {
            "id": self.image_id,
            "objects": [
                {"feat": [float(v) for v in f], "bbox": [float(v) for v in b]}
                for f, b in zip(self.features, self.boxes)
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ImageObjects":
        objs = rec["objects"]
        if not objs:
            raise ValueError(f"image {rec.get('id')}: no objects")
        return cls(str(rec["id"]), [o["feat"] for o in objs], [o["bbox"] for o in objs])


def save_features(path: str | Path, images: Iterable[ImageObjects]) -> None:
    """Write one JSON record per line: {id, objects: [{feat, bbox}]}."""
    with open(path, "w", encoding="utf-8") as fh:
        for img in images:
            fh.write(json.dumps(img.to_record(), separators=(",", ":")) + "\n")


def load_features(path: str | Path, feature_dim: int | None = None) -> dict[str, ImageObjects]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            img = ImageObjects.from_record(json.loads(line))
            if feature_dim is not None and img.features.shape[1] != feature_dim:
                raise ad.ShapeError(f"{path}:{lineno}: feature dim {img.features.shape[1]} != {feature_dim}")
            out[img.image_id] = img
    return out


class VisualEncoder(Module):
    """Single linear layer over object features plus a linear box embedding.

    Also owns the learned null object used when no image is available.  The
    null object starts at zero; with bias-free attention projections a zero
    visual state contributes exactly nothing to the decoder context.
    """

    def __init__(self, feature_dim: int, d: int, rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        self.feature_dim = feature_dim
        self.proj = init_param(rng, (feature_dim, d), (1.0 / feature_dim) ** 0.5, dtype)
        self.proj_bias = zeros_param((d,), dtype) if bias else None
        self.box_proj = init_param(rng, (4, d), 0.5, dtype)
        self.null_object = zeros_param((1, d), dtype)

    @property
    def dim(self) -> int:
        return self.proj.shape[1]

    def __call__(self, images: list[ImageObjects | None]) -> EncodedSequence:
        """Encode a batch of images; ``None`` entries get the null object instead."""
        if not images:
            raise ValueError("encode_visual needs at least one image")
        dtype = self.proj.dtype
        real = [img for img in images if img is not None]
        K = max([img.num_objects for img in real], default=1)
        feats = np.zeros((len(images), K, self.feature_dim), dtype=dtype)
        boxes = np.zeros((len(images), K, 4), dtype=dtype)
        mask = np.zeros((len(images), K), dtype=bool)
        missing = np.zeros(len(images), dtype=bool)
        for i, img in enumerate(images):
            if img is None:
                missing[i] = True
                mask[i, 0] = True
                continue
            if img.features.shape[1] != self.feature_dim:
                raise ad.ShapeError(f"feature dim {img.features.shape[1]} != {self.feature_dim}")
            k = img.num_objects
            feats[i, :k] = img.features
            boxes[i, :k] = img.boxes
            mask[i, :k] = True
        h = ad.matmul(Tensor(feats), self.proj)
        if self.proj_bias is not None:
            h = h + self.proj_bias
        h = h + ad.matmul(Tensor(boxes), self.box_proj)
        if missing.any():
            slot = np.zeros((len(images), K, 1), dtype=dtype)
            slot[missing, 0] = 1.0
            keep = (~missing)[:, None, None].astype(dtype)
            h = h * keep + ad.matmul(Tensor(slot), self.null_object)
        return EncodedSequence(h, mask, "image" if not missing.any() else "image+null")

    def null(self, batch_size: int) -> EncodedSequence:
        """Visual context made of the single null object, for image-free inference."""
        states = ad.matmul(Tensor(np.ones((batch_size, 1, 1), dtype=self.null_object.dtype)), self.null_object)
        return EncodedSequence(states, np.ones((batch_size, 1), dtype=bool), "null")


def encode_visual(encoder: VisualEncoder, images: list[ImageObjects] | ImageObjects) -> EncodedSequence:
    if isinstance(images, ImageObjects):
        images = [images]
    return encoder(images)


def multimodal_context(query: Tensor, text: EncodedSequence | None, visual: EncodedSequence | None,
                       lambda_v: float, text_attn: MultiHeadAttention | None,
                       visual_attn: MultiHeadAttention | None) -> Tensor | None:
    """``Attn(q, h^x) + lambda_v * Attn(q, h^z)``, summed after each output projection.

    A missing context (or ``lambda_v == 0`` for the visual term) drops that
    term entirely, so a decoder with ``lambda_v == 0`` is exactly text-only.
    ``lambda_v`` may be a scalar tensor when its gradient is wanted.
    """
    lam = float(lambda_v.data) if isinstance(lambda_v, Tensor) else float(lambda_v)
    if lam < 0:
        raise ValueError("lambda_v must be nonnegative")
    ctx = None
    if text is not None and text_attn is not None:
        ctx = text_attn(query, text.states, key_mask=text.mask)
    if visual is not None and visual_attn is not None and (lam != 0 or isinstance(lambda_v, Tensor)):
        vis = visual_attn(query, visual.states, key_mask=visual.mask)
        if isinstance(lambda_v, Tensor):
            vis = vis * lambda_v
        elif lam != 1.0:
            vis = ad.scale(vis, lam)
        ctx = vis if ctx is None else ctx + vis
    return ctx
