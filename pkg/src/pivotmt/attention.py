"""Multi-head scaled dot-product attention and the encoded-sequence container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, init_param


class AttentionError(ValueError):
    """A query has no valid key to attend to."""


@dataclass
class EncodedSequence:
    """Contextual embeddings ``states`` of shape (B, T, d).

    ``mask`` is a boolean (B, T) array, True at real (non-padding) positions.
    ``tag`` names the language or modality that produced the states.
    """

    states: Tensor
    mask: np.ndarray
    tag: str = ""

    @property
    def batch_size(self) -> int:
        return self.states.shape[0]

    def select(self, rows) -> "EncodedSequence":
        rows = np.asarray(rows)
        return EncodedSequence(ad.getitem(self.states, rows), self.mask[rows], self.tag)


def causal_mask(t: int) -> np.ndarray:
    """Boolean (t, t) array, True where query i may NOT see key j (j > i)."""
    return np.triu(np.ones((t, t), dtype=bool), k=1)


class MultiHeadAttention(Module):
    """Bias-free multi-head attention: softmax(Q K^T / sqrt(d_head)) V, then W_o."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        if d % heads:
            raise ValueError(f"model_dim {d} not divisible by heads {heads}")
        self.heads = heads
        std = (1.0 / d) ** 0.5
        self.wq = init_param(rng, (d, d), std, dtype)
        self.wk = init_param(rng, (d, d), std, dtype)
        self.wv = init_param(rng, (d, d), std, dtype)
        self.wo = init_param(rng, (d, d), std, dtype)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, ctx: Tensor, key_mask: np.ndarray | None = None,
                 causal: bool = False, keep_weights: bool = False) -> Tensor:
        B, Tq, d = x.shape
        if ctx.shape[0] != B or ctx.shape[2] != d:
            raise ad.ShapeError(f"attention context {ctx.shape} incompatible with queries {x.shape}")
        Tk = ctx.shape[1]
        H = self.heads
        dh = d // H
        q = ad.transpose(ad.reshape(ad.matmul(x, self.wq), (B, Tq, H, dh)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(ad.matmul(ctx, self.wk), (B, Tk, H, dh)), (0, 2, 3, 1))
        v = ad.transpose(ad.reshape(ad.matmul(ctx, self.wv), (B, Tk, H, dh)), (0, 2, 1, 3))
        scores = ad.scale(ad.matmul(q, k), 1.0 / np.sqrt(dh))

        blocked = None
        if key_mask is not None:
            blocked = ~np.asarray(key_mask, dtype=bool)[:, None, None, :]
        if causal:
            cm = causal_mask(Tq)[None, None]
            blocked = cm if blocked is None else (blocked | cm)
        if blocked is not None:
            full = np.broadcast_to(blocked, (B, 1, Tq, Tk))
            if full.all(axis=-1).any():
                raise AttentionError("empty key set after masking")
            scores = ad.masked_fill(scores, blocked, -np.inf)
        att = ad.softmax(scores, axis=-1)
        if keep_weights:
            self.last_weights = att.data
        out = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, Tq, d))
        return ad.matmul(out, self.wo)
