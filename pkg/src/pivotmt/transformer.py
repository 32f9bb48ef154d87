"""Pre-layer-norm Transformer encoder and decoder stacks."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .attention import EncodedSequence, MultiHeadAttention
from .autodiff import Tensor
from .nn import Dropout, LayerNorm, Linear, Module
from .visual import multimodal_context

PAD, BOS, EOS, MASK, UNK = 0, 1, 2, 3, 4


class SequenceTooLong(ValueError):
    pass


@dataclass
class TransformerConfig:
    """Stack hyper-parameters.

    Defaults are desk scale; :meth:`full_scale` returns the large-scale
    configuration (6 layers, 8 heads, 1024 hidden units, 4096 FFN filter).
    """

    layers: int = 2
    heads: int = 4
    model_dim: int = 64
    ffn_dim: int = 256
    max_len: int = 32
    dropout: float = 0.1
    vocab_sizes: dict = field(default_factory=dict)
    overlength: str = "error"

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} must be divisible by heads {self.heads}")
        if self.overlength not in ("error", "truncate"):
            raise ValueError(f"unknown overlength policy {self.overlength!r}")

    @classmethod
    def full_scale(cls, **kw) -> "TransformerConfig":
        return cls(layers=6, heads=8, model_dim=1024, ffn_dim=4096, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=16)
def _sinusoid(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def positional_encoding(length: int, d: int, dtype=np.float64) -> np.ndarray:
    return _sinusoid(max(length, 64), d)[:length].astype(dtype)


def pad_batch(seqs, bos: bool = False, eos: bool = False, pad: int = PAD):
    """Pack token lists into an int array (B, T) and a validity mask."""
    seqs = [([BOS] if bos else []) + list(s) + ([EOS] if eos else []) for s in seqs]
    T = max(1, max(len(s) for s in seqs))
    ids = np.full((len(seqs), T), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _check_length(ids: np.ndarray, mask: np.ndarray, cfg: TransformerConfig):
    if ids.shape[1] <= cfg.max_len:
        return ids, mask
    if cfg.overlength == "error":
        raise SequenceTooLong(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    return ids[:, : cfg.max_len], mask[:, : cfg.max_len]


class FeedForward(Module):
    def __init__(self, d: int, ffn: int, rng, dtype):
        self.inner = Linear(d, ffn, rng, dtype=dtype)
        self.outer = Linear(ffn, d, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ad.relu(self.inner(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: TransformerConfig, rng, dtype):
        d = cfg.model_dim
        self.norm_attn = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, cfg.heads, rng, dtype)
        self.norm_ffn = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng, dtype)
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.norm_attn(x)
        x = x + self.drop(self.attn(h, h, key_mask=mask))
        return x + self.drop(self.ffn(self.norm_ffn(x)))


class Encoder(Module):
    """Token embedding + sinusoidal positions, then self-attention blocks."""

    def __init__(self, cfg: TransformerConfig, embed: Tensor, rng, dtype=np.float64, tag: str = ""):
        self.cfg = cfg
        self.embed = embed
        self.tag = tag
        self.layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.model_dim, dtype)
        self.drop = Dropout(cfg.dropout, rng)

    def embed_tokens(self, ids: np.ndarray) -> Tensor:
        d = self.cfg.model_dim
        x = ad.scale(ad.embedding(self.embed, ids), np.sqrt(d))
        return x + positional_encoding(ids.shape[1], d, self.embed.dtype)

    def __call__(self, ids: np.ndarray, mask: np.ndarray | None = None) -> EncodedSequence:
        ids = np.asarray(ids)
        if mask is None:
            mask = ids != PAD
        ids, mask = _check_length(ids, mask, self.cfg)
        x = self.drop(self.embed_tokens(ids))
        for layer in self.layers:
            x = layer(x, mask)
        return EncodedSequence(self.norm(x), mask, self.tag)


class DecoderLayer(Module):
    """Causal self-attention, then text and/or visual cross-attention, then FFN."""

    def __init__(self, cfg: TransformerConfig, rng, dtype, text_cross: bool = True, visual_cross: bool = True):
        d = cfg.model_dim
        self.norm_self = LayerNorm(d, dtype)
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng, dtype)
        self.norm_cross = LayerNorm(d, dtype)
        self.text_attn = MultiHeadAttention(d, cfg.heads, rng, dtype) if text_cross else None
        self.visual_attn = MultiHeadAttention(d, cfg.heads, rng, dtype) if visual_cross else None
        self.norm_ffn = LayerNorm(d, dtype)
        self.ffn = FeedForward(d, cfg.ffn_dim, rng, dtype)
        self.drop = Dropout(cfg.dropout, rng)

    def __call__(self, x: Tensor, mask: np.ndarray, text: EncodedSequence | None,
                 visual: EncodedSequence | None, lambda_v: float) -> Tensor:
        h = self.norm_self(x)
        x = x + self.drop(self.self_attn(h, h, key_mask=mask, causal=True))
        h = self.norm_cross(x)
        ctx = multimodal_context(h, text, visual, lambda_v, self.text_attn, self.visual_attn)
        if ctx is not None:
            x = x + self.drop(ctx)
        return x + self.drop(self.ffn(self.norm_ffn(x)))


class Decoder(Module):
    """Autoregressive decoder with output projection tied to the embedding."""

    def __init__(self, cfg: TransformerConfig, embed: Tensor, rng, dtype=np.float64,
                 text_cross: bool = True, visual_cross: bool = True):
        self.cfg = cfg
        self.embed = embed
        self.text_cross = text_cross
        self.visual_cross = visual_cross
        self.layers = [DecoderLayer(cfg, rng, dtype, text_cross, visual_cross) for _ in range(cfg.layers)]
        self.norm = LayerNorm(cfg.model_dim, dtype)
        self.drop = Dropout(cfg.dropout, rng)

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    def __call__(self, prev_ids: np.ndarray, text: EncodedSequence | None = None,
                 visual: EncodedSequence | None = None, lambda_v: float = 1.0,
                 mask: np.ndarray | None = None) -> Tensor:
        """Logits (B, T, V) for every position of the shifted target ``prev_ids``."""
        prev_ids = np.asarray(prev_ids)
        if mask is None:
            mask = np.ones(prev_ids.shape, dtype=bool)
        prev_ids, mask = _check_length(prev_ids, mask, self.cfg)
        d = self.cfg.model_dim
        for ctx in (text, visual):
            if ctx is not None and ctx.states.shape[-1] != d:
                raise ad.ShapeError(f"context dim {ctx.states.shape[-1]} != model_dim {d}")
        x = ad.scale(ad.embedding(self.embed, prev_ids), np.sqrt(d))
        x = self.drop(x + positional_encoding(prev_ids.shape[1], d, self.embed.dtype))
        for layer in self.layers:
            x = layer(x, mask, text, visual, lambda_v)
        x = self.norm(x)
        return ad.matmul(x, ad.swapaxes(self.embed, 0, 1))

    def decode_step(self, prefix: np.ndarray, text: EncodedSequence | None = None,
                    visual: EncodedSequence | None = None, lambda_v: float = 1.0) -> Tensor:
        """Next-token logits (B, V) given BOS-initial prefixes (B, T)."""
        prefix = np.asarray(prefix)
        if prefix.ndim == 1:
            prefix = prefix[None]
        if prefix.shape[1] == 0 or not (prefix[:, 0] == BOS).all():
            raise ValueError("decoder prefix must be non-empty and start with BOS")
        logits = self(prefix, text, visual, lambda_v)
        return ad.getitem(logits, (slice(None), -1))


def sequence_nll(decoder: Decoder, targets, text: EncodedSequence | None = None,
                 visual: EncodedSequence | None = None, lambda_v: float = 1.0,
                 weights=None) -> Tensor:
    """Teacher-forced negative log-likelihood of ``targets`` (+EOS).

    Returns the weighted sum of per-sentence NLLs; ``weights`` defaults to
    ``1/B`` for each sentence so the result is the batch mean.
    """
    prev, mask = pad_batch(targets, bos=True)
    gold, _ = pad_batch(targets, eos=True)
    B = len(targets)
    w = np.full(B, 1.0 / B) if weights is None else np.asarray(weights, dtype=np.float64)
    logits = decoder(prev, text, visual, lambda_v, mask=mask)
    return ad.cross_entropy(logits, gold, mask * w[:, None])


def greedy_decode(decoder: Decoder, batch_size: int, text: EncodedSequence | None = None,
                  visual: EncodedSequence | None = None, lambda_v: float = 1.0,
                  max_len: int = 16) -> tuple[list[list[int]], np.ndarray]:
    """Argmax decoding from BOS until EOS or ``max_len`` tokens.

    Returns the token lists (without BOS/EOS) and a boolean array flagging
    sequences truncated at ``max_len`` without emitting EOS.  Padding, BOS and
    MASK tokens are never emitted.  ``max_len`` is capped so the longest
    prefix (BOS plus the tokens) fits the decoder's position table.
    """
    max_len = min(max_len, decoder.cfg.max_len - 1)
    banned = [PAD, BOS, MASK]
    prefix = np.full((batch_size, 1), BOS, dtype=np.int64)
    done = np.zeros(batch_size, dtype=bool)
    out = [[] for _ in range(batch_size)]
    was_training = decoder.training
    decoder.eval()
    try:
        with ad.no_grad():
            for step in range(max_len + 1):
                logits = decoder.decode_step(prefix, text, visual, lambda_v).data.copy()
                logits[:, banned] = -np.inf
                nxt = logits.argmax(axis=-1)
                for b in np.flatnonzero(~done):
                    if nxt[b] == EOS:
                        done[b] = True
                    elif step < max_len:
                        out[b].append(int(nxt[b]))
                if done.all() or step == max_len:
                    break
                prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    finally:
        decoder.train(was_training)
    truncated = ~done
    return out, truncated
