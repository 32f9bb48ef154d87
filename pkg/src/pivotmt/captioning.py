"""Image-to-text captioners and image-pivoted pseudo sentence pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module
from .transformer import Decoder, TransformerConfig, greedy_decode, sequence_nll
from .visual import ImageObjects, VisualEncoder


@dataclass(frozen=True)
class CaptionPair:
    """Captions of one image in both languages.

    ``origin`` names the language whose image pool the image came from.
    Pairs are synthetic and never serve as evaluation references.
    """

    image_id: str
    caption_src: tuple
    caption_tgt: tuple
    origin: str
    truncated: tuple = (False, False)
    synthetic: bool = True


class Captioner(Module):
    """Decoder with visual cross-attention only; output tied to its own embedding."""

    def __init__(self, cfg: TransformerConfig, embed: Tensor, rng, dtype=np.float64, lang: str = ""):
        self.lang = lang
        self.embed = embed
        self.decoder = Decoder(cfg, embed, rng, dtype, text_cross=False, visual_cross=True)
        self.max_len = cfg.max_len

    def set_max_len_from(self, captions) -> int:
        """Bound decoding at 1.5 times the longest training caption."""
        self.max_len = int(math.ceil(1.5 * max(len(c) for c in captions)))
        return self.max_len


def caption_loss(captioner: Captioner, visual_encoder: VisualEncoder, images: list[ImageObjects],
                 gold: list, weights=None) -> Tensor:
    """Teacher-forced NLL of gold captions given the encoded images (batch mean by default)."""
    if any(len(g) == 0 for g in gold):
        raise ValueError("gold captions must be non-empty")
    if len(images) != len(gold):
        raise ValueError("one gold caption per image")
    vis = visual_encoder(images)
    return sequence_nll(captioner.decoder, gold, None, vis, 1.0, weights)


def greedy_caption(captioner: Captioner, visual_encoder: VisualEncoder, images: list[ImageObjects] | ImageObjects,
                   max_len: int | None = None) -> tuple[list[list[int]], np.ndarray]:
    """Argmax captions (token ids without BOS/EOS) plus truncation flags."""
    if isinstance(images, ImageObjects):
        images = [images]
    with ad.no_grad():
        vis = visual_encoder(images)
        return greedy_decode(captioner.decoder, len(images), None, vis, 1.0, max_len or captioner.max_len)


def synthesize_pairs(captioners: dict, visual_encoder: VisualEncoder, images: list[ImageObjects],
                     origin: str, languages: tuple) -> list[CaptionPair]:
    """Caption every image in both languages without recording gradients."""
    x, y = languages
    with ad.no_grad():
        cx, tx = greedy_caption(captioners[x], visual_encoder, images)
        cy, ty = greedy_caption(captioners[y], visual_encoder, images)
    return [CaptionPair(img.image_id, tuple(a), tuple(b), origin, (bool(fa), bool(fb)))
            for img, a, b, fa, fb in zip(images, cx, cy, tx, ty)]


class CaptionCache:
    """Memo of pairs per image id; valid because frozen captioners are deterministic."""

    def __init__(self, captioners: dict, visual_encoder: VisualEncoder, languages: tuple):
        self.captioners = captioners
        self.visual_encoder = visual_encoder
        self.languages = languages
        self._pairs: dict = {}

    def __len__(self) -> int:
        return len(self._pairs)

    def get(self, images: list[ImageObjects], origin: str) -> list[CaptionPair]:
        todo = [img for img in images if (img.image_id, origin) not in self._pairs]
        if todo:
            for p in synthesize_pairs(self.captioners, self.visual_encoder, todo, origin, self.languages):
                self._pairs[(p.image_id, origin)] = p
        return [self._pairs[(img.image_id, origin)] for img in images]


def dump_pairs_tsv(path: str | Path, pairs: list[CaptionPair], vocabs: dict | None = None,
                   languages: tuple | None = None) -> None:
    """Write ``image_id<TAB>caption_src<TAB>caption_tgt`` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            if vocabs is not None and languages is not None:
                src = " ".join(vocabs[languages[0]].decode(p.caption_src))
                tgt = " ".join(vocabs[languages[1]].decode(p.caption_tgt))
            else:
                src = " ".join(map(str, p.caption_src))
                tgt = " ".join(map(str, p.caption_tgt))
            fh.write(f"{p.image_id}\t{src}\t{tgt}\n")
