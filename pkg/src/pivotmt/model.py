"""The full parameter set: two translators, two captioners, one shared visual encoder."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import EncodedSequence
from .captioning import Captioner
from .nn import Module, init_param
from .transformer import Decoder, Encoder, TransformerConfig, greedy_decode, pad_batch
from .visual import ImageObjects, VisualEncoder


class PivotModel(Module):
    """Parameters of both translation directions and both captioners.

    Every language owns one embedding table shared by its encoder, its
    translation decoder and the tied output projection.  Translating x -> y
    runs ``encoders[x]`` then ``decoders[y]``.  Captioners keep their own
    embeddings and a private copy of the visual encoder (``caption_visual``)
    so that freezing them leaves the captioning pathway untouched while the
    translators' shared ``visual`` encoder keeps learning.
    """

    def __init__(self, cfg: TransformerConfig, languages: tuple, vocab_sizes: dict, feature_dim: int,
                 seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.languages = tuple(languages)
        self.feature_dim = feature_dim
        rng = np.random.default_rng(seed)
        self._rng = rng  # also drives dropout
        d = cfg.model_dim
        self.embed = {l: init_param(rng, (vocab_sizes[l], d), d ** -0.5, dtype) for l in self.languages}
        self.encoders = {l: Encoder(cfg, self.embed[l], rng, dtype, tag=l) for l in self.languages}
        self.decoders = {l: Decoder(cfg, self.embed[l], rng, dtype) for l in self.languages}
        self.visual = VisualEncoder(feature_dim, d, rng, dtype)
        self.caption_embed = {l: init_param(rng, (vocab_sizes[l], d), d ** -0.5, dtype) for l in self.languages}
        self.captioners = {l: Captioner(cfg, self.caption_embed[l], rng, dtype, l) for l in self.languages}
        self.caption_visual = VisualEncoder(feature_dim, d, rng, dtype)

    def other(self, lang: str) -> str:
        x, y = self.languages
        if lang not in self.languages:
            raise KeyError(lang)
        return y if lang == x else x

    def translator_modules(self) -> list[Module]:
        return [*self.encoders.values(), *self.decoders.values(), self.visual]

    def captioner_modules(self) -> list[Module]:
        return [*self.captioners.values(), self.caption_visual]

    def translator_parameters(self):
        seen, out = set(), []
        for m in self.translator_modules():
            for p in m.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def captioner_parameters(self):
        seen, out = set(), []
        for m in self.captioner_modules():
            for p in m.parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def freeze_captioners(self) -> None:
        for m in self.captioner_modules():
            m.freeze()

    def init_visual_from_captioner(self) -> None:
        """Start the shared visual encoder from the pre-trained captioning encoder."""
        for (_, dst), (_, src) in zip(self.visual.named_parameters(), self.caption_visual.named_parameters()):
            dst.data[...] = src.data

    def encode_images(self, images: list[ImageObjects] | None, batch_size: int) -> EncodedSequence:
        """Visual context, falling back to the null object when images are withheld."""
        if images is None:
            return self.visual.null(batch_size)
        return self.visual(images)

    def translate(self, src: list, src_lang: str, images: list[ImageObjects] | None = None,
                  lambda_v: float = 1.0, max_len: int | None = None) -> tuple[list[list[int]], np.ndarray]:
        """Greedy translation of token-id lists from ``src_lang`` into the other language."""
        tgt = self.other(src_lang)
        with ad.no_grad():
            enc = self.encoders[src_lang]
            dec = self.decoders[tgt]
            was = enc.training, self.visual.training
            enc.eval()
            self.visual.eval()
            try:
                ids, mask = pad_batch(src, eos=True)
                text = enc(ids, mask)
                vis = self.encode_images(images, len(src)) if lambda_v else None
                limit = max_len or max(4, int(np.ceil(1.5 * max(len(s) for s in src))) + 2)
                return greedy_decode(dec, len(src), text, vis, lambda_v, limit)
            finally:
                enc.train(was[0])
                self.visual.train(was[1])
