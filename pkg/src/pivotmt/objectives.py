"""Training objectives and the greedy translation functions they rely on.

All losses are batch means of per-sentence sums of token NLLs.  Greedy
decodes run under ``no_grad`` and return plain token ids, so no gradient can
flow back through an argmax.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .transformer import BOS, MASK, pad_batch, sequence_nll
from .vse import DEFAULT_MARGIN, vse_loss

ABLATIONS = (
    "T", "T+V", "T+V+VSE", "T+V+CPT", "T+V+CBT", "T+V+VSE+CBT", "T+V+CPT+CBT", "T+V+VSE+CPT", "Full",
)


@dataclass
class LossWeights:
    mbt: float = 1.0
    vse: float = 1.0
    cbt: float = 1.0
    cpt: float = 1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {k} must be nonnegative")


@dataclass
class CptSchedule:
    """Linear decay of the CPT weight, constant once the end epoch is reached."""

    start: float = 1.0
    end: float = 0.1
    end_epoch: float = 10.0

    def __call__(self, epoch: float) -> float:
        if epoch <= 0:
            return self.start
        if epoch >= self.end_epoch:
            return self.end
        return self.start + (self.end - self.start) * epoch / self.end_epoch


@dataclass
class AblationFlags:
    """Which components a training configuration enables."""

    images: bool = True
    vse: bool = True
    cbt: bool = True
    cpt: bool = True

    @classmethod
    def parse(cls, name: str) -> "AblationFlags":
        """Turn a row label such as ``T+V+VSE`` or ``Full`` into flags."""
        key = name.strip()
        if key.lower() == "full":
            return cls(True, True, True, True)
        parts = [p.strip().upper() for p in key.split("+")]
        if not parts or parts[0] != "T":
            raise ConfigError(f"ablation {name!r} must start with T")
        known = {"V", "VSE", "CBT", "CPT"}
        bad = set(parts[1:]) - known
        if bad or len(set(parts[1:])) != len(parts[1:]):
            raise ConfigError(f"unknown or repeated ablation component in {name!r}")
        flags = cls("V" in parts, "VSE" in parts, "CBT" in parts, "CPT" in parts)
        if not flags.images and (flags.vse or flags.cbt or flags.cpt):
            raise ConfigError("VSE, CBT and CPT all require visual inputs (+V)")
        return flags

    def label(self) -> str:
        if self.images and self.vse and self.cbt and self.cpt:
            return "Full"
        parts = ["T"] + [n for n, on in (("V", self.images), ("VSE", self.vse), ("CPT", self.cpt), ("CBT", self.cbt)) if on]
        return "+".join(parts)


# -- translation primitives -------------------------------------------------

def greedy_translate(model, src: list, src_lang: str, images=None, lambda_v: float = 1.0,
                     max_len: int | None = None) -> tuple[list[list[int]], np.ndarray]:
    """Argmax translation into the other language; ``images=None`` uses the null object."""
    return model.translate(src, src_lang, images, lambda_v, max_len)


def encode_source(model, src: list, lang: str):
    """Encoder states of source token lists (EOS appended, so empty inputs stay valid)."""
    ids, mask = pad_batch(src, eos=True)
    return model.encoders[lang](ids, mask)


def translation_nll(model, src: list, src_lang: str, tgt: list, images=None, lambda_v: float = 1.0,
                    weights=None, use_images: bool = True) -> Tensor:
    """Teacher-forced NLL of ``tgt`` given ``src`` (and images) through src_lang -> other."""
    tgt_lang = model.other(src_lang)
    text = encode_source(model, src, src_lang)
    vis = None
    if use_images and lambda_v:
        vis = model.encode_images(images, len(src))
    return sequence_nll(model.decoders[tgt_lang], tgt, text, vis, lambda_v, weights)


def back_translation_term(model, sents: list, lang: str, images=None, lambda_v: float = 1.0,
                          use_images: bool = True, recon_images=None) -> Tensor:
    """``-log p(s | t*(s, z), z)`` where t* is the detached greedy translation of s.

    ``recon_images`` optionally replaces the images of the reconstruction
    pass (e.g. with null entries); the translation pass always sees ``images``.
    """
    imgs = images if use_images else None
    lam = lambda_v if use_images else 0.0
    pseudo, _ = greedy_translate(model, sents, lang, imgs, lam)
    recon = imgs if recon_images is None or not use_images else recon_images
    return translation_nll(model, pseudo, model.other(lang), sents, recon, lam, use_images=use_images)


# -- losses ---------------------------------------------------------------

def supervised_mt_loss(model, xs: list, ys: list, images=None, lambda_v: float = 1.0,
                       mode: str = "supervised", use_images: bool = True) -> Tensor:
    """Both-direction teacher-forced NLL on parallel pairs; only legal in supervised mode."""
    if mode != "supervised":
        raise ConfigError("the supervised MT loss needs parallel pairs and is disabled in unsupervised modes")
    if len(xs) != len(ys):
        raise ValueError("parallel batches differ in length")
    x, y = model.languages
    fwd = translation_nll(model, xs, x, ys, images, lambda_v, use_images=use_images)
    bwd = translation_nll(model, ys, y, xs, images, lambda_v, use_images=use_images)
    return fwd + bwd


def mbt_loss(model, xs: list, zx, ys: list, zy, lambda_v: float = 1.0, use_images: bool = True,
             recon: tuple | None = None) -> Tensor:
    """Multimodal back-translation: reconstruct each sentence from its detached translation."""
    x, y = model.languages
    rx, ry = recon or (None, None)
    return (back_translation_term(model, xs, x, zx, lambda_v, use_images, rx)
            + back_translation_term(model, ys, y, zy, lambda_v, use_images, ry))


def cbt_loss(model, pairs_zx: list, zx, pairs_zy: list, zy, lambda_v: float = 1.0,
             recon: tuple | None = None) -> Tensor:
    """Caption back-translation: four reconstruction terms over both pools and both languages."""
    x, y = model.languages
    total = None
    for pairs, imgs, rimgs in zip((pairs_zx, pairs_zy), (zx, zy), recon or (None, None)):
        cx = [list(p.caption_src) for p in pairs]
        cy = [list(p.caption_tgt) for p in pairs]
        term = (back_translation_term(model, cx, x, imgs, lambda_v, True, rimgs)
                + back_translation_term(model, cy, y, imgs, lambda_v, True, rimgs))
        total = term if total is None else total + term
    return total


def cpt_loss(model, pairs_zx: list, zx, pairs_zy: list, zy, lambda_v: float = 1.0,
             recon: tuple | None = None) -> Tensor:
    """Caption paired translation.

    Pool z_x contributes the x -> y NLL of c*_y given c*_x; pool z_y the
    y -> x NLL of c*_x given c*_y.
    """
    x, y = model.languages
    if recon is not None:
        zx, zy = (r if r is not None else z for r, z in zip(recon, (zx, zy)))
    fwd = translation_nll(model, [list(p.caption_src) for p in pairs_zx], x,
                          [list(p.caption_tgt) for p in pairs_zx], zx, lambda_v)
    bwd = translation_nll(model, [list(p.caption_tgt) for p in pairs_zy], y,
                          [list(p.caption_src) for p in pairs_zy], zy, lambda_v)
    return fwd + bwd


def vse_objective(model, xs: list, zx, ys: list, zy, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Contrastive alignment of each language's encoder with the shared visual encoder."""
    x, y = model.languages
    lx = vse_loss(encode_source(model, xs, x), model.visual(zx), margin)
    ly = vse_loss(encode_source(model, ys, y), model.visual(zy), margin)
    return lx + ly


@dataclass
class MassBatch:
    enc_ids: np.ndarray
    enc_mask: np.ndarray
    dec_in: np.ndarray
    dec_mask: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    spans: list = field(default_factory=list)


def mass_mask(sents: list, rng: np.random.Generator, fraction: float = 0.5, spans=None) -> MassBatch:
    """Contiguous-span masking.

    For a sentence of length L a span of ``round(fraction * L)`` tokens (at
    least one) starts uniformly at random.  The encoder sees MASK over the
    span.  The decoder input at position t is token t-1 when t-1 lies in the
    span, BOS at t = 0 and MASK elsewhere; only span positions are scored.
    """
    if not 0 < fraction <= 1:
        raise ValueError("span fraction must lie in (0, 1]")
    B = len(sents)
    T = max(len(s) for s in sents) + 1  # + EOS on the encoder side
    enc = np.zeros((B, T), dtype=np.int64)
    enc_mask = np.zeros((B, T), dtype=bool)
    dec_in = np.zeros((B, T - 1), dtype=np.int64)
    dec_mask = np.zeros((B, T - 1), dtype=bool)
    tgt = np.zeros((B, T - 1), dtype=np.int64)
    loss_mask = np.zeros((B, T - 1), dtype=bool)
    out_spans = []
    for b, s in enumerate(sents):
        L = len(s)
        if L < 1:
            raise ValueError("cannot mask an empty sentence")
        if spans is not None:
            start, m = spans[b]
        else:
            m = max(1, int(round(fraction * L)))
            start = int(rng.integers(0, L - m + 1))
        out_spans.append((start, m))
        toks = np.asarray(s, dtype=np.int64)
        in_span = np.zeros(L, dtype=bool)
        in_span[start:start + m] = True
        enc[b, :L] = np.where(in_span, MASK, toks)
        enc[b, L] = 2  # EOS
        enc_mask[b, : L + 1] = True
        for t in range(L):
            if t == 0:
                dec_in[b, t] = BOS
            elif in_span[t - 1]:
                dec_in[b, t] = toks[t - 1]
            else:
                dec_in[b, t] = MASK
        dec_mask[b, :L] = True
        tgt[b, :L] = toks
        loss_mask[b, :L] = in_span
    return MassBatch(enc, enc_mask, dec_in, dec_mask, tgt, loss_mask, out_spans)


def mass_pretrain_loss(model, sents: list, lang: str, rng: np.random.Generator | None = None,
                       fraction: float = 0.5, spans=None) -> Tensor:
    """Span-reconstruction NLL through ``encoders[lang]`` and ``decoders[lang]`` (batch mean)."""
    rng = rng or np.random.default_rng(0)
    mb = mass_mask(sents, rng, fraction, spans)
    text = model.encoders[lang](mb.enc_ids, mb.enc_mask)
    logits = model.decoders[lang](mb.dec_in, text, None, 0.0, mask=mb.dec_mask)
    w = mb.loss_mask / len(sents)
    return ad.cross_entropy(logits, mb.targets, w)


@dataclass
class Batch:
    """One language-balanced unsupervised mini-batch: monolingual sentences plus their own images."""

    xs: list
    zx: list
    ys: list
    zy: list


def total_loss(model, batch: Batch, weights: LossWeights, epoch: float, flags: AblationFlags,
               schedule: CptSchedule | None = None, captions=None, lambda_v: float = 1.0,
               margin: float = DEFAULT_MARGIN, image_dropout: float = 0.0,
               rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
    """Weighted sum of the enabled components plus their detached values for logging.

    ``captions`` is a callable ``(images, origin) -> list[CaptionPair]``.
    With ``image_dropout`` > 0 each sentence's image is swapped for the null
    object, independently with that probability, in the teacher-forced
    passes of MBT, CBT and CPT (greedy translations and VSE keep the image).
    """
    schedule = schedule or CptSchedule()
    x, y = model.languages
    parts: dict = {}
    logs: dict = {}
    lam = lambda_v if flags.images else 0.0
    recon = None
    if flags.images and image_dropout > 0:
        rng = rng or np.random.default_rng(0)
        recon = tuple([None if rng.random() < image_dropout else z for z in pool] for pool in (batch.zx, batch.zy))
    parts["mbt"] = (weights.mbt, lambda: mbt_loss(model, batch.xs, batch.zx, batch.ys, batch.zy, lam, flags.images, recon))
    if flags.vse:
        parts["vse"] = (weights.vse, lambda: vse_objective(model, batch.xs, batch.zx, batch.ys, batch.zy, margin))
    pairs = None
    if flags.cbt or flags.cpt:
        if captions is None:
            raise ConfigError("CBT/CPT need a caption source")
        pairs = (captions(batch.zx, x), captions(batch.zy, y))
    if flags.cbt:
        parts["cbt"] = (weights.cbt, lambda: cbt_loss(model, pairs[0], batch.zx, pairs[1], batch.zy, lam, recon))
    w_cpt = weights.cpt * schedule(epoch)
    logs["w_cpt"] = w_cpt
    if flags.cpt:
        parts["cpt"] = (w_cpt, lambda: cpt_loss(model, pairs[0], batch.zx, pairs[1], batch.zy, lam, recon))
    total = None
    for name, (w, fn) in parts.items():
        if w == 0:
            logs[name] = 0.0
            continue
        val = fn()
        logs[name] = float(val.data)
        term = ad.scale(val, w) if w != 1.0 else val
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros(()))
    logs["total"] = float(total.data)
    return total, logs
