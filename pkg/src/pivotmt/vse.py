"""Fine-grained multilingual visual-semantic embedding alignment.

Token/object cosine similarities drive two attention directions: each object
attends over tokens (visually-attended sentence embeddings) and each token
attends over objects (text-attended visual embeddings).  The image-sentence
similarity averages the cosines between attended and original vectors, and a
hinge loss with the hardest in-batch negatives pulls paired items together.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import EncodedSequence
from .autodiff import Tensor

DEFAULT_MARGIN = 0.1


def pairwise_similarity(text: EncodedSequence, visual: EncodedSequence) -> Tensor:
    """S(x_a, z_b) for every sentence a and image b: a (A, B) tensor."""
    H, tmask = text.states, text.mask          # (A, N, d), (A, N)
    Z, vmask = visual.states, visual.mask      # (B, K, d), (B, K)
    Hn = ad.l2_normalize(H, axis=-1, valid=tmask)
    Zn = ad.l2_normalize(Z, axis=-1, valid=vmask)
    # s[a, b, i, j] = cos(h_a,i , z_b,j)
    s = ad.matmul(ad.expand_dims(Hn, 1), ad.expand_dims(ad.swapaxes(Zn, 1, 2), 0))  # (A, B, N, K)

    tok_blocked = ~tmask[:, None, :, None]
    obj_blocked = ~vmask[None, :, None, :]
    # objects attend over tokens: softmax along i
    alpha_tok = ad.softmax(ad.masked_fill(s, tok_blocked, -np.inf), axis=2)
    alpha_tok = ad.masked_fill(alpha_tok, obj_blocked, 0.0)
    h_zx = ad.matmul(ad.swapaxes(alpha_tok, 2, 3), ad.expand_dims(H, 1))       # (A, B, K, d)
    # tokens attend over objects: softmax along j
    alpha_obj = ad.softmax(ad.masked_fill(s, obj_blocked, -np.inf), axis=3)
    alpha_obj = ad.masked_fill(alpha_obj, tok_blocked, 0.0)
    h_xz = ad.matmul(alpha_obj, ad.expand_dims(Z, 0))                          # (A, B, N, d)

    cos_obj = (ad.l2_normalize(h_zx, axis=-1, valid=np.broadcast_to(vmask[None], h_zx.shape[:3]))
               * ad.expand_dims(Zn, 0)).sum(axis=-1)                                   # (A, B, K)
    cos_tok = (ad.l2_normalize(h_xz, axis=-1, valid=np.broadcast_to(tmask[:, None], h_xz.shape[:3]))
               * ad.expand_dims(Hn, 1)).sum(axis=-1)                                   # (A, B, N)
    vm = vmask[None, :, :].astype(H.dtype)
    tm = tmask[:, None, :].astype(H.dtype)
    k_count = vmask.sum(axis=1).astype(H.dtype)[None, :]
    n_count = tmask.sum(axis=1).astype(H.dtype)[:, None]
    obj_term = (cos_obj * vm).sum(axis=-1) / (2.0 * k_count)
    tok_term = (cos_tok * tm).sum(axis=-1) / (2.0 * n_count)
    return obj_term + tok_term


def attended_embeddings(text: EncodedSequence, visual: EncodedSequence) -> tuple[Tensor, Tensor]:
    """For one sentence and one image: (h^{zx}: K x d, h^{xz}: N x d)."""
    if text.batch_size != 1 or visual.batch_size != 1:
        raise ValueError("attended_embeddings works on a single sentence/image pair")
    H = ad.getitem(text.states, (0, text.mask[0]))
    Z = ad.getitem(visual.states, (0, visual.mask[0]))
    s = ad.matmul(ad.l2_normalize(H), ad.swapaxes(ad.l2_normalize(Z), 0, 1))   # (N, K)
    h_zx = ad.matmul(ad.swapaxes(ad.softmax(s, axis=0), 0, 1), H)
    h_xz = ad.matmul(ad.softmax(s, axis=1), Z)
    return h_zx, h_xz


def image_sentence_similarity(text: EncodedSequence, visual: EncodedSequence) -> Tensor:
    """Scalar S(x, z) for a single sentence and image."""
    if text.batch_size != 1 or visual.batch_size != 1:
        raise ValueError("image_sentence_similarity works on a single pair; use pairwise_similarity")
    return ad.reshape(pairwise_similarity(text, visual), ())


def contrastive_loss(sim: Tensor, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Hinge loss with hardest in-batch negatives over a square similarity matrix.

    ``sim[a, b]`` scores sentence a against image b; the diagonal holds the
    positive pairs.  For pair a the loss is
    ``[m - S(a,a) + max_{a'!=a} S(a',a)]_+ + [m - S(a,a) + max_{b!=a} S(a,b)]_+``
    and the batch loss is the mean over pairs.
    """
    if margin <= 0:
        raise ValueError("margin must be positive")
    n = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != n:
        raise ad.ShapeError(f"similarity matrix must be square, got {sim.shape}")
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 pairs")
    eye = np.eye(n, dtype=bool)
    pos = ad.getitem(sim, (np.arange(n), np.arange(n)))
    off = ad.masked_fill(sim, eye, -np.inf)
    hardest_sentence = ad.max_(off, axis=0)   # negatives x~ for image a (column a)
    hardest_image = ad.max_(off, axis=1)      # negatives z~ for sentence a (row a)
    cost_s = ad.relu(margin - pos + hardest_sentence)
    cost_i = ad.relu(margin - pos + hardest_image)
    return ad.mean(cost_s + cost_i)


def vse_loss(text: EncodedSequence, visual: EncodedSequence, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Contrastive loss of one language's (sentence, image) batch."""
    return contrastive_loss(pairwise_similarity(text, visual), margin)
