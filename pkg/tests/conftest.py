import numpy as np
import pytest
from hypothesis import settings

from pivotmt.model import PivotModel
from pivotmt.transformer import TransformerConfig
from pivotmt.visual import ImageObjects

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

VOCAB = 12
FEAT = 5


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> TransformerConfig:
    base = dict(layers=1, heads=2, model_dim=8, ffn_dim=8, max_len=16, dropout=0.0)
    base.update(kw)
    return TransformerConfig(**base)


def tiny_model(seed: int = 0, vocab: int = VOCAB, **kw) -> PivotModel:
    cfg = tiny_config(**kw, vocab_sizes={"en": vocab, "fr": vocab})
    return PivotModel(cfg, ("en", "fr"), cfg.vocab_sizes, FEAT, seed=seed)


def random_images(rng, n: int, k_range=(1, 4), feat: int = FEAT, prefix: str = "im") -> list:
    out = []
    for i in range(n):
        k = int(rng.integers(k_range[0], k_range[1] + 1))
        lo = rng.uniform(0, 0.5, size=(k, 2))
        hi = lo + rng.uniform(0, 0.5, size=(k, 2))
        out.append(ImageObjects(f"{prefix}{i}", rng.normal(size=(k, feat)), np.concatenate([lo, hi], axis=1)))
    return out


def random_sentences(rng, n: int, vocab: int = VOCAB, lengths=(1, 5)) -> list:
    # ids 5.. are ordinary tokens; 0..4 are specials
    return [list(rng.integers(5, vocab, size=int(rng.integers(lengths[0], lengths[1] + 1)))) for _ in range(n)]


@pytest.fixture
def model():
    return tiny_model()
