"""Language-disjoint split manifests.

Each language receives its own half of the training and validation images.
With a nonzero overlap ratio r, each language additionally sees a fraction r
of the other half's images (real pivoting); sentences still come without any
cross-language pairing.  A supervised manifest instead pairs every training
image with both languages.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import AccessViolation, ConfigError

log = logging.getLogger(__name__)

MODES = ("unsupervised", "real-pivot", "supervised")
PHASES = ("train", "select", "eval")
STANDARD_OVERLAPS = (0.0, 0.5, 1.0)


@dataclass
class SplitManifest:
    mode: str
    languages: tuple
    train: dict
    valid: dict
    test: list
    overlap: float = 0.0
    low_resource: int | None = None
    seed: int = 0
    audit_log: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.languages = tuple(self.languages)
        self.validate()

    def validate(self) -> None:
        """Check the disjointness contract of the manifest's mode."""
        if self.mode not in MODES:
            raise ConfigError(f"unknown split mode {self.mode!r}")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap ratio must lie in [0, 1], got {self.overlap}")
        if self.mode == "unsupervised" and self.overlap > 0:
            raise ConfigError("image overlap is not allowed in strict unsupervised mode; use real-pivot")
        x, y = self.languages
        test = set(self.test)
        for part in ("train", "valid"):
            table = getattr(self, part)
            if set(table) != set(self.languages):
                raise ConfigError(f"{part} split must list both languages")
            for lang in self.languages:
                ids = table[lang]
                if len(set(ids)) != len(ids):
                    raise ConfigError(f"{part}/{lang} lists an image twice")
                if test & set(ids):
                    raise ConfigError(f"{part}/{lang} overlaps the test split")
        for lang in self.languages:
            if set(self.train[lang]) & set(self.valid[lang]):
                raise ConfigError(f"train and valid overlap for {lang}")
        if self.mode != "supervised":
            if set(self.valid[x]) & set(self.valid[y]):
                raise ConfigError("validation images must be disjoint across languages")
            shared = set(self.train[x]) & set(self.train[y])
            if self.mode == "unsupervised" and shared:
                raise ConfigError(f"{len(shared)} training images shared across languages in unsupervised mode")
        elif set(self.train[x]) != set(self.train[y]):
            raise ConfigError("supervised manifest must pair every training image in both languages")

    def access(self, split: str, lang: str | None = None, phase: str = "train") -> list[str]:
        """Image ids of ``split`` (for ``lang``), recording the read in the audit log.

        Test ids are refused during the train and select phases.
        """
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        if split == "test" and phase != "eval":
            raise AccessViolation(f"phase {phase!r} may not read the test split")
        self.audit_log.append((phase, split, lang))
        if split == "test":
            return list(self.test)
        table = getattr(self, split)
        if lang is None:
            raise ValueError("train/valid access needs a language")
        return list(table[lang])

    def shared_train_images(self) -> set:
        x, y = self.languages
        return set(self.train[x]) & set(self.train[y])

    def to_dict(self) -> dict:
        return {"mode": self.mode, "languages": list(self.languages), "overlap": self.overlap,
                "low_resource": self.low_resource, "seed": self.seed,
                "train": self.train, "valid": self.valid, "test": self.test}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True), encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(d["mode"], tuple(d["languages"]), {k: list(v) for k, v in d["train"].items()},
                   {k: list(v) for k, v in d["valid"].items()}, list(d["test"]),
                   float(d.get("overlap", 0.0)), d.get("low_resource"), int(d.get("seed", 0)))

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _halves(ids: list[str], rng: np.random.Generator) -> tuple[list[str], list[str]]:
    order = [ids[i] for i in rng.permutation(len(ids))]
    h = len(order) // 2
    return order[:h], order[h:]


def make_splits(image_ids: dict, languages=("en", "fr"), mode: str = "unsupervised", overlap: float = 0.0,
                low_resource: int | None = None, seed: int = 0) -> SplitManifest:
    """Build a manifest from per-split image id lists ``{"train": [...], "valid": [...], "test": [...]}``.

    ``low_resource`` caps every language's training list at n images.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown split mode {mode!r}")
    if mode == "unsupervised" and overlap > 0:
        raise ConfigError("image overlap is not allowed in strict unsupervised mode; use real-pivot")
    if mode == "real-pivot" and overlap not in STANDARD_OVERLAPS:
        warnings.warn(f"overlap ratio {overlap} is outside the standard grid {STANDARD_OVERLAPS}; using it as a generic ratio")
    x, y = languages
    rng = np.random.default_rng(seed)
    train_ids, valid_ids = list(image_ids["train"]), list(image_ids["valid"])
    if mode == "supervised":
        train = {x: list(train_ids), y: list(train_ids)}
    else:
        a, b = _halves(train_ids, rng)
        take_b = int(round(overlap * len(b)))
        take_a = int(round(overlap * len(a)))
        train = {x: a + b[:take_b], y: b + a[:take_a]}
    va, vb = _halves(valid_ids, rng)
    valid = {x: va, y: vb}
    if low_resource is not None:
        if low_resource <= 0:
            raise ConfigError("low-resource size must be positive")
        for lang in languages:
            if len(train[lang]) < low_resource:
                raise ConfigError(f"{lang} has only {len(train[lang])} training images, {low_resource} requested")
            pick = sorted(rng.choice(len(train[lang]), size=low_resource, replace=False))
            train[lang] = [train[lang][i] for i in pick]
    manifest = SplitManifest(mode, tuple(languages), train, valid, list(image_ids["test"]), float(overlap),
                             low_resource, seed)
    log.info("split %s r=%.2f: %s", mode, overlap, {k: len(v) for k, v in train.items()})
    return manifest


def corpus_image_ids(corpus) -> dict:
    return {s: [e.image_id for e in corpus.split(s)] for s in ("train", "valid", "test")}
