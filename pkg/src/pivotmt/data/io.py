"""Multi30K-style text files plus JSON-lines object features.

Layout of a data root::

    {split}.{lang}        one space-tokenized sentence per line
    {split}.{lang}.ids    the image id of each line
    features.jsonl        object features per image
    manifest.json         split manifest
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from ..visual import load_features, save_features
from .splits import SplitManifest


@dataclass
class MonolingualSet:
    """Sentences of one language with their image ids; no cross-language pairing."""

    lang: str
    image_ids: list
    sentences: list

    def __post_init__(self):
        if len(self.image_ids) != len(self.sentences):
            raise ValueError("image ids and sentences differ in length")

    def __len__(self) -> int:
        return len(self.sentences)


def write_text(root: str | Path, split: str, lang: str, image_ids, sentences) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / f"{split}.{lang}").write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")
    (root / f"{split}.{lang}.ids").write_text("".join(f"{i}\n" for i in image_ids), encoding="utf-8")


def read_text(root: str | Path, split: str, lang: str) -> dict[str, list[str]]:
    """Map image id -> tokens for one split/language file pair."""
    root = Path(root)
    lines = (root / f"{split}.{lang}").read_text(encoding="utf-8").splitlines()
    ids = (root / f"{split}.{lang}.ids").read_text(encoding="utf-8").splitlines()
    if len(lines) != len(ids):
        raise ValueError(f"{split}.{lang}: {len(lines)} sentences but {len(ids)} image ids")
    return {i: line.split() for i, line in zip(ids, lines)}


def write_corpus(corpus, root: str | Path, manifest: SplitManifest | None = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split in ("train", "valid", "test"):
        entries = corpus.split(split)
        for lang in corpus.languages:
            write_text(root, split, lang, [e.image_id for e in entries], [e.sentences[lang] for e in entries])
    save_features(root / "features.jsonl", [corpus.images[e.image_id] for e in corpus.entries])
    if corpus.spec is not None:
        (root / "world.json").write_text(json.dumps(corpus.spec.to_dict(), indent=1), encoding="utf-8")
    if manifest is not None:
        manifest.save(root / "manifest.json")


def load_monolingual(root: str | Path, manifest: SplitManifest, split: str, lang: str,
                     phase: str = "train") -> MonolingualSet:
    """Sentences of ``lang`` restricted to the images the manifest assigns to it."""
    ids = manifest.access(split, lang if split != "test" else None, phase)
    table = read_text(root, split, lang)
    missing = [i for i in ids if i not in table]
    if missing:
        raise KeyError(f"{len(missing)} manifest ids missing from {split}.{lang}")
    return MonolingualSet(lang, ids, [table[i] for i in ids])


def load_images(root: str | Path, feature_dim: int | None = None):
    return load_features(Path(root) / "features.jsonl", feature_dim)
