"""Word-level vocabularies and a byte-pair-encoding learner."""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path
from typing import Iterable

SPECIALS = ("<pad>", "<s>", "</s>", "<mask>", "<unk>")
PAD_ID, BOS_ID, EOS_ID, MASK_ID, UNK_ID = range(5)
END = "</w>"
CONT = "@@"


def learn_bpe(word_counts: dict[str, int], num_merges: int) -> list[tuple[str, str]]:
    """Greedy merge learning over a word-frequency table.

    The end-of-word marker is glued to the final character.  At every step
    the most frequent adjacent symbol pair is merged; ties go to the
    lexicographically smallest pair so the table is deterministic.
    """
    words = {tuple(w[:-1]) + (w[-1] + END,): c for w, c in word_counts.items() if w}
    merges = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for sym, c in words.items():
            for a, b in zip(sym, sym[1:]):
                pairs[(a, b)] += c
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        merges.append(best)
        merged = {}
        for sym, c in words.items():
            out, i = [], 0
            while i < len(sym):
                if i + 1 < len(sym) and (sym[i], sym[i + 1]) == best:
                    out.append(sym[i] + sym[i + 1])
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            merged[tuple(out)] = merged.get(tuple(out), 0) + c
        words = merged
    return merges


def apply_bpe(word: str, merges: list[tuple[str, str]]) -> list[str]:
    """Segment one word; non-final pieces carry the ``@@`` continuation suffix."""
    if not word:
        return []
    ranks = {m: i for i, m in enumerate(merges)}
    sym = list(word[:-1]) + [word[-1] + END]
    while len(sym) > 1:
        cands = [(ranks[(a, b)], i) for i, (a, b) in enumerate(zip(sym, sym[1:])) if (a, b) in ranks]
        if not cands:
            break
        rank, _ = min(cands)
        pair = merges[rank]
        out, i = [], 0
        while i < len(sym):
            if i + 1 < len(sym) and (sym[i], sym[i + 1]) == pair:
                out.append(sym[i] + sym[i + 1])
                i += 2
            else:
                out.append(sym[i])
                i += 1
        sym = out
    sym[-1] = sym[-1][: -len(END)]
    return [s + CONT for s in sym[:-1]] + [sym[-1]]


def join_bpe(pieces: Iterable[str]) -> list[str]:
    words, cur = [], ""
    for p in pieces:
        if p.endswith(CONT):
            cur += p[: -len(CONT)]
        else:
            words.append(cur + p)
            cur = ""
    if cur:
        words.append(cur)
    return words


class Vocabulary:
    """Token <-> id map with reserved ids PAD=0, BOS=1, EOS=2, MASK=3, UNK=4."""

    def __init__(self, tokens: Iterable[str], mode: str = "word", merges: list | None = None, lang: str = ""):
        if mode not in ("word", "bpe"):
            raise ValueError(f"unknown vocabulary mode {mode!r}")
        self.mode = mode
        self.lang = lang
        self.merges = [tuple(m) for m in (merges or [])]
        self.itos = list(SPECIALS)
        for t in tokens:
            if t not in self.itos:
                self.itos.append(t)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def tokenize(self, words: list[str]) -> list[str]:
        if self.mode == "word":
            return list(words)
        return [p for w in words for p in apply_bpe(w, self.merges)]

    def encode(self, words: list[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in self.tokenize(words)]

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Map ids back to words; stops at EOS and drops the other specials."""
        toks = []
        for i in ids:
            i = int(i)
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID, MASK_ID):
                continue
            toks.append(self.itos[i] if 0 <= i < len(self.itos) else SPECIALS[UNK_ID])
        return toks if self.mode == "word" else join_bpe(toks)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "lang": self.lang, "tokens": self.itos[len(SPECIALS):],
                "merges": [list(m) for m in self.merges]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d.get("mode", "word"), d.get("merges"), d.get("lang", ""))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(sentences: Iterable[list[str]], mode: str = "word", merges: int = 0, lang: str = "") -> Vocabulary:
    """Vocabulary over tokenized sentences, sorted by descending frequency then token."""
    sentences = list(sentences)
    if not sentences:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if mode == "word":
        counts = Counter(w for s in sentences for w in s)
        return Vocabulary(sorted(counts, key=lambda t: (-counts[t], t)), "word", lang=lang)
    if mode == "bpe":
        wc = Counter(w for s in sentences for w in s)
        table = learn_bpe(dict(wc), merges)
        counts = Counter(p for w, c in wc.items() for p in apply_bpe(w, table) for _ in range(c))
        return Vocabulary(sorted(counts, key=lambda t: (-counts[t], t)), "bpe", table, lang)
    raise ValueError(f"unknown vocabulary mode {mode!r}")
