"""Corpus BLEU, round-trip model selection, retrieval recall and report tables."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class BleuReport:
    bleu: float
    precisions: list
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list = field(default_factory=list)
    totals: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list, references: list, max_n: int = 4) -> BleuReport:
    """Corpus-level BLEU-4 on a 0-100 scale without smoothing.

    ``references[i]`` is either one token list or a list of token lists.  N-gram
    matches are clipped by the maximum count over references and aggregated
    over the corpus; the reference length of a sentence is the length closest
    to the hypothesis (shorter on ties).  Any zero precision gives BLEU 0.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"{len(hypotheses)} hypotheses but {len(references)} references")
    if not hypotheses:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        hyp = list(hyp)
        if refs and isinstance(refs[0], str):
            refs = [refs]
        refs = [list(r) for r in refs]
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            h = _ngrams(hyp, n)
            if not h:
                continue
            best: Counter = Counter()
            for r in refs:
                best |= _ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            totals[n - 1] += sum(h.values())
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len < ref_len:
        bp = math.exp(1.0 - ref_len / hyp_len)
    else:
        bp = 1.0
    if min(precisions) == 0.0:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len, matches, totals)


# -- model selection --------------------------------------------------------

@dataclass
class SelectionRecord:
    checkpoint: str
    round_trip_x: float
    round_trip_y: float

    @property
    def score(self) -> float:
        return 0.5 * (self.round_trip_x + self.round_trip_y)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["score"] = self.score
        return d


def round_trip_bleu(model, sents: list, lang: str, images=None, lambda_v: float = 1.0,
                    batch_size: int = 64) -> float:
    """BLEU of ``lang -> other -> lang`` reconstructions against the inputs."""
    hyps = []
    for s in range(0, len(sents), batch_size):
        chunk = sents[s:s + batch_size]
        imgs = images[s:s + batch_size] if images is not None else None
        mid, _ = model.translate(chunk, lang, imgs, lambda_v)
        back, _ = model.translate(mid, model.other(lang), imgs, lambda_v)
        hyps += back
    return corpus_bleu([[str(t) for t in h] for h in hyps], [[str(t) for t in r] for r in sents]).bleu


def round_trip_score(model, valid: dict, images: dict | None = None, lambda_v: float = 1.0,
                     checkpoint: str = "") -> SelectionRecord:
    """Selection record from monolingual validation sets ``{lang: token-id lists}``.

    ``images`` maps each language to the image list aligned with its
    validation sentences; ``None`` decodes with the null object.
    """
    x, y = model.languages
    zx = images[x] if images is not None else None
    zy = images[y] if images is not None else None
    return SelectionRecord(checkpoint, round_trip_bleu(model, valid[x], x, zx, lambda_v),
                           round_trip_bleu(model, valid[y], y, zy, lambda_v))


def select_best(records: list) -> SelectionRecord:
    """Highest selection score; the earliest checkpoint wins ties."""
    if not records:
        raise ValueError("no selection records")
    return max(records, key=lambda r: (r.score, -records.index(r)))


# -- retrieval --------------------------------------------------------------

def retrieval_recall(sim: np.ndarray, ks=(1, 5, 10)) -> dict:
    """Recall@K in both directions for a square sentence-by-image score matrix.

    Row a scores sentence a against every image; its match is image a.  Ties
    are broken pessimistically (the true item ranks after equal scores).
    """
    sim = np.asarray(sim, dtype=np.float64)
    n = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != n:
        raise ValueError("similarity matrix must be square")
    if n < max(ks) + 1:
        raise ValueError(f"need at least {max(ks) + 1} items for recall@{max(ks)}")
    diag = np.diag(sim)
    rank_t2i = (sim >= diag[:, None]).sum(axis=1) - 1   # images scoring at least as high, excluding the match
    rank_i2t = (sim >= diag[None, :]).sum(axis=0) - 1
    out = {"n": n}
    for k in ks:
        out[f"text_to_image@{k}"] = float((rank_t2i < k).mean())
        out[f"image_to_text@{k}"] = float((rank_i2t < k).mean())
    return out


# -- reports ----------------------------------------------------------------

def format_table(rows: list, columns: list, title: str = "") -> str:
    """Aligned plain-text table; floats printed with two decimals."""
    cells = [[str(c) for c in columns]]
    for r in rows:
        cells.append([f"{r[c]:.2f}" if isinstance(r.get(c), float) else str(r.get(c, "")) for c in columns])
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    lines = [title] if title else []
    for j, row in enumerate(cells):
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths))))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def ablation_report(results: dict, languages: tuple) -> dict:
    """Table-shaped summary of ``{config: {"seeds": [{direction: bleu, ...}], ...}}``.

    Each row holds per-direction means over seeds, their average, and, when
    text-only scores are present, the text-only minus with-image delta.
    """
    x, y = languages
    dirs = [f"{x}->{y}", f"{y}->{x}"]
    rows = []
    for name, res in results.items():
        seeds = res["seeds"]
        row = {"config": name}
        for d in dirs:
            row[d] = float(np.mean([s[d] for s in seeds]))
        row["mean"] = float(np.mean([row[d] for d in dirs]))
        if all(f"{d} text-only" in s for s in seeds for d in dirs):
            row["text-only"] = float(np.mean([np.mean([s[f"{d} text-only"] for d in dirs]) for s in seeds]))
            row["delta"] = row["text-only"] - row["mean"]
        rows.append(row)
    columns = ["config", *dirs, "mean"]
    if any("delta" in r for r in rows):
        columns += ["text-only", "delta"]
    return {"rows": rows, "columns": columns, "table": format_table(rows, columns, "test BLEU")}


def save_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=float)
