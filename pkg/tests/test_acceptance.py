"""End-to-end acceptance run: one PASS/FAIL line per criterion.

The toy studies (criteria 3-6, 8, 10) share one set of experiment runs,
executed once per session by a module fixture.  Set
``PIVOTMT_ACCEPTANCE_RESULTS=path.json`` to store the run results there and
reuse them on later invocations.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from pivotmt import autodiff as ad
from pivotmt import experiments as E
from pivotmt.attention import MultiHeadAttention
from pivotmt.autodiff import Tensor
from pivotmt.captioning import CaptionCache
from pivotmt.checkpoint import Checkpoint, capture
from pivotmt.config import TrainConfig
from pivotmt.data.splits import make_splits
from pivotmt.metrics import corpus_bleu
from pivotmt.objectives import (back_translation_term, cbt_loss, cpt_loss, greedy_translate, mbt_loss,
                                translation_nll)
from pivotmt.transformer import pad_batch
from pivotmt.vse import contrastive_loss

import gradsuite
from conftest import random_images, random_sentences, tiny_model
from test_metrics import FIXTURES

SEEDS = (0, 1, 2)
ABLATION = ("T", "T+V", "Full")


def report(capsys, n: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def results():
    cache = os.environ.get("PIVOTMT_ACCEPTANCE_RESULTS")
    if cache and Path(cache).exists():
        return json.loads(Path(cache).read_text())
    cfg = TrainConfig()
    workers = min(4, os.cpu_count() or 1)
    t0 = time.time()
    ablation = E.run_groups(E.ablation_groups(cfg, ABLATION, SEEDS, score_checkpoints=True), workers)
    ablation_seconds = time.time() - t0
    rest = E.run_groups(E.overlap_groups(cfg, (0.5, 1.0), SEEDS) + E.supervised_groups(cfg, SEEDS), workers)
    out = {"runs": ablation + rest, "ablation_seconds": ablation_seconds, "workers": workers}
    if cache:
        Path(cache).write_text(json.dumps(out))
    return out


def runs(res, prefix, config):
    return [r for r in res["runs"] if r["tag"].startswith(prefix) and r["config"] == config]


def mean(res, prefix, config, key="bleu"):
    return float(np.mean([r[key]["mean"] for r in runs(res, prefix, config)]))


# -- unit-level criteria ----------------------------------------------------------

def test_criterion_1_gradient_suite(capsys):
    t0 = time.time()
    errors = {name: check(seed=0) for name, check in gradsuite.CHECKS.items()}
    elapsed = time.time() - t0
    worst = max(errors.values())
    detail = " ".join(f"{k}={v:.1e}" for k, v in errors.items()) + f"  ({elapsed:.1f}s)"
    report(capsys, 1, worst < gradsuite.TOL and elapsed < 60, detail)


def test_criterion_2_no_backprop_through_decodes(capsys):
    rng = np.random.default_rng(0)
    xs, ys = random_sentences(rng, 3, lengths=(2, 4)), random_sentences(rng, 3, lengths=(2, 4))
    zx, zy = random_images(rng, 3, prefix="x"), random_images(rng, 3, prefix="y")
    failures = []

    # the x -> y pseudo-translation is a constant: encoder x and decoder y see no gradient
    model = tiny_model(seed=1)
    ad.backward(back_translation_term(model, xs, "en", zx, 1.0))
    if any(p.grad is not None for m in (model.encoders["en"], model.decoders["fr"]) for p in m.layers[0].parameters()):
        failures.append("translation pass")

    # MBT gradients equal those of an explicit decode-then-NLL computation
    m1, m2 = tiny_model(seed=2), tiny_model(seed=2)
    ad.backward(mbt_loss(m1, xs, zx, ys, zy, 1.0))
    px, _ = greedy_translate(m2, xs, "en", zx, 1.0)
    py, _ = greedy_translate(m2, ys, "fr", zy, 1.0)
    ad.backward(translation_nll(m2, px, "fr", xs, zx, 1.0) + translation_nll(m2, py, "en", ys, zy, 1.0))
    for (_, a), (_, b) in zip(m1.named_parameters(), m2.named_parameters()):
        if (a.grad is None) != (b.grad is None) or (a.grad is not None and np.abs(a.grad - b.grad).max() > 1e-10):
            failures.append("MBT two-pass")
            break

    # captioning and the caption-side translation are constants of CBT and CPT
    for fn in (cbt_loss, cpt_loss):
        model = tiny_model(seed=3)
        cache = CaptionCache(model.captioners, model.caption_visual, model.languages)
        ad.backward(fn(model, cache.get(zx, "en"), zx, cache.get(zy, "fr"), zy, 1.0))
        if any(p.grad is not None for p in model.captioner_parameters()):
            failures.append(fn.__name__)
    report(capsys, 2, not failures, "failures: " + (", ".join(failures) or "none"))


def test_criterion_7_bleu_oracle(capsys):
    bad = []
    for name, fx in FIXTURES.items():
        rep = corpus_bleu(fx["hyps"], fx["refs"])
        got = ([round(p, 4) for p in rep.precisions], round(rep.brevity_penalty, 4), round(rep.bleu, 4))
        if got != (fx["p"], fx["bp"], fx["bleu"]):
            bad.append(name)
    corpus = [s for fx in FIXTURES.values() for s in fx["hyps"]]
    identity = corpus_bleu(corpus, corpus).bleu
    report(capsys, 7, not bad and identity == 100.0, f"fixtures off: {bad or 'none'}; identity={identity}")


def test_criterion_9_invariants(capsys):
    rng = np.random.default_rng(9)
    failed = []
    for trial in range(20):
        att = MultiHeadAttention(4, 2, rng)
        mask = rng.random((2, 5)) < 0.6
        mask[:, 0] = True
        att(Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 5, 4))), key_mask=mask, keep_weights=True)
        if np.abs(att.last_weights.sum(-1) - 1).max() > 1e-12:
            failed.append("attention normalization")
        x = Tensor(rng.normal(size=(1, 5, 4)), requires_grad=True)
        i = int(rng.integers(0, 4))
        ad.backward(ad.getitem(att(x, x, causal=True), (0, i)).sum())
        if np.abs(x.grad[0, i + 1:]).max() != 0.0:
            failed.append("causal mask")
        if float(contrastive_loss(Tensor(rng.uniform(-1, 1, (4, 4))), 0.1).data) < 0:
            failed.append("hinge")
        n = int(rng.integers(4, 60))
        ids = {"train": [f"t{k}" for k in range(n)], "valid": [f"v{k}" for k in range(6)], "test": ["e0", "e1"]}
        m = make_splits(ids, seed=trial)
        if m.shared_train_images() or set(m.valid["en"]) & set(m.valid["fr"]) or set(m.test) & set(m.train["en"]):
            failed.append("split disjointness")
    model = tiny_model(seed=4)
    text = model.encoders["en"](*pad_batch([[5, 6]], eos=True))
    prev = np.array([[1, 7]])
    if not np.array_equal(model.decoders["fr"](prev, text, model.visual(random_images(rng, 1)), 0.0).data,
                          model.decoders["fr"](prev, text, None).data):
        failed.append("lambda_v=0")
    buf = capture(model, config={"k": 1}).to_bytes()
    if Checkpoint.from_bytes(buf).to_bytes() != buf:
        failed.append("checkpoint round trip")
    report(capsys, 9, not failed, "violations: " + (", ".join(sorted(set(failed))) or "none"))


# -- toy studies ------------------------------------------------------------------

def test_criterion_3_ablation_ordering(results, capsys):
    t, tv, full = (mean(results, "ablation", c) for c in ABLATION)
    minutes = results["ablation_seconds"] / 60
    ok = full >= tv + 1.0 and tv >= t + 0.5 and minutes < 20
    report(capsys, 3, ok, f"T={t:.2f} T+V={tv:.2f} Full={full:.2f}  runtime {minutes:.1f} min "
                          f"on {results['workers']} worker(s)")


def test_criterion_4_text_only_generalization(results, capsys):
    with_img = mean(results, "ablation", "Full")
    text_only = mean(results, "ablation", "Full", "bleu_text_only")
    t = mean(results, "ablation", "T")
    ok = np.isfinite(text_only) and abs(with_img - text_only) <= 5.0 and text_only > t
    report(capsys, 4, ok, f"Full with images={with_img:.2f} --no-images={text_only:.2f} text-only T={t:.2f}")


def test_criterion_5_real_pivoting_trend(results, capsys):
    curve = [mean(results, "ablation", "Full"), mean(results, "overlap0.5", "Full"), mean(results, "overlap1.0", "Full")]
    ok = curve[0] <= curve[1] <= curve[2]
    report(capsys, 5, ok, "r=0/0.5/1.0: " + " / ".join(f"{v:.2f}" for v in curve))


def test_criterion_6_model_selection(results, capsys):
    gaps = {}
    for r in results["runs"]:
        if "checkpoints" in r:
            ck = r["checkpoints"]
            gaps.setdefault(r["config"], []).append(ck["best_test"] - ck["chosen_test"])
    # the criterion concerns the full model's run; the baselines are shown for reference
    worst = max(gaps["Full"])
    others = " ".join(f"{c}={max(g):.2f}" for c, g in gaps.items() if c != "Full")
    report(capsys, 6, worst <= 1.0, f"Full chosen-vs-best gap {worst:.2f} over {len(gaps['Full'])} seeds "
                                     f"(baselines: {others})")


def test_criterion_8_vse_retrieval(results, capsys):
    ratios = []
    for r in runs(results, "ablation", "Full"):
        for lang, rec in r["retrieval"].items():
            for d in ("text_to_image@1", "image_to_text@1"):
                ratios.append(rec[d] / rec["chance@1"])
    report(capsys, 8, min(ratios) >= 5.0, f"lowest recall@1 / chance = {min(ratios):.1f} over {len(ratios)} cases")


def test_criterion_10_supervised_dominates(results, capsys):
    sup = mean(results, "supervised", "T+V")
    best = max(mean(results, "ablation", c) for c in ABLATION)
    report(capsys, 10, sup >= best + 3.0, f"supervised={sup:.2f} best unsupervised={best:.2f}")
