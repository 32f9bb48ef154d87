import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pivotmt.metrics import (SelectionRecord, ablation_report, corpus_bleu, retrieval_recall, round_trip_bleu,
                             round_trip_score, select_best)

# Mini-corpora with scores worked out by hand from clipped n-gram counts.
# Values are frozen to 4 decimals; see the comments for the counts.
FIXTURES = {
    # one near-miss and one exact sentence: p = 9/10, 6/8, 3/6, 1/4, equal lengths
    "near_miss": dict(
        hyps=["the cat sat on the mat".split(), "a dog runs fast".split()],
        refs=[["the cat is on the mat".split()], ["a dog runs fast".split()]],
        p=[0.9, 0.75, 0.5, 0.25], bp=1.0, bleu=53.8956),
    # short hypotheses: lengths 9 vs 13, p = 8/9, 6/7, 4/5, 2/3
    "brevity": dict(
        hyps=["the cat sat on".split(), "a b c d x".split()],
        refs=[["the cat sat on the mat".split()], ["a b c d e f g".split()]],
        p=[0.8889, 0.8571, 0.8, 0.6667], bp=0.6412, bleu=51.1924),
    # two references (closest length 6) plus a clipped repetition: p = 7/10, 3/8, 2/6, 1/4
    "multi_ref_clip": dict(
        hyps=["the the cat sat on mat".split(), "a a a a".split()],
        refs=[["the cat sat on the mat".split(), "the cat sat on a mat today".split()], ["a b c d".split()]],
        p=[0.7, 0.375, 0.3333, 0.25], bp=1.0, bleu=38.4580),
}

words = st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=8)


class TestCorpusBleu:
    @pytest.mark.parametrize("name", sorted(FIXTURES))
    def test_fixture(self, name):
        fx = FIXTURES[name]
        rep = corpus_bleu(fx["hyps"], fx["refs"])
        assert [round(p, 4) for p in rep.precisions] == fx["p"]
        assert round(rep.brevity_penalty, 4) == fx["bp"]
        assert round(rep.bleu, 4) == fx["bleu"]

    def test_identity_is_100(self):
        corpus = ["one two three four five".split(), "six seven eight nine".split()]
        assert corpus_bleu(corpus, corpus).bleu == 100.0

    def test_no_shared_unigram_is_zero(self):
        assert corpus_bleu([["x", "y", "z", "w"]], [["a", "b", "c", "d"]]).bleu == 0.0

    def test_missing_fourgram_is_zero_without_smoothing(self):
        assert corpus_bleu([["a", "b", "c"]], [["a", "b", "c"]]).bleu == 0.0

    def test_closest_reference_length_prefers_shorter_on_tie(self):
        rep = corpus_bleu([list("abcdef")], [[list("abcde"), list("abcdefg")]])
        assert rep.ref_len == 5

    def test_single_reference_forms_agree(self):
        h, r = "a b c d e".split(), "a b c d f".split()
        assert corpus_bleu([h], [r]).bleu == corpus_bleu([h], [[r]]).bleu

    @given(st.lists(st.tuples(words, words), min_size=1, max_size=6), st.randoms(use_true_random=False))
    def test_sentence_order_invariant(self, pairs, rnd):
        shuffled = list(pairs)
        rnd.shuffle(shuffled)
        a = corpus_bleu([h for h, _ in pairs], [r for _, r in pairs]).bleu
        b = corpus_bleu([h for h, _ in shuffled], [r for _, r in shuffled]).bleu
        assert a == pytest.approx(b, abs=1e-9)

    @given(st.lists(st.tuples(words, words), min_size=1, max_size=6))
    def test_bounded(self, pairs):
        assert 0.0 <= corpus_bleu([h for h, _ in pairs], [r for _, r in pairs]).bleu <= 100.0 + 1e-9

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            corpus_bleu([["a"]], [])


class StubModel:
    """Translator stand-in: identity or a constant-token output."""

    languages = ("en", "fr")

    def __init__(self, constant=None):
        self.constant = constant

    def other(self, lang):
        return "fr" if lang == "en" else "en"

    def translate(self, sents, lang, images, lambda_v):
        if self.constant is None:
            return [list(s) for s in sents], None
        return [[self.constant] for _ in sents], None


class TestSelection:
    def _valid(self, rng):
        return {l: [list(rng.integers(5, 30, size=6)) for _ in range(20)] for l in ("en", "fr")}

    def test_identity_round_trip_is_100(self, rng):
        rec = round_trip_score(StubModel(), self._valid(rng))
        assert rec.round_trip_x == rec.round_trip_y == rec.score == 100.0

    def test_constant_model_scores_zero(self, rng):
        assert round_trip_bleu(StubModel(constant=5), self._valid(rng)["en"], "en") == pytest.approx(0.0, abs=1e-9)

    def test_ties_go_to_earliest(self):
        recs = [SelectionRecord("a", 10, 20), SelectionRecord("b", 20, 10), SelectionRecord("c", 5, 5)]
        assert select_best(recs).checkpoint == "a"

    def test_best_score_wins(self):
        recs = [SelectionRecord("a", 10, 20), SelectionRecord("b", 30, 10)]
        assert select_best(recs).checkpoint == "b"
        assert recs[1].to_dict()["score"] == 20.0

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best([])


class TestRetrieval:
    def test_perfect_ordering(self):
        sim = np.eye(12) + 0.01
        r = retrieval_recall(sim)
        assert r["text_to_image@1"] == r["image_to_text@1"] == 1.0

    def test_ties_rank_pessimistically(self):
        r = retrieval_recall(np.ones((11, 11)))
        assert r["text_to_image@1"] == 0.0 and r["text_to_image@10"] == 0.0

    def test_hand_ranks(self):
        # sentence 0's match is beaten by one image: rank 2
        sim = np.eye(11)
        sim[0, 3] = 2.0
        r = retrieval_recall(sim, ks=(1, 5, 10))
        assert r["text_to_image@1"] == pytest.approx(10 / 11)
        assert r["image_to_text@1"] == pytest.approx(10 / 11)  # image 3 ranks sentence 0 first
        assert r["text_to_image@5"] == 1.0

    def test_random_scores_near_chance(self):
        rng = np.random.default_rng(0)
        n = 200
        hits = [retrieval_recall(rng.normal(size=(n, n)))["text_to_image@1"] for _ in range(20)]
        assert np.mean(hits) == pytest.approx(1 / n, abs=2.5e-3)

    def test_not_square(self):
        with pytest.raises(ValueError):
            retrieval_recall(np.ones((11, 12)))


class TestReport:
    def test_rows_and_delta(self):
        res = {"T": {"seeds": [{"en->fr": 10.0, "fr->en": 20.0, "en->fr text-only": 12.0, "fr->en text-only": 20.0},
                               {"en->fr": 20.0, "fr->en": 30.0, "en->fr text-only": 20.0, "fr->en text-only": 30.0}]}}
        out = ablation_report(res, ("en", "fr"))
        row = out["rows"][0]
        assert row["en->fr"] == 15.0 and row["mean"] == 20.0
        assert row["text-only"] == 20.5 and row["delta"] == 0.5
        assert "delta" in out["columns"] and "test BLEU" in out["table"]
