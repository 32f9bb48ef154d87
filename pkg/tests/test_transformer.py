import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pivotmt import autodiff as ad
from pivotmt.attention import AttentionError, EncodedSequence, MultiHeadAttention, causal_mask
from pivotmt.autodiff import Tensor
from pivotmt.nn import init_param
from pivotmt.transformer import (BOS, EOS, MASK, PAD, Decoder, Encoder, SequenceTooLong, TransformerConfig,
                                 greedy_decode, pad_batch, positional_encoding, sequence_nll)

from conftest import tiny_config


def identity_attention(d=4, heads=1):
    att = MultiHeadAttention(d, heads, np.random.default_rng(0))
    for w in (att.wq, att.wk, att.wv, att.wo):
        w.data = np.eye(d)
    return att


class TestAttention:
    def test_single_key_returns_its_value(self, rng):
        att = identity_attention()
        q, k = rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 1, 4))
        out = att(Tensor(q), Tensor(k)).data
        np.testing.assert_allclose(out, np.broadcast_to(k, (1, 3, 4)))

    def test_equal_scores_average_values(self, rng):
        att = identity_attention()
        ctx = rng.normal(size=(1, 5, 4))
        out = att(Tensor(np.zeros((1, 2, 4))), Tensor(ctx)).data
        np.testing.assert_allclose(out[0], np.broadcast_to(ctx[0].mean(0), (2, 4)))

    def test_hand_computed_two_queries_three_keys(self):
        att = identity_attention(d=2)
        q = np.array([[[1.0, 0.0], [0.0, 2.0]]])
        k = np.array([[[1.0, 1.0], [0.0, 0.0], [2.0, -1.0]]])
        # scores / sqrt(2): q1 -> [1, 0, 2]/√2, q2 -> [2, 0, -2]/√2
        s = np.array([[1.0, 0.0, 2.0], [2.0, 0.0, -2.0]]) / math.sqrt(2)
        a = np.exp(s) / np.exp(s).sum(1, keepdims=True)
        expected = a @ k[0]
        np.testing.assert_allclose(att(Tensor(q), Tensor(k)).data[0], expected, rtol=1e-12)

    @given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(0, 10_000))
    def test_weights_are_normalized(self, B, Tq, Tk, seed):
        r = np.random.default_rng(seed)
        att = MultiHeadAttention(4, 2, r)
        mask = r.random((B, Tk)) < 0.7
        mask[:, 0] = True
        att(Tensor(r.normal(size=(B, Tq, 4))), Tensor(r.normal(size=(B, Tk, 4))), key_mask=mask, keep_weights=True)
        w = att.last_weights
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-12)
        assert (w[np.broadcast_to(~mask[:, None, None, :], w.shape)] == 0).all()

    def test_fully_masked_query_raises(self, rng):
        att = MultiHeadAttention(4, 2, rng)
        with pytest.raises(AttentionError):
            att(Tensor(np.ones((1, 2, 4))), Tensor(np.ones((1, 3, 4))), key_mask=np.zeros((1, 3), bool))

    def test_causal_mask_zero_gradient(self, rng):
        att = MultiHeadAttention(4, 2, rng)
        x = Tensor(rng.normal(size=(1, 5, 4)), requires_grad=True)
        i = 2
        ad.backward(ad.getitem(att(x, x, causal=True), (0, i)).sum())
        assert np.abs(x.grad[0, i + 1:]).max() == 0.0
        assert np.abs(x.grad[0, : i + 1]).max() > 0

    def test_causal_mask_layout(self):
        np.testing.assert_array_equal(causal_mask(3), [[False, True, True], [False, False, True], [False, False, False]])

    def test_head_divisibility(self, rng):
        with pytest.raises(ValueError):
            MultiHeadAttention(6, 4, rng)


class TestEncoder:
    def _enc(self, **kw):
        cfg = tiny_config(**kw)
        rng = np.random.default_rng(0)
        return Encoder(cfg, init_param(rng, (12, cfg.model_dim), 0.3, np.float64), rng)

    def test_output_length_matches_input(self):
        ids, mask = pad_batch([[5, 6, 7], [8]], eos=True)
        out = self._enc()(ids, mask)
        assert out.states.shape == (2, 4, 8)

    def test_pad_tail_does_not_change_real_outputs(self):
        enc = self._enc()
        ids = np.array([[5, 6, 7, PAD, PAD]])
        mask = ids != PAD
        a = enc(ids, mask).states.data
        b = enc(np.array([[5, 6, 7, 9, 11]]), mask).states.data
        np.testing.assert_array_equal(a[:, :3], b[:, :3])

    def test_positions_distinguish_repeated_tokens(self):
        out = self._enc()(np.array([[5, 5]])).states.data
        assert not np.allclose(out[0, 0], out[0, 1])

    def test_positional_table(self):
        pe = positional_encoding(3, 4)
        np.testing.assert_allclose(pe[0], [0, 1, 0, 1])
        np.testing.assert_allclose(pe[1], [math.sin(1), math.cos(1), math.sin(1e-2), math.cos(1e-2)])

    def test_overlength(self):
        with pytest.raises(SequenceTooLong):
            self._enc(max_len=3)(np.array([[5, 6, 7, 8]]))
        out = self._enc(max_len=3, overlength="truncate")(np.array([[5, 6, 7, 8]]))
        assert out.states.shape[1] == 3


class TestDecoder:
    @pytest.fixture
    def parts(self):
        cfg = tiny_config()
        rng = np.random.default_rng(3)
        emb = init_param(rng, (12, 8), 0.5, np.float64)
        enc = Encoder(cfg, emb, rng)
        dec = Decoder(cfg, emb, rng)
        text = enc(*pad_batch([[5, 6, 7], [9, 10]], eos=True))
        vis = EncodedSequence(Tensor(rng.normal(size=(2, 3, 8))), np.ones((2, 3), bool))
        return dec, text, vis

    def test_logit_shape(self, parts):
        dec, text, vis = parts
        assert dec(np.full((2, 4), BOS), text, vis).shape == (2, 4, 12)

    def test_future_positions_do_not_affect_past_logits(self, parts):
        dec, text, vis = parts
        a = dec(np.array([[BOS, 5, 6, 7], [BOS, 8, 8, 8]]), text, vis).data
        b = dec(np.array([[BOS, 5, 11, 9], [BOS, 8, 8, 5]]), text, vis).data
        np.testing.assert_array_equal(a[0, :2], b[0, :2])
        np.testing.assert_array_equal(a[1, :3], b[1, :3])

    def test_nll_is_sum_of_step_cross_entropies(self, parts):
        dec, text, vis = parts
        tgt = [[5, 6], [7, 8, 9]]
        nll = float(sequence_nll(dec, tgt, text, vis, weights=[1.0, 1.0]).data)
        manual = 0.0
        for b, seq in enumerate(tgt):
            prefix = [BOS]
            for tok in seq + [EOS]:
                sub_text, sub_vis = text.select([b]), vis.select([b])
                logits = dec.decode_step(np.array([prefix]), sub_text, sub_vis).data[0]
                manual += -(logits[tok] - np.log(np.exp(logits - logits.max()).sum()) - logits.max())
                prefix.append(tok)
        assert nll == pytest.approx(manual, rel=1e-10)

    def test_greedy_decode_contract(self, parts):
        dec, text, vis = parts
        out, truncated = greedy_decode(dec, 2, text, vis, max_len=6)
        for seq, trunc in zip(out, truncated):
            assert all(t not in (PAD, BOS, MASK, EOS) for t in seq)
            assert len(seq) <= 6
            assert trunc == (len(seq) == 6) or not trunc
        again, _ = greedy_decode(dec, 2, text, vis, max_len=6)
        assert out == again

    def test_lambda_zero_is_text_only(self, parts):
        dec, text, vis = parts
        prev = np.array([[BOS, 5, 6], [BOS, 7, 7]])
        np.testing.assert_array_equal(dec(prev, text, vis, 0.0).data, dec(prev, text, None).data)

    def test_prefix_must_start_with_bos(self, parts):
        dec, text, vis = parts
        with pytest.raises(ValueError):
            dec.decode_step(np.array([[5, 6]]), text, vis)


class TestPadding:
    def test_pad_batch(self):
        ids, mask = pad_batch([[5, 6], []], bos=True, eos=True)
        np.testing.assert_array_equal(ids, [[BOS, 5, 6, EOS], [BOS, EOS, PAD, PAD]])
        np.testing.assert_array_equal(mask, [[1, 1, 1, 1], [1, 1, 0, 0]])

    def test_full_scale(self):
        cfg = TransformerConfig.full_scale()
        assert (cfg.layers, cfg.heads, cfg.model_dim, cfg.ffn_dim) == (6, 8, 1024, 4096)
