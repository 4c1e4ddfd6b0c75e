import numpy as np
import pytest

from cyclestyle import autodiff as ad
from cyclestyle.autodiff import Tensor
from cyclestyle.corpus import EOS, make_batch
from cyclestyle.models import (
    CNNClassifier,
    ModelConfig,
    SoftSequence,
    TransferModel,
    attend,
    classify,
    decode_greedy,
    decode_soft,
    decode_teacher_forced,
    encode,
    gru_cell,
    gru_params,
    lstm_cell,
    lstm_params,
    transfer,
)

import reference as ref
from conftest import check_grads

V = 24


def small_model(seed=0, attention=True, **kw):
    cfg = ModelConfig(vocab_size=V, emb=6, hidden=7, filters=5, attention=attention, **kw)
    return TransferModel(cfg, seed=seed)


def np_params(model):
    return {k: v.data for k, v in model.params.items()}


def random_sentences(rng, n, lo=2, hi=9):
    return [list(rng.integers(4, V, size=rng.integers(lo, hi))) for _ in range(n)]


def batch_of(sents, style=0):
    return make_batch(sents, style)


class TestCells:
    def test_gru_zero_params_halves_state(self, rng):
        p = gru_params(rng, 3, 4, "g.")
        for t in p.values():
            t.data[...] = 0.0
        h = rng.normal(size=(2, 4))
        out = gru_cell(Tensor(rng.normal(size=(2, 3))), Tensor(h), p, "g.")
        # z = 0.5 and candidate = tanh(0) = 0
        np.testing.assert_allclose(out.data, 0.5 * h, atol=1e-15)

    def test_gru_matches_reference(self, rng):
        p = gru_params(rng, 3, 4, "g.", scale=0.5)
        x, h = rng.normal(size=3), rng.normal(size=4)
        out = gru_cell(Tensor(x[None]), Tensor(h[None]), p, "g.").data[0]
        np.testing.assert_allclose(out, ref.gru({k: v.data for k, v in p.items()}, "g.", x, h), atol=1e-12)

    def test_gru_gradients(self, rng):
        p = gru_params(rng, 3, 4, "g.", scale=0.5)
        x, h = Tensor(rng.normal(size=(2, 3)), requires_grad=True), Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        w = rng.normal(size=(2, 4))
        err = check_grads(lambda: ad.sum_(ad.mul(gru_cell(x, h, p, "g."), w)), [x, h] + list(p.values()))
        assert err < 1e-4

    def test_gru_shape_error(self, rng):
        p = gru_params(rng, 3, 4, "g.")
        with pytest.raises(ad.ShapeError):
            gru_cell(Tensor(np.ones((2, 5))), Tensor(np.ones((2, 4))), p, "g.")

    def test_lstm_zero_params(self, rng):
        p = lstm_params(rng, 3, 4, "l.")
        for t in p.values():
            t.data[...] = 0.0
        c = rng.normal(size=(2, 4))
        h2, c2 = lstm_cell(Tensor(rng.normal(size=(2, 3))), (Tensor(np.zeros((2, 4))), Tensor(c)), p, "l.")
        np.testing.assert_allclose(c2.data, 0.5 * c, atol=1e-15)
        np.testing.assert_allclose(h2.data, 0.5 * np.tanh(0.5 * c), atol=1e-15)

    def test_lstm_matches_reference_and_gradients(self, rng):
        p = lstm_params(rng, 3, 4, "l.", scale=0.5)
        x, h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
        h2, c2 = lstm_cell(Tensor(x), (Tensor(h), Tensor(c)), p, "l.")
        rh, rc = ref.lstm({k: v.data for k, v in p.items()}, "l.", x[1], h[1], c[1])
        np.testing.assert_allclose(h2.data[1], rh, atol=1e-12)
        np.testing.assert_allclose(c2.data[1], rc, atol=1e-12)
        xt = Tensor(x, requires_grad=True)
        w1, w2 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))

        def build():
            a, b = lstm_cell(xt, (Tensor(h), Tensor(c)), p, "l.")
            return ad.add(ad.sum_(ad.mul(a, w1)), ad.sum_(ad.mul(b, w2)))

        assert check_grads(build, [xt] + list(p.values())) < 1e-4


class TestEncoder:
    def test_one_state_per_token_and_padding_invariance(self, rng):
        m = small_model()
        sents = [[5, 6, 7, 8, 9], [10, 11]]
        b = batch_of(sents)
        enc = encode(m, (b.ids, b.lengths), 0)
        assert enc.H.shape == (2, 5, 7)
        alone = encode(m, [10, 11], 0)
        np.testing.assert_allclose(enc.H.data[1, :2], alone.H.data[0], atol=1e-12)
        np.testing.assert_allclose(enc.final.data[1], alone.final.data[0], atol=1e-12)

    def test_matches_reference(self, rng):
        m = small_model()
        p = np_params(m)
        s = [5, 9, 13, 4]
        np.testing.assert_allclose(encode(m, s, 1).H.data[0], ref.encode(p, p["emb"][s], 1), atol=1e-12)

    def test_style_changes_states(self):
        m = small_model()
        assert not np.allclose(encode(m, [5, 6], 0).H.data, encode(m, [5, 6], 1).H.data)

    def test_soft_one_hot_equals_hard(self, rng):
        m = small_model()
        sents = random_sentences(rng, 100)
        b = batch_of(sents)
        hard = encode(m, (b.ids, b.lengths), 0)
        soft = encode(m, SoftSequence.one_hot(b.ids, b.lengths, V), 0)
        assert np.max(np.abs(hard.H.data - soft.H.data)) < 1e-9

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            encode(small_model(), (np.zeros((1, 0), dtype=int), np.array([0])), 0)


class TestAttention:
    def test_identical_states_give_uniform_weights(self, rng):
        m = small_model()
        H = np.repeat(rng.normal(size=(1, 1, 7)), 5, axis=1)
        from cyclestyle.models import EncoderOutput

        enc = EncoderOutput(Tensor(H), Tensor(H[:, -1]), np.ones((1, 5)))
        ctx, w = attend(m, Tensor(rng.normal(size=(1, 7))), enc)
        np.testing.assert_allclose(w.data, 0.2, atol=1e-15)
        np.testing.assert_allclose(ctx.data, H[:, 0], atol=1e-12)

    def test_padding_gets_no_weight(self, rng):
        m = small_model()
        b = batch_of([[5, 6, 7, 8], [9, 10]])
        enc = encode(m, (b.ids, b.lengths), 0)
        _, w = attend(m, Tensor(rng.normal(size=(2, 7))), enc)
        np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(w.data[1, 2:] == 0.0)

    def test_gradient(self, rng):
        m = small_model(init_scale=0.5)
        b = batch_of([[5, 6, 7, 8], [9, 10]])
        s = Tensor(rng.normal(size=(2, 7)), requires_grad=True)
        wts = rng.normal(size=(2, 7))

        def build():
            enc = encode(m, (b.ids, b.lengths), 0)
            return ad.sum_(ad.mul(attend(m, s, enc)[0], wts))

        params = [m.params[k] for k in ("att.W", "att.U", "att.v", "enc.W_h")]
        assert check_grads(build, [s] + params) < 1e-4


class TestDecoder:
    def test_teacher_forced_matches_reference(self, rng):
        for attention in (True, False):
            m = small_model(attention=attention, init_scale=0.3)
            p = np_params(m)
            sents = random_sentences(rng, 4)
            b = batch_of(sents, 1)
            inp, tgt, mask = b.targets()
            enc = encode(m, (b.ids, b.lengths), 1)
            logits = decode_teacher_forced(m, enc, 1, inp).data
            for i, s in enumerate(sents):
                H = ref.encode(p, p["emb"][s], 1)
                want = ref.teacher_forced_nll(p, H, 1, s, attention)
                got = [-(logits[i, t, tgt[i, t]] - np.log(np.exp(logits[i, t]).sum())) for t in range(len(s) + 1)]
                np.testing.assert_allclose(got, want, atol=1e-10)

    def test_soft_rows_are_distributions(self, rng):
        m = small_model()
        b = batch_of(random_sentences(rng, 8))
        seq = decode_soft(m, encode(m, (b.ids, b.lengths), 0), 1, temperature=0.7)
        np.testing.assert_allclose(seq.probs.data.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(seq.lengths >= 1) and np.all(seq.lengths <= 16)

    def test_soft_matches_reference(self, rng):
        m = small_model(init_scale=0.3)
        p = np_params(m)
        sents = random_sentences(rng, 5)
        b = batch_of(sents)
        seq = decode_soft(m, encode(m, (b.ids, b.lengths), 0), 1, temperature=0.5, max_gen_len=6)
        for i, s in enumerate(sents):
            rows, n = ref.soft_decode(p, ref.encode(p, p["emb"][s], 0), 1, 0.5, 6)
            assert seq.lengths[i] == n
            np.testing.assert_allclose(seq.probs.data[i, :n], rows[:n], atol=1e-10)

    def test_low_temperature_approaches_greedy(self, rng):
        m = small_model(init_scale=0.5)
        b = batch_of(random_sentences(rng, 6))
        enc = encode(m, (b.ids, b.lengths), 0)
        greedy = decode_greedy(m, enc, 1)
        soft = decode_soft(m, enc, 1, temperature=0.01)
        checked = 0
        for i, g in enumerate(greedy):
            rows = soft.probs.data[i]
            for t in range(min(len(g), rows.shape[0])):
                assert np.argmax(rows[t]) == g[t]
                checked += 1
                # the fed-back mixture stays one-hot only while the step is decisive
                if rows[t].max() < 0.999:
                    break
        assert checked >= 12

    def test_soft_gradient(self, rng):
        m = small_model(init_scale=0.4)
        b = batch_of(random_sentences(rng, 3, 3, 5))
        w = rng.normal(size=(3, 5, V))

        def build():
            seq = decode_soft(m, encode(m, (b.ids, b.lengths), 0), 1, temperature=0.8, max_gen_len=5)
            return ad.sum_(ad.mul(seq.probs, w[:, : seq.probs.shape[1]]))

        params = [m.params[k] for k in ("emb", "style", "dec.W_z", "att.v", "out.W")]
        assert check_grads(build, params) < 1e-4

    def test_greedy_bounded_and_eos_free(self, rng):
        m = small_model(seed=3)
        b = batch_of(random_sentences(rng, 20))
        out = decode_greedy(m, encode(m, (b.ids, b.lengths), 0), 1)
        assert all(len(s) <= 16 and EOS not in s for s in out)

    def test_transfer_deterministic_and_handles_empty(self, rng):
        m = small_model()
        sents = random_sentences(rng, 5) + [[]]
        a, b = transfer(m, sents), transfer(m, sents, batch_size=2)
        assert a == b and a[-1] == []


class TestClassifier:
    def test_two_logits(self, rng):
        m = small_model()
        b = batch_of(random_sentences(rng, 7))
        assert classify(m, (b.ids, b.lengths)).shape == (7, 2)

    def test_one_hot_equals_hard(self, rng):
        m = small_model()
        b = batch_of(random_sentences(rng, 30, 1, 9))
        hard = classify(m, (b.ids, b.lengths)).data
        soft = classify(m, SoftSequence.one_hot(b.ids, b.lengths, V)).data
        assert np.max(np.abs(hard - soft)) < 1e-9

    def test_matches_reference_and_batch_invariance(self, rng):
        m = small_model(init_scale=0.5)
        p = np_params(m)
        sents = random_sentences(rng, 6, 1, 9)
        b = batch_of(sents)
        logits = classify(m, (b.ids, b.lengths)).data
        for i, s in enumerate(sents):
            np.testing.assert_allclose(logits[i], ref.classify(p, p["cls.emb"][s]), atol=1e-10)
            np.testing.assert_allclose(logits[i], classify(m, s).data[0], atol=1e-12)

    def test_gradient(self, rng):
        cnn = CNNClassifier(V, 4, 3, rng=rng, scale=0.5)
        b = batch_of([[5, 6, 7, 8, 9], [10, 11]])
        tgt = np.array([0, 1])
        assert check_grads(lambda: ad.cross_entropy(cnn.logits((b.ids, b.lengths)), tgt),
                           list(cnn.params.values())) < 1e-4


def test_parameter_inventory():
    m = small_model()
    names = set(m.params)
    assert {"emb", "style", "att.W", "att.U", "att.v", "out.W", "out.b", "cls.emb"} <= names
    assert m.params["style"].shape == (2, 7)
    assert sum(n.startswith("enc.") for n in names) == 6
    assert sum(n.startswith("dec.") for n in names) == 6


def test_same_seed_same_init():
    a, b = small_model(seed=5), small_model(seed=5)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
