import copy
import logging

import numpy as np
import pytest

from hashqa import model as model_mod
from hashqa import synthetic
from hashqa.config import TrainConfig
from hashqa.data import Dataset, build_vocab, corpus_from_records, dataset_from_records
from hashqa.encoder import embed, encode, encode_backward, embed_backward
from hashqa.errors import InputError, NumericError
from hashqa.hashing import sign
from hashqa.model import init_params, triplet_loss
from hashqa.trainer import (
    GRADCHECK_STEP,
    AdamW,
    _rel_error,
    batch_of,
    grad_check,
    gradcheck_config,
    make_triplets,
    mean_abs_soft,
    new_state,
    sample_negative,
    train,
    train_step,
)


def _toy(n=10, pool=5, seed=0, cfg=None):
    cfg = cfg or TrainConfig(D=16, E=16, L=8, M=8, F=16, batch_size=4, epochs=2)
    recs = synthetic.generate(n, pool_size=pool, seed=seed)
    vocab = build_vocab(corpus_from_records(recs))
    return cfg, vocab, dataset_from_records(recs, cfg.L, vocab)


class TestSampling:
    def test_never_positive(self, rng):
        _, _, ds = _toy()
        for qid in ds.qids:
            for _ in range(20):
                assert sample_negative(qid, ds, rng) not in ds.positives[qid]

    def test_single_negative(self, rng):
        _, _, ds = _toy(pool=2)
        qid = ds.qids[0]
        assert {sample_negative(qid, ds, rng) for _ in range(20)} == set(ds.negatives(qid))

    def test_uniform_frequency(self, rng):
        _, _, ds = _toy(pool=5)
        qid = ds.qids[0]
        draws = [sample_negative(qid, ds, rng) for _ in range(10_000)]
        sigma = np.sqrt(10_000 * 0.25 * 0.75)
        for neg in ds.negatives(qid):
            assert abs(draws.count(neg) - 2500) <= 3 * sigma

    def test_no_negatives(self, rng, caplog):
        ds = Dataset({"q": None}, {}, {"q": frozenset({"a"})}, {"q": ("a",)})
        with caplog.at_level(logging.WARNING):
            assert sample_negative("q", ds, rng) is None
        assert "no negative" in caplog.text

    def test_one_triplet_per_positive(self, rng):
        _, _, ds = _toy()
        keys = make_triplets(ds, rng)
        assert len(keys) == ds.N
        assert sorted(k[0] for k in keys) == sorted(ds.qids)


class TestAdamW:
    def test_frozen_bias_and_pad(self):
        cfg = TrainConfig(D=4, E=4, L=3, M=2, F=4, frozen=("attention",))
        p = init_params(cfg, 6)
        before = copy.deepcopy(p)
        opt = AdamW(p, lr=0.1, weight_decay=0.5, frozen=cfg.frozen)
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["emb.table"][0] = 1.0
        opt.step(p, grads)
        assert np.array_equal(p["att.wa"], before["att.wa"])
        assert np.array_equal(p["enc.0.b1"], before["enc.0.b1"])
        assert np.all(p["emb.table"][0] == 0)
        # zero gradient: only the decoupled decay moves weights
        assert np.allclose(p["enc.0.wq"], before["enc.0.wq"] * (1 - 0.1 * 0.5), rtol=1e-6)


class TestTrainStep:
    def test_satisfied_batch_only_decays(self):
        cfg, vocab, ds = _toy(n=20)
        cfg = cfg.replace(delta=0.0, margin=1e-3)
        state = new_state(cfg, len(vocab))
        candidates = [(q, p, n) for q in ds.qids for p in ds.positives[q] for n in ds.negatives(q)]
        r = triplet_loss(state.params, batch_of(ds, candidates), cfg, need_grad=False)
        keys = [k for k, h in zip(candidates, r.hinge) if h == 0][:4]
        assert keys
        before = copy.deepcopy(state.params)
        loss = train_step(state, batch_of(ds, keys), cfg)
        assert loss == 0.0
        for name, p in state.params.items():
            if name.rsplit(".", 1)[-1].startswith("b"):
                assert np.array_equal(p, before[name])
            else:
                assert np.allclose(p, before[name] * (1 - cfg.lr * cfg.weight_decay), rtol=1e-6, atol=1e-9)

    def test_single_triplet_loss_decreases(self):
        cfg, vocab, ds = _toy()
        cfg = cfg.replace(delta=1e-6, lr=1e-3)
        state = new_state(cfg, len(vocab))
        candidates = [(q, sorted(ds.positives[q])[0], ds.negatives(q)[0]) for q in ds.qids]
        r = triplet_loss(state.params, batch_of(ds, candidates), cfg, need_grad=False)
        key = [candidates[int(np.argmax(r.hinge))]]
        assert r.hinge.max() > 0
        batch = batch_of(ds, key)
        losses = np.array([train_step(state, batch, cfg) for _ in range(200)])
        assert all(losses[t + 50] < losses[t] for t in range(len(losses) - 50))

    def test_codes_are_sign_of_same_forward(self):
        cfg, vocab, ds = _toy()
        state = new_state(cfg, len(vocab))
        keys = make_triplets(ds, np.random.default_rng(0))[:3]
        batch = batch_of(ds, keys)
        expect = triplet_loss(state.params, batch, cfg, need_grad=False)
        train_step(state, batch, cfg)
        assert np.array_equal(expect.codes, sign(expect.B))
        for j, (_, pos, neg) in enumerate(keys):
            assert np.array_equal(state.codes[pos].signs(), expect.codes[j])
            assert np.array_equal(state.codes[neg].signs(), expect.codes[len(keys) + j])

    def test_non_finite_loss(self, monkeypatch):
        cfg, vocab, ds = _toy()
        state = new_state(cfg, len(vocab))
        keys = make_triplets(ds, np.random.default_rng(0))[:2]

        def bad_hinge(sp, sm, margin):
            return np.full(sp.shape, np.nan), np.ones(sp.shape, bool)

        monkeypatch.setattr(model_mod, "hinge_batch", bad_hinge)
        with pytest.raises(NumericError, match=r"beta=.*delta=.*triplet="):
            train_step(state, batch_of(ds, keys), cfg)


class TestTrain:
    def test_deterministic(self):
        cfg, vocab, ds = _toy()
        a = train(cfg, ds, ds, len(vocab))
        b = train(cfg, ds, ds, len(vocab))
        assert a.state.loss_history == b.state.loss_history
        assert a.history == b.history
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_history_and_best_epoch(self):
        cfg, vocab, ds = _toy()
        r = train(cfg.replace(epochs=3), ds, ds, len(vocab))
        assert len(r.history) == 3
        assert list(r.history[0]) == ["epoch", "train_loss", "dev_P@1", "dev_MRR", "mean_abs_B"]
        p1 = [h["dev_P@1"] for h in r.history]
        assert r.best_epoch == 1 + p1.index(max(p1))

    def test_one_epoch_returns_those_params(self):
        cfg, vocab, ds = _toy()
        r = train(cfg.replace(epochs=1), ds, ds, len(vocab))
        assert r.best_epoch == 1
        assert all(np.array_equal(r.params[k], r.state.params[k]) for k in r.params)

    def test_empty_split(self):
        cfg, vocab, ds = _toy()
        empty = Dataset({}, {}, {}, {})
        with pytest.raises(InputError):
            train(cfg, empty, ds, len(vocab))
        with pytest.raises(InputError):
            train(cfg, ds, empty, len(vocab))

    def test_frozen_encoder_binarization_monotone(self, bundled):
        cfg, vocab, train_set, dev_set = bundled
        warm = train(cfg.replace(delta=0.0, epochs=8), train_set, dev_set, len(vocab))
        cont = cfg.replace(delta=1e-4, frozen=("encoder",), epochs=6)
        state = warm.state
        state.optimizer = AdamW(state.params, cont.lr, cont.weight_decay, frozen=cont.frozen)
        state.history = []
        start = mean_abs_soft(state.params, dev_set, cont)
        r = train(cont, train_set, dev_set, len(vocab), state=state)
        series = [start] + [h["mean_abs_B"] for h in r.history]
        assert all(b >= a for a, b in zip(series, series[1:])), series


class TestGradCheck:
    def test_default_passes(self):
        report = grad_check(n_points=3)
        assert report.passed and set(report.errors) == {"embedding", "encoder", "attention", "hashing"}

    def test_two_layers_and_projection(self):
        assert grad_check(gradcheck_config(layers=2, E=6), n_points=2).passed

    def test_corrupted_backward_caught(self, monkeypatch):
        real = model_mod.soft_binarize_backward
        monkeypatch.setattr(model_mod, "soft_binarize_backward", lambda g, B, beta: -real(g, B, beta))
        report = grad_check(n_points=2)
        assert not report.passed
        assert "hashing" in report.failing
        assert report.errors["hashing"] > 1e-1

    def test_linear_toy_analytic(self, rng):
        # embedding -> projection with no layers is linear in every parameter
        E, D, L, V = 5, 4, 6, 9
        table = rng.normal(size=(V, E))
        table[0] = 0
        pos = rng.normal(size=(L, E))
        params = {"enc.proj": rng.normal(size=(D, E))}
        ids = np.array([[3, 1, 8, 2, 0, 0], [5, 5, 4, 0, 0, 0]])
        mask = ids > 0
        W = rng.normal(size=(2, D, L))

        def loss():
            return float(np.sum(W * encode(embed(ids, mask, table, pos), mask, params, 0)[0]))

        X = embed(ids, mask, table, pos)
        _, cache = encode(X, mask, params, 0)
        gX, grads = encode_backward(W, cache, params)
        g_table, g_pos = embed_backward(gX, ids, mask, V, L)
        for arr, analytic in ((table, g_table), (pos, g_pos), (params["enc.proj"], grads["enc.proj"])):
            numeric = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + GRADCHECK_STEP
                up = loss()
                arr[idx] = old - GRADCHECK_STEP
                down = loss()
                arr[idx] = old
                numeric[idx] = (up - down) / (2 * GRADCHECK_STEP)
            if arr is table:
                numeric[0] = 0
            assert _rel_error(analytic, numeric) < 1e-6

    def test_failure_lists_group(self):
        report = grad_check(n_points=1, tol=0.0)
        assert set(report.failing) == set(report.errors)
