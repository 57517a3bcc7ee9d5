import math

import numpy as np
import pytest

from hashqa.config import TrainConfig
from hashqa.encoder import embed, embed_backward, encode, encode_backward, layer_names, load_checkpoint, save_checkpoint
from hashqa.errors import FormatError, NumericError, UsageError
from hashqa.model import init_params


def _params(rng, D=4, E=4, F=5, layers=1, V=10, L=5, scale=0.5):
    cfg = TrainConfig(D=D, E=E, F=F, L=L, M=3, layers=layers)
    p = init_params(cfg, V, seed=int(rng.integers(1000)), dtype=np.float64)
    return {k: v * (scale / 0.05) for k, v in p.items()}


def _fd(f, x, h=1e-3):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def _rel(a, n):
    return np.abs(a - n).max() / max(np.abs(a).max(), np.abs(n).max(), 1e-12)


class TestEmbed:
    def test_pad_columns_zero(self, rng):
        table = rng.normal(size=(6, 3))
        table[0] = 0
        pos = rng.normal(size=(4, 3))
        X = embed(np.array([2, 3, 0, 0]), np.array([1, 1, 0, 0], bool), table, pos)
        assert X.shape == (3, 4)
        assert np.all(X[:, 2:] == 0)
        assert np.allclose(X[:, 1], table[3] + pos[1])

    def test_identity_case(self, rng):
        table = rng.normal(size=(5, 3))
        X = embed(np.array([2]), np.array([True]), table, np.zeros((1, 3)))
        assert np.array_equal(X[:, 0], table[2])

    def test_out_of_range(self, rng):
        with pytest.raises(IndexError):
            embed(np.array([7]), np.array([True]), rng.normal(size=(5, 3)), np.zeros((1, 3)))

    def test_row_gradient_counts_occurrences(self, rng):
        ids = np.array([2, 4, 2, 2, 0])
        mask = np.array([1, 1, 1, 0, 0], bool)
        table = rng.normal(size=(6, 3))
        pos = rng.normal(size=(5, 3))
        g_table, g_pos = embed_backward(np.ones((3, 5)), ids, mask, 6, 5)
        # token 2 appears twice in unmasked positions
        assert np.array_equal(g_table[2], [2.0, 2.0, 2.0])
        assert np.all(g_table[0] == 0)
        num = _fd(lambda: embed(ids, mask, table, pos).sum(), table)
        assert np.allclose(num[1:], g_table[1:], atol=1e-8)
        assert np.allclose(_fd(lambda: embed(ids, mask, table, pos).sum(), pos), g_pos, atol=1e-8)


class TestEncode:
    def test_closed_form_single_token(self):
        c, D = 0.3, 3
        I = np.eye(D)
        p = {}
        for name, val in zip(layer_names(0), (c * I, c * I, c * I, c * I, np.zeros(D), c * I, np.zeros(D))):
            p[name] = val
        x = np.array([0.5, -1.0, 2.0])
        H, _ = encode(x[:, None], np.array([True]), p, 1)
        # single key: attention weight 1, so X1 = (1 + c) x
        expect = [(1 + c) * xi + c * math.tanh(c * (1 + c) * xi) for xi in x]
        assert np.allclose(H[:, 0], expect, atol=1e-12)

    def test_pad_permutation_and_values_ignored(self, rng):
        p = _params(rng)
        X = rng.normal(size=(4, 5))
        mask = np.array([1, 1, 1, 0, 0], bool)
        H, _ = encode(X, mask, p, 1)
        X2 = X.copy()
        X2[:, [3, 4]] = X2[:, [4, 3]]
        X3 = X.copy()
        X3[:, 3:] = rng.normal(size=(4, 2)) * 100
        for Xalt in (X2, X3):
            H2, _ = encode(Xalt, mask, p, 1)
            assert np.array_equal(H2[:, :3], H[:, :3])
        assert np.all(H[:, 3:] == 0)

    def test_batched_matches_single(self, rng):
        p = _params(rng, layers=2)
        X = rng.normal(size=(3, 4, 5))
        mask = np.array([[1, 1, 1, 1, 1], [1, 1, 0, 0, 0], [1, 0, 0, 0, 0]], bool)
        H, _ = encode(X, mask, p, 2)
        for i in range(3):
            assert np.allclose(encode(X[i], mask[i], p, 2)[0], H[i], atol=1e-12)

    def test_errors(self, rng):
        p = _params(rng)
        with pytest.raises(NumericError):
            encode(np.full((4, 2), np.nan), np.array([True, True]), p, 1)
        with pytest.raises(UsageError):
            encode(np.zeros((4, 2)), np.array([False, False]), p, 1)

    def test_deterministic(self, rng):
        p = _params(rng)
        X = rng.normal(size=(4, 5))
        m = np.ones(5, bool)
        assert np.array_equal(encode(X, m, p, 1)[0], encode(X, m, p, 1)[0])

    @pytest.mark.parametrize("layers,E", [(1, 4), (2, 4), (1, 6)])
    def test_backward_fd(self, rng, layers, E):
        for _ in range(10):
            p = _params(rng, layers=layers, E=E)
            X = rng.normal(size=(2, E, 5))
            mask = np.array([[1, 1, 1, 1, 0], [1, 1, 0, 0, 0]], bool)
            W = rng.normal(size=(2, 4, 5))
            H, cache = encode(X, mask, p, layers)
            gX, grads = encode_backward(W, cache, p)

            def f():
                return float(np.sum(W * encode(X, mask, p, layers)[0]))

            assert _rel(gX, _fd(f, X)) <= 1e-4
            for name, g in grads.items():
                assert _rel(g, _fd(f, p[name])) <= 1e-4, name

    def test_zero_upstream(self, rng):
        p = _params(rng, E=6)
        X = rng.normal(size=(6, 5))
        H, cache = encode(X, np.ones(5, bool), p, 1)
        gX, grads = encode_backward(np.zeros_like(H), cache, p)
        assert set(grads) == set(p) - {"emb.table", "emb.pos", "att.wq", "att.wa", "att.m"}
        assert all(np.all(g == 0) for g in grads.values())
        assert np.all(gX == 0)

    def test_linear_two_by_two(self):
        # one token, feed-forward zeroed: H = (I + Wv) x
        wv = np.array([[0.2, -0.4], [0.7, 0.1]])
        p = dict(zip(layer_names(0), (np.eye(2), np.eye(2), wv, np.zeros((2, 2)), np.zeros(2), np.zeros((2, 2)), np.zeros(2))))
        x = np.array([[1.5], [-2.0]])
        g = np.array([[1.0], [3.0]])
        H, cache = encode(x, np.array([True]), p, 1)
        assert np.allclose(H, (np.eye(2) + wv) @ x)
        gX, grads = encode_backward(g, cache, p)
        assert np.allclose(gX, (np.eye(2) + wv).T @ g)
        assert np.allclose(grads["enc.0.wv"], g @ x.T)
        assert np.allclose(grads["enc.0.wq"], 0) and np.allclose(grads["enc.0.wk"], 0)

    def test_cache_mismatch(self, rng):
        p = _params(rng)
        H, cache = encode(rng.normal(size=(4, 5)), np.ones(5, bool), p, 1)
        with pytest.raises(UsageError):
            encode_backward(np.zeros((4, 3)), cache, p)
        other = {k: v.copy() for k, v in p.items()}
        with pytest.raises(UsageError):
            encode_backward(np.zeros_like(H), cache, other)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        p = {k: v.astype(np.float32) for k, v in _params(rng, E=6).items()}
        save_checkpoint(p, tmp_path / "m.hasp")
        q = load_checkpoint(tmp_path / "m.hasp")
        assert list(q) == list(p)
        assert all(np.array_equal(p[k], q[k]) and q[k].dtype == np.float32 for k in p)
        raw = (tmp_path / "m.hasp").read_bytes()
        assert raw[:4] == b"HASP"
        # data section is the concatenated float32 arrays
        assert raw.endswith(p["att.m"].astype("<f4").tobytes())

    def test_corruption(self, tmp_path, rng):
        p = {"a": np.ones((2, 3), np.float32)}
        save_checkpoint(p, tmp_path / "m.hasp")
        raw = (tmp_path / "m.hasp").read_bytes()
        for data, offset in [(b"XXXX" + raw[4:], 0), (raw[:4] + b"\x09" + raw[5:], 4), (raw[:-2], None), (raw + b"\0", len(raw))]:
            (tmp_path / "bad.hasp").write_bytes(data)
            with pytest.raises(FormatError) as info:
                load_checkpoint(tmp_path / "bad.hasp")
            assert info.value.offset is not None
            if offset is not None:
                assert info.value.offset == offset
