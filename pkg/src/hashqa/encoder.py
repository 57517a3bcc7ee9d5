"""Token embedding and a small contextual encoder with exact backward passes.

Feature matrices follow the ``D x L`` convention: column ``i`` holds the
features of token ``i``. Every function also accepts a leading batch axis,
i.e. ``(N, D, L)`` arrays with ``(N, L)`` ids and masks.

Each encoder layer is single-head scaled dot-product self-attention followed
by a position-wise tanh feed-forward block, both with residual connections.
Keys at padded positions are excluded from the softmax, and padded output
columns are zeroed, so padding never leaks into real tokens.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, UsageError

CHECKPOINT_MAGIC = b"HASP"
CHECKPOINT_VERSION = 1


def _batched(a: np.ndarray, ndim: int) -> tuple[np.ndarray, bool]:
    return (a[None], True) if a.ndim == ndim else (a, False)


def embed(ids: np.ndarray, mask: np.ndarray, table: np.ndarray, pos: np.ndarray) -> np.ndarray:
    """Look up token plus position embeddings.

    Returns an ``E x L`` matrix (``(N, E, L)`` for batched ids) whose padded
    columns are exactly zero.
    """
    ids, single = _batched(np.asarray(ids), 1)
    mask, _ = _batched(np.asarray(mask, dtype=bool), 1)
    V, E = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range for vocabulary of size {V}")
    L = ids.shape[1]
    if pos.shape[0] < L:
        raise UsageError(f"positional table has {pos.shape[0]} rows, sequence length is {L}")
    X = (table[ids] + pos[None, :L]) * mask[..., None]
    X = np.swapaxes(X, 1, 2)
    return X[0] if single else X


def embed_backward(grad_X: np.ndarray, ids: np.ndarray, mask: np.ndarray, V: int, pos_rows: int):
    """Gradients of :func:`embed` w.r.t. the token and position tables.

    The PAD row (id 0) receives no gradient.
    """
    grad_X, _ = _batched(grad_X, 2)
    ids, _ = _batched(np.asarray(ids), 1)
    mask, _ = _batched(np.asarray(mask, dtype=bool), 1)
    g = np.swapaxes(grad_X, 1, 2) * mask[..., None]
    E = g.shape[-1]
    g_table = np.zeros((V, E), dtype=grad_X.dtype)
    np.add.at(g_table, ids[mask], g[mask])
    g_table[0] = 0
    g_pos = np.zeros((pos_rows, E), dtype=grad_X.dtype)
    g_pos[: ids.shape[1]] = g.sum(axis=0)
    return g_table, g_pos


def layer_names(layer: int) -> list[str]:
    return [f"enc.{layer}.{n}" for n in ("wq", "wk", "wv", "w1", "b1", "w2", "b2")]


def _softmax_masked(S: np.ndarray, key_mask: np.ndarray) -> np.ndarray:
    S = np.where(key_mask, S, -np.inf)
    S = S - S.max(axis=-1, keepdims=True)
    A = np.exp(S)
    return A / A.sum(axis=-1, keepdims=True)


@dataclass
class EncoderCache:
    mask: np.ndarray
    n_layers: int
    params_id: tuple
    out_shape: tuple
    x_in: np.ndarray = None
    layers: list = field(default_factory=list)


def encode(X: np.ndarray, mask: np.ndarray, params: dict, n_layers: int):
    """Contextual encoder forward pass.

    Args:
        X: ``E x L`` embeddings (or ``(N, E, L)``).
        mask: length-``L`` boolean validity mask (or ``(N, L)``).
        params: parameter dict; uses ``enc.proj`` when present and
            ``enc.{l}.*`` for each layer.
        n_layers: number of attention/feed-forward layers (0 allowed).

    Returns:
        ``(H, cache)`` with ``H`` of shape ``D x L`` (or ``(N, D, L)``).
    """
    X, single = _batched(np.asarray(X), 2)
    mask, _ = _batched(np.asarray(mask, dtype=bool), 1)
    if X.shape[0] != mask.shape[0] or X.shape[2] != mask.shape[1]:
        raise UsageError(f"input {X.shape} does not match mask {mask.shape}")
    if not mask.any(axis=1).all():
        raise UsageError("every sequence needs at least one unmasked position")
    if not np.all(np.isfinite(X)):
        raise NumericError("encoder input contains non-finite values")

    names = ["enc.proj"] if "enc.proj" in params else []
    for l in range(n_layers):
        names += layer_names(l)
    cache = EncoderCache(mask, n_layers, tuple(id(params[n]) for n in names), ())
    cache.x_in = X
    if "enc.proj" in params:
        X = params["enc.proj"] @ X
    key_mask = mask[:, None, :]
    for l in range(n_layers):
        wq, wk, wv, w1, b1, w2, b2 = (params[n] for n in layer_names(l))
        D = wq.shape[0]
        Q, K, V = wq @ X, wk @ X, wv @ X
        S = np.swapaxes(Q, 1, 2) @ K / np.sqrt(D).astype(X.dtype)
        A = _softmax_masked(S, key_mask)
        X1 = X + V @ np.swapaxes(A, 1, 2)
        Hh = np.tanh(w1 @ X1 + b1[:, None])
        Y = X1 + w2 @ Hh + b2[:, None]
        cache.layers.append((X, Q, K, V, A, X1, Hh))
        X = Y
    H = X * mask[:, None, :]
    if not np.all(np.isfinite(H)):
        raise NumericError("encoder produced non-finite output")
    cache.out_shape = H.shape
    return (H[0], cache) if single else (H, cache)


def encode_backward(grad_out: np.ndarray, cache: EncoderCache, params: dict):
    """Reverse-mode gradients of :func:`encode`.

    Returns:
        ``(grad_X, grads)`` where ``grads`` maps parameter names to arrays.
    """
    g, single = _batched(np.asarray(grad_out), 2)
    names = ["enc.proj"] if "enc.proj" in params else []
    for l in range(cache.n_layers):
        names += layer_names(l)
    if g.shape != cache.out_shape or tuple(id(params[n]) for n in names) != cache.params_id:
        raise UsageError("encoder cache does not belong to this gradient/parameter set")

    mask = cache.mask
    grads = {}
    g = g * mask[:, None, :]
    for l in reversed(range(cache.n_layers)):
        wq, wk, wv, w1, b1, w2, b2 = (params[n] for n in layer_names(l))
        X, Q, K, V, A, X1, Hh = cache.layers[l]
        D = wq.shape[0]
        scale = np.sqrt(D).astype(g.dtype)
        n = f"enc.{l}."
        grads[n + "b2"] = g.sum(axis=(0, 2))
        grads[n + "w2"] = np.einsum("ndl,nfl->df", g, Hh)
        gU = (np.swapaxes(w2, 0, 1) @ g) * (1.0 - Hh * Hh)
        grads[n + "w1"] = np.einsum("nfl,ndl->fd", gU, X1)
        grads[n + "b1"] = gU.sum(axis=(0, 2))
        gX1 = g + np.swapaxes(w1, 0, 1) @ gU
        gV = gX1 @ A
        gA = np.swapaxes(gX1, 1, 2) @ V
        gS = A * (gA - np.sum(gA * A, axis=-1, keepdims=True)) / scale
        gQ = K @ np.swapaxes(gS, 1, 2)
        gK = Q @ gS
        grads[n + "wq"] = np.einsum("ndl,nel->de", gQ, X)
        grads[n + "wk"] = np.einsum("ndl,nel->de", gK, X)
        grads[n + "wv"] = np.einsum("ndl,nel->de", gV, X)
        g = gX1 + wq.T @ gQ + wk.T @ gK + wv.T @ gV
    if "enc.proj" in params:
        grads["enc.proj"] = np.einsum("ndl,nel->de", g, cache.x_in)
        g = params["enc.proj"].T @ g
    return (g[0] if single else g), grads


def save_checkpoint(params: dict, path: str | Path) -> None:
    """Write parameters as ``HASP`` + version + shape table + raw float32 data.

    Layout (little-endian): magic, u32 version, u32 array count, then per
    array ``u32 name_len, name, u32 ndim, u32 dims...``; finally every array's
    float32 values in the same order.
    """
    header = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        header.append(struct.pack("<I", len(raw)) + raw)
        header.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    with open(path, "wb") as f:
        f.write(b"".join(header))
        for arr in params.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> dict:
    buf = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise FormatError(f"checkpoint truncated: wanted {n} bytes", off)
        chunk = buf[off : off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, count = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    table = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        table.append((name, shape))
    params = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint data", off)
    return params
