"""The full hashing-based answer selection model.

Parameters live in a flat, ordered ``dict`` of arrays:

* ``emb.table`` (V x E), ``emb.pos`` (L x E)          -- group ``embedding``
* ``enc.proj`` (D x E, only when E != D), ``enc.{l}.*`` -- group ``encoder``
* ``att.wq``, ``att.wa`` (M x D), ``att.m`` (M)         -- group ``attention``

Questions: embed -> encode -> max-pool. Answers: embed -> encode ->
``tanh(beta H)`` -> attention against the question vector. At serve time the
answer matrix is replaced by its sign code.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .composition import AttentionParams, attend, attend_backward, binary_attend_fast, max_pool, max_pool_backward
from .config import TrainConfig
from .data import TokenSequence, stack
from .encoder import embed, embed_backward, encode, encode_backward, layer_names
from .hashing import BinaryMatrix, pack_bits, sign, soft_binarize, soft_binarize_backward
from .objective import cosine, hinge_batch

INIT_SCALE = 0.05


def param_group(name: str) -> str:
    return {"emb": "embedding", "enc": "encoder", "att": "attention"}[name.split(".", 1)[0]]


def init_params(cfg: TrainConfig, vocab_size: int, seed: int | None = None, dtype=np.float32) -> dict:
    """Uniform(-0.05, 0.05) weights, zero biases, zero PAD embedding."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)

    def u(*shape):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape).astype(dtype)

    params = {"emb.table": u(vocab_size, cfg.E), "emb.pos": u(cfg.L, cfg.E)}
    params["emb.table"][0] = 0
    if cfg.E != cfg.D:
        params["enc.proj"] = u(cfg.D, cfg.E)
    for l in range(cfg.layers):
        wq, wk, wv, w1, b1, w2, b2 = layer_names(l)
        params[wq] = u(cfg.D, cfg.D)
        params[wk] = u(cfg.D, cfg.D)
        params[wv] = u(cfg.D, cfg.D)
        params[w1] = u(cfg.F, cfg.D)
        params[b1] = np.zeros(cfg.F, dtype=dtype)
        params[w2] = u(cfg.D, cfg.F)
        params[b2] = np.zeros(cfg.D, dtype=dtype)
    params["att.wq"] = u(cfg.M, cfg.D)
    params["att.wa"] = u(cfg.M, cfg.D)
    params["att.m"] = u(cfg.M)
    return params


def infer_dims(params: dict) -> dict:
    """Recover ``L, D, E, M, F, layers`` from parameter shapes."""
    V, E = params["emb.table"].shape
    M, D = params["att.wa"].shape
    layers = 0
    while f"enc.{layers}.wq" in params:
        layers += 1
    F = params["enc.0.w1"].shape[0] if layers else 1
    return {"L": params["emb.pos"].shape[0], "D": D, "E": E, "M": M, "F": F, "layers": layers, "V": V}


def encode_tokens(params: dict, ids: np.ndarray, mask: np.ndarray, layers: int):
    X = embed(ids, mask, params["emb.table"], params["emb.pos"])
    return encode(X, mask, params, layers)


def question_vectors(params: dict, ids: np.ndarray, mask: np.ndarray, layers: int) -> np.ndarray:
    H, _ = encode_tokens(params, ids, mask, layers)
    return max_pool(H, mask)[0]


def answer_soft(params: dict, ids: np.ndarray, mask: np.ndarray, layers: int, beta: float) -> np.ndarray:
    H, _ = encode_tokens(params, ids, mask, layers)
    return soft_binarize(H, beta)


def answer_codes(params: dict, ids: np.ndarray, mask: np.ndarray, layers: int, beta: float) -> list[BinaryMatrix]:
    """Hard codes ``sgn(tanh(beta * encode(answer)))`` for a batch of answers."""
    B = answer_soft(params, ids, mask, layers, beta)
    return [BinaryMatrix(B.shape[1], B.shape[2], pack_bits(s)) for s in sign(B)]


def score_codes(params: dict, vq: np.ndarray, codes, masks: np.ndarray, bits: np.ndarray | None = None) -> np.ndarray:
    """Cosine scores of one question vector against packed answer codes."""
    att = AttentionParams.from_params(params)
    va, _ = binary_attend_fast(codes, vq, att, masks, bits=bits)
    s, _, _ = cosine(np.broadcast_to(vq, va.shape), va)
    return s


def score_dense(params: dict, vq: np.ndarray, B: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Cosine scores against dense (soft or sign) answer matrices."""
    att = AttentionParams.from_params(params)
    vq_b = np.broadcast_to(vq, (B.shape[0], vq.shape[-1]))
    va, _, _ = attend(B, vq_b, att, masks)
    s, _, _ = cosine(vq_b, va)
    return s


@dataclass
class TripletBatch:
    q_ids: np.ndarray
    q_mask: np.ndarray
    p_ids: np.ndarray
    p_mask: np.ndarray
    n_ids: np.ndarray
    n_mask: np.ndarray
    keys: tuple = ()

    @classmethod
    def from_sequences(cls, triplets: list[tuple[TokenSequence, TokenSequence, TokenSequence]], keys=()):
        q, p, n = zip(*triplets)
        return cls(*stack(q), *stack(p), *stack(n), keys=tuple(keys))

    def __len__(self) -> int:
        return len(self.q_ids)


@dataclass
class HeadCache:
    vq2: np.ndarray
    B: np.ndarray
    Bc: np.ndarray
    a_mask: np.ndarray
    att_cache: object
    grad_u: np.ndarray
    grad_v: np.ndarray
    active: np.ndarray


@dataclass
class StepResult:
    loss: float
    grads: dict
    hinge: np.ndarray
    constraint: np.ndarray
    s_plus: np.ndarray
    s_minus: np.ndarray
    B: np.ndarray
    codes: np.ndarray
    a_mask: np.ndarray


def head_forward(params: dict, vq: np.ndarray, Ha: np.ndarray, a_mask: np.ndarray, cfg: TrainConfig, Bc=None):
    """Loss of a triplet batch given question vectors and answer features.

    ``Ha`` stacks the positive answers followed by the negatives, so it has
    ``2N`` rows for ``N`` questions. ``Bc`` (same shape as ``Ha``) is the
    fixed sign code; when omitted it is set to ``sgn(tanh(beta Ha))``.
    """
    N = vq.shape[0]
    B = soft_binarize(Ha, cfg.beta)
    if Bc is None:
        Bc = sign(B)
    vq2 = np.concatenate([vq, vq])
    va, _, att_cache = attend(B, vq2, AttentionParams.from_params(params), a_mask)
    s, gu, gv = cosine(vq2, va)
    jm, active = hinge_batch(s[:N], s[N:], cfg.margin)
    diff = (B - Bc) * a_mask[:, None, :]
    jc = np.sum(diff * diff, axis=(1, 2))
    per_triplet = jm + cfg.delta * (jc[:N] + jc[N:])
    loss = float(np.sum(per_triplet, dtype=np.float64))
    cache = HeadCache(vq2, B, Bc, a_mask, att_cache, gu, gv, active)
    return loss, per_triplet, (jm, jc, s), cache


def head_backward(params: dict, cache: HeadCache, cfg: TrainConfig):
    """Returns ``(grad_vq, grad_Ha, grads)`` for :func:`head_forward`."""
    N = cache.active.shape[0]
    act = cache.active.astype(cache.B.dtype)
    g_s = np.concatenate([-act, act])
    g_va = g_s[:, None] * cache.grad_v
    g_vq2 = g_s[:, None] * cache.grad_u
    att = AttentionParams.from_params(params)
    g_B, g_vq_att, grads = attend_backward(g_va, cache.att_cache, att)
    g_vq2 = g_vq2 + g_vq_att
    g_B = g_B + cfg.delta * 2.0 * (cache.B - cache.Bc) * cache.a_mask[:, None, :]
    g_Ha = soft_binarize_backward(g_B, cache.B, cfg.beta)
    return g_vq2[:N] + g_vq2[N:], g_Ha, grads


def triplet_loss(params: dict, batch: TripletBatch, cfg: TrainConfig, codes=None, need_grad: bool = True) -> StepResult:
    """Forward and backward of the full objective on a triplet batch.

    Questions, positives and negatives go through the encoder together. The
    sign codes are fixed for this evaluation: computed from the current
    forward pass unless ``codes`` is supplied.
    """
    N = len(batch)
    ids = np.concatenate([batch.q_ids, batch.p_ids, batch.n_ids])
    mask = np.concatenate([batch.q_mask, batch.p_mask, batch.n_mask])
    X = embed(ids, mask, params["emb.table"], params["emb.pos"])
    H, enc_cache = encode(X, mask, params, cfg.layers)
    vq, idx = max_pool(H[:N], mask[:N])
    a_mask = mask[N:]
    loss, _, (jm, jc, s), cache = head_forward(params, vq, H[N:], a_mask, cfg, Bc=codes)
    result = StepResult(loss, {}, jm, jc, s[:N], s[N:], cache.B, cache.Bc, a_mask)
    if not need_grad:
        return result
    g_vq, g_Ha, grads = head_backward(params, cache, cfg)
    g_H = np.concatenate([max_pool_backward(g_vq, idx, H.shape[-1]), g_Ha])
    g_X, enc_grads = encode_backward(g_H, enc_cache, params)
    grads.update(enc_grads)
    g_table, g_pos = embed_backward(g_X, ids, mask, params["emb.table"].shape[0], params["emb.pos"].shape[0])
    grads["emb.table"] = g_table
    grads["emb.pos"] = g_pos
    result.grads = {name: grads[name] for name in params}
    return result
