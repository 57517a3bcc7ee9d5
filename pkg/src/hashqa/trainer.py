"""Minibatch training with alternating sign-code / gradient updates."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .data import Dataset, stack
from .errors import InputError, NumericError
from .hashing import BinaryMatrix, pack_bits
from .model import (
    TripletBatch,
    answer_soft,
    head_backward,
    head_forward,
    init_params,
    param_group,
    triplet_loss,
)
from .serve import evaluate

logger = logging.getLogger(__name__)

HELDOUT_ANSWERS = 256


class AdamW:
    """Adam with decoupled weight decay.

    Biases are not decayed; parameter groups named in ``frozen`` are left
    untouched. Row 0 of the embedding table (PAD) stays zero.
    """

    def __init__(self, params: dict, lr: float, weight_decay: float, betas=(0.9, 0.999), eps: float = 1e-8, frozen=()):
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.frozen = set(frozen)
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in params.items():
            if param_group(name) in self.frozen:
                continue
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not name.rsplit(".", 1)[-1].startswith("b"):
                update = update + self.weight_decay * p
            p -= (self.lr * update).astype(p.dtype, copy=False)
            if name == "emb.table":
                p[0] = 0


@dataclass
class TrainState:
    params: dict
    optimizer: AdamW
    codes: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    loss_history: list = field(default_factory=list)
    history: list = field(default_factory=list)


def new_state(cfg: TrainConfig, vocab_size: int) -> TrainState:
    params = init_params(cfg, vocab_size)
    return TrainState(params, AdamW(params, cfg.lr, cfg.weight_decay, frozen=cfg.frozen))


def sample_negative(qid: str, dataset: Dataset, rng: np.random.Generator) -> str | None:
    """Uniform draw from the question's non-positive candidates.

    Returns ``None`` (with a warning) when the pool has no negative.
    """
    negatives = dataset.negatives(qid)
    if not negatives:
        logger.warning("question %s has no negative candidates; triplet skipped", qid)
        return None
    return negatives[int(rng.integers(len(negatives)))]


def make_triplets(dataset: Dataset, rng: np.random.Generator) -> list[tuple[str, str, str]]:
    """One ``(qid, positive, negative)`` per positive answer, shuffled."""
    triplets = []
    for qid in dataset.qids:
        for pos in sorted(dataset.positives[qid]):
            neg = sample_negative(qid, dataset, rng)
            if neg is not None:
                triplets.append((qid, pos, neg))
    order = rng.permutation(len(triplets))
    return [triplets[i] for i in order]


def batch_of(dataset: Dataset, keys: list[tuple[str, str, str]]) -> TripletBatch:
    seqs = [(dataset.questions[q], dataset.answers[p], dataset.answers[n]) for q, p, n in keys]
    return TripletBatch.from_sequences(seqs, keys)


def train_step(state: TrainState, batch: TripletBatch, cfg: TrainConfig) -> float:
    """One alternation: codes := sgn(B) from this forward pass, then a gradient step."""
    result = triplet_loss(state.params, batch, cfg)
    if not np.isfinite(result.loss):
        per = result.hinge + cfg.delta * (result.constraint[: len(batch)] + result.constraint[len(batch) :])
        bad = int(np.flatnonzero(~np.isfinite(per))[0]) if not np.all(np.isfinite(per)) else -1
        culprit = batch.keys[bad] if batch.keys and bad >= 0 else bad
        raise NumericError(
            f"non-finite loss at step {state.step} (beta={cfg.beta}, delta={cfg.delta}, triplet={culprit})"
        )
    if batch.keys:
        N = len(batch)
        D, L = result.codes.shape[1:]
        for j, (_, pos, neg) in enumerate(batch.keys):
            state.codes[pos] = BinaryMatrix(D, L, pack_bits(result.codes[j]))
            state.codes[neg] = BinaryMatrix(D, L, pack_bits(result.codes[N + j]))
    state.optimizer.step(state.params, result.grads)
    state.step += 1
    state.loss_history.append(result.loss)
    return result.loss


def mean_abs_soft(params: dict, dataset: Dataset, cfg: TrainConfig, limit: int = HELDOUT_ANSWERS) -> float:
    """Mean ``|B_ij|`` over real tokens of a fixed held-out answer batch."""
    aids = sorted(dataset.answers)[:limit]
    ids, mask = stack([dataset.answers[a] for a in aids])
    B = answer_soft(params, ids, mask, cfg.layers, cfg.beta)
    m = np.broadcast_to(mask[:, None, :], B.shape)
    return float(np.abs(B[m]).mean())


@dataclass
class TrainResult:
    params: dict
    history: list[dict]
    best_epoch: int
    state: TrainState


def train(cfg: TrainConfig, train_set: Dataset, dev_set: Dataset, vocab_size: int, state: TrainState | None = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs and keep the epoch with the best dev P@1.

    Dev ranking always serves from packed sign codes. Ties in dev P@1 keep the
    earliest epoch.
    """
    if not train_set.questions:
        raise InputError("training split is empty")
    if not dev_set.questions:
        raise InputError("dev split is empty")
    state = state or new_state(cfg, vocab_size)
    rng = np.random.default_rng([cfg.seed, 1])
    best = (-1.0, 0, None)
    for epoch in range(1, cfg.epochs + 1):
        triplets = make_triplets(train_set, rng)
        if not triplets:
            raise InputError("no usable training triplets")
        losses = []
        for start in range(0, len(triplets), cfg.batch_size):
            keys = triplets[start : start + cfg.batch_size]
            losses.append(train_step(state, batch_of(train_set, keys), cfg))
        state.epoch = epoch
        dev, _ = evaluate(state.params, dev_set, cfg.layers, cfg.beta)
        row = {
            "epoch": epoch,
            "train_loss": float(np.sum(losses) / len(triplets)),
            "dev_P@1": dev["P@1"],
            "dev_MRR": dev["MRR"],
            "mean_abs_B": mean_abs_soft(state.params, dev_set, cfg),
        }
        state.history.append(row)
        logger.info("epoch %d loss %.5f dev P@1 %.4f MRR %.4f |B| %.4f", epoch, row["train_loss"], row["dev_P@1"], row["dev_MRR"], row["mean_abs_B"])
        if row["dev_P@1"] > best[0]:
            best = (row["dev_P@1"], epoch, copy.deepcopy(state.params))
    return TrainResult(best[2], state.history, best[1], state)


# --- gradient checking ------------------------------------------------------

GRADCHECK_TOL = 1e-4
GRADCHECK_STEP = 1e-3
GRADCHECK_VOCAB = 12


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    points: int

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def failing(self) -> list[str]:
        return [g for g, e in self.errors.items() if e > self.tolerance]


def gradcheck_config(**overrides) -> TrainConfig:
    base = dict(D=8, E=8, L=6, M=4, F=8, layers=1, beta=2.0, delta=0.05, margin=0.1)
    base.update(overrides)
    return TrainConfig(**base)


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def _random_point(cfg: TrainConfig, rng: np.random.Generator, n_triplets: int, scale: float):
    params = init_params(cfg, GRADCHECK_VOCAB, seed=int(rng.integers(2**31)), dtype=np.float64)
    for name in params:
        params[name] = params[name] * scale
        if name.rsplit(".", 1)[-1].startswith("b"):
            params[name] = rng.uniform(-0.1, 0.1, size=params[name].shape)
    params["emb.table"][0] = 0

    def seqs():
        lengths = rng.integers(2, cfg.L + 1, size=n_triplets)
        mask = np.arange(cfg.L)[None, :] < lengths[:, None]
        ids = np.where(mask, rng.integers(2, GRADCHECK_VOCAB, size=(n_triplets, cfg.L)), 0)
        return ids, mask

    return params, TripletBatch(*seqs(), *seqs(), *seqs())


def _is_smooth(params: dict, batch: TripletBatch, cfg: TrainConfig, h: float) -> bool:
    from .model import encode_tokens

    r = triplet_loss(params, batch, cfg, need_grad=False)
    gap = cfg.margin - r.s_plus + r.s_minus
    if np.any(np.abs(gap) <= 1e-3) or not np.any(gap > 0):
        return False
    H, _ = encode_tokens(params, batch.q_ids, batch.q_mask, cfg.layers)
    Hm = np.where(batch.q_mask[:, None, :], H, -np.inf)
    top2 = -np.sort(-Hm, axis=-1)[..., :2]
    two = batch.q_mask.sum(axis=1) >= 2
    return bool(np.all((top2[..., 0] - top2[..., 1])[two] >= 10 * h))


def grad_check(cfg: TrainConfig | None = None, n_points: int = 10, seed: int = 0, step: float = GRADCHECK_STEP,
               tol: float = GRADCHECK_TOL, n_triplets: int = 2, scale: float = 10.0) -> GradCheckReport:
    """Compare analytic gradients with 64-bit central differences.

    Groups: ``embedding``, ``encoder``, ``attention`` (parameters) and
    ``hashing`` (gradient w.r.t. the answer encoder output, which runs
    through ``tanh(beta x)``). Sign codes stay fixed at their unperturbed
    values, as in the alternating update. Points are resampled until no
    hinge, max-pool or sign kink lies within reach of the step.

    The error of a group is ``max|analytic - numeric| / max(|analytic|, |numeric|)``
    over all its coordinates, maximised over points.
    """
    cfg = cfg or gradcheck_config()
    rng = np.random.default_rng(seed)
    errors = {"embedding": 0.0, "encoder": 0.0, "attention": 0.0, "hashing": 0.0}
    if cfg.layers == 0 and cfg.E == cfg.D:
        del errors["encoder"]
    done = 0
    tries = 0
    while done < n_points:
        tries += 1
        if tries > 200 * n_points:
            raise RuntimeError("could not find enough kink-free points; adjust scale or margin")
        params, batch = _random_point(cfg, rng, n_triplets, scale)
        if not _is_smooth(params, batch, cfg, step):
            continue
        done += 1
        base = triplet_loss(params, batch, cfg)
        codes = base.codes
        by_group: dict[str, tuple[list, list]] = {}
        for name, p in params.items():
            numeric = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                if name == "emb.table" and idx[0] == 0:
                    continue
                old = p[idx]
                p[idx] = old + step
                up = triplet_loss(params, batch, cfg, codes=codes, need_grad=False).loss
                p[idx] = old - step
                down = triplet_loss(params, batch, cfg, codes=codes, need_grad=False).loss
                p[idx] = old
                numeric[idx] = (up - down) / (2 * step)
            a, n = by_group.setdefault(param_group(name), ([], []))
            a.append(base.grads[name].ravel())
            n.append(numeric.ravel())
        for group, (a, n) in by_group.items():
            errors[group] = max(errors[group], _rel_error(np.concatenate(a), np.concatenate(n)))
        errors["hashing"] = max(errors["hashing"], _hashing_error(params, batch, cfg, codes, step))
    return GradCheckReport(errors, tol, n_points)


def _hashing_error(params: dict, batch: TripletBatch, cfg: TrainConfig, codes: np.ndarray, step: float) -> float:
    from .composition import max_pool
    from .model import encode_tokens

    H, _ = encode_tokens(params, batch.q_ids, batch.q_mask, cfg.layers)
    vq, _ = max_pool(H, batch.q_mask)
    a_ids = np.concatenate([batch.p_ids, batch.n_ids])
    a_mask = np.concatenate([batch.p_mask, batch.n_mask])
    Ha, _ = encode_tokens(params, a_ids, a_mask, cfg.layers)
    _, _, _, cache = head_forward(params, vq, Ha, a_mask, cfg, Bc=codes)
    _, g_Ha, _ = head_backward(params, cache, cfg)
    numeric = np.zeros_like(Ha)
    for idx in zip(*np.nonzero(np.broadcast_to(a_mask[:, None, :], Ha.shape))):
        old = Ha[idx]
        Ha[idx] = old + step
        up = head_forward(params, vq, Ha, a_mask, cfg, Bc=codes)[0]
        Ha[idx] = old - step
        down = head_forward(params, vq, Ha, a_mask, cfg, Bc=codes)[0]
        Ha[idx] = old
        numeric[idx] = (up - down) / (2 * step)
    return _rel_error(g_Ha * a_mask[:, None, :], numeric)
