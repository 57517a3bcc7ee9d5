"""Query-time ranking, retrieval metrics and the serving benchmark."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .codestore import CodeStore, build_index
from .data import Dataset, TokenSequence, stack
from .errors import CapacityError, InputError, UsageError
from .model import answer_codes, answer_soft, question_vectors, score_codes, score_dense

MODES = ("recalc", "float-store", "binary-store")
WARMUP_QUESTIONS = 3


@dataclass
class RankingResult:
    qid: str
    ranked: list[tuple[str, float]]

    @property
    def aids(self) -> list[str]:
        return [a for a, _ in self.ranked]


def order(qid: str, aids: Sequence[str], scores: np.ndarray) -> RankingResult:
    """Sort by descending score; equal scores fall back to answer id."""
    pairs = sorted(zip(aids, (float(s) for s in scores)), key=lambda p: (-p[1], p[0]))
    return RankingResult(qid, pairs)


def _check_dims(store: CodeStore, params: dict) -> None:
    D = params["att.wa"].shape[1]
    L = params["emb.pos"].shape[0]
    if (store.D, store.L) != (D, L):
        raise UsageError(f"store is {store.D}x{store.L} but model is {D}x{L}")


def _fan_out(fn, n: int, workers: int) -> np.ndarray:
    if workers <= 1 or n < 2 * workers:
        return fn(slice(0, n))
    bounds = np.linspace(0, n, workers + 1).astype(int)
    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(fn, [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]))
    return np.concatenate(parts)


def rank(
    question: TokenSequence,
    store: CodeStore,
    params: dict,
    layers: int,
    qid: str = "",
    aids: Sequence[str] | None = None,
    workers: int = 1,
) -> RankingResult:
    """Rank stored answers (all, or the ``aids`` subset) for one question."""
    if store.count == 0:
        raise UsageError("cannot rank against an empty store")
    _check_dims(store, params)
    if len(question) != store.L:
        raise UsageError(f"question has length {len(question)}, store expects L={store.L}")
    aids = store.ids if aids is None else list(aids)
    vq = question_vectors(params, question.ids[None], question.mask[None], layers)[0]
    bits = store.bits(aids)
    masks = store.masks(aids)
    scores = _fan_out(lambda sl: score_codes(params, vq, None, masks[sl], bits=bits[sl]), len(aids), workers)
    return order(qid, aids, scores)


def rank_recompute(
    question: TokenSequence,
    answers: Mapping[str, TokenSequence],
    params: dict,
    layers: int,
    beta: float,
    qid: str = "",
) -> RankingResult:
    """Rank by re-encoding every candidate: encode, tanh, sign, attend."""
    aids = list(answers)
    ids, mask = stack([answers[a] for a in aids])
    codes = answer_codes(params, ids, mask, layers, beta)
    vq = question_vectors(params, question.ids[None], question.mask[None], layers)[0]
    return order(qid, aids, score_codes(params, vq, codes, mask))


def _per_question(rankings: Iterable[RankingResult], positives: Mapping[str, Iterable[str]]):
    for r in rankings:
        pos = set(positives.get(r.qid, ()))
        if not pos:
            continue
        yield [i for i, a in enumerate(r.aids, 1) if a in pos]


def precision_at_1(rankings: Iterable[RankingResult], positives: Mapping[str, Iterable[str]]) -> float:
    vals = [1.0 if hits and hits[0] == 1 else 0.0 for hits in _per_question(rankings, positives)]
    return float(np.mean(vals)) if vals else float("nan")


def mrr(rankings: Iterable[RankingResult], positives: Mapping[str, Iterable[str]]) -> float:
    vals = [1.0 / hits[0] if hits else 0.0 for hits in _per_question(rankings, positives)]
    return float(np.mean(vals)) if vals else float("nan")


def mean_average_precision(rankings: Iterable[RankingResult], positives: Mapping[str, Iterable[str]]) -> float:
    """Average precision over each question's positives, averaged over questions.

    Positives missing from a ranking count as never retrieved.
    """
    vals = []
    for r in rankings:
        pos = set(positives.get(r.qid, ()))
        if not pos:
            continue
        hits = [i for i, a in enumerate(r.aids, 1) if a in pos]
        vals.append(sum(k / i for k, i in enumerate(hits, 1)) / len(pos))
    return float(np.mean(vals)) if vals else float("nan")


def metrics(rankings: list[RankingResult], positives: Mapping[str, Iterable[str]]) -> dict[str, float]:
    return {
        "P@1": precision_at_1(rankings, positives),
        "MRR": mrr(rankings, positives),
        "MAP": mean_average_precision(rankings, positives),
    }


def evaluate(params: dict, dataset: Dataset, layers: int, beta: float, store: CodeStore | None = None):
    """Serve every question from hard codes and score the rankings.

    Returns:
        ``(metrics, rankings)``.
    """
    if store is None:
        store = build_index(params, dataset.answers, beta, layers)
    qids = dataset.qids
    ids, mask = stack([dataset.questions[q] for q in qids])
    vqs = question_vectors(params, ids, mask, layers)
    rankings = []
    for qid, vq in zip(qids, vqs):
        pool = dataset.pools[qid]
        scores = score_codes(params, vq, None, store.masks(pool), bits=store.bits(pool))
        rankings.append(order(qid, pool, scores))
    return metrics(rankings, dataset.positives), rankings


@dataclass
class BenchReport:
    mode: str
    seconds_per_question: float
    memory_bytes: int
    n_questions: int
    candidates: int
    workers: int
    P_at_1: float
    MRR: float
    MAP: float

    def as_row(self) -> dict:
        return asdict(self)


def representation_bytes(mode: str, count: int, D: int, L: int) -> int:
    """Answer-side bytes each serving mode keeps resident.

    recalc keeps only int32 token ids, float-store one float32 per matrix
    element, binary-store one bit per element.
    """
    if mode == "recalc":
        return count * L * 4
    if mode == "float-store":
        return count * D * L * 4
    if mode == "binary-store":
        return count * ((D * L + 7) // 8)
    raise InputError(f"unknown mode {mode!r}; expected one of {MODES}")


def bench(
    mode: str,
    dataset: Dataset,
    params: dict,
    layers: int,
    beta: float,
    store: CodeStore | None = None,
    repetitions: int = 1,
    workers: int = 1,
    max_float_bytes: int = 2 * 1024**3,
    warmup: int = WARMUP_QUESTIONS,
) -> BenchReport:
    """Time per-question ranking for one serving mode.

    Answer-side preparation (building or loading the store, precomputing float
    matrices) happens before timing. The first ``warmup`` questions of every
    repetition are run but not timed. Questions are always encoded online.
    """
    if mode not in MODES:
        raise InputError(f"unknown mode {mode!r}; expected one of {MODES}")
    if repetitions < 1:
        raise InputError("repetitions must be >= 1")
    qids = dataset.qids
    if not qids:
        raise InputError("benchmark needs at least one question")
    D = params["att.wa"].shape[1]
    L = params["emb.pos"].shape[0]
    all_aids = sorted(dataset.answers)
    row_of = {a: i for i, a in enumerate(all_aids)}

    if mode == "float-store":
        need = representation_bytes(mode, len(all_aids), D, L)
        if need > max_float_bytes:
            raise CapacityError(f"float store needs {need} bytes, budget is {max_float_bytes}")
        ids, mask = stack([dataset.answers[a] for a in all_aids])
        soft = np.concatenate(
            [answer_soft(params, ids[i : i + 256], mask[i : i + 256], layers, beta) for i in range(0, len(all_aids), 256)]
        )
        memory = soft.nbytes
    elif mode == "binary-store":
        if store is None:
            store = build_index(params, dataset.answers, beta, layers)
        _check_dims(store, params)
        memory = store.payload_bytes
    else:
        memory = representation_bytes(mode, len(all_aids), D, L)

    def run(qid: str) -> RankingResult:
        q = dataset.questions[qid]
        pool = dataset.pools[qid]
        if mode == "binary-store":
            return rank(q, store, params, layers, qid=qid, aids=pool, workers=workers)
        if mode == "recalc":
            return rank_recompute(q, {a: dataset.answers[a] for a in pool}, params, layers, beta, qid=qid)
        vq = question_vectors(params, q.ids[None], q.mask[None], layers)[0]
        rows = [row_of[a] for a in pool]
        masks = np.stack([dataset.answers[a].mask for a in pool])
        scores = _fan_out(lambda sl: score_dense(params, vq, soft[rows][sl], masks[sl]), len(pool), workers)
        return order(qid, pool, scores)

    times = []
    rankings = {}
    for _ in range(repetitions):
        for i, qid in enumerate(qids):
            t0 = time.perf_counter()
            rankings[qid] = run(qid)
            dt = time.perf_counter() - t0
            if i >= warmup or len(qids) <= warmup:
                times.append(dt)
    m = metrics([rankings[q] for q in qids], dataset.positives)
    return BenchReport(
        mode=mode,
        seconds_per_question=float(np.mean(times)),
        memory_bytes=int(memory),
        n_questions=len(qids),
        candidates=int(np.mean([len(dataset.pools[q]) for q in qids])),
        workers=workers,
        P_at_1=m["P@1"],
        MRR=m["MRR"],
        MAP=m["MAP"],
    )
