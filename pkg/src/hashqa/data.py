"""Vocabulary, fixed-length token sequences and JSONL answer-selection data."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError, ParseError

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_ID = 0
UNK_ID = 1


def tokenize(text: str) -> list[str]:
    """Whitespace split after lowercasing."""
    return text.lower().split()


@dataclass(frozen=True)
class Vocabulary:
    token_to_id: Mapping[str, int]

    def __post_init__(self):
        ids = sorted(self.token_to_id.values())
        if ids != list(range(len(ids))):
            raise InputError("vocabulary ids must be dense in [0, V)")
        if self.token_to_id.get(PAD) != PAD_ID or self.token_to_id.get(UNK) != UNK_ID:
            raise InputError("vocabulary must reserve PAD=0 and UNK=1")

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __getitem__(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def items(self):
        return sorted(self.token_to_id.items(), key=lambda kv: kv[1])

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for token, i in self.items():
                f.write(f"{token}\t{i}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        mapping = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    token, i = line.rsplit("\t", 1)
                    mapping[token] = int(i)
                except ValueError:
                    raise ParseError("expected 'token<TAB>id'", lineno) from None
        return cls(mapping)


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary ordered by descending frequency, ties lexicographic.

    Tokens seen fewer than ``min_count`` times are left out and will map to
    UNK. The result depends only on token counts, so shuffling the corpus
    does not change it.
    """
    if min_count < 1:
        raise InputError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(doc)
    if n_docs == 0 or not counts:
        raise InputError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    mapping = {PAD: PAD_ID, UNK: UNK_ID}
    for token in kept:
        if token not in mapping:
            mapping[token] = len(mapping)
    return Vocabulary(mapping)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids.setflags(write=False)
        self.mask.setflags(write=False)

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other):
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return np.array_equal(self.ids, other.ids) and np.array_equal(self.mask, other.mask)

    __hash__ = None


def tokenize_pad(text: Sequence[str], L: int, vocab: Vocabulary) -> TokenSequence:
    """Map the first ``L`` tokens through ``vocab`` and right-pad with PAD."""
    if L < 1:
        raise InputError("L must be >= 1")
    if len(text) == 0:
        raise InputError("cannot encode an empty token list")
    ids = np.full(L, PAD_ID, dtype=np.int64)
    mask = np.zeros(L, dtype=bool)
    n = min(len(text), L)
    ids[:n] = [vocab[t] for t in text[:n]]
    mask[:n] = True
    return TokenSequence(ids, mask)


@dataclass(frozen=True)
class Dataset:
    """Questions, answers and the candidate pool of every question.

    ``pools`` keeps the file order of candidates; ``positives`` is a subset of
    each pool.
    """

    questions: Mapping[str, TokenSequence]
    answers: Mapping[str, TokenSequence]
    positives: Mapping[str, frozenset]
    pools: Mapping[str, tuple]
    texts: Mapping[str, str] = field(default_factory=dict, compare=False)

    @property
    def N(self) -> int:
        return sum(len(p) for p in self.positives.values())

    @property
    def qids(self) -> list[str]:
        return list(self.questions)

    def negatives(self, qid: str) -> list[str]:
        pos = self.positives[qid]
        return [a for a in self.pools[qid] if a not in pos]

    def answer_slice(self, aids: Iterable[str] | None = None) -> dict[str, TokenSequence]:
        if aids is None:
            return dict(self.answers)
        return {a: self.answers[a] for a in aids}


def read_jsonl(path: str | Path) -> list[dict]:
    """Parse and schema-check every record of a dataset file."""
    records = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            _check_record(rec, lineno)
            records.append(rec)
    return records


def _check_record(rec, lineno: int) -> None:
    if not isinstance(rec, dict):
        raise ParseError("expected a JSON object", lineno)
    for key, kind in (("qid", str), ("question", str), ("answers", list)):
        if not isinstance(rec.get(key), kind):
            raise ParseError(f"missing or invalid field {key!r}", lineno)
    for j, ans in enumerate(rec["answers"]):
        if not isinstance(ans, dict):
            raise ParseError(f"answer {j} is not an object", lineno)
        for key, kind in (("aid", str), ("text", str), ("label", int)):
            if key not in ans:
                raise ParseError(f"answer {j} missing field {key!r}", lineno)
            if not isinstance(ans[key], kind) or isinstance(ans[key], bool) and key == "label":
                raise ParseError(f"answer {j} field {key!r} has wrong type", lineno)


def corpus_from_records(records: Iterable[dict]) -> list[list[str]]:
    docs = []
    for rec in records:
        docs.append(tokenize(rec["question"]))
        docs.extend(tokenize(a["text"]) for a in rec["answers"])
    return docs


def dataset_from_records(records: Iterable[dict], L: int, vocab: Vocabulary) -> Dataset:
    questions: dict[str, TokenSequence] = {}
    answers: dict[str, TokenSequence] = {}
    positives: dict[str, frozenset] = {}
    pools: dict[str, tuple] = {}
    texts: dict[str, str] = {}
    for rec in records:
        qid = rec["qid"]
        if qid in questions:
            raise InputError(f"duplicate question id {qid!r}")
        pos = frozenset(a["aid"] for a in rec["answers"] if a["label"] > 0)
        if not pos:
            logger.warning("question %s has no positive answer; skipped", qid)
            continue
        q_tokens = tokenize(rec["question"])
        if not q_tokens:
            raise InputError(f"question {qid!r} is empty")
        pool = []
        for ans in rec["answers"]:
            aid = ans["aid"]
            if aid in texts and texts[aid] != ans["text"]:
                raise InputError(f"answer id {aid!r} reused with different text")
            if aid not in answers:
                a_tokens = tokenize(ans["text"])
                if not a_tokens:
                    raise InputError(f"answer {aid!r} is empty")
                answers[aid] = tokenize_pad(a_tokens, L, vocab)
                texts[aid] = ans["text"]
            if aid not in pool:
                pool.append(aid)
        questions[qid] = tokenize_pad(q_tokens, L, vocab)
        texts[qid] = rec["question"]
        positives[qid] = pos
        pools[qid] = tuple(pool)
    return Dataset(questions, answers, positives, pools, texts)


def load_dataset(path: str | Path, L: int, vocab: Vocabulary) -> Dataset:
    """Load a JSONL file of ``{"qid", "question", "answers": [{"aid", "text", "label"}]}``.

    Questions without a positive answer are dropped with a warning.
    """
    return dataset_from_records(read_jsonl(path), L, vocab)


def stack(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Stack sequences into ``(N, L)`` id and mask arrays."""
    if not seqs:
        raise InputError("nothing to stack")
    return np.stack([s.ids for s in seqs]), np.stack([s.mask for s in seqs])
