"""Latent-topic synthetic answer-selection data.

Every topic owns a handful of topic words. A question draws several of its
topic's words plus filler; its positive answer repeats at least two of the
question's topic words; negatives come from other topics and share no topic
word with the question.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def _sentence(rng, topic_words: list[str], fillers: list[str], n_filler: int) -> str:
    words = list(topic_words) + list(rng.choice(fillers, size=n_filler, replace=True))
    rng.shuffle(words)
    return " ".join(words)


def generate(
    n_questions: int,
    pool_size: int = 20,
    n_topics: int = 12,
    words_per_topic: int = 4,
    n_fillers: int = 20,
    seed: int = 0,
    prefix: str = "q",
    filler_range: tuple[int, int] = (1, 4),
) -> list[dict]:
    """Generate JSON-ready records with one positive answer per question."""
    if pool_size < 2 or n_topics < 2:
        raise ValueError("need at least 2 candidates and 2 topics")
    rng = np.random.default_rng(seed)
    topics = [[f"t{k}w{j}" for j in range(words_per_topic)] for k in range(n_topics)]
    fillers = [f"f{j}" for j in range(n_fillers)]
    records = []
    for qi in range(n_questions):
        k = int(rng.integers(n_topics))
        q_words = list(rng.choice(topics[k], size=3, replace=False))
        lo, hi = filler_range

        def n_fill() -> int:
            return int(rng.integers(lo, hi + 1))

        question = _sentence(rng, q_words, fillers, n_fill())
        shared = list(rng.choice(q_words, size=2, replace=False))
        extra = [w for w in topics[k] if w not in shared]
        pos_words = shared + [str(rng.choice(extra))]
        qid = f"{prefix}{qi:05d}"
        answers = [{"aid": f"{qid}a00", "text": _sentence(rng, pos_words, fillers, n_fill()), "label": 1}]
        others = [t for t in range(n_topics) if t != k]
        for j in range(1, pool_size):
            t = int(rng.choice(others))
            words = list(rng.choice(topics[t], size=3, replace=False))
            answers.append(
                {"aid": f"{qid}a{j:02d}", "text": _sentence(rng, words, fillers, n_fill()), "label": 0}
            )
        order = rng.permutation(pool_size)
        records.append({"qid": qid, "question": question, "answers": [answers[i] for i in order]})
    return records


def default_splits(seed: int = 0, pool_size: int = 20) -> dict[str, list[dict]]:
    """The bundled 200-question train / 50-question dev split."""
    return {
        "train": generate(200, pool_size=pool_size, seed=seed, prefix="tr"),
        "dev": generate(50, pool_size=pool_size, seed=seed + 1, prefix="dv"),
    }


def write_jsonl(records: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def bundled_path(split: str) -> Path:
    return Path(__file__).parent / "data" / f"synthetic_{split}.jsonl"


if __name__ == "__main__":
    for name, recs in default_splits().items():
        write_jsonl(recs, bundled_path(name))
