import json

from hashqa import synthetic
from hashqa.data import tokenize


def test_bundled_files_match_generator():
    for split, recs in synthetic.default_splits().items():
        lines = synthetic.bundled_path(split).read_text(encoding="utf-8").splitlines()
        assert [json.loads(l) for l in lines] == recs


def test_split_sizes():
    splits = synthetic.default_splits()
    assert len(splits["train"]) == 200 and len(splits["dev"]) == 50
    for recs in splits.values():
        for r in recs:
            assert len(r["answers"]) == 20
            assert sum(a["label"] for a in r["answers"]) == 1


def test_topic_overlap():
    for r in synthetic.generate(100, seed=5):
        q = {w for w in tokenize(r["question"]) if w.startswith("t")}
        for a in r["answers"]:
            shared = q & {w for w in tokenize(a["text"]) if w.startswith("t")}
            if a["label"]:
                assert len(shared) >= 2
            else:
                assert not shared


def test_deterministic():
    assert synthetic.generate(5, seed=9) == synthetic.generate(5, seed=9)
    assert synthetic.generate(5, seed=9) != synthetic.generate(5, seed=10)
