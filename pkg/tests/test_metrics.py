import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saco.metrics import CiderD, bleu, cider, cider_scores, lcs_length, rouge_l, rouge_l_single, score_all

WORDS = st.sampled_from(["a", "dog", "cat", "runs", "on", "the", "grass", "red", "happy"])
SENT = st.lists(WORDS, min_size=1, max_size=8).map(" ".join)


@pytest.mark.parametrize("key", ["bleu1", "bleu2", "bleu3", "bleu4", "rougeL", "cider"])
def test_matches_frozen_oracle(metric_fixture, metric_golden, key):
    scores = score_all(metric_fixture["candidates"], metric_fixture["references"])
    assert abs(scores[key] - metric_golden[key]) <= 1e-4


def test_cider_per_item_matches_oracle(metric_fixture, metric_golden):
    per_item = cider_scores(metric_fixture["candidates"], metric_fixture["references"])
    for key, expected in metric_golden["cider_per_item"].items():
        assert abs(per_item[key] - expected) <= 1e-4, key


def test_cider_self_score(metric_fixture, metric_golden):
    cands = dict(metric_fixture["candidates"], img03=metric_fixture["references"]["img03"][0])
    got = cider_scores(cands, metric_fixture["references"])["img03"]
    assert abs(got - metric_golden["cider_self_img03"]) <= 1e-4
    assert got == pytest.approx(10.0, abs=1e-9)


class TestTrivialCases:
    refs = {"a": ["a dog runs on the grass"], "b": ["two red cats sleep"]}

    def test_identity(self):
        cands = {k: v[0] for k, v in self.refs.items()}
        assert bleu(cands, self.refs) == pytest.approx([1.0] * 4)
        assert rouge_l(cands, self.refs) == 1.0
        assert rouge_l_single("the cat", ["the cat"]) == 1.0

    def test_disjoint(self):
        cands = {"a": "zebra piano", "b": "blue moon"}
        assert bleu(cands, self.refs) == [0.0] * 4
        assert rouge_l(cands, self.refs) == 0.0
        assert cider(cands, self.refs) == 0.0

    def test_rouge_hand_example(self):
        f = (1 + 1.44) * 1 * (2 / 3) / ((2 / 3) + 1.44 * 1)
        assert rouge_l_single("the cat", ["the cat sat"]) == pytest.approx(f, abs=1e-12)
        assert abs(f - 0.7722) < 1e-4

    def test_lcs(self):
        assert lcs_length("a b c d".split(), "a c d b".split()) == 3
        assert lcs_length([], ["x"]) == 0

    def test_brevity_penalty(self):
        refs = {"a": ["a dog runs on the grass"]}
        short = bleu({"a": "a dog runs"}, refs)
        assert short[0] == pytest.approx(math.exp(1 - 6 / 3))

    def test_empty_and_missing(self):
        with pytest.raises(ValueError):
            bleu({}, {})
        with pytest.raises(KeyError):
            rouge_l({"z": "a dog"}, self.refs)
        with pytest.raises(ValueError):
            CiderD([["x"]]).score("x", [])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(SENT, st.lists(SENT, min_size=1, max_size=3)), min_size=1, max_size=5))
def test_ranges_and_permutation(pairs):
    cands = {f"i{k}": c for k, (c, _) in enumerate(pairs)}
    refs = {f"i{k}": r for k, (_, r) in enumerate(pairs)}
    scores = score_all(cands, refs)
    for key in ("bleu1", "bleu2", "bleu3", "bleu4", "rougeL"):
        assert 0.0 <= scores[key] <= 1.0 + 1e-12
    assert 0.0 <= scores["cider"] <= 10.0 + 1e-9
    rev = list(reversed(list(cands)))
    permuted = score_all({k: cands[k] for k in rev}, {k: refs[k] for k in rev})
    assert json.dumps(permuted, sort_keys=True) == json.dumps(scores, sort_keys=True)


@settings(max_examples=80, deadline=None)
@given(SENT, st.lists(SENT, min_size=1, max_size=3), st.data())
def test_duplicate_reference_never_lowers_rouge(cand, refs, data):
    dup = data.draw(st.sampled_from(refs))
    assert rouge_l_single(cand, refs + [dup]) >= rouge_l_single(cand, refs)


def test_cider_df_uses_references_only():
    refs = [["a dog runs"], ["a cat sleeps"]]
    scorer = CiderD(refs)
    assert scorer.df[("a",)] == 2 and scorer.df[("dog",)] == 1
    assert ("zebra",) not in scorer.df
    before = dict(scorer.df)
    scorer.score("a zebra runs", ["a dog runs"])
    assert dict(scorer.df) == before
