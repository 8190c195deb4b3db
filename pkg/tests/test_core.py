import pytest
from hypothesis import given
from hypothesis import strategies as st

from saco.core import (
    EOS_ID, PAD_ID, SOS_ID, UNK_ID, DatasetItem, Vocabulary, build_vocab, detokenize, encode_caption, tokenize,
)


def test_build_vocab_counts():
    v = build_vocab(["a dog", "a cat"], min_freq=1)
    assert len(v) == 7
    assert {"a", "dog", "cat"} <= set(v.token_to_id)


def test_min_freq_threshold_is_inclusive():
    v = build_vocab(["a a", "a"], min_freq=3)
    assert len(v) == 5 and "a" in v


def test_special_ids_pinned():
    v = build_vocab(["x y"])
    assert v.specials == {"<PAD>": PAD_ID, "<SOS>": SOS_ID, "<EOS>": EOS_ID, "<UNK>": UNK_ID}
    assert (PAD_ID, SOS_ID, EOS_ID, UNK_ID) == (0, 1, 2, 3)


def test_ordering_frequency_then_lexicographic():
    v = build_vocab(["b a c c", "b"])
    assert v.id_to_token[4:] == ["b", "c", "a"]


def test_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_vocab([])


def test_vocab_json_deterministic(tmp_path):
    corpus = ["the quick brown fox", "the lazy dog", "a quick dog"]
    build_vocab(corpus).save(tmp_path / "a.json")
    build_vocab(list(corpus)).save(tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert Vocabulary.load(tmp_path / "a.json") == build_vocab(corpus)


def test_tokenize_and_unknown():
    v = build_vocab(["a dog"])
    assert tokenize("A dog", v) == [v.token_to_id["a"], v.token_to_id["dog"]]
    assert tokenize("zebra", v) == [UNK_ID]
    assert tokenize("", v) == []


def test_detokenize_strips_specials():
    v = build_vocab(["a dog"])
    ids = [SOS_ID, v.token_to_id["a"], v.token_to_id["dog"], EOS_ID]
    assert detokenize(ids, v) == "a dog"
    assert detokenize([], v) == ""
    assert detokenize([UNK_ID], v) == "<UNK>"
    with pytest.raises(IndexError):
        detokenize([len(v)], v)


words = st.lists(st.sampled_from(["a", "dog", "cat", "sits", "on", "mat"]), max_size=12)


@given(words)
def test_round_trip(ws):
    v = build_vocab(["a dog cat sits on mat"])
    text = " ".join(ws)
    assert detokenize(tokenize(text, v), v) == text


@given(st.lists(st.text(alphabet="abc ", max_size=8), min_size=1, max_size=6))
def test_build_vocab_deterministic(corpus):
    if not any(c.split() for c in corpus):
        return
    assert build_vocab(corpus).to_json() == build_vocab(list(corpus)).to_json()


def test_dataset_item_validation():
    v = build_vocab(["a dog"])
    item = DatasetItem("img", [[0.0, 1.0]], {"dog"}, 0, encode_caption("a dog", v), n_styles=2)
    assert item.caption[-1] == EOS_ID
    with pytest.raises(ValueError):
        DatasetItem("img", [[0.0]], {"dog"}, 0, [4])
    with pytest.raises(ValueError):
        DatasetItem("img", [[0.0]], {"dog"}, 2, [EOS_ID], n_styles=2)
    with pytest.raises(ValueError):
        DatasetItem("img", [], {"dog"}, 0, [EOS_ID])
