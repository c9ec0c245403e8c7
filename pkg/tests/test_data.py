import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtask.data import (
    ENGLISH_STOPWORDS,
    BatchPlan,
    Dataset,
    Vocabulary,
    build_vocabulary,
    caption_labels,
    generate_synthetic_corpus,
    latent_inclusion_probabilities,
    load_dataset,
    read_captions,
    read_features,
    synthetic_queries,
    tokenize,
    write_captions,
    write_features,
)
from dualtask.errors import EmptyVocabularyError, FormatError


def test_tokenize_lowercases_and_splits_on_punctuation():
    assert tokenize("A man's Red-car, 2 dogs!") == ["a", "man", "s", "red", "car", "2", "dogs"]
    assert tokenize("  ...  ") == []


def test_min_count_boundary_four_versus_five():
    caps = ["zebra runs"] * 5 + ["lion sits"] * 4
    vocab = build_vocabulary(caps, min_count=5)
    assert "zebra" in vocab and "runs" in vocab
    assert "lion" not in vocab and "sits" not in vocab


def test_count_is_per_caption_not_per_occurrence():
    vocab = build_vocabulary(["dog dog dog dog dog"] + ["cat"] * 5, min_count=5)
    assert "dog" not in vocab
    assert vocab.entries == (("cat", 5),)


def test_stopwords_excluded_even_when_frequent():
    vocab = build_vocabulary(["the dog is here"] * 6)
    assert vocab.tokens == ["dog"]
    assert {"the", "is", "here"} <= ENGLISH_STOPWORDS


def test_custom_stopwords():
    vocab = build_vocabulary(["the dog"] * 5, stopwords={"dog"})
    assert vocab.tokens == ["the"]


def test_empty_vocabulary_errors():
    with pytest.raises(EmptyVocabularyError):
        build_vocabulary([])
    with pytest.raises(EmptyVocabularyError):
        build_vocabulary(["a the of"] * 10)


def test_vocabulary_order_count_then_token():
    caps = ["bird"] * 5 + ["ant"] * 5 + ["cow"] * 6
    assert build_vocabulary(caps).entries == (("cow", 6), ("ant", 5), ("bird", 5))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["dog", "cat", "tree", "the", "red", "car"]), min_size=1, max_size=5),
                min_size=1, max_size=40),
       st.randoms())
def test_vocabulary_order_insensitive_and_deterministic(word_lists, rnd):
    caps = [" ".join(w) for w in word_lists]
    shuffled = list(caps)
    rnd.shuffle(shuffled)
    try:
        a = build_vocabulary(caps, min_count=2)
    except EmptyVocabularyError:
        with pytest.raises(EmptyVocabularyError):
            build_vocabulary(shuffled, min_count=2)
        return
    b = build_vocabulary(shuffled, min_count=2)
    assert a == b and a.hash == b.hash


def test_vocabulary_round_trip(tmp_path):
    vocab = build_vocabulary(["dog cat"] * 5 + ["dog"] * 2)
    vocab.save(tmp_path / "v.txt")
    loaded = Vocabulary.load(tmp_path / "v.txt")
    assert loaded == vocab and loaded.hash == vocab.hash
    assert vocab.encode(["cat", "zebra", "dog"]) == [1, 0]


def test_vocabulary_load_rejects_bad_lines(tmp_path):
    (tmp_path / "v.txt").write_text("dog 5\n")
    with pytest.raises(FormatError):
        Vocabulary.load(tmp_path / "v.txt")


def test_caption_labels_union_and_warning(caplog):
    vocab = Vocabulary.from_entries([("dog", 9), ("cat", 7), ("car", 5)])
    lv = caption_labels("v1", ["a dog", "the car"], vocab)
    np.testing.assert_array_equal(lv.values, [1, 0, 1])
    with caplog.at_level(logging.WARNING):
        empty = caption_labels("v2", ["nothing here"], vocab)
    assert empty.positive_count == 0
    assert "v2" in caplog.text


def test_batch_plan_deterministic_and_covering():
    plan = BatchPlan(seed=3, batch_size=4, n_items=10)
    assert [b.tolist() for b in plan.batches(0)] == [b.tolist() for b in plan.batches(0)]
    assert sorted(np.concatenate(plan.batches(1)).tolist()) == list(range(10))
    assert not np.array_equal(plan.permutation(0), plan.permutation(1))


def test_batch_plan_drops_trailing_singleton():
    plan = BatchPlan(seed=0, batch_size=4, n_items=9)
    sizes = [len(b) for b in plan.batches(0)]
    assert sizes == [4, 4]


def test_synthetic_corpus_is_seeded():
    a = generate_synthetic_corpus(5, 12, 6, 4, (3, 5))
    b = generate_synthetic_corpus(5, 12, 6, 4, (3, 5))
    assert a.captions == b.captions
    for v in a.videos:
        np.testing.assert_array_equal(a.videos[v], b.videos[v])
        assert 3 <= a.videos[v].shape[0] <= 5
    c = generate_synthetic_corpus(6, 12, 6, 4, (3, 5))
    assert c.captions != a.captions


def test_synthetic_captions_mention_only_present_concepts():
    ds = generate_synthetic_corpus(0, 30, 8, 4, 5)
    names = set(ds.concept_names)
    for v, caps in ds.captions.items():
        for cap in caps:
            mentioned = set(tokenize(cap)) & names
            assert mentioned and mentioned <= set(ds.latent[v])


def test_inclusion_probabilities_match_generator():
    n_latent = 6
    ds = generate_synthetic_corpus(1, 4000, n_latent, 2, 1)
    p1, p2 = latent_inclusion_probabilities(n_latent)
    names = ds.concept_names
    sets = [set(c) for c in ds.latent.values()]
    single = np.mean([names[0] in s for s in sets])
    pair = np.mean([names[0] in s and names[1] in s for s in sets])
    se1 = np.sqrt(p1 * (1 - p1) / len(sets))
    se2 = np.sqrt(p2 * (1 - p2) / len(sets))
    assert abs(single - p1) < 4 * se1
    assert abs(pair - p2) < 4 * se2


def test_synthetic_queries_relevance_is_exact():
    ds = generate_synthetic_corpus(2, 60, 6, 4, 4)
    for q in synthetic_queries(ds, "single"):
        assert q.relevant == {v for v, c in ds.latent.items() if q.text in c}
    for q in synthetic_queries(ds, "sentence"):
        concept = q.text.split()[-1]
        assert q.text != concept and q.relevant == {v for v, c in ds.latent.items() if concept in c}
    for q in synthetic_queries(ds, "and_not", n=5, seed=1):
        a, b = q.text.split('"')[1], q.text.split('"')[3]
        assert q.relevant == {v for v, c in ds.latent.items() if a in c and b not in c}
    with pytest.raises(ValueError):
        synthetic_queries(ds, "xor")


def test_caption_and_feature_round_trip(tmp_path):
    ds = generate_synthetic_corpus(3, 5, 4, 3, (2, 4))
    write_captions(tmp_path / "c.tsv", ds.captions)
    assert read_captions(tmp_path / "c.tsv") == ds.captions
    for name in ("f.dtff", "f.txt"):
        write_features(tmp_path / name, ds.videos)
        back = read_features(tmp_path / name)
        assert list(back) == list(ds.videos)
        for v in ds.videos:
            np.testing.assert_array_equal(back[v], ds.videos[v])
    loaded = load_dataset(tmp_path / "c.tsv", tmp_path / "f.dtff")
    assert len(loaded.pairs) == len(ds.pairs)


def test_truncated_binary_features_rejected(tmp_path):
    ds = generate_synthetic_corpus(3, 3, 4, 3, 2)
    write_features(tmp_path / "f.dtff", ds.videos)
    raw = (tmp_path / "f.dtff").read_bytes()
    (tmp_path / "t.dtff").write_bytes(raw[:-5])
    with pytest.raises(FormatError):
        read_features(tmp_path / "t.dtff")


def test_malformed_caption_file(tmp_path):
    (tmp_path / "c.tsv").write_text("v1 no tab here\n")
    with pytest.raises(FormatError):
        read_captions(tmp_path / "c.tsv")


def test_dataset_rejects_unknown_video():
    with pytest.raises(FormatError):
        Dataset(videos={}, captions={"v": ["a dog"]})
