import logging
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hqclip.textkit import (
    EmptyNegativePool,
    SamplingConfig,
    Strategy,
    TextCache,
    TokenizerSpec,
    build_vocab,
    encode_multihot,
    load_tokenizer,
    sample_negative_texts,
    sample_training_text,
    save_tokenizer,
    segment_description,
    tokenize,
    words,
)
from hqclip.types import DescriptionSet, Sample, TagVocabulary, TextSource

from oracles import vocab_oracle

SPEC = TokenizerSpec({"a": 0, "red": 1, "car": 2, **{f"w{i}": i + 3 for i in range(7)}}, unk_id=9)


def test_tokenize_examples():
    assert tokenize(SPEC, "A red car.") == [0, 1, 2]
    assert tokenize(SPEC, "") == []
    assert tokenize(SPEC, "zyx") == [9]


def test_tokenizer_file_round_trip(tmp_path):
    spec = TokenizerSpec.from_words(["b", "a", "c"])
    save_tokenizer(spec, tmp_path / "t.txt")
    assert load_tokenizer(tmp_path / "t.txt").vocab == spec.vocab == {"<unk>": 0, "a": 1, "b": 2, "c": 3}


def test_tokenizer_rejects_sparse_ids():
    with pytest.raises(ValueError):
        TokenizerSpec({"a": 0, "b": 2})


def _spec_for(n):
    return TokenizerSpec.from_words([f"t{i}" for i in range(n)])


def test_segments_under_budget():
    spec = _spec_for(200)
    text = ". ".join(" ".join(f"t{i}" for i in range(k)) for k in (60, 50, 40)) + "."
    assert [len(s) for s in segment_description(spec, text)] == [60, 50, 40]


def test_greedy_chunking():
    spec = _spec_for(100)
    assert [len(s) for s in segment_description(spec, " ".join(f"t{i}" for i in range(100)))] == [77, 23]


def test_single_short_sentence():
    assert len(segment_description(SPEC, "Hi.")) == 1


@given(st.lists(st.sampled_from(["a", "red", "car", "x", ".", "!", "?", ";", ",", "  "]), max_size=80),
       st.integers(1, 10))
def test_segmentation_lossless(parts, budget):
    spec = TokenizerSpec(SPEC.vocab, SPEC.unk_id, budget)
    text = " ".join(parts)
    segs = segment_description(spec, text)
    assert all(0 < len(s) <= budget for s in segs)
    assert [t for s in segs for t in s] == tokenize(spec, text)


def _refined(n_sentences=3):
    det = ". ".join(f"w{i} red" for i in range(n_sentences)) + "."
    neg = ". ".join(f"w{i} car" for i in range(n_sentences)) + "."
    return Sample("x", np.zeros(2), "a red car", DescriptionSet(det, neg, ("red", "car"), ("w6",)))


def test_mix_ratio_zero_is_raw():
    rng = np.random.default_rng(0)
    cfg = SamplingConfig(mix_ratio=0.0)
    assert all(sample_training_text(_refined(), cfg, rng, SPEC).source is TextSource.RAW_CAPTION
               for _ in range(200))


def test_unrefined_always_raw():
    s = Sample("u", np.zeros(2), "a red car")
    t = sample_training_text(s, SamplingConfig(mix_ratio=1.0), np.random.default_rng(0), SPEC)
    assert t.source is TextSource.RAW_CAPTION and t.tokens == (0, 1, 2)


def test_random_segment_uniform():
    # chi-square with 2 dof; 13.8 is the 0.999 quantile
    rng, cache, s = np.random.default_rng(1), TextCache(SPEC), _refined(3)
    cfg = SamplingConfig(mix_ratio=1.0)
    counts = Counter(sample_training_text(s, cfg, rng, cache=cache).tokens[0] for _ in range(10_000))
    obs = np.array([counts[3], counts[4], counts[5]])
    assert obs.sum() == 10_000
    assert float(np.sum((obs - 10_000 / 3) ** 2 / (10_000 / 3))) < 13.8


def test_enriched_fraction_at_default_ratio():
    rng, cache, s = np.random.default_rng(2), TextCache(SPEC), _refined()
    cfg = SamplingConfig()
    assert cfg.mix_ratio == 0.75
    frac = np.mean([sample_training_text(s, cfg, rng, cache=cache).source is not TextSource.RAW_CAPTION
                    for _ in range(10_000)])
    assert abs(frac - 0.75) <= 0.02


def test_full_long_and_short_tags():
    s = _refined(3)
    rng = np.random.default_rng(0)
    full = sample_training_text(s, SamplingConfig(mix_ratio=1.0, strategy="full_long"), rng, SPEC)
    assert full.tokens == (3, 1, 4, 1, 5, 1)
    spec = TokenizerSpec(SPEC.vocab, SPEC.unk_id, 4)
    assert len(sample_training_text(s, SamplingConfig(mix_ratio=1.0, strategy="full_long"), rng, spec).tokens) == 4
    tags = sample_training_text(s, SamplingConfig(mix_ratio=1.0, strategy=Strategy.SHORT_TAGS), rng, SPEC)
    assert tags.source is TextSource.SHORT_TAG and tags.tokens == (1, 2)


def test_sampling_deterministic():
    s = _refined(3)
    cfg = SamplingConfig(mix_ratio=0.5)
    a = [sample_training_text(s, cfg, r, SPEC).tokens for r in [np.random.default_rng(5)] for _ in range(50)]
    b = [sample_training_text(s, cfg, r, SPEC).tokens for r in [np.random.default_rng(5)] for _ in range(50)]
    assert a == b


def test_negative_pool_membership():
    s = _refined(3)
    cache = TextCache(SPEC)
    pool = cache.negative_pool(s, SamplingConfig())
    assert len(pool) == 4  # three d- segments and one negative tag
    (neg,), replaced = sample_negative_texts(s, SamplingConfig(), np.random.default_rng(0), cache=cache)
    assert neg in pool and not replaced


def test_negative_exhaustive_and_replacement():
    s = _refined(1)
    cfg = SamplingConfig(n_neg=2)
    negs, replaced = sample_negative_texts(s, cfg, np.random.default_rng(0), SPEC)
    assert sorted(negs) == sorted([[3, 2], [9]]) and not replaced
    negs, replaced = sample_negative_texts(s, SamplingConfig(n_neg=3), np.random.default_rng(0), SPEC)
    assert len(negs) == 3 and replaced


def test_negative_pool_drops_shared_segments_and_tags_flag():
    ds = DescriptionSet("red car. w0 w1.", "red car. w0 w2.", ("red",), ("w2",))
    s = Sample("y", np.zeros(2), "a car", ds)
    cache = TextCache(SPEC)
    assert cache.negative_pool(s, SamplingConfig()) == [[3, 5], [5]]
    assert cache.negative_pool(s, SamplingConfig(neg_tags_in_pool=False)) == [[3, 5]]
    assert len(cache.negative_pool(s, SamplingConfig(drop_shared_segments=False))) == 3


def test_empty_negative_pool():
    with pytest.raises(EmptyNegativePool):
        sample_negative_texts(Sample("u", np.zeros(2), "a"), SamplingConfig(), np.random.default_rng(0), SPEC)
    ds = DescriptionSet("red car.", "red car.", ("red",), ("!!",))
    with pytest.raises(EmptyNegativePool):
        sample_negative_texts(Sample("v", np.zeros(2), "a", ds), SamplingConfig(), np.random.default_rng(0), SPEC)


def _tagged(i, tags):
    return Sample(str(i), np.zeros(2), "c", DescriptionSet("d", "n", tuple(tags), ("zz",)))


def test_vocab_tie_break():
    corpus = [_tagged(0, ["cat", "dog", "car"]), _tagged(1, ["dog", "cat"]), _tagged(2, ["Cat ", "dog"])]
    assert build_vocab(corpus, 2).entries == (("cat", 3), ("dog", 3))


def test_vocab_clamps_with_warning(caplog):
    corpus = [_tagged(i, [f"tag{i}"]) for i in range(100)]
    with caplog.at_level(logging.WARNING):
        v = build_vocab(corpus, 90000)
    assert v.K == 100 and "clamping" in caplog.text


def test_vocab_from_manifest_matches_oracle(small_samples, tmp_path):
    from hqclip.dataset_io import write_shards

    m = write_shards(small_samples, tmp_path, 40)
    assert list(build_vocab(m, 30).entries) == vocab_oracle(small_samples, 30)


@given(st.lists(st.lists(st.sampled_from(["a", "b", "c", "d", "e", "A", "b "]), min_size=1, max_size=4),
                min_size=1, max_size=30),
       st.integers(1, 6))
def test_vocab_prefix_property(tag_lists, K):
    corpus = [_tagged(i, list(dict.fromkeys(t.lower().strip() for t in tags))) for i, tags in enumerate(tag_lists)]
    small, big = build_vocab(corpus, K), build_vocab(corpus, K + 1)
    assert big.entries[: small.K] == small.entries
    assert list(small.entries) == vocab_oracle(corpus, K)


def test_multihot_examples():
    v = TagVocabulary((("cat", 2), ("dog", 1)))
    assert encode_multihot(["cat"], v).bits.tolist() == [1, 0]
    assert encode_multihot([], v).bits.tolist() == [0, 0]
    assert encode_multihot(["cat", "unicorn"], v).bits.tolist() == [1, 0]


@given(st.lists(st.sampled_from(["cat", "dog", "car", "Cat", "x"]), max_size=6))
def test_multihot_popcount(tags):
    v = TagVocabulary((("car", 2), ("cat", 2), ("dog", 1)))
    assert int(encode_multihot(tags, v).bits.sum()) <= len(tags)


def test_words_splits_punctuation():
    assert words("Hello, World! it's 3pm_now") == ["hello", "world", "it", "s", "3pm", "now"]
