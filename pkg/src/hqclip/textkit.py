"""Tokenization, segmentation, per-step text sampling and tag vocabularies."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .types import (
    DEFAULT_TOKEN_BUDGET,
    MultiHotLabel,
    Sample,
    TagVocabulary,
    TextSource,
    TrainingText,
    normalize_tag,
)

log = logging.getLogger(__name__)

_WORD = re.compile(r"[^\W_]+")
_SENTENCE_END = re.compile(r"[.!?;]")
UNK = "<unk>"


@dataclass(frozen=True)
class TokenizerSpec:
    vocab: dict = field(hash=False)
    unk_id: int = 0
    token_budget: int = DEFAULT_TOKEN_BUDGET

    def __post_init__(self):
        ids = sorted(self.vocab.values())
        if ids != list(range(len(ids))):
            raise ValueError("token ids must be dense in 0..|vocab|-1")
        if not 0 <= self.unk_id <= len(ids):
            raise ValueError(f"unk_id {self.unk_id} out of range")
        if self.token_budget < 1:
            raise ValueError("token_budget must be >= 1")

    @property
    def size(self) -> int:
        """Number of embedding rows needed (covers unk even when it has no entry)."""
        return max(len(self.vocab), self.unk_id + 1)

    @classmethod
    def from_words(cls, words: Iterable[str], token_budget: int = DEFAULT_TOKEN_BUDGET) -> "TokenizerSpec":
        """Vocabulary with ``<unk>`` at 0 followed by the sorted distinct words."""
        distinct = sorted({w for w in words if w != UNK})
        vocab = {UNK: 0, **{w: i + 1 for i, w in enumerate(distinct)}}
        return cls(vocab, 0, token_budget)


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize(spec: TokenizerSpec, text: str) -> list[int]:
    """Lowercase, split on whitespace/punctuation, look up with unk fallback."""
    v, unk = spec.vocab, spec.unk_id
    return [v.get(w, unk) for w in words(text)]


def save_tokenizer(spec: TokenizerSpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, i in sorted(spec.vocab.items(), key=lambda kv: kv[1]):
            fh.write(f"{tok}\t{i}\n")


def load_tokenizer(path: str | Path, token_budget: int = DEFAULT_TOKEN_BUDGET) -> TokenizerSpec:
    vocab = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                tok, idx = line.split("\t")
                vocab[tok] = int(idx)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: expected 'token<TAB>id'") from exc
    return TokenizerSpec(vocab, vocab.get(UNK, 0), token_budget)


def segment_description(spec: TokenizerSpec, text: str) -> list[list[int]]:
    """Split at sentence punctuation, then greedily chunk pieces over the budget."""
    budget = spec.token_budget
    out = []
    for piece in _SENTENCE_END.split(text):
        toks = tokenize(spec, piece)
        for start in range(0, len(toks), budget):
            out.append(toks[start:start + budget])
    return out


class Strategy(str, Enum):
    RANDOM_SEGMENT = "random_segment"
    FULL_LONG = "full_long"
    SHORT_TAGS = "short_tags"
    RAW_ONLY = "raw_only"


@dataclass(frozen=True)
class SamplingConfig:
    mix_ratio: float = 0.75
    strategy: Strategy = Strategy.RANDOM_SEGMENT
    n_neg: int = 1
    seed: int = 0
    neg_tags_in_pool: bool = True
    # drop d- segments that also occur verbatim in d+ (they are not negatives)
    drop_shared_segments: bool = True

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise ValueError("mix_ratio must be in [0, 1]")
        if self.n_neg < 1:
            raise ValueError("n_neg must be >= 1")


class TextCache:
    """Memoized tokenization/segmentation of each sample's texts.

    Sampling is called once per sample per step, so re-tokenizing every
    description would dominate a desk-scale training loop.
    """

    def __init__(self, spec: TokenizerSpec):
        self.spec = spec
        self._raw: dict[str, list[int]] = {}
        self._seg: dict[str, list[list[int]]] = {}
        self._pool: dict[tuple, list[list[int]]] = {}

    def raw(self, s: Sample) -> list[int]:
        if s.id not in self._raw:
            toks = tokenize(self.spec, s.raw_caption)[: self.spec.token_budget]
            self._raw[s.id] = toks or [self.spec.unk_id]
        return self._raw[s.id]

    def segments(self, s: Sample) -> list[list[int]]:
        if s.id not in self._seg:
            self._seg[s.id] = segment_description(self.spec, s.description_set.detailed)
        return self._seg[s.id]

    def negative_pool(self, s: Sample, cfg: SamplingConfig) -> list[list[int]]:
        key = (s.id, cfg.neg_tags_in_pool, cfg.drop_shared_segments)
        if key not in self._pool:
            ds = s.description_set
            pool = segment_description(self.spec, ds.negative)
            if cfg.drop_shared_segments:
                positive = {tuple(t) for t in self.segments(s)}
                pool = [seg for seg in pool if tuple(seg) not in positive]
            if cfg.neg_tags_in_pool:
                for tag in ds.neg_tags:
                    toks = tokenize(self.spec, tag)[: self.spec.token_budget]
                    if toks:
                        pool.append(toks)
            self._pool[key] = pool
        return self._pool[key]


def sample_training_text(
    sample: Sample,
    cfg: SamplingConfig,
    rng: np.random.Generator,
    spec: Optional[TokenizerSpec] = None,
    cache: Optional[TextCache] = None,
) -> TrainingText:
    """Pick this step's text for a sample: enriched with prob ``mix_ratio``, else raw.

    Refined samples always consume one uniform draw for the mixing coin, and
    random_segment consumes one more for the segment index.
    """
    cache = cache or TextCache(spec)
    budget = cache.spec.token_budget
    ds = sample.description_set
    if ds is None:
        return TrainingText(cache.raw(sample), TextSource.RAW_CAPTION)
    use_enriched = rng.random() < cfg.mix_ratio
    if not use_enriched or cfg.strategy is Strategy.RAW_ONLY:
        return TrainingText(cache.raw(sample), TextSource.RAW_CAPTION)
    if cfg.strategy is Strategy.SHORT_TAGS:
        toks = tokenize(cache.spec, " ".join(ds.pos_tags))[:budget]
        if toks:
            return TrainingText(toks, TextSource.SHORT_TAG)
        return TrainingText(cache.raw(sample), TextSource.RAW_CAPTION)
    segs = cache.segments(sample)
    if not segs:
        return TrainingText(cache.raw(sample), TextSource.RAW_CAPTION)
    if cfg.strategy is Strategy.FULL_LONG:
        toks = [t for seg in segs for t in seg][:budget]
        return TrainingText(toks, TextSource.DETAILED_SEGMENT)
    return TrainingText(segs[int(rng.integers(len(segs)))], TextSource.DETAILED_SEGMENT)


class EmptyNegativePool(ValueError):
    pass


def sample_negative_texts(
    sample: Sample,
    cfg: SamplingConfig,
    rng: np.random.Generator,
    spec: Optional[TokenizerSpec] = None,
    cache: Optional[TextCache] = None,
) -> tuple[list[list[int]], bool]:
    """Draw ``n_neg`` hard-negative token sequences.

    Returns ``(texts, with_replacement)``; the flag is set when the pool was
    smaller than ``n_neg`` and draws had to repeat.
    """
    if sample.description_set is None:
        raise EmptyNegativePool(f"sample {sample.id} has no description set")
    cache = cache or TextCache(spec)
    pool = cache.negative_pool(sample, cfg)
    if not pool:
        raise EmptyNegativePool(f"sample {sample.id} has an empty negative pool")
    replace = len(pool) < cfg.n_neg
    idx = rng.choice(len(pool), size=cfg.n_neg, replace=replace)
    return [pool[int(i)] for i in idx], replace


def count_tags(samples: Iterable[Sample]) -> Counter:
    counts: Counter = Counter()
    for s in samples:
        if s.description_set is not None:
            counts.update({normalize_tag(t) for t in s.description_set.pos_tags} - {""})
    return counts


def vocab_from_counts(counts: Counter, K: int) -> TagVocabulary:
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if K > len(ordered):
        log.warning("requested K=%d but corpus has only %d distinct tags; clamping", K, len(ordered))
    return TagVocabulary(tuple(ordered[:K]))


def build_vocab(source, K: int) -> TagVocabulary:
    """Top-K normalized positive tags by frequency, ties broken lexicographically.

    ``source`` is a ShardManifest or an iterable of samples. A tag counts
    once per sample.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if hasattr(source, "shard_paths"):
        from .dataset_io import read_shards

        source = read_shards(source, strict=True)
    return vocab_from_counts(count_tags(source), K)


def encode_multihot(tags: Sequence[str], vocab: TagVocabulary) -> MultiHotLabel:
    bits = np.zeros(vocab.K, dtype=np.uint8)
    for t in tags:
        i = vocab.index.get(normalize_tag(t))
        if i is not None:
            bits[i] = 1
    return MultiHotLabel(bits)
