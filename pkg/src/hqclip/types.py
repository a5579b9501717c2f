"""Shared domain types: samples, description sets, tag vocabularies."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Optional

import numpy as np

DEFAULT_D_IN = 64
DEFAULT_TOKEN_BUDGET = 77

_WS = re.compile(r"\s+")


def normalize_tag(tag: str) -> str:
    """Lowercase, trim and collapse internal whitespace."""
    return _WS.sub(" ", tag.strip().lower())


def normalize_tags(tags: Iterable[str]) -> list[str]:
    """Normalize and dedupe, keeping first-seen order; empty tags are dropped."""
    out: list[str] = []
    seen = set()
    for t in tags:
        n = normalize_tag(t)
        if n and n not in seen:
            seen.add(n)
            out.append(n)
    return out


class InvalidDescriptionSet(ValueError):
    pass


@dataclass(frozen=True)
class DescriptionSet:
    """Four-part refinement output: detailed/negative text plus positive/negative tags."""

    detailed: str
    negative: str
    pos_tags: tuple[str, ...]
    neg_tags: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "pos_tags", tuple(self.pos_tags))
        object.__setattr__(self, "neg_tags", tuple(self.neg_tags))
        problems = self.violations()
        if problems:
            raise InvalidDescriptionSet("; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        if not self.detailed.strip():
            out.append("detailed: empty")
        if not self.negative.strip():
            out.append("negative: empty")
        for name in ("pos_tags", "neg_tags"):
            tags = getattr(self, name)
            if any(not t.strip() for t in tags):
                out.append(f"{name}: empty tag")
            if len(set(tags)) != len(tags):
                out.append(f"{name}: duplicate tags")
        overlap = set(self.pos_tags) & set(self.neg_tags)
        if overlap:
            out.append(f"pos_tags/neg_tags: overlap {sorted(overlap)}")
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "detailed": self.detailed,
            "negative": self.negative,
            "pos_tags": list(self.pos_tags),
            "neg_tags": list(self.neg_tags),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DescriptionSet":
        return cls(d["detailed"], d["negative"], tuple(d["pos_tags"]), tuple(d["neg_tags"]))


@dataclass(frozen=True, eq=False)
class Sample:
    """One image-text record; images are precomputed feature vectors."""

    id: str
    image_features: np.ndarray
    raw_caption: str
    description_set: Optional[DescriptionSet] = None

    def __post_init__(self):
        feats = np.array(self.image_features, dtype=np.float64)
        feats.setflags(write=False)
        object.__setattr__(self, "image_features", feats)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.id == other.id
            and self.raw_caption == other.raw_caption
            and self.description_set == other.description_set
            and self.image_features.shape == other.image_features.shape
            and bool(np.array_equal(self.image_features, other.image_features))
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def refined(self) -> bool:
        return self.description_set is not None

    def with_description(self, ds: Optional[DescriptionSet]) -> "Sample":
        return Sample(self.id, self.image_features, self.raw_caption, ds)

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.id,
            "image_features": [float(v) for v in self.image_features],
            "raw_caption": self.raw_caption,
        }
        if self.description_set is not None:
            d["description_set"] = self.description_set.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Sample":
        ds = d.get("description_set")
        return cls(
            id=d["id"],
            image_features=np.asarray(d["image_features"], dtype=np.float64),
            raw_caption=d["raw_caption"],
            description_set=DescriptionSet.from_dict(ds) if ds is not None else None,
        )


@dataclass
class ValidationResult:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_sample(s: Sample, d_in: int) -> ValidationResult:
    """Check Sample invariants for feature dimension ``d_in``.

    Violations come back as data, each message prefixed with the field name.
    """
    out = []
    if not isinstance(s.id, str) or not s.id:
        out.append("id: must be a non-empty string")
    feats = s.image_features
    if feats.ndim != 1 or feats.shape[0] != d_in:
        out.append(f"image_features: expected length {d_in}, got shape {feats.shape}")
    elif not np.all(np.isfinite(feats)):
        out.append("image_features: non-finite entries")
    if not s.raw_caption.strip():
        out.append("raw_caption: empty after trimming")
    if s.description_set is not None:
        out.extend(f"description_set.{v}" for v in s.description_set.violations())
    return ValidationResult(out)


@dataclass(frozen=True)
class TagVocabulary:
    """Top-K tags by corpus frequency; ties broken by lexicographic tag order."""

    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((t, int(c)) for t, c in self.entries))
        keys = [(-c, t) for t, c in self.entries]
        if keys != sorted(keys):
            raise ValueError("entries must be sorted by frequency desc, then tag")
        if len({t for t, _ in self.entries}) != len(self.entries):
            raise ValueError("duplicate tag in vocabulary")
        object.__setattr__(self, "index", {t: i for i, (t, _) in enumerate(self.entries)})

    index: dict = field(init=False, repr=False, compare=False)

    @property
    def K(self) -> int:
        return len(self.entries)

    @property
    def tags(self) -> list[str]:
        return [t for t, _ in self.entries]

    def to_dict(self) -> dict[str, Any]:
        return {"K": self.K, "entries": [[t, c] for t, c in self.entries]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TagVocabulary":
        return cls(tuple((t, c) for t, c in d["entries"]))


@dataclass(frozen=True, eq=False)
class MultiHotLabel:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1 or np.any(bits > 1):
            raise ValueError("multi-hot label must be a 0/1 vector")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __eq__(self, other):
        return isinstance(other, MultiHotLabel) and np.array_equal(self.bits, other.bits)

    __hash__ = None  # type: ignore[assignment]

    @property
    def K(self) -> int:
        return self.bits.shape[0]


class TextSource(str, Enum):
    RAW_CAPTION = "raw_caption"
    DETAILED_SEGMENT = "detailed_segment"
    SHORT_TAG = "short_tag"


@dataclass(frozen=True)
class TrainingText:
    tokens: tuple[int, ...]
    source: TextSource

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ValueError("training text needs at least one token")

