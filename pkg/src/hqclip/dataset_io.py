"""Line-delimited shard files, manifests and corpus statistics."""

from __future__ import annotations

import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Optional, Sequence

from .types import InvalidDescriptionSet, Sample, normalize_tag

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
BUCKET_WIDTH = 8
BUCKET_MAX = 512


class ShardError(RuntimeError):
    pass


@dataclass
class ShardManifest:
    shard_paths: list[str]
    total_records: int
    schema_version: int = SCHEMA_VERSION
    shard_counts: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ShardManifest":
        """Load a manifest; relative shard paths resolve against its directory."""
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        d = json.loads(path.read_text(encoding="utf-8"))
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ShardError(f"{path}: schema_version {d.get('schema_version')} != {SCHEMA_VERSION}")
        shards = [str(path.parent / p) for p in d["shard_paths"]]
        return cls(shards, d["total_records"], d["schema_version"], d.get("shard_counts", []))


def sample_to_line(s: Sample) -> str:
    return json.dumps(s.to_dict(), ensure_ascii=False, separators=(",", ":"))


def parse_line(line: str) -> Sample:
    d = json.loads(line)
    if not isinstance(d, dict):
        raise ValueError("record is not an object")
    return Sample.from_dict(d)


def _read_one(path: str, strict: bool, errors: Optional[list]) -> Iterator[Sample]:
    if not os.path.exists(path):
        raise ShardError(f"missing shard file: {path}")
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield parse_line(line)
            except (ValueError, KeyError, TypeError, InvalidDescriptionSet) as exc:
                msg = f"{path}:{lineno}: malformed record ({exc.__class__.__name__}: {exc})"
                if strict:
                    raise ShardError(msg) from exc
                log.warning(msg)
                if errors is not None:
                    errors.append(msg)


def read_shards(
    manifest: ShardManifest, strict: bool = True, errors: Optional[list] = None
) -> Iterator[Sample]:
    """Yield samples in shard order, then line order.

    Malformed lines abort under ``strict``; otherwise they are logged,
    appended to ``errors`` and skipped.
    """
    for path in manifest.shard_paths:
        yield from _read_one(path, strict, errors)


def write_shards(
    samples: Iterable[Sample],
    out_dir: str | Path,
    records_per_shard: int,
    prefix: str = "shard",
) -> ShardManifest:
    """Record i goes to shard i // records_per_shard; writes ``manifest.json`` too."""
    if records_per_shard < 1:
        raise ValueError("records_per_shard must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ShardError(f"cannot create output directory {out_dir}: {exc}") from exc

    names: list[str] = []
    counts: list[int] = []
    fh = None
    try:
        for i, s in enumerate(samples):
            if i % records_per_shard == 0:
                if fh is not None:
                    fh.close()
                names.append(f"{prefix}-{len(names):05d}.jsonl")
                counts.append(0)
                fh = open(out_dir / names[-1], "w", encoding="utf-8", newline="\n")
            fh.write(sample_to_line(s) + "\n")
            counts[-1] += 1
    except OSError as exc:
        raise ShardError(f"cannot write shards in {out_dir}: {exc}") from exc
    finally:
        if fh is not None:
            fh.close()

    rel = ShardManifest(names, sum(counts), SCHEMA_VERSION, counts)
    rel.save(out_dir / MANIFEST_NAME)
    return ShardManifest([str(out_dir / n) for n in names], rel.total_records, SCHEMA_VERSION, counts)


def manifest_for_files(paths: Sequence[str | Path]) -> ShardManifest:
    """Manifest over existing shard files, counting their records."""
    counts = []
    for p in paths:
        if not os.path.exists(p):
            raise ShardError(f"missing shard file: {p}")
        with open(p, encoding="utf-8") as fh:
            counts.append(sum(1 for line in fh if line.strip()))
    return ShardManifest([str(p) for p in paths], sum(counts), SCHEMA_VERSION, counts)


def open_manifest(path: str | Path) -> ShardManifest:
    """Accept a manifest file, a directory holding one, or a single ``.jsonl`` shard."""
    path = Path(path)
    if path.suffix == ".jsonl":
        return manifest_for_files([path])
    return ShardManifest.load(path)


@dataclass
class StatsReport:
    n_samples: int
    caption_token_lengths: list[int]
    detailed_token_lengths: list[int]
    mean_caption_len: float
    mean_detailed_len: float
    tag_frequency_topN: list[tuple[str, int]]
    refined_fraction: float
    n_refined: int = 0
    mean_pos_tags: float = 0.0
    mean_neg_tags: float = 0.0
    bucket_width: int = BUCKET_WIDTH

    @property
    def length_ratio(self) -> float:
        """Mean detailed length over mean caption length (0 when undefined)."""
        if self.mean_caption_len == 0:
            return 0.0
        return self.mean_detailed_len / self.mean_caption_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tag_frequency_topN"] = [[t, c] for t, c in self.tag_frequency_topN]
        d["length_ratio"] = self.length_ratio
        return d


def bucket_index(n_tokens: int) -> int:
    """Width-8 buckets over [0, 512); everything at or above 512 lands in the overflow bucket."""
    return min(n_tokens // BUCKET_WIDTH, BUCKET_MAX // BUCKET_WIDTH)


def empty_histogram() -> list[int]:
    return [0] * (BUCKET_MAX // BUCKET_WIDTH + 1)


def compute_stats(
    source,
    tokenizer: Callable[[str], Sequence],
    top_n: int = 20,
) -> StatsReport:
    """Length histograms, means, top-N tags and refined share over a corpus.

    ``source`` is a ShardManifest or an iterable of samples; ``tokenizer``
    maps text to a token sequence (only its length is used).
    """
    samples = read_shards(source) if isinstance(source, ShardManifest) else source
    cap_hist, det_hist = empty_histogram(), empty_histogram()
    cap_total = det_total = 0
    n = n_ref = pos_total = neg_total = 0
    tags: Counter = Counter()
    for s in samples:
        n += 1
        c = len(tokenizer(s.raw_caption))
        cap_hist[bucket_index(c)] += 1
        cap_total += c
        ds = s.description_set
        if ds is not None:
            n_ref += 1
            dl = len(tokenizer(ds.detailed))
            det_hist[bucket_index(dl)] += 1
            det_total += dl
            normed = {normalize_tag(t) for t in ds.pos_tags} - {""}
            tags.update(normed)
            pos_total += len(ds.pos_tags)
            neg_total += len(ds.neg_tags)
    top = sorted(tags.items(), key=lambda kv: (-kv[1], kv[0]))[:top_n]
    return StatsReport(
        n_samples=n,
        caption_token_lengths=cap_hist,
        detailed_token_lengths=det_hist,
        mean_caption_len=cap_total / n if n else 0.0,
        mean_detailed_len=det_total / n_ref if n_ref else 0.0,
        tag_frequency_topN=top,
        refined_fraction=n_ref / n if n else 0.0,
        n_refined=n_ref,
        mean_pos_tags=pos_total / n_ref if n_ref else 0.0,
        mean_neg_tags=neg_total / n_ref if n_ref else 0.0,
    )
