"""Caption refinement: prompts, reply parsing, a deterministic mock, a remote client and the pipeline.

Every captioner is a callable ``(sample) -> DescriptionSet`` that raises on
failure. ``refine_dataset`` wraps it with retries, keeps input order across
worker threads and writes the refined shards.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

from .dataset_io import ShardManifest, read_shards, write_shards
from .textkit import words
from .types import DescriptionSet, InvalidDescriptionSet, Sample, normalize_tags

log = logging.getLogger(__name__)

INSTRUCTION = (
    "Given an image-text pair crawled from the Internet, please assign the text information as a "
    "reference, generate more detailed descriptions for the image. If the given text and image has "
    "conflicts, please prioritize the image when generating information. The output should be in ENGLISH."
)
EXAMPLES_BLOCK = "Here are several examples: {examples}. Current input: text '{target}' with image, please output:"
EXAMPLE_ITEM = "Input: '{caption}',Output: '{output}'"
OUTPUT_CONTRACT = (
    "Reply with a single JSON object with exactly these keys: "
    '"detailed_description" (string, a detailed description of the image), '
    '"negative_description" (string, the detailed description with a subtle factual error), '
    '"positive_tags" (list of short tags naming what is in the image), '
    '"negative_tags" (list of short tags that are close to but not in the image).'
)
REPLY_KEYS = ("detailed_description", "negative_description", "positive_tags", "negative_tags")
TOKEN_ENV = "HQCLIP_API_TOKEN"
SUMMARY_NAME = "refine_summary.json"


# -- prompt ---------------------------------------------------------------

@dataclass(frozen=True)
class PromptTemplate:
    instruction_text: str = INSTRUCTION
    output_contract: str = OUTPUT_CONTRACT

    def __post_init__(self):
        if not self.instruction_text.strip():
            raise ValueError("instruction_text must be non-empty")


class ReplyParseError(ValueError):
    """A captioner reply that does not yield a valid description set; ``key`` names the culprit."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def serialize(ds: DescriptionSet) -> str:
    """The four-key reply object; ``parse_reply(serialize(ds)) == ds``."""
    return json.dumps(
        {
            "detailed_description": ds.detailed,
            "negative_description": ds.negative,
            "positive_tags": list(ds.pos_tags),
            "negative_tags": list(ds.neg_tags),
        },
        ensure_ascii=False,
    )


def _extract_object(text: str) -> dict:
    # models like to wrap JSON in prose or code fences; take the outermost braces
    start, end = text.find("{"), text.rfind("}")
    if start < 0 or end < start:
        raise ReplyParseError("reply", "no JSON object found")
    try:
        obj = json.loads(text[start:end + 1])
    except json.JSONDecodeError as exc:
        raise ReplyParseError("reply", f"invalid JSON ({exc.msg})") from exc
    if not isinstance(obj, dict):
        raise ReplyParseError("reply", "top level is not an object")
    return obj


def parse_reply(reply_text: str) -> DescriptionSet:
    obj = _extract_object(reply_text)
    for key in REPLY_KEYS:
        if key not in obj:
            raise ReplyParseError(key, "missing")
    texts = {}
    for key in REPLY_KEYS[:2]:
        v = obj[key]
        if not isinstance(v, str) or not v.strip():
            raise ReplyParseError(key, "must be a non-empty string")
        texts[key] = v.strip()
    tags = {}
    for key in REPLY_KEYS[2:]:
        v = obj[key]
        if not isinstance(v, list) or not all(isinstance(t, str) for t in v):
            raise ReplyParseError(key, "must be a list of strings")
        tags[key] = normalize_tags(v)
        if not tags[key]:
            raise ReplyParseError(key, "empty after normalization")
    overlap = set(tags["positive_tags"]) & set(tags["negative_tags"])
    if overlap:
        raise ReplyParseError("positive_tags/negative_tags", f"overlap {sorted(overlap)}")
    try:
        return DescriptionSet(
            texts["detailed_description"], texts["negative_description"],
            tuple(tags["positive_tags"]), tuple(tags["negative_tags"]),
        )
    except InvalidDescriptionSet as exc:  # pragma: no cover - guarded above
        raise ReplyParseError("reply", str(exc)) from exc


@dataclass(frozen=True)
class ExemplarPair:
    input_caption: str
    exemplar_output: str

    def __post_init__(self):
        if not self.input_caption.strip():
            raise ValueError("exemplar input_caption must be non-empty")
        parse_reply(self.exemplar_output)

    @classmethod
    def from_description(cls, caption: str, ds: DescriptionSet) -> "ExemplarPair":
        return cls(caption, serialize(ds))


DEFAULT_EXEMPLARS = (
    ExemplarPair.from_description(
        "dog on the beach",
        DescriptionSet(
            "A brown dog with a red collar runs along a sandy beach. Small waves break behind it "
            "and the sky is clear and pale blue.",
            "A black dog with a red collar runs along a sandy beach. Small waves break behind it "
            "and the sky is clear and pale blue.",
            ("dog", "beach", "red collar", "waves"),
            ("black dog", "snow"),
        ),
    ),
)


def build_prompt(template: PromptTemplate, exemplar: ExemplarPair | Sequence[ExemplarPair],
                 target_caption: str) -> str:
    """Instruction, in-context exemplar(s), target caption and output contract, in that order."""
    if not target_caption.strip():
        raise ValueError("target caption must be non-empty")
    pool = [exemplar] if isinstance(exemplar, ExemplarPair) else list(exemplar)
    if not pool:
        raise ValueError("at least one exemplar is required")
    examples = ", ".join(EXAMPLE_ITEM.format(caption=e.input_caption, output=e.exemplar_output) for e in pool)
    return "\n\n".join([
        template.instruction_text,
        EXAMPLES_BLOCK.format(examples=examples, target=target_caption),
        template.output_contract,
    ])


def _digest(*parts) -> int:
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def pick_exemplars(pool: Sequence[ExemplarPair], sample_id: str, seed: int, n: int = 1) -> list[ExemplarPair]:
    """``n`` distinct exemplars chosen by a hash of (seed, sample id)."""
    if not pool:
        raise ValueError("empty exemplar pool")
    n = min(n, len(pool))
    order = sorted(range(len(pool)), key=lambda i: _digest("exemplar", seed, sample_id, i))
    return [pool[i] for i in order[:n]]


# -- mock captioner ---------------------------------------------------------

STOPWORDS = frozenset(
    "a an the of on in at to and or with for from by is are was were be this that these those "
    "it its as into over under near photo picture image".split()
)
SUBSTITUTES = (
    "blue", "green", "yellow", "purple", "wooden", "metal", "small", "large", "old", "new",
    "cat", "horse", "bicycle", "table", "river", "mountain", "window", "street", "field", "boat",
)
_MOCK_SENTENCES = (
    "the {w} is clearly visible in this picture",
    "a closer look reveals more detail around the {w}",
    "the {w} is well lit and sharply in focus",
)


def content_words(caption: str) -> list[str]:
    toks = words(caption)
    content = [t for t in toks if t not in STOPWORDS]
    return list(dict.fromkeys(content or toks or ["image"]))


def mock_refine(sample: Sample, seed: int = 0) -> DescriptionSet:
    """Deterministic stand-in for a refinement model.

    The detailed text opens with the normalized caption and adds one fixed
    sentence per content word (cycling) until it has at least four times the
    caption's tokens. The negative replaces one content word, picked by a hash
    of (id, caption, seed), with a substitute that is not in the caption.
    """
    cap = " ".join(words(sample.raw_caption)) or "image"
    content = content_words(sample.raw_caption)
    target = 4 * max(1, len(words(sample.raw_caption)))
    parts, n_tok, i = [cap], len(cap.split()), 0
    while n_tok < target:
        w = content[i % len(content)]
        s = _MOCK_SENTENCES[(i // len(content)) % len(_MOCK_SENTENCES)].format(w=w)
        parts.append(s)
        n_tok += len(s.split())
        i += 1
    detailed = ". ".join(parts) + "."

    h = _digest("mock", sample.id, sample.raw_caption, seed)
    victim = content[h % len(content)]
    choices = [s for s in SUBSTITUTES if s not in content]
    sub = choices[(h >> 20) % len(choices)]
    negative = re.sub(rf"\b{re.escape(victim)}\b", sub, detailed)
    return DescriptionSet(detailed, negative, tuple(content), (sub,))


class MockCaptioner:
    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, sample: Sample) -> DescriptionSet:
        return mock_refine(sample, self.seed)


# -- remote captioner ---------------------------------------------------------

class CaptionerError(RuntimeError):
    """A failed refinement attempt; the pipeline retries these."""


@dataclass(frozen=True)
class CaptionerConfig:
    endpoint_url: Optional[str] = None
    model_name: str = "mock"
    max_retries: int = 3
    timeout: float = 60.0
    concurrency: int = 1
    temperature: float = 0.0
    seed: int = 0
    n_exemplars: int = 1
    max_failure_fraction: float = 0.05
    backoff_base: float = 1.0
    backoff_cap: float = 32.0
    token_env: str = TOKEN_ENV

    def __post_init__(self):
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.n_exemplars < 1:
            raise ValueError("n_exemplars must be >= 1")
        if not 0.0 <= self.max_failure_fraction <= 1.0:
            raise ValueError("max_failure_fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


class RemoteCaptioner:
    """Chat-completions client; the image travels as a feature vector next to the prompt."""

    def __init__(self, cfg: CaptionerConfig, exemplars: Sequence[ExemplarPair] = DEFAULT_EXEMPLARS,
                 template: PromptTemplate = PromptTemplate(), client=None):
        import httpx

        if not cfg.endpoint_url:
            raise ValueError("RemoteCaptioner needs cfg.endpoint_url")
        self.cfg = cfg
        self.exemplars = list(exemplars)
        self.template = template
        headers = {}
        token = os.environ.get(cfg.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = client or httpx.Client(timeout=cfg.timeout)
        self._headers = headers
        self._httpx = httpx

    def request_body(self, sample: Sample) -> dict:
        ex = pick_exemplars(self.exemplars, sample.id, self.cfg.seed, self.cfg.n_exemplars)
        return {
            "model": self.cfg.model_name,
            "temperature": self.cfg.temperature,
            "messages": [{"role": "user", "content": build_prompt(self.template, ex, sample.raw_caption)}],
            "image_features": [float(v) for v in sample.image_features],
        }

    def __call__(self, sample: Sample) -> DescriptionSet:
        try:
            resp = self._client.post(self.cfg.endpoint_url, json=self.request_body(sample),
                                     headers=self._headers, timeout=self.cfg.timeout)
        except self._httpx.HTTPError as exc:
            raise CaptionerError(f"request failed: {exc}") from exc
        if resp.status_code >= 400:
            raise CaptionerError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            content = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise CaptionerError(f"unexpected response shape: {exc}") from exc
        try:
            return parse_reply(content)
        except ReplyParseError as exc:
            raise CaptionerError(f"unusable reply: {exc}") from exc


class FaultInjector:
    """Wraps a captioner and fails chosen ids: ``faults[id]`` failures first (-1 = always)."""

    def __init__(self, inner: Callable[[Sample], DescriptionSet], faults: dict[str, int]):
        self.inner = inner
        self._left = dict(faults)
        self._lock = threading.Lock()

    def __call__(self, sample: Sample) -> DescriptionSet:
        with self._lock:
            left = self._left.get(sample.id, 0)
            if left > 0:
                self._left[sample.id] = left - 1
        if left != 0:
            raise CaptionerError(f"injected fault for {sample.id}")
        return self.inner(sample)


# -- pipeline -------------------------------------------------------------------

@dataclass
class RefineSummary:
    n_input: int = 0
    n_refined: int = 0
    n_failed: int = 0
    n_retries: int = 0
    retries_by_id: dict[str, int] = field(default_factory=dict)
    failed_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


class RefineQuotaExceeded(RuntimeError):
    def __init__(self, summary: RefineSummary, limit: float):
        super().__init__(
            f"{summary.n_failed}/{summary.n_input} samples failed, above the allowed fraction {limit}"
        )
        self.summary = summary


def make_captioner(cfg: CaptionerConfig, exemplars: Sequence[ExemplarPair] = DEFAULT_EXEMPLARS):
    if cfg.endpoint_url:
        return RemoteCaptioner(cfg, exemplars)
    return MockCaptioner(cfg.seed)


def _refine_one(captioner, sample: Sample, cfg: CaptionerConfig, sleep) -> tuple[Sample, int, bool]:
    retries = 0
    while True:
        try:
            return sample.with_description(captioner(sample)), retries, False
        except (CaptionerError, ReplyParseError) as exc:
            if retries >= cfg.max_retries:
                log.warning("sample %s failed after %d retries: %s", sample.id, retries, exc)
                # failed samples stay in the corpus as unrefined raw-caption records
                return sample.with_description(None), retries, True
            sleep(min(cfg.backoff_cap, cfg.backoff_base * 2 ** retries))
            retries += 1


def refine_samples(samples: Iterable[Sample], cfg: CaptionerConfig, captioner=None,
                   sleep: Callable[[float], None] = time.sleep) -> tuple[list[Sample], RefineSummary]:
    """Refine in a thread pool; output order equals input order."""
    captioner = captioner or make_captioner(cfg)
    samples = list(samples)
    with ThreadPoolExecutor(max_workers=cfg.concurrency) as pool:
        results = list(pool.map(lambda s: _refine_one(captioner, s, cfg, sleep), samples))
    summary = RefineSummary(n_input=len(samples))
    out = []
    for s, retries, failed in results:
        out.append(s)
        summary.n_retries += retries
        if retries:
            summary.retries_by_id[s.id] = retries
        if failed:
            summary.n_failed += 1
            summary.failed_ids.append(s.id)
        else:
            summary.n_refined += 1
    return out, summary


def refine_dataset(
    cfg: CaptionerConfig,
    source,
    out_dir: str | Path,
    captioner=None,
    records_per_shard: int = 1000,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[ShardManifest, RefineSummary]:
    """Refine a manifest (or iterable of samples) into ``out_dir``; writes a summary JSON too.

    Raises RefineQuotaExceeded, without writing shards, when the failed
    fraction is above ``cfg.max_failure_fraction``.
    """
    samples = read_shards(source) if isinstance(source, ShardManifest) else source
    refined, summary = refine_samples(samples, cfg, captioner, sleep)
    if summary.n_input and summary.n_failed / summary.n_input > cfg.max_failure_fraction:
        raise RefineQuotaExceeded(summary, cfg.max_failure_fraction)
    manifest = write_shards(refined, out_dir, records_per_shard, prefix="refined")
    Path(out_dir, SUMMARY_NAME).write_text(
        json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest, summary


def export_sft_corpus(
    pairs: Iterable[tuple[Sample, DescriptionSet]],
    out: str | Path,
    template: PromptTemplate = PromptTemplate(),
    exemplars: Sequence[ExemplarPair] = DEFAULT_EXEMPLARS,
    seed: int = 0,
) -> int:
    """One ``{"user", "assistant"}`` line per pair; returns the record count."""
    n = 0
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for sample, ds in pairs:
            ex = pick_exemplars(exemplars, sample.id, seed)
            rec = {"user": build_prompt(template, ex, sample.raw_caption), "assistant": serialize(ds)}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
            n += 1
    return n
