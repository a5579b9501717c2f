"""Synthetic concept world: correlated features, captions, description sets, eval suites.

A world has ``n_concepts`` concepts, each with a unit latent in feature
space, and ``n_slots`` attribute slots with ``n_attrs`` values per slot.
Attribute words are concept-specific, but the visual offset of slot ``k``,
value ``v`` is mostly shared across concepts (``attr_share``), so swapping
an attribute for the same-slot, same-value word of another concept gives a
negative that looks almost right and differs in one token.

Image features = latent + sum of slot offsets + N(0, noise_sigma^2).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .types import DescriptionSet, Sample

PROMPT_TEMPLATE = "a photo of {}"

CONCEPT_NAMES = (
    "cat", "dog", "car", "boat", "tree", "lamp", "chair", "bird", "horse", "house",
    "plane", "cup", "bike", "train", "clock", "shoe", "apple", "bottle", "guitar", "kite",
    "bench", "bear", "sheep", "truck",
)

# sentence templates: the first introduces the concept, the rest describe one slot each.
# attribute words sit at the end so budget truncation drops whole slots.
INTRO = "this picture shows a single {c} standing somewhere near the middle of a wide frame"
SLOT_SENTENCES = (
    "looking closely at the surface of the {c} one can clearly see that its overall colour is {a}",
    "when you compare it with other objects nearby the size and general build of this {c} appear {a}",
    "the texture covering most of the visible part of the {c} is worth mentioning because it feels {a}",
    "finally the way the {c} is positioned within the rest of the scene suggests that its pose is {a}",
    "in addition the lighting that falls across the {c} gives the whole image a mood that is {a}",
    "the material that the {c} seems to be made of looks as though it would be {a}",
)
CAPTION = "a photo of a {a} {c}"
RETRIEVAL_CAPTION = "a photo of a {attrs} {c}"

_SYLLABLES = ("ka", "lo", "mi", "ru", "ze", "to", "va", "ni", "po", "se", "du", "fe", "gi", "ha", "jo",
              "bu", "ce", "ly", "wo", "xe")


class WorldError(ValueError):
    pass


@dataclass
class ConceptWorld:
    seed: int
    concepts: list[str]
    latents: np.ndarray  # n_concepts x D_in, unit rows
    attr_words: list[list[list[str]]]  # [concept][slot][value]
    shared_offsets: np.ndarray  # n_slots x n_attrs x D_in
    specific_offsets: np.ndarray  # n_concepts x n_slots x n_attrs x D_in
    noise_sigma: float
    attr_scale: float
    attr_share: float
    caption_noise: float
    concept_scale: float = 1.0
    vocab: list[str] = field(default_factory=list)

    @property
    def n_concepts(self) -> int:
        return len(self.concepts)

    @property
    def n_slots(self) -> int:
        return self.shared_offsets.shape[0]

    @property
    def n_attrs(self) -> int:
        return self.shared_offsets.shape[1]

    @property
    def d_in(self) -> int:
        return self.latents.shape[1]

    def offset(self, c: int, k: int, v: int) -> np.ndarray:
        a, s = self.attr_scale, self.attr_share
        return a * (np.sqrt(s) * self.shared_offsets[k, v] + np.sqrt(1 - s) * self.specific_offsets[c, k, v])

    def clean_features(self, c: int, values) -> np.ndarray:
        f = self.concept_scale * self.latents[c]
        for k, v in enumerate(values):
            f += self.offset(c, k, v)
        return f

    def descriptor(self) -> dict:
        """Every generator parameter; regenerating from it reproduces the world."""
        return {
            "seed": self.seed,
            "n_concepts": self.n_concepts,
            "n_attrs": self.n_attrs,
            "n_slots": self.n_slots,
            "D_in": self.d_in,
            "noise_sigma": self.noise_sigma,
            "attr_scale": self.attr_scale,
            "attr_share": self.attr_share,
            "caption_noise": self.caption_noise,
            "concept_scale": self.concept_scale,
            "concepts": self.concepts,
        }


def _unit_rows(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _pseudo_words(rng, n, taken):
    out = []
    while len(out) < n:
        w = "".join(rng.choice(_SYLLABLES, size=3))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def template_words() -> set[str]:
    from .textkit import words

    text = " ".join((INTRO, *SLOT_SENTENCES, CAPTION, RETRIEVAL_CAPTION, PROMPT_TEMPLATE))
    return set(words(text.replace("{c}", "").replace("{a}", "").replace("{attrs}", "").replace("{}", "")))


def generate_world(
    seed: int,
    n_concepts: int = 8,
    n_attrs: int = 5,
    D_in: int = 64,
    noise_sigma: float = 0.05,
    n_slots: int = 4,
    attr_scale: float = 0.6,
    attr_share: float = 0.8,
    caption_noise: float = 0.3,
    concept_scale: float = 1.0,
    max_attempts: int = 1000,
) -> ConceptWorld:
    """Deterministic world; latents are rejection-sampled to pairwise cosine < 0.5."""
    if n_concepts < 2 or n_attrs < 2:
        raise WorldError("n_concepts and n_attrs must be >= 2")
    if n_concepts > len(CONCEPT_NAMES):
        raise WorldError(f"at most {len(CONCEPT_NAMES)} concepts are available")
    if not 1 <= n_slots <= len(SLOT_SENTENCES):
        raise WorldError(f"n_slots must be in 1..{len(SLOT_SENTENCES)}")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        lat = _unit_rows(rng, (n_concepts, D_in))
        cos = lat @ lat.T
        np.fill_diagonal(cos, -1.0)
        if cos.max() < 0.5:
            break
    else:
        raise WorldError(
            f"could not draw {n_concepts} latents with pairwise cosine < 0.5 in "
            f"{max_attempts} attempts; use a larger D_in"
        )
    taken = template_words() | set(CONCEPT_NAMES)
    words = _pseudo_words(rng, n_concepts * n_slots * n_attrs, taken)
    attr_words = [
        [[words[(c * n_slots + k) * n_attrs + v] for v in range(n_attrs)] for k in range(n_slots)]
        for c in range(n_concepts)
    ]
    concepts = list(CONCEPT_NAMES[:n_concepts])
    world = ConceptWorld(
        seed=seed,
        concepts=concepts,
        latents=lat,
        attr_words=attr_words,
        shared_offsets=_unit_rows(rng, (n_slots, n_attrs, D_in)),
        specific_offsets=_unit_rows(rng, (n_concepts, n_slots, n_attrs, D_in)),
        noise_sigma=noise_sigma,
        attr_scale=attr_scale,
        attr_share=attr_share,
        caption_noise=caption_noise,
        concept_scale=concept_scale,
    )
    world.vocab = sorted(template_words() | set(concepts) | set(words))
    return world


def world_from_descriptor(d: dict) -> ConceptWorld:
    return generate_world(
        d["seed"], d["n_concepts"], d["n_attrs"], d["D_in"], d["noise_sigma"],
        n_slots=d["n_slots"], attr_scale=d["attr_scale"], attr_share=d["attr_share"],
        caption_noise=d["caption_noise"], concept_scale=d.get("concept_scale", 1.0),
    )


def detailed_text(world: ConceptWorld, c: int, values, swap: Optional[tuple[int, int]] = None) -> str:
    """Detailed description; ``swap=(slot, concept)`` substitutes that concept's word in one slot."""
    name = world.concepts[c]
    sentences = [INTRO.format(c=name)]
    for k, v in enumerate(values):
        owner = swap[1] if swap is not None and swap[0] == k else c
        sentences.append(SLOT_SENTENCES[k].format(c=name, a=world.attr_words[owner][k][v]))
    return ". ".join(sentences) + "."


def slot_sentence(world: ConceptWorld, c: int, k: int, v: int, owner: Optional[int] = None) -> str:
    owner = c if owner is None else owner
    return SLOT_SENTENCES[k].format(c=world.concepts[c], a=world.attr_words[owner][k][v])


def _draw(world: ConceptWorld, rng: np.random.Generator):
    c = int(rng.integers(world.n_concepts))
    values = [int(v) for v in rng.integers(world.n_attrs, size=world.n_slots)]
    feats = world.clean_features(c, values) + world.noise_sigma * rng.normal(size=world.d_in)
    return c, values, feats


def _swap(world: ConceptWorld, c: int, rng: np.random.Generator) -> tuple[int, int]:
    k = int(rng.integers(world.n_slots))
    other = int(rng.integers(world.n_concepts - 1))
    return k, other + (other >= c)


def _description_set(world, c, values, swap) -> DescriptionSet:
    k, other = swap
    pos = [world.concepts[c]] + [world.attr_words[c][j][v] for j, v in enumerate(values)]
    neg = [world.attr_words[other][k][values[k]]]
    return DescriptionSet(
        detailed=detailed_text(world, c, values),
        negative=detailed_text(world, c, values, swap=swap),
        pos_tags=tuple(pos),
        neg_tags=tuple(neg),
    )


def _raw_caption(world, c, values, rng) -> str:
    k = int(rng.integers(world.n_slots))
    word = world.attr_words[c][k][values[k]]
    if rng.random() < world.caption_noise:
        # web-style noise: the caption names an attribute the image does not have
        oc, ok, ov = (int(rng.integers(n)) for n in (world.n_concepts, world.n_slots, world.n_attrs))
        word = world.attr_words[oc][ok][ov]
    return CAPTION.format(a=word, c=world.concepts[c])


def _stream(world: ConceptWorld, seed: int, tag: str) -> np.random.Generator:
    h = hashlib.sha256(f"{world.seed}:{seed}:{tag}".encode()).digest()
    return np.random.default_rng(int.from_bytes(h[:8], "little"))


@dataclass
class GeneratedRecord:
    sample: Sample
    concept: int
    values: list[int]
    swap: tuple[int, int]


def generate_records(world: ConceptWorld, n: int, refined_fraction: float, seed: int = 0,
                     prefix: str = "train") -> list[GeneratedRecord]:
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0.0 <= refined_fraction <= 1.0:
        raise ValueError("refined_fraction must be in [0, 1]")
    rng = _stream(world, seed, prefix)
    n_refined = int(round(refined_fraction * n))
    refined = np.zeros(n, dtype=bool)
    refined[rng.permutation(n)[:n_refined]] = True
    out = []
    for i in range(n):
        c, values, feats = _draw(world, rng)
        caption = _raw_caption(world, c, values, rng)
        swap = _swap(world, c, rng)
        ds = _description_set(world, c, values, swap) if refined[i] else None
        out.append(GeneratedRecord(Sample(f"{prefix}-{i:06d}", feats, caption, ds), c, values, swap))
    return out


def generate_dataset(world: ConceptWorld, n: int, refined_fraction: float, seed: int = 0,
                     prefix: str = "train") -> list[Sample]:
    """``n`` samples; exactly ``round(refined_fraction * n)`` carry description sets."""
    return [r.sample for r in generate_records(world, n, refined_fraction, seed, prefix)]


@dataclass
class ClassificationTask:
    name: str
    class_names: list[str]
    prompts: dict[str, list[str]]
    features: np.ndarray
    labels: np.ndarray
    ids: list[str] = field(default_factory=list)


@dataclass
class RetrievalSet:
    name: str
    features: np.ndarray
    captions: list[str]
    ids: list[str] = field(default_factory=list)


@dataclass
class DiscriminationSet:
    name: str
    features: np.ndarray
    positives: list[str]
    negatives: list[str]
    ids: list[str] = field(default_factory=list)


@dataclass
class EvalSuite:
    classification_tasks: list[ClassificationTask]
    retrieval_pairs: list[RetrievalSet]
    discrimination_triples: list[DiscriminationSet]
    samples: list[Sample] = field(default_factory=list)

    def __post_init__(self):
        if not (self.classification_tasks or self.retrieval_pairs or self.discrimination_triples):
            raise ValueError("an eval suite needs at least one task")
        for t in self.classification_tasks:
            if len(t.class_names) < 2:
                raise ValueError(f"classification task {t.name} needs >= 2 classes")
            if t.labels.size and (t.labels.min() < 0 or t.labels.max() >= len(t.class_names)):
                raise ValueError(f"classification task {t.name} has labels out of range")


def generate_eval_suite(world: ConceptWorld, sizes=(200, 200, 200), seed: int = 0,
                        prefix: str = "eval") -> EvalSuite:
    """Held-out classification, retrieval and discrimination tasks.

    Ids use ``prefix`` and an independent random stream, so they never
    collide with training shards generated under a different prefix.
    """
    n_cls, n_ret, n_dis = sizes
    samples: list[Sample] = []

    recs = generate_records(world, n_cls, 1.0, seed, f"{prefix}-cls")
    samples += [r.sample for r in recs]
    cls = ClassificationTask(
        name="concepts",
        class_names=list(world.concepts),
        prompts={c: [PROMPT_TEMPLATE.format(c)] for c in world.concepts},
        features=np.stack([r.sample.image_features for r in recs]) if recs else np.zeros((0, world.d_in)),
        labels=np.array([r.concept for r in recs], dtype=int),
        ids=[r.sample.id for r in recs],
    )

    recs = generate_records(world, n_ret, 1.0, seed, f"{prefix}-ret")
    samples += [r.sample for r in recs]
    captions = []
    for r in recs:
        attrs = " ".join(world.attr_words[r.concept][k][v] for k, v in enumerate(r.values))
        captions.append(RETRIEVAL_CAPTION.format(attrs=attrs, c=world.concepts[r.concept]))
    ret = RetrievalSet(
        name="retrieval",
        features=np.stack([r.sample.image_features for r in recs]),
        captions=captions,
        ids=[r.sample.id for r in recs],
    )

    recs = generate_records(world, n_dis, 1.0, seed, f"{prefix}-dis")
    samples += [r.sample for r in recs]
    pos, neg = [], []
    for r in recs:
        k, other = r.swap
        pos.append(slot_sentence(world, r.concept, k, r.values[k]))
        neg.append(slot_sentence(world, r.concept, k, r.values[k], owner=other))
    dis = DiscriminationSet(
        name="attribute_swap",
        features=np.stack([r.sample.image_features for r in recs]),
        positives=pos,
        negatives=neg,
        ids=[r.sample.id for r in recs],
    )
    return EvalSuite([cls], [ret], [dis], samples)


def bayes_oracle_accuracy(world: ConceptWorld, task: ClassificationTask) -> float:
    """Nearest-latent classification straight from the generator's latents."""
    pred = np.argmax(task.features @ world.latents.T, axis=1)
    return float(np.mean(pred == task.labels))


# -- files -----------------------------------------------------------------

def save_world(world: ConceptWorld, path: str | Path) -> None:
    Path(path).write_text(json.dumps(world.descriptor(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_world(path: str | Path) -> ConceptWorld:
    return world_from_descriptor(json.loads(Path(path).read_text(encoding="utf-8")))


def save_eval_suite(suite: EvalSuite, out_dir: str | Path) -> Path:
    """Write eval samples as a shard plus ``tasks.json`` referencing them by id."""
    from .dataset_io import write_shards

    out_dir = Path(out_dir)
    write_shards(suite.samples, out_dir / "samples", records_per_shard=max(1, len(suite.samples)),
                 prefix="eval")
    doc = {
        "schema_version": 1,
        "classification": [
            {"name": t.name, "classes": t.class_names, "prompts": t.prompts,
             "items": [[i, int(l)] for i, l in zip(t.ids, t.labels)]}
            for t in suite.classification_tasks
        ],
        "retrieval": [
            {"name": t.name, "items": [[i, c] for i, c in zip(t.ids, t.captions)]}
            for t in suite.retrieval_pairs
        ],
        "discrimination": [
            {"name": t.name, "items": [[i, p, n] for i, p, n in zip(t.ids, t.positives, t.negatives)]}
            for t in suite.discrimination_triples
        ],
    }
    path = out_dir / "tasks.json"
    path.write_text(json.dumps(doc, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


def load_eval_suite(tasks_path: str | Path, samples_manifest: Optional[str | Path] = None) -> EvalSuite:
    from .dataset_io import ShardManifest, read_shards

    tasks_path = Path(tasks_path)
    doc = json.loads(tasks_path.read_text(encoding="utf-8"))
    manifest = ShardManifest.load(samples_manifest or tasks_path.parent / "samples")
    samples = list(read_shards(manifest))
    feats = {s.id: s.image_features for s in samples}

    def stack(ids):
        missing = [i for i in ids if i not in feats]
        if missing:
            raise KeyError(f"task references unknown sample ids: {missing[:5]}")
        return np.stack([feats[i] for i in ids]) if ids else np.zeros((0, 0))

    cls = [
        ClassificationTask(t["name"], t["classes"], t["prompts"],
                           stack([i for i, _ in t["items"]]),
                           np.array([l for _, l in t["items"]], dtype=int),
                           [i for i, _ in t["items"]])
        for t in doc.get("classification", [])
    ]
    ret = [
        RetrievalSet(t["name"], stack([i for i, _ in t["items"]]), [c for _, c in t["items"]],
                     [i for i, _ in t["items"]])
        for t in doc.get("retrieval", [])
    ]
    dis = [
        DiscriminationSet(t["name"], stack([i for i, _, _ in t["items"]]),
                          [p for _, p, _ in t["items"]], [n for _, _, n in t["items"]],
                          [i for i, _, _ in t["items"]])
        for t in doc.get("discrimination", [])
    ]
    return EvalSuite(cls, ret, dis, samples)

