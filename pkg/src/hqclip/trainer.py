"""Mixed-text batches, the weighted objective, AdamW, checkpoints and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .losses import LossBreakdown, LossWeights, clip_loss, gate_vector, hni_loss, stc_loss, total_loss
from .model import (
    MAX_SCALE,
    MIN_SCALE,
    ModelDims,
    ModelParams,
    PARAM_NAMES,
    CheckpointError,
    backward,
    forward,
    init_params,
    load_npz,
    save_params,
)
from .textkit import (
    EmptyNegativePool,
    SamplingConfig,
    TextCache,
    TokenizerSpec,
    encode_multihot,
    sample_negative_texts,
    sample_training_text,
)
from .types import Sample, TagVocabulary, TextSource

log = logging.getLogger(__name__)

LOG_TEMP_MIN, LOG_TEMP_MAX = math.log(MIN_SCALE), math.log(MAX_SCALE)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    steps: int = 3000
    learning_rate: float = 3e-3
    weight_decay: float = 0.05
    optimizer: str = "adamw"
    lr_schedule: str = "cosine"
    warmup_frac: float = 0.05
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_every: int = 0
    log_every: int = 10
    K: int = 90000
    d_in: int = 64
    d_tok: int = 32
    d: int = 32
    hidden: int = 128
    cls_on_normalized: bool = True
    hni_normalize_by_gate: bool = False
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if isinstance(self.sampling, dict):
            object.__setattr__(self, "sampling", SamplingConfig(**self.sampling))
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        for name in ("batch_size", "K", "d_in", "d_tok", "d", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")

    def dims(self, vocab_size: int, K: int) -> ModelDims:
        return ModelDims(self.d_in, vocab_size, self.d_tok, self.d, self.hidden, K)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sampling"]["strategy"] = self.sampling.strategy.value
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup then cosine decay to zero (or constant after warmup)."""
    warm = int(round(cfg.warmup_frac * cfg.steps))
    if step < warm:
        return cfg.learning_rate * (step + 1) / warm
    if cfg.lr_schedule == "constant" or cfg.steps <= warm:
        return cfg.learning_rate
    progress = (step - warm) / max(1, cfg.steps - warm)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class BatchInputs:
    ids: list[str]
    features: np.ndarray
    texts: list[list[int]]
    sources: list[TextSource]
    neg_texts: list[list[list[int]]]
    hni_mask: np.ndarray
    labels: np.ndarray
    stc_mask: np.ndarray
    replaced_negatives: int = 0


def make_batch(
    samples: Sequence[Sample],
    cfg: TrainConfig,
    rng: np.random.Generator,
    cache: TextCache,
    vocab: TagVocabulary,
) -> BatchInputs:
    """Texts, negatives and multi-hot labels for one batch, drawn from ``rng`` in sample order.

    Unrefined samples (and refined ones with an empty negative pool) get
    placeholder negatives and are masked out of the hard-negative term;
    unrefined samples are also masked out of tag classification.
    """
    sc = cfg.sampling
    n = len(samples)
    texts, sources, negs = [], [], []
    hni_mask = np.zeros(n, dtype=bool)
    stc_mask = np.zeros(n, dtype=bool)
    labels = np.zeros((n, vocab.K), dtype=np.float64)
    replaced = 0
    for i, s in enumerate(samples):
        tt = sample_training_text(s, sc, rng, cache=cache)
        texts.append(list(tt.tokens))
        sources.append(tt.source)
        row = None
        if s.description_set is not None:
            stc_mask[i] = True
            labels[i] = encode_multihot(s.description_set.pos_tags, vocab).bits
            try:
                row, rep = sample_negative_texts(s, sc, rng, cache=cache)
                hni_mask[i] = True
                replaced += int(rep)
            except EmptyNegativePool:
                log.debug("sample %s: empty negative pool, hard-negative term skipped", s.id)
        negs.append(row if row is not None else [list(tt.tokens)] * sc.n_neg)
    return BatchInputs(
        ids=[s.id for s in samples],
        features=np.stack([s.image_features for s in samples]),
        texts=texts,
        sources=sources,
        neg_texts=negs,
        hni_mask=hni_mask,
        labels=labels,
        stc_mask=stc_mask,
        replaced_negatives=replaced,
    )


def objective(p: ModelParams, batch: BatchInputs, cfg: TrainConfig) -> tuple[LossBreakdown, ModelParams]:
    """Total loss and its exact gradient with respect to every parameter."""
    cache = forward(p, batch.features, batch.texts, batch.neg_texts, cfg.cls_on_normalized)
    s = p.scale
    i2t, t2i = clip_loss(cache.X, cache.Y, s)
    gate = gate_vector(cache.X @ cache.Y.T)
    hni, gate_fraction = hni_loss(cache.X, cache.Y, cache.Yneg, s, gate=gate, mask=batch.hni_mask,
                                  normalize_by_gate=cfg.hni_normalize_by_gate)
    cls = stc_loss(cache.Z, batch.labels, mask=batch.stc_mask)
    br = total_loss(i2t, t2i, hni, cls, cfg.weights, gate_fraction)
    return br, backward(p, cache, br.grads)


@dataclass
class TrainState:
    params: ModelParams
    m: ModelParams
    v: ModelParams
    step: int
    rng: np.random.Generator
    running: dict = field(default_factory=dict)


def init_state(cfg: TrainConfig, vocab_size: int, K: int) -> TrainState:
    params = init_params(cfg.dims(vocab_size, K), cfg.seed)
    # the data stream gets its own generator so init and sampling stay independent
    rng = np.random.default_rng([cfg.seed, cfg.sampling.seed])
    return TrainState(params, params.zeros_like(), params.zeros_like(), 0, rng)


class TrainingDiverged(RuntimeError):
    pass


def apply_update(state: TrainState, grads: ModelParams, cfg: TrainConfig, lr: float) -> None:
    p = state.params
    b1, b2 = cfg.adam_betas
    t = state.step + 1
    for name in PARAM_NAMES:
        w = getattr(p, name)
        g = getattr(grads, name)
        if cfg.optimizer == "sgd":
            upd = g
        else:
            m = getattr(state.m, name)
            v = getattr(state.v, name)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            upd = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + cfg.adam_eps)
        if cfg.weight_decay and w.ndim == 2:
            w -= lr * cfg.weight_decay * w
        w -= lr * upd
    np.clip(p.log_temp, LOG_TEMP_MIN, LOG_TEMP_MAX, out=p.log_temp)


def train_step(state: TrainState, batch: BatchInputs, cfg: TrainConfig) -> LossBreakdown:
    """One optimizer step in place; returns the loss breakdown before the update."""
    br, grads = objective(state.params, batch, cfg)
    if not np.isfinite(br.l_total) or not grads.all_finite():
        raise TrainingDiverged(
            f"non-finite loss at step {state.step} (total={br.l_total}); batch ids: {batch.ids}"
        )
    lr = lr_at(cfg, state.step)
    apply_update(state, grads, cfg, lr)
    state.step += 1
    ema = state.running
    for k in ("l_total", "l_i2t", "l_t2i", "l_hni", "l_cls", "gate_fraction"):
        val = getattr(br, k)
        ema[k] = val if k not in ema else 0.98 * ema[k] + 0.02 * val
    return br


def draw_batch(samples: Sequence[Sample], cfg: TrainConfig, state: TrainState) -> list[Sample]:
    size = min(cfg.batch_size, len(samples))
    idx = state.rng.choice(len(samples), size=size, replace=False)
    return [samples[int(i)] for i in idx]


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str | Path, cfg: Optional[TrainConfig] = None) -> None:
    extra = {
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "running": state.running,
        "kind": "train_state",
    }
    if cfg is not None:
        extra["config"] = cfg.to_dict()
    moments = {}
    for name in PARAM_NAMES:
        moments[f"m/{name}"] = getattr(state.m, name)
        moments[f"v/{name}"] = getattr(state.v, name)
    save_params(state.params, path, seed=cfg.seed if cfg else None, extra=extra, extra_arrays=moments)


def load_checkpoint(path: str | Path) -> tuple[TrainState, dict]:
    meta, data = load_npz(path)
    try:
        params = ModelParams(**{k: data[f"param/{k}"] for k in PARAM_NAMES})
        if meta.get("kind") == "train_state":
            m = ModelParams(**{k: data[f"m/{k}"] for k in PARAM_NAMES})
            v = ModelParams(**{k: data[f"v/{k}"] for k in PARAM_NAMES})
        else:
            m, v = params.zeros_like(), params.zeros_like()
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} is missing array {exc}") from exc
    rng = np.random.default_rng()
    if "rng_state" in meta:
        rng.bit_generator.state = meta["rng_state"]
    state = TrainState(params, m, v, int(meta.get("step", 0)), rng, dict(meta.get("running", {})))
    return state, meta


# -- loop ---------------------------------------------------------------------

@dataclass
class TrainResult:
    state: TrainState
    history: list[dict]
    final_eval: Optional[dict] = None


def _record(step: int, br: LossBreakdown, lr: float, scale: float, batch: BatchInputs) -> dict:
    n = len(batch.sources)
    return {
        "step": step,
        "l_total": br.l_total,
        "l_i2t": br.l_i2t,
        "l_t2i": br.l_t2i,
        "l_hni": br.l_hni,
        "l_cls": br.l_cls,
        "gate_fraction": br.gate_fraction,
        "lr": lr,
        "temperature": 1.0 / scale,
        "enriched_fraction": sum(s is not TextSource.RAW_CAPTION for s in batch.sources) / n,
    }


def train(
    cfg: TrainConfig,
    samples: Sequence[Sample],
    vocab: TagVocabulary,
    tok: TokenizerSpec,
    suite=None,
    metrics_path: Optional[str | Path] = None,
    checkpoint_path: Optional[str | Path] = None,
    state: Optional[TrainState] = None,
    stop_at: Optional[int] = None,
) -> TrainResult:
    """Run the schedule from ``state`` (or a fresh init) until ``cfg.steps`` or ``stop_at``.

    Metrics go to ``metrics_path`` as one JSON object per line; a resumed run
    appends, so an interrupted-then-resumed log equals an uninterrupted one.
    """
    from .evaluator import evaluate

    samples = list(samples)
    if not samples:
        raise ValueError("training needs at least one sample")
    if state is None:
        state = init_state(cfg, tok.size, vocab.K)
    elif state.params.dims != cfg.dims(tok.size, vocab.K):
        raise ValueError("checkpoint dims do not match config/vocabulary")
    cache = TextCache(tok)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    history: list[dict] = []
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "a" if state.step > 0 else "w", encoding="utf-8")
    try:
        while state.step < end:
            step = state.step
            batch = make_batch(draw_batch(samples, cfg, state), cfg, state.rng, cache, vocab)
            lr = lr_at(cfg, step)
            br = train_step(state, batch, cfg)
            last = state.step == cfg.steps
            if step % cfg.log_every == 0 or last:
                rec = _record(step, br, lr, state.params.scale, batch)
                history.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
            if suite is not None and cfg.eval_every and (state.step % cfg.eval_every == 0) and not last:
                rep = evaluate(state.params, suite, tok)
                rec = {"step": state.step, "eval": rep.task_scores(), "aggregate": rep.aggregate}
                history.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
    finally:
        if fh:
            fh.close()
    final = None
    if suite is not None and state.step == cfg.steps:
        final = evaluate(state.params, suite, tok).to_dict()
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path, cfg)
    return TrainResult(state, history, final)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    """Copy of ``cfg`` with fields replaced.

    Plain names resolve to top-level fields first, then ``sampling``, then
    ``weights``; ``sampling.seed`` style keys address a section explicitly.
    """
    top_names = {f.name for f in fields(TrainConfig)}
    sections = {"sampling": {f.name for f in fields(SamplingConfig)},
                "weights": {f.name for f in fields(LossWeights)}}
    top: dict = {}
    nested: dict = {"sampling": {}, "weights": {}}
    for k, v in kw.items():
        if "." in k:
            sec, name = k.split(".", 1)
            if sec not in sections or name not in sections[sec]:
                raise ValueError(f"unknown config key {k!r}")
            nested[sec][name] = v
        elif k in top_names and k not in sections:
            top[k] = v
        elif k in sections["sampling"]:
            nested["sampling"][k] = v
        elif k in sections["weights"]:
            nested["weights"][k] = v
        else:
            raise ValueError(f"unknown config key {k!r}")
    for sec, vals in nested.items():
        if vals:
            top[sec] = replace(getattr(cfg, sec), **vals)
    return replace(cfg, **top)
