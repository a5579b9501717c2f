"""Seeded synthetic experiments and one-parameter ablation sweeps.

Seed ``s`` fixes the world, the training corpus, the eval suite and the
training run, so a sweep averages over independent worlds as well as runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .synth import ConceptWorld, EvalSuite, generate_dataset, generate_eval_suite, generate_world
from .textkit import SamplingConfig, TokenizerSpec, build_vocab
from .losses import LossWeights
from .trainer import TrainConfig, train, with_overrides
from .types import Sample

log = logging.getLogger(__name__)

N_TRAIN = 2000
EVAL_SIZES = (200, 200, 200)
ABLATABLE = ("mix_ratio", "alpha", "beta", "K", "n_neg", "strategy")


@dataclass
class SynthSetup:
    world: ConceptWorld
    train: list[Sample]
    suite: EvalSuite
    tok: TokenizerSpec


@lru_cache(maxsize=8)
def _cached_setup(seed, n_train, refined_fraction, sizes, world_items):
    world = generate_world(seed, **dict(world_items))
    train_s = generate_dataset(world, n_train, refined_fraction, seed=seed)
    suite = generate_eval_suite(world, sizes, seed=seed)
    return SynthSetup(world, train_s, suite, TokenizerSpec.from_words(world.vocab))


def make_setup(seed: int, n_train: int = N_TRAIN, refined_fraction: float = 1.0,
               sizes=EVAL_SIZES, **world_kw) -> SynthSetup:
    return _cached_setup(seed, n_train, refined_fraction, tuple(sizes), tuple(sorted(world_kw.items())))


def run_once(cfg: TrainConfig, setup: SynthSetup) -> dict:
    """Train on the setup's corpus and return the final eval report dict."""
    vocab = build_vocab(setup.train, cfg.K)
    return train(cfg, setup.train, vocab, setup.tok, suite=setup.suite).final_eval


def headline(report: dict) -> dict[str, float]:
    """Per-task scores plus R@1 in each retrieval direction and the aggregate."""
    out = dict(report["task_scores"])
    for name, r in report["retrieval"].items():
        out[f"i2t_R@1/{name}"] = r["i2t_R@1"]
        out[f"t2i_R@1/{name}"] = r["t2i_R@1"]
    out["aggregate"] = report["aggregate"]
    return out


def parse_value(param: str, text: str):
    """Cast a sweep value to the type of the config field it overrides."""
    for owner in (SamplingConfig, LossWeights, TrainConfig):
        for f in fields(owner):
            if f.name == param:
                default = getattr(owner(), param)
                if param == "strategy":
                    return SamplingConfig(strategy=text.strip()).strategy.value
                if isinstance(default, bool):
                    return text.strip().lower() in ("1", "true", "yes")
                if isinstance(default, int):
                    return int(text)
                if isinstance(default, float):
                    return float(text)
                return text.strip()
    raise ValueError(f"unknown ablation parameter {param!r}")


@dataclass
class AblationRow:
    value: object
    mean: dict[str, float]
    std: dict[str, float]
    per_seed: list[dict[str, float]] = field(default_factory=list)


@dataclass
class AblationTable:
    param: str
    seeds: list[int]
    rows: list[AblationRow]

    @property
    def metrics(self) -> list[str]:
        return list(self.rows[0].mean) if self.rows else []

    def best(self, metric: str = "aggregate") -> AblationRow:
        return max(self.rows, key=lambda r: r.mean[metric])

    def to_dict(self) -> dict:
        return {
            "param": self.param,
            "seeds": self.seeds,
            "rows": [{"value": r.value, "mean": r.mean, "std": r.std, "per_seed": r.per_seed} for r in self.rows],
        }

    def format(self) -> str:
        cols = self.metrics
        head = [self.param] + cols
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for r in self.rows:
            cells = [str(r.value)] + [f"{r.mean[c]:.3f} ± {r.std[c]:.3f}" for c in cols]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines)


def ablate(
    param: str,
    values: Sequence,
    seeds: Sequence[int] = (0, 1, 2),
    base: Optional[TrainConfig] = None,
    setup_fn: Callable[[int], SynthSetup] = make_setup,
    runner: Callable[[TrainConfig, SynthSetup], dict] = run_once,
) -> AblationTable:
    """Sweep one config field over ``values``; each cell is a mean over ``seeds``."""
    base = base or TrainConfig()
    rows = []
    for value in values:
        per_seed = []
        for seed in seeds:
            cfg = with_overrides(base, **{param: value, "seed": seed})
            per_seed.append(headline(runner(cfg, setup_fn(seed))))
            log.info("%s=%s seed=%d aggregate=%.4f", param, value, seed, per_seed[-1]["aggregate"])
        keys = list(per_seed[0])
        arr = np.array([[p[k] for k in keys] for p in per_seed])
        rows.append(AblationRow(value, dict(zip(keys, arr.mean(0).tolist())),
                                dict(zip(keys, arr.std(0).tolist())), per_seed))
    return AblationTable(param, list(seeds), rows)
