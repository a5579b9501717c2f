"""Zero-shot classification, retrieval R@K, hard-negative discrimination and similarity scoring.

Tie rules are fixed: zero-shot and retrieval rankings break ties by lowest
index; discrimination counts a tie as incorrect.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelParams, encode_image, encode_texts
from .synth import ClassificationTask, DiscriminationSet, EvalSuite, RetrievalSet
from .textkit import TokenizerSpec, tokenize

REPORT_SCHEMA_VERSION = 1


def _embed_texts(p: ModelParams, tok: TokenizerSpec, texts: Sequence[str]) -> np.ndarray:
    seqs = []
    for t in texts:
        ids = tokenize(tok, t)[: tok.token_budget]
        seqs.append(ids or [tok.unk_id])
    return encode_texts(p, seqs)


def class_embeddings(p: ModelParams, tok: TokenizerSpec, task: ClassificationTask) -> np.ndarray:
    """Normalized mean of each class's prompt embeddings."""
    rows = []
    for name in task.class_names:
        e = _embed_texts(p, tok, task.prompts[name]).mean(axis=0)
        n = np.linalg.norm(e)
        rows.append(e / n if n > 0 else e)
    return np.stack(rows)


def zero_shot_predict(img_emb: np.ndarray, class_emb: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(img_emb @ class_emb.T, axis=1)


def zero_shot_classify(p: ModelParams, task: ClassificationTask, tok: TokenizerSpec) -> float:
    if len(task.class_names) < 2:
        raise ValueError("zero-shot classification needs at least two classes")
    if len(task.labels) == 0:
        return 0.0
    pred = zero_shot_predict(encode_image(p, task.features), class_embeddings(p, tok, task))
    return float(np.mean(pred == task.labels))


def recall_at_k(sim: np.ndarray, ks: Sequence[int]) -> dict[int, float]:
    """Row queries against column candidates; the true match of row i is column i.

    A candidate outranks the true match if its score is higher, or equal
    with a lower index.
    """
    n = sim.shape[0]
    true = np.diag(sim)[:, None]
    cols = np.arange(sim.shape[1])[None, :]
    rows = np.arange(n)[:, None]
    ahead = (sim > true) | ((sim == true) & (cols < rows))
    rank = ahead.sum(axis=1)  # 0-based
    return {k: float(np.mean(rank < k)) for k in ks}


@dataclass
class RetrievalResult:
    i2t: dict[int, float]
    t2i: dict[int, float]


def retrieval_from_embeddings(X: np.ndarray, Y: np.ndarray, ks=(1, 5)) -> RetrievalResult:
    if X.shape[0] < max(ks):
        raise ValueError(f"retrieval needs at least {max(ks)} pairs, got {X.shape[0]}")
    S = X @ Y.T
    return RetrievalResult(recall_at_k(S, ks), recall_at_k(S.T, ks))


def retrieval_eval(p: ModelParams, pairs: RetrievalSet, tok: TokenizerSpec, ks=(1, 5)) -> RetrievalResult:
    return retrieval_from_embeddings(encode_image(p, pairs.features), _embed_texts(p, tok, pairs.captions), ks)


def discrimination_from_embeddings(X: np.ndarray, Ypos: np.ndarray, Yneg: np.ndarray) -> float:
    if X.shape[0] == 0:
        raise ValueError("discrimination needs at least one triple")
    sp = np.einsum("nd,nd->n", X, Ypos)
    sn = np.einsum("nd,nd->n", X, Yneg)
    return float(np.mean(sp > sn))


def discrimination_eval(p: ModelParams, triples: DiscriminationSet, tok: TokenizerSpec) -> float:
    return discrimination_from_embeddings(
        encode_image(p, triples.features),
        _embed_texts(p, tok, triples.positives),
        _embed_texts(p, tok, triples.negatives),
    )


def similarity_score(p: ModelParams, features: np.ndarray, captions: Sequence[str],
                     tok: TokenizerSpec) -> tuple[float, float]:
    """Mean and population std of image-text cosine over matched pairs."""
    if len(captions) == 0:
        raise ValueError("similarity scoring needs at least one pair")
    X = encode_image(p, np.atleast_2d(features))
    Y = _embed_texts(p, tok, captions)
    cos = np.einsum("nd,nd->n", X, Y)
    return float(np.mean(cos)), float(np.std(cos))


@dataclass
class EvalReport:
    classification: dict[str, float] = field(default_factory=dict)
    retrieval: dict[str, dict[str, float]] = field(default_factory=dict)
    discrimination: dict[str, float] = field(default_factory=dict)
    similarity: dict[str, dict[str, float]] = field(default_factory=dict)

    def task_scores(self) -> dict[str, float]:
        """One headline number per task; retrieval uses the mean of both R@1 directions."""
        out = {f"zs/{k}": v for k, v in self.classification.items()}
        for k, r in self.retrieval.items():
            out[f"ret/{k}"] = 0.5 * (r["i2t_R@1"] + r["t2i_R@1"])
        out.update({f"dis/{k}": v for k, v in self.discrimination.items()})
        return out

    @property
    def aggregate(self) -> float:
        scores = self.task_scores()
        if not scores:
            raise ValueError("no task results to aggregate")
        return float(np.mean(list(scores.values())))

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "classification": self.classification,
            "retrieval": self.retrieval,
            "discrimination": self.discrimination,
            "similarity": self.similarity,
            "task_scores": self.task_scores(),
            "aggregate": self.aggregate,
        }


def evaluate(p: ModelParams, suite: EvalSuite, tok: TokenizerSpec, ks=(1, 5)) -> EvalReport:
    rep = EvalReport()
    for t in suite.classification_tasks:
        rep.classification[t.name] = zero_shot_classify(p, t, tok)
    for t in suite.retrieval_pairs:
        r = retrieval_eval(p, t, tok, ks)
        rep.retrieval[t.name] = {
            **{f"i2t_R@{k}": v for k, v in r.i2t.items()},
            **{f"t2i_R@{k}": v for k, v in r.t2i.items()},
        }
    for t in suite.discrimination_triples:
        rep.discrimination[t.name] = discrimination_eval(p, t, tok)
    return rep


def emit_report(report: EvalReport, path: str | Path) -> Path:
    """Deterministic JSON report (sorted keys, fixed float formatting by json)."""
    doc = report.to_dict()
    path = Path(path)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
