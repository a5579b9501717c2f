"""Contrastive, gated hard-negative, and short-tag classification losses.

Every loss returns its value together with gradients with respect to the
arrays it consumed (embeddings, logits, and the similarity scale ``s``),
so the encoder can chain them into parameter gradients.

Similarities are ``s * x^T y`` where ``s = exp(log_temp) = 1 / tau``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class LossPart:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 10.0

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossBreakdown:
    l_i2t: float
    l_t2i: float
    l_hni: float
    l_cls: float
    l_total: float
    gate_fraction: float
    grads: dict[str, np.ndarray]


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _softmax(a: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def clip_loss(X: np.ndarray, Y: np.ndarray, scale: float) -> tuple[LossPart, LossPart]:
    """Image-to-text and text-to-image InfoNCE over the in-batch similarity matrix.

    Returns one part per direction; each carries grads for ``X``, ``Y`` and ``scale``.
    """
    N = X.shape[0]
    if N == 0:
        raise ValueError("clip_loss needs at least one pair")
    S = X @ Y.T
    L = scale * S
    diag = np.diag(L)
    l_i2t = float(np.mean(_logsumexp(L, axis=1) - diag))
    l_t2i = float(np.mean(_logsumexp(L, axis=0) - diag))

    eye = np.eye(N)
    parts = []
    for value, G in (
        (l_i2t, (_softmax(L, axis=1) - eye) / N),
        (l_t2i, (_softmax(L, axis=0) - eye) / N),
    ):
        # G is dl/dL; L = s * X Y^T
        parts.append(
            LossPart(
                value,
                {
                    "X": scale * (G @ Y),
                    "Y": scale * (G.T @ X),
                    "scale": np.array(np.sum(G * S)),
                },
            )
        )
    return parts[0], parts[1]


def gate_vector(S: np.ndarray) -> np.ndarray:
    """1 where the matched pair is the row maximum (ties count as correct)."""
    S = np.asarray(S)
    return (np.diag(S) >= np.max(S, axis=1)).astype(np.int8)


def hni_loss(
    X: np.ndarray,
    Y: np.ndarray,
    Yneg: np.ndarray,
    scale: float,
    gate: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
    normalize_by_gate: bool = False,
) -> tuple[LossPart, float]:
    """Gated hard-negative identification loss.

    Each sample contrasts its matched text against its own ``N-`` negatives.
    The gate multiplies the per-sample term, so samples the model does not
    yet rank first among in-batch texts contribute nothing and receive no
    gradient; the gate itself is a constant. ``mask`` additionally excludes
    samples with no usable negatives. Divides by N unless
    ``normalize_by_gate`` is set, in which case it divides by the number of
    active samples.
    """
    N = X.shape[0]
    if Yneg.ndim != 3 or Yneg.shape[1] == 0:
        raise ValueError("hni_loss needs at least one negative per sample")
    if gate is None:
        gate = gate_vector(X @ Y.T)
    gate = np.asarray(gate, dtype=np.float64)
    active = gate if mask is None else gate * np.asarray(mask, dtype=np.float64)
    gate_fraction = float(np.mean(gate)) if N else 0.0

    pos = np.einsum("nd,nd->n", X, Y)
    neg = np.einsum("nd,njd->nj", X, Yneg)
    logits = scale * np.concatenate([pos[:, None], neg], axis=1)
    terms = _logsumexp(logits, axis=1) - logits[:, 0]

    denom = float(np.sum(active)) if normalize_by_gate else float(N)
    zeros = {"X": np.zeros_like(X), "Y": np.zeros_like(Y), "Yneg": np.zeros_like(Yneg),
             "scale": np.array(0.0)}
    if denom == 0.0:
        return LossPart(0.0, zeros), gate_fraction

    value = float(np.sum(active * terms) / denom)
    P = _softmax(logits, axis=1)
    G = P.copy()
    G[:, 0] -= 1.0
    G *= (active / denom)[:, None]  # dl/dlogits
    gpos, gneg = G[:, 0], G[:, 1:]
    grads = {
        "X": scale * (gpos[:, None] * Y + np.einsum("nj,njd->nd", gneg, Yneg)),
        "Y": scale * gpos[:, None] * X,
        "Yneg": scale * gneg[:, :, None] * X[:, None, :],
        "scale": np.array(np.sum(gpos * pos) + np.sum(gneg * neg)),
    }
    return LossPart(value, grads), gate_fraction


def stc_loss(Z: np.ndarray, labels: np.ndarray, mask: Optional[np.ndarray] = None) -> LossPart:
    """Multi-label binary cross-entropy over tag logits, averaged over samples.

    Uses ``softplus(z) - y*z``, which equals the BCE but never overflows.
    With ``mask``, unmasked samples are dropped from both sum and average.
    """
    N = Z.shape[0]
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != Z.shape:
        raise ValueError(f"labels shape {labels.shape} != logits shape {Z.shape}")
    w = np.ones(N) if mask is None else np.asarray(mask, dtype=np.float64)
    n_eff = float(np.sum(w))
    if n_eff == 0.0:
        return LossPart(0.0, {"Z": np.zeros_like(Z)})
    per = np.sum(np.logaddexp(0.0, Z) - labels * Z, axis=1)
    value = float(np.sum(w * per) / n_eff)
    sig = 0.5 * (1.0 + np.tanh(0.5 * Z))
    return LossPart(value, {"Z": (sig - labels) * (w / n_eff)[:, None]})


def total_loss(
    i2t: LossPart,
    t2i: LossPart,
    hni: LossPart,
    cls: LossPart,
    weights: LossWeights,
    gate_fraction: float = 0.0,
) -> LossBreakdown:
    """Weighted objective ``0.5*i2t + 0.5*t2i + alpha*hni + beta*cls``; grads combine linearly."""
    coeffs = ((0.5, i2t), (0.5, t2i), (weights.alpha, hni), (weights.beta, cls))
    total = sum(c * p.value for c, p in coeffs)
    grads: dict[str, np.ndarray] = {}
    for c, part in coeffs:
        for k, g in part.grads.items():
            if k in grads:
                grads[k] = grads[k] + c * g
            else:
                grads[k] = c * g
    return LossBreakdown(
        l_i2t=i2t.value,
        l_t2i=t2i.value,
        l_hni=hni.value,
        l_cls=cls.value,
        l_total=float(total),
        gate_fraction=gate_fraction,
        grads=grads,
    )
