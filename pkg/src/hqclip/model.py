"""Desk-scale dual encoder with a multi-label tag classifier head.

Image tower: affine map + L2 normalization.
Text tower: mean of token embeddings -> affine map -> L2 normalization.
Classifier: one relu hidden layer on the (normalized) image embedding.
The similarity scale is ``exp(log_temp)``, clamped to [1, 100] by the trainer.

Forward passes keep a cache; ``backward`` turns gradients with respect to
embeddings/logits/scale into gradients for every parameter array.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
INIT_SCALE = 1.0 / 0.07
MIN_SCALE, MAX_SCALE = 1.0, 100.0


@dataclass(frozen=True)
class ModelDims:
    d_in: int = 64
    vocab_size: int = 256
    d_tok: int = 32
    d: int = 32
    hidden: int = 32
    K: int = 16

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")


PARAM_NAMES = (
    "img_w", "img_b", "tok_embed", "txt_w", "txt_b",
    "cls_w1", "cls_b1", "cls_w2", "cls_b2", "log_temp",
)


@dataclass
class ModelParams:
    img_w: np.ndarray  # d_in x d
    img_b: np.ndarray  # d
    tok_embed: np.ndarray  # vocab x d_tok
    txt_w: np.ndarray  # d_tok x d
    txt_b: np.ndarray  # d
    cls_w1: np.ndarray  # d x H
    cls_b1: np.ndarray  # H
    cls_w2: np.ndarray  # H x K
    cls_b2: np.ndarray  # K
    log_temp: np.ndarray  # scalar (0-d array)

    @property
    def scale(self) -> float:
        # the trainer clips log_temp to [0, ln 100]; clamping here absorbs exp() rounding at the ends
        return min(MAX_SCALE, max(MIN_SCALE, float(np.exp(self.log_temp))))

    @property
    def dims(self) -> ModelDims:
        return ModelDims(
            d_in=self.img_w.shape[0], vocab_size=self.tok_embed.shape[0],
            d_tok=self.tok_embed.shape[1], d=self.img_w.shape[1],
            hidden=self.cls_w1.shape[1], K=self.cls_w2.shape[1],
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self) -> "ModelParams":
        return ModelParams(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())


def init_params(dims: ModelDims, seed: int) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, scale 1/0.07."""
    rng = np.random.default_rng(seed)

    def w(fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ModelParams(
        img_w=w(dims.d_in, (dims.d_in, dims.d)),
        img_b=np.zeros(dims.d),
        # an embedding row is looked up, not summed over, so fan_in is 1
        tok_embed=w(1, (dims.vocab_size, dims.d_tok)),
        txt_w=w(dims.d_tok, (dims.d_tok, dims.d)),
        txt_b=np.zeros(dims.d),
        cls_w1=w(dims.d, (dims.d, dims.hidden)),
        cls_b1=np.zeros(dims.hidden),
        cls_w2=w(dims.hidden, (dims.hidden, dims.K)),
        cls_b2=np.zeros(dims.K),
        log_temp=np.array(math.log(INIT_SCALE)),
    )


def _normalize_rows(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(H, axis=-1)
    out = np.empty_like(H)
    ok = norms > 0
    out[ok] = H[ok] / norms[ok, None]
    if not np.all(ok):
        # degenerate rows map to the first basis vector
        log.warning("zero vector in L2 normalization (%d rows)", int(np.sum(~ok)))
        out[~ok] = 0.0
        out[~ok, 0] = 1.0
    return out, norms


def _normalize_backward(Yn: np.ndarray, norms: np.ndarray, dY: np.ndarray) -> np.ndarray:
    ok = norms > 0
    safe = np.where(ok, norms, 1.0)
    proj = np.sum(Yn * dY, axis=-1, keepdims=True)
    dH = (dY - Yn * proj) / safe[..., None]
    dH[~ok] = 0.0
    return dH


def bag_matrix(token_lists: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """Row-stochastic averaging matrix: row m holds token counts / length."""
    A = np.zeros((len(token_lists), vocab_size))
    for m, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise ValueError(f"empty token list at position {m}")
        np.add.at(A[m], np.asarray(toks, dtype=np.intp), 1.0 / len(toks))
    return A


def encode_image(p: ModelParams, features: np.ndarray) -> np.ndarray:
    """Unit-norm embedding(s) for one feature vector or a stack of them."""
    F = np.asarray(features, dtype=np.float64)
    out, _ = _normalize_rows(np.atleast_2d(F) @ p.img_w + p.img_b)
    return out[0] if F.ndim == 1 else out


def encode_text(p: ModelParams, tokens: Sequence[int]) -> np.ndarray:
    if len(tokens) == 0:
        raise ValueError("encode_text needs at least one token")
    return encode_texts(p, [tokens])[0]


def encode_texts(p: ModelParams, token_lists: Sequence[Sequence[int]]) -> np.ndarray:
    A = bag_matrix(token_lists, p.tok_embed.shape[0])
    out, _ = _normalize_rows((A @ p.tok_embed) @ p.txt_w + p.txt_b)
    return out


def classify(p: ModelParams, img_embedding: np.ndarray) -> np.ndarray:
    e = np.asarray(img_embedding, dtype=np.float64)
    hidden = np.maximum(e @ p.cls_w1 + p.cls_b1, 0.0)
    return hidden @ p.cls_w2 + p.cls_b2


@dataclass
class ForwardCache:
    F: np.ndarray
    Himg: np.ndarray
    img_norms: np.ndarray
    X: np.ndarray
    A: np.ndarray  # averaging matrix for positives then negatives
    T: np.ndarray
    Htxt: np.ndarray
    txt_norms: np.ndarray
    Yall: np.ndarray
    cls_in: np.ndarray
    h1: np.ndarray
    Z: np.ndarray
    n: int
    n_neg: int
    cls_on_normalized: bool

    @property
    def Y(self) -> np.ndarray:
        return self.Yall[: self.n]

    @property
    def Yneg(self) -> np.ndarray:
        return self.Yall[self.n:].reshape(self.n, self.n_neg, -1)


def forward(
    p: ModelParams,
    features: np.ndarray,
    texts: Sequence[Sequence[int]],
    neg_texts: Optional[Sequence[Sequence[Sequence[int]]]] = None,
    cls_on_normalized: bool = True,
) -> ForwardCache:
    """Batch forward: N images, N matched texts, optional N x N- negative texts."""
    F = np.asarray(features, dtype=np.float64)
    n = F.shape[0]
    if len(texts) != n:
        raise ValueError("need one text per image")
    Himg = F @ p.img_w + p.img_b
    X, img_norms = _normalize_rows(Himg)

    n_neg = 0
    flat = list(texts)
    if neg_texts is not None:
        if len(neg_texts) != n:
            raise ValueError("need one negative list per image")
        n_neg = len(neg_texts[0]) if n else 0
        for row in neg_texts:
            if len(row) != n_neg:
                raise ValueError("ragged negative lists")
            flat.extend(row)
    A = bag_matrix(flat, p.tok_embed.shape[0])
    T = A @ p.tok_embed
    Htxt = T @ p.txt_w + p.txt_b
    Yall, txt_norms = _normalize_rows(Htxt)

    cls_in = X if cls_on_normalized else Himg
    h1 = cls_in @ p.cls_w1 + p.cls_b1
    Z = np.maximum(h1, 0.0) @ p.cls_w2 + p.cls_b2
    return ForwardCache(F, Himg, img_norms, X, A, T, Htxt, txt_norms, Yall, cls_in, h1, Z,
                        n, n_neg, cls_on_normalized)


def backward(p: ModelParams, cache: ForwardCache, upstream: dict[str, np.ndarray]) -> ModelParams:
    """Parameter gradients from upstream grads keyed X, Y, Yneg, Z, scale."""
    g = p.zeros_like()
    n = cache.n
    d = p.img_w.shape[1]

    dX = np.array(upstream.get("X", np.zeros((n, d))), dtype=np.float64)
    dZ = upstream.get("Z")
    if dZ is not None:
        relu = cache.h1 > 0
        g.cls_w2 = np.maximum(cache.h1, 0.0).T @ dZ
        g.cls_b2 = dZ.sum(axis=0)
        dh1 = (dZ @ p.cls_w2.T) * relu
        g.cls_w1 = cache.cls_in.T @ dh1
        g.cls_b1 = dh1.sum(axis=0)
        dcls_in = dh1 @ p.cls_w1.T
    else:
        dcls_in = None

    if dcls_in is not None and cache.cls_on_normalized:
        dX = dX + dcls_in
    dHimg = _normalize_backward(cache.X, cache.img_norms, dX)
    if dcls_in is not None and not cache.cls_on_normalized:
        dHimg = dHimg + dcls_in
    g.img_w = cache.F.T @ dHimg
    g.img_b = dHimg.sum(axis=0)

    dYall = np.zeros_like(cache.Yall)
    if "Y" in upstream:
        dYall[:n] = upstream["Y"]
    if "Yneg" in upstream and cache.n_neg:
        dYall[n:] = np.asarray(upstream["Yneg"]).reshape(n * cache.n_neg, -1)
    dHtxt = _normalize_backward(cache.Yall, cache.txt_norms, dYall)
    g.txt_w = cache.T.T @ dHtxt
    g.txt_b = dHtxt.sum(axis=0)
    g.tok_embed = cache.A.T @ (dHtxt @ p.txt_w.T)

    # d scale / d log_temp = scale
    g.log_temp = np.array(float(upstream.get("scale", 0.0)) * p.scale)
    return g


def save_params(
    p: ModelParams,
    path: str | Path,
    seed: Optional[int] = None,
    extra: Optional[dict] = None,
    extra_arrays: Optional[dict[str, np.ndarray]] = None,
) -> None:
    """Versioned ``.npz`` dump; arrays round-trip bit-exactly."""
    meta = {"version": CHECKPOINT_VERSION, "dims": asdict(p.dims), "seed": seed}
    if extra:
        meta.update(extra)
    arrays = {f"param/{k}": v for k, v in p.arrays().items()}
    arrays.update(extra_arrays or {})
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
                 **arrays)


class CheckpointError(RuntimeError):
    pass


def load_npz(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError, EOFError) as exc:
        raise CheckpointError(f"unreadable or corrupted checkpoint {path}: {exc}") from exc
    if "__meta__" not in data:
        raise CheckpointError(f"checkpoint {path} has no metadata block")
    try:
        meta = json.loads(data.pop("__meta__").tobytes().decode())
    except ValueError as exc:
        raise CheckpointError(f"corrupted metadata in {path}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')} does not match expected {CHECKPOINT_VERSION}"
        )
    return meta, data


def load_params(path: str | Path) -> tuple[ModelParams, dict]:
    meta, data = load_npz(path)
    try:
        p = ModelParams(**{k: data[f"param/{k}"] for k in PARAM_NAMES})
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {path} is missing array {exc}") from exc
    return p, meta
