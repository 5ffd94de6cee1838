"""Step-wise hierarchical alignment: L2L, G2L and G2G matching scores.

All ops accept tensors with arbitrary leading (batch) axes and broadcast over
them. :func:`score_pairs` evaluates every (image, caption) pair of a block at
once with images on axis 0 and captions on axis 1; :func:`similarity` is the
single-pair entry point that also runs the encoders.

Parameter names used here: ``W_tilde_v``/``W_tilde_t`` (D x D) affinity
projections, ``W_g`` (2D x D) and ``b_g`` (D,) fusion gate, ``W_hat_v`` /
``W_hat_t`` (1 x D) pooling heads.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numkit as nk
from .corpus import embed_tokens
from .encoders import encode_text, project_regions
from .errors import DimensionError, ParameterError

VARIANTS = ("full", "t2i", "i2t")
STAGES = ("l2l", "l2l+g2l", "full")


@dataclass(frozen=True)
class Hyperparams:
    lam: float = 15.0
    mu1: float = 0.3
    mu2: float = 0.5
    margin: float = 0.2
    variant: str = "full"
    stages: str = "full"
    # softmax temperature of the self-attention pooling
    pool_temperature: float = 1.0
    # softmax temperature of the global-queried attention
    global_temperature: float = 1.0
    # L2-normalise V and T before the affinity projections
    normalize_inputs: bool = False

    def __post_init__(self):
        if not self.lam > 0:
            raise ParameterError(f"lam must be > 0, got {self.lam}")
        for name in ("mu1", "mu2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(f"{name} must lie in [0, 1], got {v}")
        if not self.margin > 0:
            raise ParameterError(f"margin must be > 0, got {self.margin}")
        if self.variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.stages not in STAGES:
            raise ParameterError(f"stages must be one of {STAGES}, got {self.stages!r}")
        if not (self.pool_temperature > 0 and self.global_temperature > 0):
            raise ParameterError("temperatures must be > 0")

    @property
    def uses_i2t(self) -> bool:
        return self.variant in ("full", "i2t")

    @property
    def uses_t2i(self) -> bool:
        return self.variant in ("full", "t2i")


# ---------------------------------------------------------------------------
# fragment level


def affinity(V, T, W_tilde_v, W_tilde_t) -> nk.Tensor:
    """Region-word affinity ``A = (V W~v)(T W~t)^T`` of shape (..., k, n)."""
    V, T = nk.as_tensor(V), nk.as_tensor(T)
    if V.shape[-1] != T.shape[-1]:
        raise DimensionError(f"affinity: region dim {V.shape[-1]} != word dim {T.shape[-1]}")
    return nk.matmul(nk.matmul(V, W_tilde_v), nk.swapaxes(nk.matmul(T, W_tilde_t), -1, -2))


def attend_text_for_regions(A, T, lam: float, word_mask=None) -> tuple[nk.Tensor, nk.Tensor]:
    """Each region queries the words: alpha = softmax over words, T* = alpha T."""
    mask = None if word_mask is None else np.expand_dims(word_mask, -2)
    alpha = nk.softmax(A, axis=-1, temperature=lam, mask=mask)
    return alpha, nk.matmul(alpha, T)


def attend_image_for_words(A, V, lam: float) -> tuple[nk.Tensor, nk.Tensor]:
    """Each word queries the regions: beta normalises A's columns, V* = beta^T V."""
    beta = nk.softmax(A, axis=-2, temperature=lam)
    return beta, nk.matmul(nk.swapaxes(beta, -1, -2), V)


def l2l_score(V, T_star, T, V_star, mu1: float, word_mask=None, variant: str = "full"):
    """Returns ``(S_L2L, R_v, R_t)``; R terms are per-region/per-word cosines.

    Region and word terms are averaged, not summed, so S_L2L stays in [-1, 1].
    ``t2i`` keeps only the word-side average, ``i2t`` only the region side.
    """
    R_v = R_t = None
    if variant != "t2i":
        R_v, _ = nk.cosine(V, T_star)
        side_v = nk.mean(R_v, axis=-1)
    if variant != "i2t":
        R_t, _ = nk.cosine(T, V_star)
        side_t = nk.mean(R_t, axis=-1) if word_mask is None else nk.masked_mean(R_t, word_mask, axis=-1)
    if variant == "t2i":
        return side_t, R_v, R_t
    if variant == "i2t":
        return side_v, R_v, R_t
    return nk.scale(side_v, mu1) + nk.scale(side_t, 1.0 - mu1), R_v, R_t


# ---------------------------------------------------------------------------
# context level


def gated_fuse(x, y, W_g, b_g) -> tuple[nk.Tensor, nk.Tensor]:
    """``g = sigmoid(cat(x, y) W_g + b_g)``, ``fused = g * x + (1 - g) * y``.

    The concatenation is applied as a split product ``x W_g[:D] + y W_g[D:]``.
    """
    x, y, W_g = nk.as_tensor(x), nk.as_tensor(y), nk.as_tensor(W_g)
    D = x.shape[-1]
    if y.shape[-1] != D or W_g.shape != (2 * D, D):
        raise DimensionError(f"gated_fuse: x {x.shape}, y {y.shape}, W_g {W_g.shape} are inconsistent")
    single = x.ndim == 1
    if single:
        x, y = nk.reshape(x, (1, D)), nk.reshape(y, (1, D))
    g = nk.sigmoid(nk.matmul(x, W_g[:D]) + nk.matmul(y, W_g[D:]) + b_g)
    fused = y + g * (x - y)
    if single:
        return nk.reshape(fused, (D,)), nk.reshape(g, (D,))
    return fused, g


def context_aggregate(X, head, mask=None, temperature: float = 1.0) -> tuple[nk.Tensor, nk.Tensor]:
    """Self-attention pooling of rows of ``X`` (..., r, D) with a (1, D) head.

    Returns weights ``(..., r)`` and the pooled row ``(..., 1, D)``.
    """
    X = nk.as_tensor(X)
    logits = nk.matmul(X, nk.swapaxes(head, -1, -2))[..., 0]
    gamma = nk.softmax(logits, axis=-1, temperature=temperature, mask=mask)
    return gamma, nk.matmul(nk.expand_dims(gamma, -2), X)


def global_query_attend(q, F, mask=None, temperature: float = 1.0) -> tuple[nk.Tensor, nk.Tensor]:
    """Softmax over cosine(q, f_i) then convex combination of the rows of F.

    ``q`` is (..., 1, D), ``F`` is (..., r, D). A zero query makes every
    cosine 0 and the weights uniform.
    """
    sims, _ = nk.cosine(q, F)
    weights = nk.softmax(sims, axis=-1, temperature=temperature, mask=mask)
    return weights, nk.matmul(nk.expand_dims(weights, -2), F)


def g2l_score(v_c, t_star_c, t_c, v_star_c, mu2: float, variant: str = "full"):
    """Returns ``(S_G2L, R_v, R_t)`` with R_v = cos(v_c, t*_c), R_t = cos(t_c, v*_c)."""
    R_v = R_t = None
    if variant != "t2i":
        R_v, _ = nk.cosine(v_c, t_star_c)
    if variant != "i2t":
        R_t, _ = nk.cosine(t_c, v_star_c)
    if variant == "t2i":
        return R_t, R_v, R_t
    if variant == "i2t":
        return R_v, R_v, R_t
    return nk.scale(R_v, mu2) + nk.scale(R_t, 1.0 - mu2), R_v, R_t


def g2g_score(v_c, t_star_c, t_c, v_star_c) -> tuple[nk.Tensor, nk.Tensor, nk.Tensor]:
    """``S_G2G = cos(v_c + t*_c, t_c + v*_c)``; returns ``(S, v_g, t_g)``."""
    v_g = nk.add(v_c, t_star_c)
    t_g = nk.add(t_c, v_star_c)
    s, _ = nk.cosine(v_g, t_g)
    return s, v_g, t_g


# ---------------------------------------------------------------------------
# full pipeline


@dataclass
class PairScores:
    """Scores for a block of pairs; every tensor is (n_images, n_captions)."""

    l2l: nk.Tensor
    g2l: nk.Tensor
    g2g: nk.Tensor
    total: nk.Tensor
    degenerate: int = 0
    trace: dict[str, np.ndarray] | None = None


def score_pairs(V, T, word_mask, p: Mapping, h: Hyperparams, trace: bool = False) -> PairScores:
    """Score every image in ``V`` (Bi, k, D) against every caption in ``T`` (Bt, n, D)."""
    V, T = nk.as_tensor(V), nk.as_tensor(T)
    word_mask = np.ones(T.shape[:2], dtype=bool) if word_mask is None else np.asarray(word_mask, dtype=bool)
    Bi, Bt = V.shape[0], T.shape[0]
    dtype = V.dtype
    if h.normalize_inputs:
        V, T = nk.l2_normalize(V), nk.l2_normalize(T)
    V4 = nk.expand_dims(V, 1)
    T4 = nk.expand_dims(T, 0)
    wm = word_mask[None]
    zeros = nk.Tensor(np.zeros((Bi, Bt), dtype=dtype))
    rec: dict[str, nk.Tensor] = {}
    bad = 0

    A = affinity(V4, T4, p["W_tilde_v"], p["W_tilde_t"])
    rec["A"] = A
    T_star = V_star = None
    if h.uses_i2t:
        rec["alpha"], T_star = attend_text_for_regions(A, T4, h.lam, wm)
        rec["T_star"] = T_star
    if h.uses_t2i:
        rec["beta"], V_star = attend_image_for_words(A, V4, h.lam)
        rec["V_star"] = V_star
    s_l2l, R_v, R_t = l2l_score(V4, T_star, T4, V_star, h.mu1, wm, h.variant)
    if R_v is not None:
        rec["R_v_l2l"] = R_v
        bad += _count_degenerate(V4, T_star)
    if R_t is not None:
        rec["R_t_l2l"] = R_t
        bad += _count_degenerate(T4, V_star, wm)

    s_g2l = s_g2g = zeros
    if h.stages != "l2l":
        v_c = t_c = t_star_c = v_star_c = None
        if h.uses_i2t:
            V_c, g_v = gated_fuse(V4, T_star, p["W_g"], p["b_g"])
            gamma_v, v_c = context_aggregate(V_c, p["W_hat_v"], temperature=h.pool_temperature)
            alpha_g, t_star_c = global_query_attend(v_c, T4, wm, h.global_temperature)
            rec.update(gate_v=g_v, V_c=V_c, gamma_v=gamma_v, v_c=v_c, alpha_g=alpha_g, t_star_c=t_star_c)
        if h.uses_t2i:
            T_c, g_t = gated_fuse(T4, V_star, p["W_g"], p["b_g"])
            gamma_t, t_c = context_aggregate(T_c, p["W_hat_t"], wm, h.pool_temperature)
            beta_g, v_star_c = global_query_attend(t_c, V4, None, h.global_temperature)
            rec.update(gate_t=g_t, T_c=T_c, gamma_t=gamma_t, t_c=t_c, beta_g=beta_g, v_star_c=v_star_c)
        s, R_v_g, R_t_g = g2l_score(v_c, t_star_c, t_c, v_star_c, h.mu2, h.variant)
        s_g2l = s[..., 0]
        if R_v_g is not None:
            rec["R_v_g2l"] = R_v_g[..., 0]
            bad += _count_degenerate(v_c, t_star_c)
        if R_t_g is not None:
            rec["R_t_g2l"] = R_t_g[..., 0]
            bad += _count_degenerate(t_c, v_star_c)

        if h.stages == "full":
            if h.uses_i2t:
                v_g = v_c + t_star_c
            else:
                v_g = nk.mean(V4, axis=-2, keepdims=True)
            if h.uses_t2i:
                t_g = t_c + v_star_c
            else:
                t_g = nk.expand_dims(nk.masked_mean(T4, wm[..., None], axis=-2), -2)
            s, _ = nk.cosine(v_g, t_g)
            s_g2g = s[..., 0]
            bad += _count_degenerate(v_g, t_g)
            rec.update(v_g=v_g, t_g=t_g)

    total = s_l2l + s_g2l + s_g2g
    out_trace = None
    if trace:
        out_trace = {name: np.broadcast_to(t.data, _pair_shape(t.data, Bi, Bt)) for name, t in rec.items()}
    return PairScores(s_l2l, s_g2l, s_g2g, total, bad, out_trace)


def _pair_shape(a: np.ndarray, Bi: int, Bt: int) -> tuple[int, ...]:
    return (Bi, Bt) + a.shape[2:]


def _count_degenerate(u: nk.Tensor, v: nk.Tensor, mask=None) -> int:
    nu = np.sqrt((u.data * u.data).sum(axis=-1))
    nv = np.sqrt((v.data * v.data).sum(axis=-1))
    bad = (nu <= nk.DEGENERATE_NORM) | (nv <= nk.DEGENERATE_NORM)
    if mask is not None:
        bad = bad & np.broadcast_to(mask, bad.shape)
    return int(bad.sum())


# ---------------------------------------------------------------------------
# encoders + alignment


def gru_weights(p: Mapping, direction: str) -> dict:
    return {key: p[f"gru_{direction}.{key}"] for key in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")}


def encode_images(p: Mapping, features) -> nk.Tensor:
    return project_regions(features, p["W_v"], p["b_v"])


def encode_captions(p: Mapping, token_ids, word_mask, embedding_mode: str, fixed_table=None) -> nk.Tensor:
    words = embed_tokens(token_ids, embedding_mode, fixed_table, p.get("embed_learned"))
    return encode_text(words, gru_weights(p, "fwd"), gru_weights(p, "bwd"), word_mask)


def score_matrix(
    p: Mapping,
    features,
    token_ids,
    word_mask,
    h: Hyperparams,
    embedding_mode: str,
    fixed_table=None,
    trace: bool = False,
) -> PairScores:
    """Run both encoders then :func:`score_pairs` on (images x captions)."""
    V = encode_images(p, nk.as_tensor(features))
    T = encode_captions(p, token_ids, word_mask, embedding_mode, fixed_table)
    return score_pairs(V, T, word_mask, p, h, trace=trace)


@dataclass
class ScoreBreakdown:
    s_l2l: float
    s_g2l: float
    s_g2g: float
    s_total: float
    r_v_l2l: list[float] | None = None
    r_t_l2l: list[float] | None = None
    r_v_g2l: float | None = None
    r_t_g2l: float | None = None
    degenerate: int = 0


# trace fields in export order
_TRACE_FIELDS = (
    "A", "alpha", "beta", "T_star", "V_star", "R_v_l2l", "R_t_l2l",
    "gate_v", "gate_t", "V_c", "T_c", "gamma_v", "gamma_t", "v_c", "t_c",
    "alpha_g", "t_star_c", "beta_g", "v_star_c", "R_v_g2l", "R_t_g2l", "v_g", "t_g",
)


_POOLED = ("v_c", "t_c", "t_star_c", "v_star_c", "v_g", "t_g", "R_v_g2l", "R_t_g2l")


@dataclass
class AlignmentTrace:
    """Intermediate attention weights and context vectors for one pair.

    Shapes: A/alpha/beta (k, n); T_star/V_c (k, D); V_star/T_c (n, D);
    gate_v (k, D); gate_t (n, D); gamma_v (k,); gamma_t (n,); alpha_g (n,);
    beta_g (k,); every context vector (D,). Fields of a masked direction are None.
    """

    A: np.ndarray
    alpha: np.ndarray | None = None
    beta: np.ndarray | None = None
    T_star: np.ndarray | None = None
    V_star: np.ndarray | None = None
    R_v_l2l: np.ndarray | None = None
    R_t_l2l: np.ndarray | None = None
    gate_v: np.ndarray | None = None
    gate_t: np.ndarray | None = None
    V_c: np.ndarray | None = None
    T_c: np.ndarray | None = None
    gamma_v: np.ndarray | None = None
    gamma_t: np.ndarray | None = None
    v_c: np.ndarray | None = None
    t_c: np.ndarray | None = None
    alpha_g: np.ndarray | None = None
    t_star_c: np.ndarray | None = None
    beta_g: np.ndarray | None = None
    v_star_c: np.ndarray | None = None
    R_v_g2l: np.ndarray | None = None
    R_t_g2l: np.ndarray | None = None
    v_g: np.ndarray | None = None
    t_g: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_block(cls, rec: Mapping[str, np.ndarray], i: int, j: int, n_words: int) -> "AlignmentTrace":
        fields = {}
        for name in _TRACE_FIELDS:
            if name not in rec:
                continue
            a = np.array(rec[name][i, j])
            if name in _POOLED:
                a = a.reshape(-1)
            elif name in ("A", "alpha", "beta"):
                a = a[:, :n_words]
            elif name in ("V_star", "T_c", "gate_t"):
                a = a[:n_words]
            elif name in ("R_t_l2l", "gamma_t", "alpha_g"):
                a = a[:n_words]
            fields[name] = a
        return cls(**fields)

    def weight_vectors(self) -> dict[str, np.ndarray]:
        """Every attention distribution as rows that should each sum to 1."""
        out = {}
        if self.alpha is not None:
            out["alpha"] = self.alpha
        if self.beta is not None:
            out["beta"] = self.beta.T
        for name in ("gamma_v", "gamma_t", "alpha_g", "beta_g"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v[None, :]
        return out

    def to_dict(self) -> dict:
        out = {}
        for name, value in asdict(self).items():
            if name == "meta":
                out.update(value)
            elif value is not None:
                out[name] = np.asarray(value).tolist()
        return out

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path


def breakdown_from_block(scores: PairScores, i: int, j: int, n_words: int) -> ScoreBreakdown:
    rec = scores.trace or {}

    def vec(name, trim=None):
        if name not in rec:
            return None
        a = np.asarray(rec[name][i, j]).reshape(-1)
        return [float(x) for x in (a[:trim] if trim else a)]

    def scalar(name):
        return None if name not in rec else float(np.asarray(rec[name][i, j]).reshape(-1)[0])

    l2l, g2l, g2g = (float(t.data[i, j]) for t in (scores.l2l, scores.g2l, scores.g2g))
    return ScoreBreakdown(
        s_l2l=l2l,
        s_g2l=g2l,
        s_g2g=g2g,
        s_total=l2l + g2l + g2g,
        r_v_l2l=vec("R_v_l2l"),
        r_t_l2l=vec("R_t_l2l", n_words),
        r_v_g2l=scalar("R_v_g2l"),
        r_t_g2l=scalar("R_t_g2l"),
        degenerate=scores.degenerate,
    )


def similarity(
    O,
    token_ids,
    p: Mapping,
    h: Hyperparams,
    embedding_mode: str,
    fixed_table=None,
    trace_requested: bool = False,
) -> tuple[ScoreBreakdown, AlignmentTrace | None]:
    """Score one image (k x f region features) against one caption (token ids)."""
    O = nk.as_tensor(O)
    ids = np.asarray(token_ids, dtype=np.int64).reshape(1, -1)
    n = ids.shape[1]
    scores = score_matrix(
        p, nk.reshape(O, (1,) + O.shape), ids, np.ones((1, n), dtype=bool), h, embedding_mode, fixed_table, trace=True
    )
    breakdown = breakdown_from_block(scores, 0, 0, n)
    trace = AlignmentTrace.from_block(scores.trace, 0, 0, n) if trace_requested else None
    return breakdown, trace
