"""Region projection into the joint space and the bidirectional GRU text encoder.

Weights are stored ``(in, out)`` and applied as ``x @ W``. GRU weight sets are
dicts with keys ``W_z W_r W_h`` (d_w x D), ``U_z U_r U_h`` (D x D) and
``b_z b_r b_h`` (D,).
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import numkit as nk
from .errors import DimensionError, IntegrityError

GRU_KEYS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


def project_regions(O, W_v, b_v) -> nk.Tensor:
    """Affine map of region features ``(..., k, f)`` to ``(..., k, D)``."""
    O, W_v = nk.as_tensor(O), nk.as_tensor(W_v)
    if O.shape[-1] != W_v.shape[0]:
        raise DimensionError(f"project_regions: features have dim {O.shape[-1]}, W_v expects {W_v.shape[0]}")
    return nk.add(nk.matmul(O, W_v), b_v)


def gru_cell(x, h, w: Mapping[str, nk.Tensor]) -> nk.Tensor:
    """One GRU step for a single vector or a batch of row vectors.

    z = sigmoid(x W_z + h U_z + b_z), r = sigmoid(x W_r + h U_r + b_r),
    h~ = tanh(x W_h + (r * h) U_h + b_h), h' = (1 - z) * h + z * h~.
    """
    x, h = nk.as_tensor(x), nk.as_tensor(h)
    if x.shape[-1] != nk.as_tensor(w["W_z"]).shape[0] or h.shape[-1] != nk.as_tensor(w["U_z"]).shape[0]:
        raise DimensionError(
            f"gru_cell: input {x.shape} / state {h.shape} do not match weights "
            f"{nk.as_tensor(w['W_z']).shape} / {nk.as_tensor(w['U_z']).shape}"
        )
    squeeze = x.ndim == 1
    if squeeze:
        x, h = nk.reshape(x, (1, -1)), nk.reshape(h, (1, -1))
    z = nk.sigmoid(x @ w["W_z"] + h @ w["U_z"] + w["b_z"])
    r = nk.sigmoid(x @ w["W_r"] + h @ w["U_r"] + w["b_r"])
    cand = nk.tanh(x @ w["W_h"] + (r * h) @ w["U_h"] + w["b_h"])
    out = (1.0 - z) * h + z * cand
    return nk.reshape(out, (-1,)) if squeeze else out


def _run_direction(X, mask: np.ndarray, w: Mapping[str, nk.Tensor], reverse: bool) -> list[nk.Tensor]:
    """Masked GRU sweep over ``X`` (B, n, d_w); returns per-position states.

    Masked steps leave the state untouched, so a right-padded sequence
    produces exactly the states of its unpadded prefix in both directions.
    """
    B, n, _ = X.shape
    D = nk.as_tensor(w["U_z"]).shape[0]
    # input projections for every step at once
    gates_x = X @ nk.concat([w["W_z"], w["W_r"]], axis=1) + nk.concat([w["b_z"], w["b_r"]], axis=0)
    cand_x = X @ w["W_h"] + w["b_h"]
    U_zr = nk.concat([w["U_z"], w["U_r"]], axis=1)
    h = nk.Tensor(np.zeros((B, D), dtype=X.dtype))
    states: list[nk.Tensor | None] = [None] * n
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for j in steps:
        zr = nk.sigmoid(gates_x[:, j] + h @ U_zr)
        z, r = zr[:, :D], zr[:, D:]
        cand = nk.tanh(cand_x[:, j] + (r * h) @ w["U_h"])
        step = z * (cand - h)
        m = mask[:, j : j + 1]
        if not m.all():
            step = step * m.astype(X.dtype)
        h = h + step
        states[j] = h
    return states


def encode_text(word_vecs, forward: Mapping, backward: Mapping, mask: np.ndarray | None = None) -> nk.Tensor:
    """Bidirectional GRU features ``t_j = (h_fwd_j + h_bwd_j) / 2``.

    ``word_vecs`` is ``(n, d_w)`` or a right-padded batch ``(B, n, d_w)`` with
    boolean ``mask`` ``(B, n)``. Padded output rows are zero.
    """
    X = nk.as_tensor(word_vecs)
    single = X.ndim == 2
    if single:
        X = nk.reshape(X, (1,) + X.shape)
    if X.shape[1] == 0:
        raise IntegrityError("encode_text needs at least one word")
    if mask is None:
        mask = np.ones(X.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(X.shape[:2])
    if not mask[:, 0].all():
        raise IntegrityError("encode_text: every sequence needs at least one word")
    fwd = _run_direction(X, mask, forward, reverse=False)
    bwd = _run_direction(X, mask, backward, reverse=True)
    T = nk.scale(nk.stack(fwd, axis=1) + nk.stack(bwd, axis=1), 0.5)
    if not mask.all():
        T = T * mask[:, :, None].astype(X.dtype)
    return nk.reshape(T, T.shape[1:]) if single else T
