"""Triangle-area similarity between three unit vectors.

For vertices x, y, z with sides u = x - y and w = x - z the area is
``0.5 * sqrt(<u,u><w,w> - <u,w>^2)``. The regularized score subtracts
``alpha`` times the inner product of one chosen modality pair; lower means
better aligned, so rankings use its negation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore
from .diffcore import DimensionError, Tensor

SING_EPS = 1e-12
UNIT_TOL = 1e-6
MAX_AREA = 3.0 * math.sqrt(3.0) / 4.0

PAIRS = ("text-video", "text-audio", "video-audio")


class NormalizationError(ValueError):
    """Input vector is not unit norm."""


class ConfigError(ValueError):
    """Invalid configuration value."""


def check_pair(pair: str) -> str:
    if pair not in PAIRS:
        raise ConfigError(f"unknown regularization pair {pair!r}; expected one of {PAIRS}")
    return pair


@dataclass(frozen=True)
class TriangleScore:
    raw_area: float
    cos_reg: float
    regularized_score: float
    alpha: float

    @property
    def similarity(self) -> float:
        return -self.regularized_score


def _check_triple(x, y, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, y, z = (np.asarray(v, dtype=np.float64) for v in (x, y, z))
    if x.ndim != 1 or x.shape != y.shape or x.shape != z.shape:
        raise DimensionError(f"triangle vertices must be equal-length vectors, got {x.shape}, {y.shape}, {z.shape}")
    for name, v in zip("xyz", (x, y, z)):
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > UNIT_TOL:
            raise NormalizationError(f"{name} has norm {n!r}; normalize before scoring")
    return x, y, z


def _gram_terms(x, y, z):
    u = x - y
    w = x - z
    uu, ww, uw = u @ u, w @ w, u @ w
    return u, w, uu, ww, uw


def triangle_area(x, y, z) -> float:
    """Area of the triangle spanned by three unit vectors."""
    x, y, z = _check_triple(x, y, z)
    _, _, uu, ww, uw = _gram_terms(x, y, z)
    return 0.5 * math.sqrt(max(uu * ww - uw * uw, 0.0))


def triangle_area_grad(x, y, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient of :func:`triangle_area` with respect to each vertex.

    Returns zeros when the Gram determinant is at or below ``SING_EPS``
    (collapsed triangle), where the true gradient is unbounded.
    """
    x, y, z = _check_triple(x, y, z)
    u, w, uu, ww, uw = _gram_terms(x, y, z)
    q = uu * ww - uw * uw
    if q <= SING_EPS:
        zero = np.zeros_like(x)
        return zero, zero.copy(), zero.copy()
    scale = 1.0 / (4.0 * math.sqrt(q + SING_EPS))
    dq_du = 2.0 * ww * u - 2.0 * uw * w
    dq_dw = 2.0 * uu * w - 2.0 * uw * u
    gu, gw = scale * dq_du, scale * dq_dw
    # u = x - y, w = x - z
    return gu + gw, -gu, -gw


def regularized_similarity(t, v, a, alpha: float = 1.0, reg_pair: str = "text-video") -> TriangleScore:
    check_pair(reg_pair)
    t, v, a = _check_triple(t, v, a)
    area = triangle_area(t, v, a)
    first, second = {"text-video": (t, v), "text-audio": (t, a), "video-audio": (v, a)}[reg_pair]
    cos = float(first @ second)
    return TriangleScore(area, cos, area - alpha * cos, alpha)


def _check_batch(T, V, A):
    if T.ndim != 2 or V.ndim != 2 or A.ndim != 2:
        raise DimensionError("batch triangle scores need matrices")
    if V.shape != A.shape:
        raise DimensionError(f"video {V.shape} and audio {A.shape} rows must be aligned")
    if T.shape[1] != V.shape[1]:
        raise DimensionError(f"text dim {T.shape[1]} != data dim {V.shape[1]}")


def _batch_forward(T, V, A, alpha, reg_pair):
    G_tv = T @ V.T
    G_ta = T @ A.T
    g_va = np.einsum("ij,ij->i", V, A)
    n_t = np.einsum("ij,ij->i", T, T)[:, None]
    n_v = np.einsum("ij,ij->i", V, V)[None, :]
    n_a = np.einsum("ij,ij->i", A, A)[None, :]
    uu = n_t - 2.0 * G_tv + n_v
    ww = n_t - 2.0 * G_ta + n_a
    uw = n_t - G_ta - G_tv + g_va[None, :]
    q = uu * ww - uw * uw
    area = 0.5 * np.sqrt(np.maximum(q, 0.0))
    if reg_pair == "text-video":
        cos = G_tv
    elif reg_pair == "text-audio":
        cos = G_ta
    else:
        cos = np.broadcast_to(g_va[None, :], area.shape)
    score = area - alpha * cos
    return score, (G_tv, G_ta, g_va, uu, ww, uw, q)


def batch_triangle_scores(T, V, A, alpha: float = 1.0, reg_pair: str = "text-video") -> np.ndarray:
    """Similarity matrix ``S[i, j] = -regularized_score(T[i], V[j], A[j])``.

    Built from the Gram matrices ``T V^T``, ``T A^T`` and the row products of
    ``V`` and ``A``; higher is more similar.
    """
    check_pair(reg_pair)
    T, V, A = (np.asarray(m, dtype=np.float64) for m in (T, V, A))
    _check_batch(T, V, A)
    score, _ = _batch_forward(T, V, A, alpha, reg_pair)
    return -score


def batch_raw_areas(T, V, A) -> np.ndarray:
    T, V, A = (np.asarray(m, dtype=np.float64) for m in (T, V, A))
    _check_batch(T, V, A)
    score, _ = _batch_forward(T, V, A, 0.0, "text-video")
    return score


def triangle_similarity(T, V, A, alpha: float = 1.0, reg_pair: str = "text-video") -> Tensor:
    """Differentiable :func:`batch_triangle_scores`."""
    check_pair(reg_pair)
    T, V, A = diffcore.as_tensor(T), diffcore.as_tensor(V), diffcore.as_tensor(A)
    Td, Vd, Ad = T.data, V.data, A.data
    _check_batch(Td, Vd, Ad)
    score, (G_tv, G_ta, g_va, uu, ww, uw, q) = _batch_forward(Td, Vd, Ad, alpha, reg_pair)

    def backward(g_sim):
        g_score = -g_sim
        live = q > SING_EPS
        g_q = np.where(live, g_score / (4.0 * np.sqrt(np.where(live, q, 0.0) + SING_EPS)), 0.0)
        g_uu = g_q * ww
        g_ww = g_q * uu
        g_uw = -2.0 * g_q * uw
        g_Gtv = -2.0 * g_uu - g_uw
        g_Gta = -2.0 * g_ww - g_uw
        g_gva = g_uw.sum(axis=0)
        if reg_pair == "text-video":
            g_Gtv = g_Gtv - alpha * g_score
        elif reg_pair == "text-audio":
            g_Gta = g_Gta - alpha * g_score
        else:
            g_gva = g_gva - alpha * g_score.sum(axis=0)
        g_nt = (g_uu + g_ww + g_uw).sum(axis=1)
        g_nv = g_uu.sum(axis=0)
        g_na = g_ww.sum(axis=0)
        dT = g_Gtv @ Vd + g_Gta @ Ad + 2.0 * g_nt[:, None] * Td
        dV = g_Gtv.T @ Td + 2.0 * g_nv[:, None] * Vd + g_gva[:, None] * Ad
        dA = g_Gta.T @ Td + 2.0 * g_na[:, None] * Ad + g_gva[:, None] * Vd
        return dT, dV, dA

    return diffcore.custom(-score, (T, V, A), backward)


def triangle_area_tensor(x, y, z) -> Tensor:
    """Area of a single triangle as a differentiable scalar."""
    rows = [diffcore.reshape(v, (1, -1)) for v in (x, y, z)]
    return -diffcore.reduce_sum(triangle_similarity(*rows, alpha=0.0))
