"""Training objectives over a batch of aligned (text, video, audio) embeddings.

All functions take unit-norm row matrices ``T, V, A`` of shape ``(B, d)``
where row ``i`` of each is the positive triplet, and return a scalar
:class:`~trialign.diffcore.Tensor` so gradients flow back through the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import encoders
from .diffcore import Tensor
from .geometry import ConfigError, check_pair, triangle_similarity

P_EPS = 1e-7


class EmptyBatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    alpha: float = 1.0
    lam: float = 1.0
    use_dtm: bool = False
    reg_pair: str = "text-video"
    # apply the -alpha*cos term inside the contrastive scores, not only at ranking time
    train_cos_reg: bool = True
    negative_set: str = "in-batch"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.negative_set != "in-batch":
            raise ConfigError(f"unsupported negative set {self.negative_set!r}")
        check_pair(self.reg_pair)

    @property
    def train_alpha(self) -> float:
        return self.alpha if self.train_cos_reg else 0.0


def _batch_size(*mats) -> int:
    mats = [dc.as_tensor(m) for m in mats]
    B = mats[0].shape[0]
    if B == 0:
        raise EmptyBatchError("batch is empty")
    for m in mats[1:]:
        if m.shape != mats[0].shape:
            raise dc.DimensionError(f"batch shapes differ: {[x.shape for x in mats]}")
    return B


def _diag_log_softmax_sum(logits: Tensor, axis: int) -> Tensor:
    return dc.reduce_sum(dc.diag(dc.log_softmax(logits, axis=axis)))


def directional_log_likelihood(x, y, tau: float) -> Tensor:
    """``sum_i log softmax_j(x_i . y_j / tau)[i]``."""
    logits = dc.mul(dc.matmul(x, dc.transpose(y)), 1.0 / tau)
    return _diag_log_softmax_sum(logits, axis=1)


def pairwise_contrastive_loss(T, V, A, tau: float = 0.07) -> Tensor:
    """Text-anchored contrastive loss over the four directions a->t, t->a, v->t, t->v.

    The sum of the four directional terms is divided by ``2B`` (not ``4B``).
    """
    B = _batch_size(T, V, A)
    total = dc.add(
        dc.add(directional_log_likelihood(A, T, tau), directional_log_likelihood(T, A, tau)),
        dc.add(directional_log_likelihood(V, T, tau), directional_log_likelihood(T, V, tau)),
    )
    return dc.mul(total, -1.0 / (2 * B))


def info_nce(x, y, tau: float = 0.07) -> Tensor:
    """Symmetric two-direction contrastive loss between row-aligned ``x`` and ``y``."""
    B = _batch_size(x, y)
    total = dc.add(directional_log_likelihood(x, y, tau), directional_log_likelihood(y, x, tau))
    return dc.mul(total, -1.0 / (2 * B))


def fuse(fusion: encoders.MlpEncoder, V, A) -> Tensor:
    """Map concatenated ``[v; a]`` rows to one unit vector per row."""
    return encoders.forward(fusion, dc.concat_cols(V, A))


def fusion_baseline_loss(T, V, A, fusion: encoders.MlpEncoder, tau: float = 0.07) -> Tensor:
    _batch_size(T, V, A)
    return info_nce(T, fuse(fusion, V, A), tau)


def triangle_scores(T, V, A, cfg: LossConfig) -> Tensor:
    S = triangle_similarity(T, V, A, alpha=cfg.train_alpha, reg_pair=cfg.reg_pair)
    bad = np.argwhere(~np.isfinite(S.data))
    if bad.size:
        i, j = bad[0]
        raise dc.NumericError(f"non-finite triangle score at ({i}, {j})")
    return S


def triangle_d2t_loss(T, V, A, cfg: LossConfig, scores: Tensor | None = None) -> Tensor:
    """For each data pair ``i``, softmax over texts ``j`` of ``-A(t_j, v_i, a_i)/tau``."""
    B = _batch_size(T, V, A)
    S = triangle_scores(T, V, A, cfg) if scores is None else scores
    # S[j, i] scores text j against data i; normalize over j (columns)
    return dc.mul(_diag_log_softmax_sum(dc.mul(S, 1.0 / cfg.tau), axis=0), -1.0 / B)


def triangle_t2d_loss(T, V, A, cfg: LossConfig, scores: Tensor | None = None) -> Tensor:
    """For each text ``i``, softmax over data pairs ``j`` of ``-A(t_i, v_j, a_j)/tau``."""
    B = _batch_size(T, V, A)
    S = triangle_scores(T, V, A, cfg) if scores is None else scores
    return dc.mul(_diag_log_softmax_sum(dc.mul(S, 1.0 / cfg.tau), axis=1), -1.0 / B)


def draw_negatives(B: int, rng: np.random.Generator) -> np.ndarray:
    """One index ``j != i`` per row, uniform over the other rows."""
    if B < 2:
        return np.zeros(0, dtype=np.int64)
    return (np.arange(B) + rng.integers(1, B, size=B)) % B


def match_logits(head: encoders.MlpEncoder, T, V, A) -> Tensor:
    """Matching-head logits on ``[t; v; a; t * (v + a)/2]`` rows."""
    mix = dc.mul(T, dc.mul(dc.add(V, A), 0.5))
    return encoders.forward(head, dc.concat_cols(T, V, A, mix))


def dtm_loss(T, V, A, head: encoders.MlpEncoder, negatives: np.ndarray) -> Tensor:
    """Binary cross-entropy of the matching head.

    Positives are the aligned rows; negative ``k`` pairs ``T[k]`` with
    ``V[negatives[k]], A[negatives[k]]``. Probabilities are clamped to
    ``[P_EPS, 1 - P_EPS]``.
    """
    B = _batch_size(T, V, A)
    negatives = np.asarray(negatives, dtype=np.int64)
    pos = match_logits(head, T, V, A)
    terms = dc.log(dc.clip(dc.sigmoid(pos), P_EPS, 1.0 - P_EPS))
    total = dc.reduce_sum(terms)
    count = B
    if negatives.size:
        neg = match_logits(head, T, dc.take_rows(V, negatives), dc.take_rows(A, negatives))
        p_neg = dc.clip(dc.sigmoid(neg), P_EPS, 1.0 - P_EPS)
        total = dc.add(total, dc.reduce_sum(dc.log(dc.sub(1.0, p_neg))))
        count += negatives.size
    return dc.mul(total, -1.0 / count)


@dataclass
class LossBreakdown:
    total: Tensor
    d2t: float = float("nan")
    t2d: float = float("nan")
    dtm: float = float("nan")
    contrastive: float = float("nan")

    def as_dict(self) -> dict[str, float]:
        return {"total": self.total.item(), "d2t": self.d2t, "t2d": self.t2d, "dtm": self.dtm, "contrastive": self.contrastive}


def total_loss(T, V, A, cfg: LossConfig, head: encoders.MlpEncoder | None = None, negatives=None) -> LossBreakdown:
    """``(d2t + t2d) / 2 + lam * dtm``; the matching term only when ``cfg.use_dtm``."""
    S = triangle_scores(T, V, A, cfg)
    d2t = triangle_d2t_loss(T, V, A, cfg, scores=S)
    t2d = triangle_t2d_loss(T, V, A, cfg, scores=S)
    total = dc.mul(dc.add(d2t, t2d), 0.5)
    out = LossBreakdown(total, d2t=d2t.item(), t2d=t2d.item())
    if cfg.use_dtm:
        if head is None or negatives is None:
            raise ConfigError("use_dtm needs a matching head and negative indices")
        dtm = dtm_loss(T, V, A, head, negatives)
        out.dtm = dtm.item()
        out.total = dc.add(total, dc.mul(dtm, cfg.lam))
    return out
