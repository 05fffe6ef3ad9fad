"""From-scratch training loop: seeded batching, AdamW, loss selection."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import encoders, evalharness, losses
from .datagen import DatasetSplit
from .geometry import ConfigError

LOSS_KINDS = ("triangle", "triangle+dtm", "pairwise", "fusion")


class NumericAbort(ArithmeticError):
    """Training hit a non-finite loss or gradient; carries the last good state."""

    def __init__(self, step: int, reason: str, last_good: encoders.ModelParams, log: list):
        super().__init__(f"step {step}: {reason}")
        self.step = step
        self.last_good = last_good
        self.log = log


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    loss_kind: str = "triangle"
    tau: float = 0.07
    alpha: float = 1.0
    lam: float = 1.0
    reg_pair: str = "text-video"
    train_cos_reg: bool = True
    seed: int = 42
    eval_every: int = 0
    hidden: tuple[int, ...] = (256,)
    embed_dim: int = 128
    clip_grad_norm: float | None = None
    log_wall_time: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind {self.loss_kind!r}; expected one of {LOSS_KINDS}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if not self.learning_rate > 0:
            raise ConfigError("learning rate must be positive")
        self.loss_config()

    def loss_config(self) -> losses.LossConfig:
        return losses.LossConfig(
            tau=self.tau,
            alpha=self.alpha,
            lam=self.lam,
            use_dtm=self.loss_kind == "triangle+dtm",
            reg_pair=self.reg_pair,
            train_cos_reg=self.train_cos_reg,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    def fingerprint(self) -> str:
        return config_fingerprint(self.to_dict())


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class TrainLogRecord:
    step: int
    total_loss: float
    d2t_loss: float | None
    t2d_loss: float | None
    dtm_loss: float | None
    grad_norm: float
    wall_millis: float | None = None
    eval: dict | None = None

    def to_json(self) -> dict:
        out = {
            "step": self.step,
            "totalLoss": self.total_loss,
            "d2tLoss": self.d2t_loss,
            "t2dLoss": self.t2d_loss,
            "dtmLoss": self.dtm_loss,
            "gradNorm": self.grad_norm,
            "wallMillis": self.wall_millis,
        }
        if self.eval is not None:
            out["eval"] = self.eval
        return out


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    wd: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One AdamW update with decoupled weight decay.

    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    Returns new arrays; inputs are left untouched.
    """
    if params.keys() != grads.keys():
        raise ConfigError(f"parameter and gradient names differ: {sorted(params.keys() ^ grads.keys())}")
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise dc.DimensionError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if not np.all(np.isfinite(g)):
            raise dc.NumericError(f"non-finite gradient for {name}")
        m = beta1 * state.m.get(name, np.zeros_like(theta)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(theta)) + (1.0 - beta2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_params[name] = theta - lr * (m_hat / (np.sqrt(v_hat) + eps) + wd * theta)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# training


def model_spec(cfg: TrainConfig, split: DatasetSplit) -> encoders.ModelSpec:
    text, video, audio = split.arrays("train")
    return encoders.ModelSpec(
        text_dim=text.shape[1],
        video_dim=video.shape[1],
        audio_dim=audio.shape[1],
        hidden=cfg.hidden,
        embed_dim=cfg.embed_dim,
        fusion=cfg.loss_kind == "fusion",
        dtm_head=cfg.loss_kind == "triangle+dtm",
    )


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Full batches of a permutation drawn from a Philox stream keyed by (seed, epoch)."""
    rng = np.random.Generator(np.random.Philox(key=[int(seed), int(epoch)]))
    perm = rng.permutation(n)
    return [perm[k:k + batch_size] for k in range(0, n - batch_size + 1, batch_size)]


def compute_loss(cfg: TrainConfig, bound: encoders.ModelParams, text, video, audio, negatives=None) -> losses.LossBreakdown:
    T = encoders.forward(bound.text, text)
    V = encoders.forward(bound.video, video)
    A = encoders.forward(bound.audio, audio)
    if cfg.loss_kind == "pairwise":
        loss = losses.pairwise_contrastive_loss(T, V, A, cfg.tau)
        return losses.LossBreakdown(loss, contrastive=loss.item())
    if cfg.loss_kind == "fusion":
        loss = losses.fusion_baseline_loss(T, V, A, bound.fusion, cfg.tau)
        return losses.LossBreakdown(loss, contrastive=loss.item())
    return losses.total_loss(T, V, A, cfg.loss_config(), head=bound.dtm_head, negatives=negatives)


def default_scoring(loss_kind: str) -> str:
    return {"fusion": "fusion", "pairwise": "cosine-sum"}.get(loss_kind, "triangle")


def evaluate(params: encoders.ModelParams, cfg: TrainConfig, split: DatasetSplit, scoring: str | None = None, alpha: float | None = None) -> evalharness.RunReport:
    text, video, audio = split.arrays("test")
    matrices = evalharness.score_all(
        params,
        text,
        video,
        audio,
        scoring=scoring or default_scoring(cfg.loss_kind),
        alpha=cfg.alpha if alpha is None else alpha,
        reg_pair=cfg.reg_pair,
    )
    return evalharness.build_report(matrices, fingerprint=cfg.fingerprint())


@dataclass
class TrainResult:
    params: encoders.ModelParams
    log: list[TrainLogRecord]
    checkpoints: dict[int, encoders.ModelParams] = field(default_factory=dict)


def train_run(
    cfg: TrainConfig,
    split: DatasetSplit,
    checkpoint_every: int = 0,
    on_record: Callable[[TrainLogRecord], None] | None = None,
) -> TrainResult:
    """Train the encoders selected by ``cfg.loss_kind`` on ``split.train``.

    Deterministic under ``cfg.seed``: initialization, batch order and
    matching negatives each come from their own seeded stream.
    """
    text, video, audio = split.arrays("train")
    n = text.shape[0]
    if cfg.steps > 0 and n < max(cfg.batch_size, 1):
        raise ConfigError(f"training set of {n} items cannot fill a batch of {cfg.batch_size}")
    params = encoders.init_params(model_spec(cfg, split), cfg.seed)
    arrays = params.named_arrays()
    state = AdamState()
    neg_rng = np.random.Generator(np.random.Philox(key=[int(cfg.seed), 7]))
    log: list[TrainLogRecord] = []
    checkpoints: dict[int, encoders.ModelParams] = {}
    epoch, queue = 0, []
    start = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        if not queue:
            queue = batch_order(n, cfg.batch_size, cfg.seed, epoch)
            epoch += 1
        idx = queue.pop(0)
        negatives = losses.draw_negatives(len(idx), neg_rng) if cfg.loss_kind == "triangle+dtm" else None
        tape = dc.Tape()
        bound, leaves = params.with_arrays(arrays).bind(tape)
        last_good = params.with_arrays(arrays)
        try:
            out = compute_loss(cfg, bound, text[idx], video[idx], audio[idx], negatives)
        except dc.NumericError as err:
            raise NumericAbort(step, str(err), last_good, log) from err
        names = list(leaves)
        grads = dict(zip(names, tape.grad(out.total, [leaves[k] for k in names])))
        gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        total = out.total.item()
        if not (np.isfinite(total) and np.isfinite(gnorm)):
            raise NumericAbort(step, f"non-finite loss {total} / grad norm {gnorm}", last_good, log)
        if cfg.clip_grad_norm is not None and gnorm > cfg.clip_grad_norm:
            scale = cfg.clip_grad_norm / gnorm
            grads = {k: g * scale for k, g in grads.items()}
        try:
            arrays, state = adamw_step(arrays, grads, state, cfg.learning_rate, cfg.weight_decay)
        except dc.NumericError as err:
            raise NumericAbort(step, str(err), last_good, log) from err
        rec = TrainLogRecord(
            step=step,
            total_loss=total,
            d2t_loss=_opt(out.d2t),
            t2d_loss=_opt(out.t2d),
            dtm_loss=_opt(out.dtm),
            grad_norm=gnorm,
            wall_millis=(time.perf_counter() - start) * 1e3 if cfg.log_wall_time else None,
        )
        if cfg.eval_every and (step % cfg.eval_every == 0 or step == cfg.steps) and split.test:
            report = evaluate(params.with_arrays(arrays), cfg, split)
            rec.eval = {d: rep.metrics() for d, rep in report.directions.items()}
        log.append(rec)
        if on_record is not None:
            on_record(rec)
        if checkpoint_every and step % checkpoint_every == 0:
            checkpoints[step] = params.with_arrays(arrays)
    return TrainResult(params.with_arrays(arrays), log, checkpoints)


def _opt(x: float) -> float | None:
    return None if x != x else x
