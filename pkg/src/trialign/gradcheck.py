"""Finite-difference sweeps over every analytic gradient in the package."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import diffcore as dc
from . import encoders, losses
from .geometry import PAIRS, triangle_area_grad, triangle_area_tensor, triangle_similarity

TOLERANCE = 1e-4
STEP = 1e-5
MODULES = ("geometry", "losses", "encoders")


@dataclass
class CheckRow:
    module: str
    check: str
    trial: int
    max_rel_error: float
    passed: bool
    note: str = ""


def _unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


class _Packer:
    """Flatten several arrays into one vector and back, for single-point checks."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self.names = list(arrays)
        self.shapes = [arrays[k].shape for k in self.names]
        self.sizes = [int(np.prod(s)) for s in self.shapes]
        self.flat = np.concatenate([arrays[k].reshape(-1) for k in self.names])

    def unpack(self, vec: dc.Tensor) -> dict[str, dc.Tensor]:
        out, start = {}, 0
        for name, shape, size in zip(self.names, self.shapes, self.sizes):
            idx = np.arange(start, start + size)
            out[name] = dc.reshape(dc.take_rows(vec, idx), shape)
            start += size
        return out


def _area_unchecked(P: np.ndarray) -> float:
    u, w = P[0] - P[1], P[0] - P[2]
    return 0.5 * math.sqrt(max((u @ u) * (w @ w) - (u @ w) ** 2, 0.0))


def _check_area_closed_form(rng) -> float:
    P = _unit_rows(rng, 3, 16)
    analytic = np.stack(triangle_area_grad(*P))
    numeric = np.zeros_like(P)
    for idx in np.ndindex(P.shape):
        Q = P.copy()
        Q[idx] += STEP
        fp = _area_unchecked(Q)
        Q[idx] -= 2 * STEP
        numeric[idx] = (fp - _area_unchecked(Q)) / (2 * STEP)
    diff = np.abs(analytic - numeric)
    mag = np.abs(analytic)
    return float(np.where(mag < 1e-8, diff, diff / np.maximum(mag, 1e-8)).max())


def geometry_checks(rng, trial: int) -> Iterator[tuple[str, Callable[[], float], str]]:
    if trial == 0:
        def degenerate():
            x = _unit_rows(rng, 1, 8)[0]
            g = triangle_area_grad(x, x, x)
            return float(max(np.abs(v).max() for v in g))
        yield "area-degenerate", degenerate, "subgradient branch taken"
    yield "area-closed-form", lambda: _check_area_closed_form(rng), ""

    P = _unit_rows(rng, 3, 16)
    yield "area-tape", lambda: dc.finite_diff_check(
        lambda x: triangle_area_tensor(dc.take_rows(x, [0]), dc.take_rows(x, [1]), dc.take_rows(x, [2])), P, STEP
    ).max_rel_error, ""

    for pair in PAIRS:
        X = rng.standard_normal((12, 6))
        W = rng.standard_normal((4, 4))

        def f(x, W=W, pair=pair):
            n = dc.row_l2_normalize(x)
            S = triangle_similarity(dc.take_rows(n, range(4)), dc.take_rows(n, range(4, 8)), dc.take_rows(n, range(8, 12)), 1.0, pair)
            return dc.reduce_sum(dc.mul(S, W))

        yield f"batch-scores[{pair}]", lambda X=X, f=f: dc.finite_diff_check(f, X, STEP).max_rel_error, ""


def _with_biases(enc: encoders.MlpEncoder, rng) -> encoders.MlpEncoder:
    # positive biases keep tiny ReLU nets away from all-dead rows
    enc.layers = [(w, 0.1 + rng.uniform(0, 0.2, size=b.shape)) for w, b in enc.layers]
    return enc


def _split3(x, B):
    n = dc.row_l2_normalize(x)
    return dc.take_rows(n, range(B)), dc.take_rows(n, range(B, 2 * B)), dc.take_rows(n, range(2 * B, 3 * B))


def losses_checks(rng, trial: int) -> Iterator[tuple[str, Callable[[], float], str]]:
    B, d = 4, 8
    X = rng.standard_normal((3 * B, d))
    cfg = losses.LossConfig(tau=0.5, alpha=1.0, lam=0.7, use_dtm=True)
    negatives = losses.draw_negatives(B, rng)
    head = _with_biases(encoders.init_encoder(encoders.EncoderSpec(4 * d, (6,), 1), rng, normalize=False), rng)
    fusion = _with_biases(encoders.init_encoder(encoders.EncoderSpec(2 * d, (6,), d), rng), rng)

    def check(fn):
        return lambda: dc.finite_diff_check(fn, X, STEP).max_rel_error

    yield "pairwise", check(lambda x: losses.pairwise_contrastive_loss(*_split3(x, B), tau=0.5)), ""
    yield "d2t", check(lambda x: losses.triangle_d2t_loss(*_split3(x, B), cfg)), ""
    yield "t2d", check(lambda x: losses.triangle_t2d_loss(*_split3(x, B), cfg)), ""
    yield "total", check(lambda x: losses.total_loss(*_split3(x, B), cfg, head, negatives).total), ""
    yield "fusion", check(lambda x: losses.fusion_baseline_loss(*_split3(x, B), fusion, tau=0.5)), ""
    yield "dtm", check(lambda x: losses.dtm_loss(*_split3(x, B), head, negatives)), ""

    T, V, A = (_unit_rows(rng, B, d) for _ in range(3))
    for name, enc, fn in (
        ("fusion-params", fusion, lambda e: losses.fusion_baseline_loss(T, V, A, e, tau=0.5)),
        ("dtm-head-params", head, lambda e: losses.dtm_loss(T, V, A, e, negatives)),
    ):
        yield name, _param_check(enc, fn), ""


def _param_check(enc: encoders.MlpEncoder, fn: Callable[[encoders.MlpEncoder], dc.Tensor]) -> Callable[[], float]:
    arrays = {}
    for k, (w, b) in enumerate(enc.layers):
        arrays[f"{k}.w"], arrays[f"{k}.b"] = w, b
    packer = _Packer(arrays)

    def f(vec):
        p = packer.unpack(vec)
        layers = [(p[f"{k}.w"], p[f"{k}.b"]) for k in range(len(enc.layers))]
        return fn(encoders.MlpEncoder(layers, enc.normalize))

    return lambda: dc.finite_diff_check(f, packer.flat, STEP).max_rel_error


def encoders_checks(rng, trial: int) -> Iterator[tuple[str, Callable[[], float], str]]:
    enc = _with_biases(encoders.init_encoder(encoders.EncoderSpec(5, (6,), 4), rng), rng)
    x = rng.standard_normal((3, 5))
    weights = rng.standard_normal((3, 4))
    yield "encoder-params", _param_check(enc, lambda e: dc.reduce_sum(dc.mul(encoders.forward(e, x), weights))), ""
    yield "encoder-input", lambda: dc.finite_diff_check(
        lambda xi: dc.reduce_sum(encoders.forward(enc, xi)), x, STEP
    ).max_rel_error, ""
    H = rng.standard_normal((4, 7))
    Wh = rng.standard_normal((4, 7))
    yield "row-normalize", lambda: dc.finite_diff_check(
        lambda h: dc.reduce_sum(dc.mul(dc.row_l2_normalize(h), Wh)), H, STEP
    ).max_rel_error, ""


_SUITES = {"geometry": geometry_checks, "losses": losses_checks, "encoders": encoders_checks}


def run(module: str = "all", trials: int = 50, seed: int = 0, tolerance: float = TOLERANCE) -> list[CheckRow]:
    mods = MODULES if module == "all" else (module,)
    for m in mods:
        if m not in _SUITES:
            raise ValueError(f"unknown module {m!r}")
    rows = []
    for m in mods:
        for trial in range(trials):
            rng = np.random.default_rng([int(seed), MODULES.index(m), trial])
            for name, fn, note in _SUITES[m](rng, trial):
                err = fn()
                rows.append(CheckRow(m, name, trial, err, err < tolerance, note))
    return rows


def format_table(rows: list[CheckRow]) -> str:
    summary: dict[tuple[str, str], list[CheckRow]] = {}
    for r in rows:
        summary.setdefault((r.module, r.check), []).append(r)
    lines = [f"{'module':<10} {'check':<28} {'trials':>6} {'max rel err':>12}  status"]
    for (mod, check), rs in summary.items():
        worst = max(r.max_rel_error for r in rs)
        status = "PASS" if all(r.passed for r in rs) else "FAIL"
        note = next((r.note for r in rs if r.note), "")
        lines.append(f"{mod:<10} {check:<28} {len(rs):>6} {worst:>12.3e}  {status}" + (f"  ({note})" if note else ""))
    return "\n".join(lines)
