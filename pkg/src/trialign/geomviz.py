"""PCA projection of embedding triples onto a 3-d sphere, with per-triplet areas.

Areas are always measured in the original embedding space; the projection is
for plotting only.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import encoders
from .datagen import DatasetSplit
from .geometry import ConfigError, batch_raw_areas
from .diffcore import NumericError


@dataclass
class PcaResult:
    components: np.ndarray  # (3, d), orthonormal rows
    explained_variance_ratio: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray
    iterations: list[int]


def _leading_eigvec(C: np.ndarray, basis: list[np.ndarray], tol: float, max_iter: int, start: np.ndarray):
    def project(x):
        for b in basis:
            x = x - (b @ x) * b
        return x

    v = project(start)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        v = project(np.ones_like(start))
        nv = np.linalg.norm(v)
    v = v / nv
    residual = np.inf
    for it in range(1, max_iter + 1):
        w = project(C @ v)
        lam = float(v @ w)
        residual = float(np.linalg.norm(w - lam * v))
        if residual <= tol * max(1.0, abs(lam)):
            return lam, v, it
        nw = np.linalg.norm(w)
        if nw == 0.0:
            # remaining spectrum is zero: any orthogonal unit vector is an eigenvector
            return 0.0, v, it
        v = w / nw
    raise NumericError(f"power iteration did not converge: residual {residual:.3e} after {max_iter} iterations")


def pca_top3(X, tol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> PcaResult:
    """Top-3 principal axes by power iteration with orthogonal deflation.

    Each axis is signed so that its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 4 or d < 3:
        raise ConfigError(f"PCA needs n >= 4 and d >= 3, got {X.shape}")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / (n - 1)
    rng = np.random.default_rng(seed)
    comps, lams, iters = [], [], []
    for _ in range(3):
        lam, v, it = _leading_eigvec(C, comps, tol, max_iter, rng.standard_normal(d))
        k = int(np.argmax(np.abs(v)))
        if v[k] < 0:
            v = -v
        comps.append(v)
        lams.append(lam)
        iters.append(it)
    total = float(np.trace(C))
    lams = np.array(lams)
    ratios = lams / total if total > 0 else np.zeros(3)
    return PcaResult(np.array(comps), ratios, lams, mean, iters)


def project(X, components: np.ndarray) -> np.ndarray:
    """Coordinates of the rows of ``X`` along the principal axes (no centring)."""
    return np.asarray(X, dtype=np.float64) @ components.T


def to_sphere(P: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(P, axis=1, keepdims=True)
    return P / np.where(norms > 0, norms, 1.0)


@dataclass
class TripletGeometryRecord:
    scene_id: int
    caption: str
    raw_area: float
    regularized_score: float
    kind: str  # "positive" or "swapped-negative"
    text: list[float]
    video: list[float]
    audio: list[float]


def export_geometry(
    params: encoders.ModelParams,
    split: DatasetSplit,
    n_examples: int,
    seed: int = 0,
    alpha: float = 1.0,
) -> tuple[list[TripletGeometryRecord], dict]:
    """Sample positives from the test split and build swapped negatives.

    Negative ``k`` keeps the audio-video pair of sample ``k`` and takes the
    text of sample ``k + 1`` (cyclically). PCA is fitted over all sampled
    text, video and audio embeddings together.
    """
    items = split.test
    if n_examples < 2:
        raise ConfigError("need at least 2 examples to build swapped negatives")
    if n_examples > len(items):
        raise ConfigError(f"asked for {n_examples} examples, test split has {len(items)}")
    rng = np.random.default_rng(seed)
    pick = np.sort(rng.choice(len(items), size=n_examples, replace=False))
    chosen = [items[i] for i in pick]
    T, V, A = params.embed(
        np.stack([t.text for t in chosen]), np.stack([t.video for t in chosen]), np.stack([t.audio for t in chosen])
    )
    T_neg = np.roll(T, -1, axis=0)
    pos_area = np.diag(batch_raw_areas(T, V, A)).copy()
    neg_area = np.diag(batch_raw_areas(T_neg, V, A)).copy()
    pos_cos = np.einsum("ij,ij->i", T, V)
    neg_cos = np.einsum("ij,ij->i", T_neg, V)

    pca = pca_top3(np.vstack([T, V, A]), seed=seed)
    Pt, Pv, Pa = (to_sphere(project(M, pca.components)) for M in (T, V, A))
    Pt_neg = np.roll(Pt, -1, axis=0)

    records = []
    for k, trip in enumerate(chosen):
        records.append(TripletGeometryRecord(
            trip.scene_id, trip.caption, float(pos_area[k]), float(pos_area[k] - alpha * pos_cos[k]),
            "positive", Pt[k].tolist(), Pv[k].tolist(), Pa[k].tolist(),
        ))
    for k, trip in enumerate(chosen):
        donor = chosen[(k + 1) % n_examples]
        records.append(TripletGeometryRecord(
            trip.scene_id, donor.caption, float(neg_area[k]), float(neg_area[k] - alpha * neg_cos[k]),
            "swapped-negative", Pt_neg[k].tolist(), Pv[k].tolist(), Pa[k].tolist(),
        ))
    meta = {
        "explainedVarianceRatio": pca.explained_variance_ratio.tolist(),
        "componentHash": hashlib.sha256(np.ascontiguousarray(pca.components, dtype="<f8").tobytes()).hexdigest()[:16],
        "alpha": alpha,
        "areaSpace": "original embedding space (before projection)",
        "projection": "uncentred PCA coordinates, renormalized to the unit sphere",
        "nExamples": n_examples,
        "seed": seed,
    }
    return records, meta


def write_geometry(records: list[TripletGeometryRecord], meta: dict, json_path, csv_path=None) -> None:
    json_path = Path(json_path)
    doc = {"pca": meta, "records": [_record_json(r) for r in records]}
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    csv_path = Path(csv_path) if csv_path else json_path.with_suffix(".csv")
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sceneId", "kind", "rawArea", "regularizedScore"])
        for r in records:
            w.writerow([r.scene_id, r.kind, repr(r.raw_area), repr(r.regularized_score)])


def _record_json(r: TripletGeometryRecord) -> dict:
    d = asdict(r)
    return {
        "sceneId": d["scene_id"],
        "caption": d["caption"],
        "rawArea": d["raw_area"],
        "regularizedScore": d["regularized_score"],
        "kind": d["kind"],
        "projected": {"text": d["text"], "video": d["video"], "audio": d["audio"]},
    }


def read_geometry(path) -> tuple[list[TripletGeometryRecord], dict]:
    doc = json.loads(Path(path).read_text())
    records = [
        TripletGeometryRecord(
            r["sceneId"], r["caption"], r["rawArea"], r["regularizedScore"], r["kind"],
            r["projected"]["text"], r["projected"]["video"], r["projected"]["audio"],
        )
        for r in doc["records"]
    ]
    return records, doc["pca"]


def area_split(records: list[TripletGeometryRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Positive and swapped-negative raw areas, paired by sample."""
    pos = np.array([r.raw_area for r in records if r.kind == "positive"])
    neg = np.array([r.raw_area for r in records if r.kind == "swapped-negative"])
    return pos, neg
