"""Retrieval scoring, ranking metrics and paired permutation tests.

Query ``i`` is relevant only to candidate ``i``. The rank of the relevant
candidate is ``1 + #{j: s_ij > s_ii} + #{j < i: s_ij == s_ii}``, i.e. ties go
to the lower candidate index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import encoders
from .geometry import ConfigError, batch_triangle_scores, check_pair
from .losses import fuse

DIRECTIONS = ("T2AV", "AV2T", "T2V", "V2T", "T2A", "A2T")
METRICS = ("r1", "r10", "ndcg10", "rr10")
EXACT_MAX_N = 20
DEFAULT_RESAMPLES = 10_000


@dataclass
class ScoreMatrix:
    scores: np.ndarray
    direction: str
    query_ids: list[int] = field(default_factory=list)
    candidate_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"unknown direction {self.direction!r}")
        n, m = self.scores.shape
        if not self.query_ids:
            self.query_ids = list(range(n))
        if not self.candidate_ids:
            self.candidate_ids = list(range(m))

    def transposed(self, direction: str) -> "ScoreMatrix":
        return ScoreMatrix(self.scores.T.copy(), direction, list(self.candidate_ids), list(self.query_ids))


_REVERSE = {"T2AV": "AV2T", "T2V": "V2T", "T2A": "A2T"}


def relevant_ranks(scores) -> np.ndarray:
    s = np.asarray(scores.scores if isinstance(scores, ScoreMatrix) else scores, dtype=np.float64)
    n, m = s.shape
    if n > m:
        raise ConfigError(f"need at least as many candidates as queries, got {s.shape}")
    rel = s[np.arange(n), np.arange(n)][:, None]
    higher = (s > rel).sum(axis=1)
    earlier_ties = ((s == rel) & (np.arange(m)[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return (1 + higher + earlier_ties).astype(np.int64)


def _ranks(matrix) -> np.ndarray:
    if isinstance(matrix, ScoreMatrix) or (isinstance(matrix, np.ndarray) and matrix.ndim == 2):
        return relevant_ranks(matrix)
    return np.asarray(matrix, dtype=np.int64)


def recall_at_k(matrix, k: int) -> float:
    """Fraction of queries whose relevant candidate ranks within ``k``."""
    n_cand = matrix.scores.shape[1] if isinstance(matrix, ScoreMatrix) else np.asarray(matrix).shape[1]
    if not 1 <= k <= n_cand:
        raise ConfigError(f"k={k} outside 1..{n_cand}")
    return float(np.mean(relevant_ranks(matrix) <= k))


def per_query_ndcg10(ranks) -> np.ndarray:
    ranks = np.asarray(ranks)
    return np.where(ranks <= 10, 1.0 / np.log2(ranks + 1.0), 0.0)


def per_query_rr10(ranks) -> np.ndarray:
    ranks = np.asarray(ranks)
    return np.where(ranks <= 10, 1.0 / ranks, 0.0)


def ndcg_at_10(matrix) -> float:
    return float(np.mean(per_query_ndcg10(_ranks(matrix))))


def rr_at_10(matrix) -> float:
    return float(np.mean(per_query_rr10(_ranks(matrix))))


def per_query_metric(ranks, metric: str) -> np.ndarray:
    ranks = np.asarray(ranks)
    if metric == "r1":
        return (ranks <= 1).astype(np.float64)
    if metric == "r10":
        return (ranks <= 10).astype(np.float64)
    if metric == "ndcg10":
        return per_query_ndcg10(ranks)
    if metric == "rr10":
        return per_query_rr10(ranks)
    raise ConfigError(f"unknown metric {metric!r}")


# ---------------------------------------------------------------------------
# significance


def paired_permutation_test(
    a,
    b,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    alternative: str = "two-sided",
    method: str = "auto",
) -> float:
    """Sign-flip permutation test on the mean paired difference ``a - b``.

    ``method="auto"`` enumerates all ``2**n`` sign patterns when
    ``n <= 20`` and returns the exact p-value; otherwise it draws
    ``resamples`` random patterns and returns ``(1 + hits) / (1 + resamples)``.
    ``alternative`` is ``"two-sided"``, ``"greater"`` (a > b) or ``"less"``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape} and {b.shape}")
    n = a.size
    if n == 0:
        raise ValueError("need at least one pair")
    if alternative not in ("two-sided", "greater", "less"):
        raise ConfigError(f"unknown alternative {alternative!r}")
    d = a - b
    observed = d.mean()
    tol = 1e-12 * max(1.0, float(np.abs(d).max()))

    def hits(means: np.ndarray) -> int:
        if alternative == "two-sided":
            return int(np.count_nonzero(np.abs(means) >= abs(observed) - tol))
        if alternative == "greater":
            return int(np.count_nonzero(means >= observed - tol))
        return int(np.count_nonzero(means <= observed + tol))

    if method == "exact" or (method == "auto" and n <= EXACT_MAX_N):
        if n > 26:
            raise ConfigError(f"exact enumeration over 2**{n} patterns is not supported")
        total = 0
        chunk = 1 << min(n, 16)
        for start in range(0, 1 << n, chunk):
            codes = np.arange(start, start + chunk, dtype=np.int64)[:, None]
            signs = 1.0 - 2.0 * ((codes >> np.arange(n)) & 1)
            total += hits(signs @ d / n)
        return total / float(1 << n)
    if method not in ("auto", "resample"):
        raise ConfigError(f"unknown method {method!r}")
    rng = np.random.Generator(np.random.Philox(key=int(seed)))
    count, done = 0, 0
    while done < resamples:
        m = min(4096, resamples - done)
        signs = 1.0 - 2.0 * rng.integers(0, 2, size=(m, n))
        count += hits(signs @ d / n)
        done += m
    return (1 + count) / (1 + resamples)


# ---------------------------------------------------------------------------
# scoring


def score_all(params: encoders.ModelParams, text, video, audio, scoring: str = "triangle", alpha: float = 1.0, reg_pair: str = "text-video") -> dict[str, ScoreMatrix]:
    """Encode every item once and build the query x candidate matrices.

    ``scoring`` is one of

    * ``"triangle"``: negated regularized area, directions T2AV/AV2T;
    * ``"cosine"``: inner product of the text pair named by ``reg_pair``,
      directions T2V/V2T or T2A/A2T;
    * ``"cosine-sum"``: ``t.v + t.a``, directions T2AV/AV2T, the natural
      tri-modal score for a model trained only on text pairs;
    * ``"fusion"``: text against the fused audio-video vector, T2AV/AV2T.
    """
    if len(text) == 0:
        raise ConfigError("test set is empty")
    T, V, A = params.embed(text, video, audio)
    if scoring == "triangle":
        S = batch_triangle_scores(T, V, A, alpha=alpha, reg_pair=reg_pair)
        fwd = "T2AV"
    elif scoring == "cosine":
        check_pair(reg_pair)
        if reg_pair == "text-video":
            S, fwd = T @ V.T, "T2V"
        elif reg_pair == "text-audio":
            S, fwd = T @ A.T, "T2A"
        else:
            raise ConfigError("cosine scoring needs a text pair (text-video or text-audio)")
    elif scoring == "cosine-sum":
        S, fwd = T @ V.T + T @ A.T, "T2AV"
    elif scoring == "fusion":
        if params.fusion is None:
            raise ConfigError("fusion scoring needs a checkpoint with a fusion layer")
        F = fuse(params.fusion, V, A).data
        S, fwd = T @ F.T, "T2AV"
    else:
        raise ConfigError(f"unknown scoring {scoring!r}")
    m = ScoreMatrix(S, fwd)
    return {fwd: m, _REVERSE[fwd]: m.transposed(_REVERSE[fwd])}


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    r1: float
    r10: float
    ndcg10: float
    rr10: float
    n: int
    per_query_rank: list[int]

    @classmethod
    def from_ranks(cls, ranks) -> "MetricReport":
        ranks = np.asarray(ranks, dtype=np.int64)
        return cls(
            r1=float(np.mean(ranks <= 1)),
            r10=float(np.mean(ranks <= 10)),
            ndcg10=float(np.mean(per_query_ndcg10(ranks))),
            rr10=float(np.mean(per_query_rr10(ranks))),
            n=int(ranks.size),
            per_query_rank=[int(r) for r in ranks],
        )

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRICS}


@dataclass
class RunReport:
    directions: dict[str, MetricReport]
    p_values: dict[str, dict[str, float]] = field(default_factory=dict)
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {}
        for d, rep in self.directions.items():
            entry = {**rep.metrics(), "n": rep.n}
            if d in self.p_values:
                entry["pVsBaseline"] = self.p_values[d]
            out[d] = entry
        return out

    def ranks_json(self) -> dict[str, list[int]]:
        return {d: rep.per_query_rank for d, rep in self.directions.items()}


def build_report(
    matrices: dict[str, ScoreMatrix],
    baseline=None,
    resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    fingerprint: str = "",
) -> RunReport:
    """Metrics per direction and, given a baseline, p-values for every metric.

    ``baseline`` maps direction to either a :class:`ScoreMatrix` or a list of
    per-query ranks (e.g. loaded from another run's rank file).
    """
    dirs = {d: MetricReport.from_ranks(relevant_ranks(m)) for d, m in matrices.items()}
    report = RunReport(dirs, fingerprint=fingerprint)
    if baseline:
        for d, rep in dirs.items():
            if d not in baseline:
                continue
            base = _ranks(baseline[d].scores if isinstance(baseline[d], ScoreMatrix) else baseline[d])
            if base.shape != (rep.n,):
                raise ConfigError(f"baseline ranks for {d} have {base.size} queries, expected {rep.n}")
            ours = np.asarray(rep.per_query_rank)
            report.p_values[d] = {
                metric: paired_permutation_test(
                    per_query_metric(ours, metric), per_query_metric(base, metric), resamples=resamples, seed=seed
                )
                for metric in METRICS
            }
    return report


def metric_deltas(a: RunReport, b: RunReport) -> dict[str, dict[str, float]]:
    """``a - b`` for every metric of every direction both reports share."""
    return {
        d: {k: a.directions[d].metrics()[k] - b.directions[d].metrics()[k] for k in METRICS}
        for d in a.directions
        if d in b.directions
    }


REPORT_SCHEMA = {
    "type": "object",
    "propertyNames": {"enum": list(DIRECTIONS)},
    "additionalProperties": {
        "type": "object",
        "required": ["r1", "r10", "ndcg10", "rr10", "n"],
        "additionalProperties": False,
        "properties": {
            **{k: {"type": "number", "minimum": 0, "maximum": 1} for k in METRICS},
            "n": {"type": "integer", "minimum": 1},
            "pVsBaseline": {
                "type": "object",
                "additionalProperties": False,
                "properties": {k: {"type": "number", "exclusiveMinimum": 0, "maximum": 1} for k in METRICS},
            },
        },
    },
}


def write_report(report: RunReport, path) -> tuple[Path, Path]:
    """Write the metrics JSON and a companion ``*.ranks.json`` file."""
    path = Path(path)
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    ranks_path = path.with_name(path.stem + ".ranks.json")
    ranks_path.write_text(json.dumps(report.ranks_json(), sort_keys=True) + "\n")
    return path, ranks_path


def read_ranks(path) -> dict[str, list[int]]:
    return json.loads(Path(path).read_text())
