"""Retrieval evaluation: Euclidean distances, CMC and mAP under the single-shot junk protocol."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset


@dataclass
class QueryRanking:
    """Valid gallery indices in ascending distance and their relevance flags."""

    order: np.ndarray
    relevant: np.ndarray

    @property
    def num_relevant(self) -> int:
        return int(self.relevant.sum())


@dataclass
class RankingResult:
    queries: list[QueryRanking]

    def __iter__(self):
        return iter(self.queries)

    def __len__(self) -> int:
        return len(self.queries)


@dataclass
class EvalReport:
    rank1: float
    rank5: float
    rank10: float
    mAP: float
    aps: list[float]
    cmc_curve: np.ndarray
    feature_source: str
    chance: float
    num_valid_queries: int
    extra: dict = field(default_factory=dict)

    def row(self) -> dict[str, str]:
        return {
            "feature": self.feature_source,
            "rank1": f"{self.rank1:.6f}",
            "rank5": f"{self.rank5:.6f}",
            "rank10": f"{self.rank10:.6f}",
            "mAP": f"{self.mAP:.6f}",
            "chance": f"{self.chance:.6f}",
            "num_queries": str(self.num_valid_queries),
        }


REPORT_COLUMNS = ["feature", "rank1", "rank5", "rank10", "mAP", "chance", "num_queries"]


def distance_matrix(query: np.ndarray, gallery: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Pairwise L2 distances computed from explicit differences (float64)."""
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"feature shapes {q.shape} and {g.shape} are incompatible")
    out = np.empty((len(q), len(g)))
    for i in range(0, len(q), chunk):
        diff = q[i : i + chunk, None, :] - g[None, :, :]
        out[i : i + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def rank_gallery(
    distmat: np.ndarray,
    q_pids: Sequence[int],
    g_pids: Sequence[int],
    q_cams: Sequence[int],
    g_cams: Sequence[int],
    junk: bool = True,
    exclude_self: bool = False,
) -> RankingResult:
    """Sort each query's gallery by distance (ties by gallery index) and drop junk.

    Junk items share both identity and camera with the query, or carry
    pid -1.  With ``exclude_self`` the gallery is the query set and the
    diagonal entry is removed.
    """
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    out = []
    for i in range(distmat.shape[0]):
        order = np.argsort(distmat[i], kind="stable")
        keep = np.ones(len(order), dtype=bool)
        if junk:
            keep &= ~((g_pids[order] == q_pids[i]) & (g_cams[order] == q_cams[i]))
            keep &= g_pids[order] != -1
        if exclude_self:
            keep &= order != i
        order = order[keep]
        out.append(QueryRanking(order, g_pids[order] == q_pids[i]))
    return RankingResult(out)


def cmc(rankings: RankingResult, max_rank: int | None = None) -> np.ndarray:
    """CMC[k-1] = fraction of valid queries whose first relevant item is within rank k."""
    firsts = [int(np.argmax(q.relevant)) for q in rankings if q.num_relevant > 0]
    if max_rank is None:
        max_rank = max((len(q.order) for q in rankings), default=0)
    if not firsts:
        return np.zeros(max_rank)
    firsts = np.asarray(firsts)
    ks = np.arange(max_rank)
    return (firsts[None, :] <= ks[:, None]).mean(axis=1)


def average_precision(relevant: np.ndarray) -> float:
    hits = np.flatnonzero(relevant)
    if len(hits) == 0:
        return float("nan")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def mean_ap(rankings: RankingResult) -> float:
    aps = [average_precision(q.relevant) for q in rankings if q.num_relevant > 0]
    return float(np.mean(aps)) if aps else 0.0


def chance_rank1(rankings: RankingResult) -> float:
    """Expected rank-1 of a random ordering: mean relevant fraction of the valid gallery."""
    fr = [q.num_relevant / len(q.order) for q in rankings if q.num_relevant > 0]
    return float(np.mean(fr)) if fr else 0.0


def evaluate_features(
    q_feats: np.ndarray,
    g_feats: np.ndarray,
    q_pids,
    g_pids,
    q_cams,
    g_cams,
    feature_source: str = "fused",
    junk: bool = True,
    exclude_self: bool = False,
) -> EvalReport:
    dist = distance_matrix(q_feats, g_feats)
    ranks = rank_gallery(dist, q_pids, g_pids, q_cams, g_cams, junk=junk, exclude_self=exclude_self)
    curve = cmc(ranks, max_rank=10)
    valid = [q for q in ranks if q.num_relevant > 0]
    aps = [average_precision(q.relevant) for q in valid]
    return EvalReport(
        rank1=float(curve[0]),
        rank5=float(curve[4]),
        rank10=float(curve[9]),
        mAP=float(np.mean(aps)) if aps else 0.0,
        aps=aps,
        cmc_curve=cmc(ranks, max_rank=min(50, max((len(q.order) for q in ranks), default=1))),
        feature_source=feature_source,
        chance=chance_rank1(ranks),
        num_valid_queries=len(valid),
    )


def evaluate(
    model,
    query: Dataset,
    gallery: Dataset,
    feature_source: str = "fused",
    junk: bool = True,
    exclude_self: bool = False,
) -> EvalReport:
    """Extract eval-mode features with ``model`` and score retrieval of ``query`` against ``gallery``."""
    qf = model.extract(query.images, feature_source)
    gf = qf if exclude_self and gallery is query else model.extract(gallery.images, feature_source)
    return evaluate_features(
        qf, gf, query.pids, gallery.pids, query.cams, gallery.cams, feature_source, junk, exclude_self
    )


def report_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    wr = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    wr.writeheader()
    for r in reports:
        wr.writerow(r.row())
    return buf.getvalue()


def cmc_svg(curve: np.ndarray, width: int = 320, height: int = 200, label: str = "CMC") -> str:
    """Minimal SVG polyline of a CMC curve (rank on x, matching rate on y)."""
    n = len(curve)
    pad = 20
    xs = [pad + (width - 2 * pad) * (i / max(n - 1, 1)) for i in range(n)]
    ys = [height - pad - (height - 2 * pad) * float(v) for v in curve]
    pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'  <title>{label}</title>\n'
        f'  <rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#999"/>\n'
        f'  <polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{pts}"/>\n'
        "</svg>\n"
    )
