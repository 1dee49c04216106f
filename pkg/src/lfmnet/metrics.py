"""Retrieval evaluation: CMC Rank-k points and mean average precision.

Follows the standard cross-camera retrieval protocol: per query the gallery is
sorted by ascending distance (ties broken by gallery index), entries sharing
both the query's identity and camera are excluded as junk, Rank-k counts
queries whose first correct match sits at position <= k, and AP is the raw
(non-interpolated) average of i / p_i over the correct hits at positions
p_1 < ... < p_R.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, StructuralError


@dataclass(frozen=True)
class EvalReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    n_queries: int
    skipped: int
    distance: str

    def csv_row(self, method: str) -> str:
        return (
            f"{method},{self.distance},{self.rank1:.4f},{self.rank5:.4f},"
            f"{self.rank10:.4f},{self.map:.4f},{self.n_queries},{self.skipped}"
        )


EVAL_CSV_HEADER = "method,distance,rank1,rank5,rank10,map,n_queries,skipped"


def pairwise_distances(queries: np.ndarray, gallery: np.ndarray, kind: str) -> np.ndarray:
    """(B_q, B_g) distance matrix; kind is ``euclidean`` or ``cosine``."""
    if queries.ndim != 2 or gallery.ndim != 2 or queries.shape[1] != gallery.shape[1]:
        raise StructuralError(
            f"embedding shapes incompatible: {queries.shape} vs {gallery.shape}"
        )
    q = np.asarray(queries, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    if kind == "euclidean":
        diff = q[:, None, :] - g[None, :, :]
        return np.sqrt((diff * diff).sum(axis=2))
    if kind == "cosine":
        qn = np.linalg.norm(q, axis=1)
        gn = np.linalg.norm(g, axis=1)
        if (qn == 0).any() or (gn == 0).any():
            raise NumericError("cosine distance undefined for zero-norm embeddings")
        sim = (q @ g.T) / np.outer(qn, gn)
        return 1.0 - sim
    raise ValueError(f"unknown distance kind: {kind!r}")


def evaluate(
    dist: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    *,
    distance: str = "euclidean",
    exclude_same_camera: bool = True,
) -> EvalReport:
    """Score a query/gallery distance matrix into an :class:`EvalReport`.

    Queries with no valid match after junk filtering are excluded from the
    averages and counted in the report's ``skipped`` field.
    """
    dist = np.asarray(dist, dtype=np.float64)
    query_ids = np.asarray(query_ids)
    query_cams = np.asarray(query_cams)
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams)
    n_q, n_g = dist.shape
    if query_ids.shape != (n_q,) or gallery_ids.shape != (n_g,):
        raise StructuralError("id arrays do not match the distance matrix shape")

    hits_at = {1: 0, 5: 0, 10: 0}
    ap_sum = 0.0
    valid = 0
    skipped = 0
    for qi in range(n_q):
        order = np.argsort(dist[qi], kind="stable")
        keep = np.ones(n_g, dtype=bool)
        if exclude_same_camera:
            keep = ~(
                (gallery_ids == query_ids[qi]) & (gallery_cams == query_cams[qi])
            )
        ranked = order[keep[order]]
        correct = gallery_ids[ranked] == query_ids[qi]
        if not correct.any():
            skipped += 1
            continue
        valid += 1
        positions = np.flatnonzero(correct) + 1  # 1-based hit positions
        first = positions[0]
        for k in hits_at:
            hits_at[k] += first <= k
        ap_sum += float(
            np.mean(np.arange(1, len(positions) + 1) / positions)
        )
    if valid == 0:
        raise StructuralError("no query has a valid gallery match after filtering")
    return EvalReport(
        rank1=hits_at[1] / valid,
        rank5=hits_at[5] / valid,
        rank10=hits_at[10] / valid,
        map=ap_sum / valid,
        n_queries=valid,
        skipped=skipped,
        distance=distance,
    )


def evaluate_embeddings(
    query_emb: np.ndarray,
    query_ids: np.ndarray,
    query_cams: np.ndarray,
    gallery_emb: np.ndarray,
    gallery_ids: np.ndarray,
    gallery_cams: np.ndarray,
    *,
    distance: str = "euclidean",
    exclude_same_camera: bool = True,
) -> EvalReport:
    dist = pairwise_distances(query_emb, gallery_emb, distance)
    return evaluate(
        dist,
        query_ids,
        query_cams,
        gallery_ids,
        gallery_cams,
        distance=distance,
        exclude_same_camera=exclude_same_camera,
    )
