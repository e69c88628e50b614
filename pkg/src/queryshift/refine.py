"""Per-query candidate refinement, source-like pair queue, and constraint estimates.

A query's prediction is taken over a pruned candidate list instead of the whole
gallery: its own 1-NN as the positive, the other batch members' top-k neighbors
as sample negatives, and the gallery centroids as cluster negatives. Pairs that
look source-domain-like feed a queue from which the gap and entropy-threshold
constraints are estimated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimMismatchError,
    EmptyQueueError,
    IndexOutOfRangeError,
    InvalidKError,
)
from .gallery import CentroidSet, Gallery, knn_table
from .vectors import shannon_entropy, softmax_temp

# Centroids numerically equal to the positive are dropped from the negatives.
_CENTROID_COLLISION_TOL = 1e-9


@dataclass(frozen=True)
class CandidateSet:
    """Pruned candidate list for one query.

    Slot 0 of ``candidate_embeddings`` is always the positive (the query's
    1-NN in the gallery). ``negative_ids`` mirrors slots 1..m-1: gallery ids
    are >= 0 and centroid j is encoded as -(j + 1).
    """

    query_index: int
    positive_id: int
    negative_ids: tuple
    candidate_embeddings: np.ndarray

    def __len__(self) -> int:
        return self.candidate_embeddings.shape[0]


@dataclass(frozen=True)
class RefinedPrediction:
    """Softmax distribution over a candidate set."""

    probs: np.ndarray
    entropy: float
    positive_prob: float


@dataclass(frozen=True)
class QueueEntry:
    query_emb: np.ndarray
    positive_emb: np.ndarray
    score_s: float
    entropy_at_enqueue: float


@dataclass(frozen=True)
class SourceLikeQueue:
    """At most ``capacity`` entries, kept sorted ascending by score.

    Ties on equal scores resolve toward the earlier-inserted entry; entropy
    values are frozen at enqueue time and never recomputed.
    """

    capacity: int
    entries: tuple = field(default=())
    seqs: tuple = field(default=())
    next_seq: int = 0

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class ConstraintEstimates:
    """Source-gap estimate and entropy threshold derived from the queue."""

    gap_source: float
    entropy_threshold: float


def build_candidate_sets(
    batch_z: np.ndarray, gallery: Gallery, centroids: CentroidSet, k: int
) -> list:
    """Candidate sets for every query in a batch of unit-norm embeddings.

    Negatives keep their first occurrence: sample negatives in ascending
    batch order, each in similarity order, followed by the centroids. The
    positive id never reappears among the negatives.
    """
    batch_z = np.asarray(batch_z, dtype=np.float64)
    if batch_z.ndim != 2 or batch_z.shape[0] < 1:
        raise IndexOutOfRangeError("query batch must be a non-empty 2-D array")
    if k < 1:
        raise InvalidKError(f"k must be >= 1, got {k}")
    b = batch_z.shape[0]
    table = knn_table(gallery, batch_z, k)
    pos_ids = table[:, 0]

    out = []
    for i in range(b):
        pos = int(pos_ids[i])
        seen = {pos}
        neg_gallery = []
        for j in range(b):
            if j == i:
                continue
            for g in table[j]:
                g = int(g)
                if g not in seen:
                    seen.add(g)
                    neg_gallery.append(g)
        pos_emb = gallery.items[pos]
        cent_rows = []
        cent_refs = []
        for c_idx in range(centroids.k):
            c_emb = centroids.centroids[c_idx]
            if np.linalg.norm(c_emb - pos_emb) <= _CENTROID_COLLISION_TOL:
                continue
            cent_rows.append(c_emb)
            cent_refs.append(-(c_idx + 1))
        rows = [pos_emb]
        if neg_gallery:
            rows.append(gallery.items[neg_gallery])
        if cent_rows:
            rows.append(np.vstack(cent_rows))
        embs = np.vstack(rows) if len(rows) > 1 else pos_emb[None, :]
        out.append(
            CandidateSet(
                query_index=i,
                positive_id=pos,
                negative_ids=tuple(neg_gallery) + tuple(cent_refs),
                candidate_embeddings=embs,
            )
        )
    return out


def build_candidate_set(
    batch_z: np.ndarray, gallery: Gallery, centroids: CentroidSet, k: int, i: int
) -> CandidateSet:
    """Candidate set for query ``i`` of the batch."""
    batch_z = np.asarray(batch_z, dtype=np.float64)
    if batch_z.ndim != 2 or not 0 <= i < batch_z.shape[0]:
        raise IndexOutOfRangeError(f"query index {i} outside batch")
    return build_candidate_sets(batch_z, gallery, centroids, k)[i]


def refined_prediction(q: np.ndarray, cs: CandidateSet, tau: float) -> RefinedPrediction:
    """Tempered softmax over the candidate set's cosine scores."""
    q = np.asarray(q, dtype=np.float64)
    scores = cs.candidate_embeddings @ q
    probs = softmax_temp(scores, tau)
    return RefinedPrediction(
        probs=probs,
        entropy=shannon_entropy(probs),
        positive_prob=float(probs[0]),
    )


def source_likeness(
    q: np.ndarray, pos: np.ndarray, q_center: np.ndarray, g_center: np.ndarray
) -> float:
    """Score of a query/positive pair; smaller means more source-domain-like.

    Twice the pair distance minus the distances of each member to its batch
    center: tight pairs far from the centers score lowest.
    """
    q = np.asarray(q, dtype=np.float64)
    pos = np.asarray(pos, dtype=np.float64)
    q_center = np.asarray(q_center, dtype=np.float64)
    g_center = np.asarray(g_center, dtype=np.float64)
    if not (q.shape == pos.shape == q_center.shape == g_center.shape):
        raise DimMismatchError("all four vectors must share one dimension")
    return float(
        2.0 * np.linalg.norm(q - pos)
        - (np.linalg.norm(q - q_center) + np.linalg.norm(pos - g_center))
    )


def update_queue(queue: SourceLikeQueue, entries, capacity: int | None = None) -> SourceLikeQueue:
    """Merge new entries and keep the ``capacity`` smallest-score ones.

    Membership is the global best-by-score over everything seen so far, not
    FIFO. Returns a new queue; the input is never mutated.
    """
    cap = queue.capacity if capacity is None else capacity
    merged = list(zip(queue.entries, queue.seqs))
    seq = queue.next_seq
    for e in entries:
        merged.append((e, seq))
        seq += 1
    merged.sort(key=lambda pair: (pair[0].score_s, pair[1]))
    merged = merged[:cap]
    return SourceLikeQueue(
        capacity=cap,
        entries=tuple(e for e, _ in merged),
        seqs=tuple(s for _, s in merged),
        next_seq=seq,
    )


def estimate_constraints(queue: SourceLikeQueue) -> ConstraintEstimates:
    """Gap between the queue-side means and the max stored entropy."""
    if len(queue) == 0:
        raise EmptyQueueError("cannot estimate constraints from an empty queue")
    q_mean = np.mean([e.query_emb for e in queue.entries], axis=0)
    g_mean = np.mean([e.positive_emb for e in queue.entries], axis=0)
    return ConstraintEstimates(
        gap_source=float(np.linalg.norm(q_mean - g_mean)),
        entropy_threshold=float(max(e.entropy_at_enqueue for e in queue.entries)),
    )
