"""Retrieval scoring: cosine ranking over candidate pools and the three
pool metrics (Precision@1, Recall@k, NDCG@k with binary relevance)."""

from __future__ import annotations

import numpy as np

from .errors import EmptyDataset, NoPositive, ShapeMismatch, UpstreamArtifactMissing, ZeroNorm
from .gridworld import TASK_KINDS

# two-way synthetic retrieval folds into one meta-task for aggregation
META_TASK_OF = {
    "classification": "classification",
    "vqa": "vqa",
    "retrieval_i2t": "retrieval",
    "retrieval_t2i": "retrieval",
    "grounding": "grounding",
}
assert set(META_TASK_OF) == set(TASK_KINDS)


def _cosine(q: np.ndarray, t: np.ndarray) -> float:
    nq = float(np.linalg.norm(q))
    nt = float(np.linalg.norm(t))
    if nq < 1e-12 or nt < 1e-12:
        raise ZeroNorm("cosine over a zero-norm vector")
    return float(q @ t) / (nq * nt)


def score_pool(query_vector: np.ndarray, targets: dict) -> list:
    """Target ids by descending cosine to the query; ties by ascending id."""
    if not targets:
        raise EmptyDataset("empty candidate pool")
    q = np.asarray(query_vector, dtype=np.float64)
    scored = []
    for tid, vec in targets.items():
        v = np.asarray(vec, dtype=np.float64)
        if v.shape != q.shape:
            raise ShapeMismatch(f"target {tid}: dim {v.shape} vs query {q.shape}")
        scored.append((-_cosine(q, v), tid))
    scored.sort()
    return [tid for _, tid in scored]


def _rank_of(ranking: list, positive) -> int:
    """1-based rank, or 0 when the positive is absent."""
    try:
        return ranking.index(positive) + 1
    except ValueError:
        return 0


def precision_at_1(rankings: list, positives: list) -> float:
    _check_paired(rankings, positives)
    hits = sum(1 for r, p in zip(rankings, positives) if r[0] == p)
    return hits / len(rankings)


def recall_at_k(rankings: list, positives: list, k: int) -> float:
    if k < 1:
        raise ShapeMismatch(f"recall window k={k} must be >= 1")
    _check_paired(rankings, positives)
    hits = sum(1 for r, p in zip(rankings, positives) if 0 < _rank_of(r, p) <= k)
    return hits / len(rankings)


def ndcg_at_k(rankings: list, positives: list, k: int = 5) -> float:
    """Binary single-positive NDCG: DCG = 1/log2(rank+1) inside the window,
    0 outside; the ideal DCG is 1, so per-query NDCG is the DCG itself."""
    if k < 1:
        raise ShapeMismatch(f"ndcg window k={k} must be >= 1")
    _check_paired(rankings, positives)
    gains = []
    for r, p in zip(rankings, positives):
        rank = _rank_of(r, p)
        gains.append(1.0 / np.log2(rank + 1) if 0 < rank <= k else 0.0)
    return float(np.mean(gains))


def _check_paired(rankings, positives):
    if len(rankings) != len(positives):
        raise ShapeMismatch("rankings and positives differ in length")
    if not rankings:
        raise EmptyDataset("no queries to score")


def rank_pools(suite, embeddings: dict, instances=None) -> list:
    """(instance, ranking) pairs scored from an embedding lookup.

    embeddings maps (instance_id, side) to a vector; every pool member needs
    a target-side row and every scored instance a query-side row.
    """
    instances = list(suite if instances is None else instances)
    if not instances:
        raise EmptyDataset("no instances to score")
    out = []
    for inst in sorted(instances, key=lambda i: i.instance_id):
        qkey = (inst.instance_id, "query")
        if qkey not in embeddings:
            raise UpstreamArtifactMissing(f"no query embedding for {inst.instance_id}")
        if inst.instance_id not in inst.pool:
            raise NoPositive(f"pool of {inst.instance_id} lacks its positive")
        pool = {}
        for tid in inst.pool:
            tkey = (tid, "target")
            if tkey not in embeddings:
                raise UpstreamArtifactMissing(f"no target embedding for {tid}")
            pool[tid] = embeddings[tkey]
        out.append((inst, score_pool(embeddings[qkey], pool)))
    return out


def per_task_records(scored: list) -> list:
    """Fold (instance, ranking) pairs into one metric record per task kind."""
    by_task: dict[str, list] = {}
    for inst, ranking in scored:
        by_task.setdefault(inst.task_kind, []).append((ranking, inst.instance_id))
    records = []
    for task in sorted(by_task):
        rankings = [r for r, _ in by_task[task]]
        positives = [p for _, p in by_task[task]]
        records.append({
            "task_kind": task,
            "n_queries": len(rankings),
            "p_at_1": precision_at_1(rankings, positives),
            "r_at_5": recall_at_k(rankings, positives, 5),
            "ndcg_at_5": ndcg_at_k(rankings, positives, 5),
        })
    return records


def suite_precision_at_1(suite, embeddings: dict, instances=None) -> float:
    """One-number held-out score used for training-loop logging."""
    scored = rank_pools(suite, embeddings, instances)
    rankings = [r for _, r in scored]
    positives = [inst.instance_id for inst, _ in scored]
    return precision_at_1(rankings, positives)
