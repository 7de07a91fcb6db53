"""
Top-K ranking metrics under leave-one-out with full ranking.

Candidates are every item outside the user's train positives. Ties are
broken by ascending item index, so a held-out item shares no rank.
"""

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from errors import EvaluationError, UndefinedMetricError

logger = logging.getLogger(f"feddae.{__name__}")

DEFAULT_TOP_K = 20


@dataclass(frozen=True)
class RankResult:
    user: int
    rank: int  # 1-based
    candidates: int


def rank_heldout(
    scores: np.ndarray, heldout: int, train_positives: Iterable[int] | np.ndarray, user: int = -1
) -> RankResult:
    """1 + #candidates scoring strictly higher + #tied candidates with a lower item index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not isinstance(train_positives, np.ndarray):
        train_positives = list(train_positives)
    positives = np.asarray(train_positives, dtype=np.int64)
    if np.any(positives == heldout):
        raise EvaluationError(f"Held-out item {heldout} of user {user} is among its train positives")
    if not np.all(np.isfinite(scores)):
        raise EvaluationError(f"User {user} has {int(np.sum(~np.isfinite(scores)))} non-finite scores")

    is_candidate = np.ones(scores.shape[0], dtype=bool)
    is_candidate[positives] = False
    target = scores[heldout]
    above = is_candidate & (scores > target)
    tied_before = is_candidate[:heldout] & (scores[:heldout] == target)
    rank = 1 + int(above.sum()) + int(tied_before.sum())
    return RankResult(user=user, rank=rank, candidates=int(is_candidate.sum()))


def _require(results: Sequence[RankResult]) -> None:
    if not results:
        raise UndefinedMetricError("Metric undefined over an empty result list")


def hr_at_k(results: Sequence[RankResult], k: int = DEFAULT_TOP_K) -> float:
    _require(results)
    return sum(1 for r in results if r.rank <= k) / len(results)


def ndcg_at_k(results: Sequence[RankResult], k: int = DEFAULT_TOP_K) -> float:
    """Single relevant item, so IDCG = 1 and each hit contributes 1/log2(rank + 1)."""
    _require(results)
    return float(sum(1.0 / np.log2(r.rank + 1) for r in results if r.rank <= k) / len(results))


def metrics_record(results: Sequence[RankResult], k: int, seed: int) -> dict[str, float | int]:
    """Metrics JSON payload: {hr@K, ndcg@K, K, n_users, seed}."""
    return {
        f"hr@{k}": hr_at_k(results, k),
        f"ndcg@{k}": ndcg_at_k(results, k),
        "K": k,
        "n_users": len(results),
        "seed": seed,
    }


def write_rank_csv(
    results: Sequence[RankResult],
    heldout: np.ndarray,
    user_ids: np.ndarray,
    item_ids: np.ndarray,
    path: Path,
) -> None:
    frame = pd.DataFrame(
        {
            "user": [r.user for r in results],
            "raw_user_id": [int(user_ids[r.user]) for r in results],
            "heldout": [int(heldout[r.user]) for r in results],
            "raw_item_id": [int(item_ids[heldout[r.user]]) for r in results],
            "rank": [r.rank for r in results],
            "candidates": [r.candidates for r in results],
        }
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info("Wrote per-user ranks for %d users to %s", len(results), path)


def top_k_items(scores: np.ndarray, train_positives: np.ndarray, k: int = DEFAULT_TOP_K) -> np.ndarray:
    """Indices of the k best-scoring candidates, in rank order (ties by ascending index)."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.setdiff1d(np.arange(scores.shape[0]), train_positives)
    order = np.lexsort((candidates, -scores[candidates]))
    return candidates[order[:k]]


def write_predictions_csv(
    predictions: dict[int, np.ndarray],
    train_rows: Sequence[np.ndarray],
    user_ids: np.ndarray,
    item_ids: np.ndarray,
    k: int,
    path: Path,
) -> None:
    """One row per (user, position): user, raw_user_id, position, item, raw_item_id, score."""
    records = []
    for u in sorted(predictions):
        scores = predictions[u]
        for position, item in enumerate(top_k_items(scores, train_rows[u], k), start=1):
            records.append((u, int(user_ids[u]), position, int(item), int(item_ids[item]), float(scores[item])))
    frame = pd.DataFrame.from_records(
        records, columns=["user", "raw_user_id", "position", "item", "raw_item_id", "score"]
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info("Wrote top-%d predictions for %d users to %s", k, len(predictions), path)
