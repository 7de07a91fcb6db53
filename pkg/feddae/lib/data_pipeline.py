"""
Dataset ingestion, binarization, user filtering, leave-one-out splitting
and negative sampling.

Formats:
  movielens-tab  tab-separated `user item rating timestamp` (ML-100K u.data)
  generic-csv    delimiter-separated `user,item,rating[,timestamp]`, optional
                 header row; ML-1M goes through here with delimiter "::"
"""

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from errors import IngestionError
from rng_streams import NEGATIVES, SPLIT, derive_rng

logger = logging.getLogger(f"feddae.{__name__}")

DatasetFormat = Literal["movielens-tab", "generic-csv"]
DATASET_FORMATS: tuple[DatasetFormat, ...] = ("movielens-tab", "generic-csv")

MALFORMED_TOLERANCE = 0.01
DEFAULT_MIN_INTERACTIONS = 10
DEFAULT_NEGATIVES_PER_POSITIVE = 4


@dataclass(frozen=True, slots=True)
class RawInteraction:
    user: int
    item: int
    rating: float
    timestamp: int | None = None


def _separator(fmt: DatasetFormat, delimiter: str | None) -> str:
    if fmt == "movielens-tab":
        return "\t"
    sep = delimiter or ","
    # The python engine treats multi-character separators as regexes
    return re.escape(sep) if len(sep) > 1 else sep


def load_dataset(
    path: str | Path, fmt: DatasetFormat = "movielens-tab", delimiter: str | None = None
) -> list[RawInteraction]:
    """
    Parse a ratings file into RawInteraction records.

    In generic-csv files a leading row whose user, item and rating fields
    are all non-numeric is a header and is skipped. Rows with too many
    fields, non-numeric or negative ids, or a missing rating count as
    malformed; more than 1% malformed rows aborts with IngestionError.
    """
    if fmt not in DATASET_FORMATS:
        raise IngestionError(f"Unknown dataset format {fmt!r}; expected one of {DATASET_FORMATS}")
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"Dataset file not found: {path}")

    bad_lines: list[list[str]] = []

    def _count_bad_line(fields: list[str]) -> None:
        bad_lines.append(fields)
        return None

    try:
        frame = pd.read_csv(
            path,
            sep=_separator(fmt, delimiter),
            header=None,
            dtype=str,
            engine="python",
            skip_blank_lines=True,
            on_bad_lines=_count_bad_line,
        )
    except pd.errors.EmptyDataError:
        logger.warning("Dataset file %s is empty", path)
        return []
    except (OSError, UnicodeDecodeError, pd.errors.ParserError) as e:
        raise IngestionError(f"Could not read {path}: {e}") from e

    if frame.empty:
        logger.warning("Dataset file %s is empty", path)
        return []
    if frame.shape[1] < 3:
        raise IngestionError(f"{path}: expected at least user, item, rating columns, found {frame.shape[1]}")

    frame = frame.iloc[:, :4]
    numeric = frame.apply(lambda col: pd.to_numeric(col.str.strip(), errors="coerce"))
    if fmt == "generic-csv" and numeric.iloc[0, :3].isna().all():
        logger.info("Skipping header row in %s: %s", path, list(frame.iloc[0, :3]))
        frame = frame.iloc[1:]
        numeric = numeric.iloc[1:]

    ids = numeric.iloc[:, :2]
    valid = numeric.iloc[:, :3].notna().all(axis=1)
    valid &= (ids >= 0).all(axis=1) & (ids == np.floor(ids)).all(axis=1)
    if numeric.shape[1] > 3:
        ts = numeric.iloc[:, 3]
        # A present-but-garbled timestamp is malformed; an absent one is allowed
        garbled = ts.isna() & frame.iloc[:, 3].notna() & (frame.iloc[:, 3].str.strip() != "")
        valid &= ~garbled

    total = len(numeric) + len(bad_lines)
    malformed = int((~valid).sum()) + len(bad_lines)
    if total and malformed / total > MALFORMED_TOLERANCE:
        raise IngestionError(
            f"{path}: {malformed} of {total} lines malformed ({100.0 * malformed / total:.2f}% > "
            f"{100.0 * MALFORMED_TOLERANCE:.0f}%)"
        )
    if malformed:
        logger.warning("%s: skipped %d malformed of %d lines", path, malformed, total)

    good = numeric[valid]
    users = good.iloc[:, 0].to_numpy(dtype=np.int64)
    items = good.iloc[:, 1].to_numpy(dtype=np.int64)
    ratings = good.iloc[:, 2].to_numpy(dtype=np.float64)
    if good.shape[1] > 3:
        stamps = good.iloc[:, 3].to_numpy(dtype=np.float64)
    else:
        stamps = np.full(len(good), np.nan)

    records = [
        RawInteraction(int(u), int(i), float(r), None if np.isnan(t) else int(t))
        for u, i, r, t in zip(users, items, ratings, stamps)
    ]
    logger.info("Loaded %d interactions from %s", len(records), path)
    return records


@dataclass(frozen=True, eq=False)
class InteractionMatrix:
    """
    Sparse binary user x item matrix as per-user sorted positive lists.

    user_ids / item_ids map dense index -> raw id; timestamps[u] aligns with
    rows[u] (NaN where unknown).
    """

    n_users: int
    n_items: int
    rows: list[np.ndarray]
    timestamps: list[np.ndarray]
    user_ids: np.ndarray
    item_ids: np.ndarray
    _user_index: dict[int, int] = field(init=False, repr=False, compare=False)
    _item_index: dict[int, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if len(self.rows) != self.n_users or len(self.timestamps) != self.n_users:
            raise IngestionError(f"Expected {self.n_users} rows, got {len(self.rows)}")
        if len(self.user_ids) != self.n_users or len(self.item_ids) != self.n_items:
            raise IngestionError("Reindex maps do not match matrix dimensions")
        for u, row in enumerate(self.rows):
            if row.size and (row[0] < 0 or row[-1] >= self.n_items or np.any(np.diff(row) <= 0)):
                raise IngestionError(f"Row {u} is not a strictly increasing list of item indices")
        object.__setattr__(self, "_user_index", {int(raw): idx for idx, raw in enumerate(self.user_ids)})
        object.__setattr__(self, "_item_index", {int(raw): idx for idx, raw in enumerate(self.item_ids)})

    @property
    def n_interactions(self) -> int:
        return int(sum(row.size for row in self.rows))

    def user_index(self, raw_user: int) -> int:
        """Dense index of a raw user id (KeyError when absent)."""
        return self._user_index[int(raw_user)]

    def item_index(self, raw_item: int) -> int:
        return self._item_index[int(raw_item)]

    def has_user(self, raw_user: int) -> bool:
        return int(raw_user) in self._user_index

    def with_rows(self, rows: list[np.ndarray], timestamps: list[np.ndarray]) -> "InteractionMatrix":
        """Same users/items and maps, different positives."""
        return InteractionMatrix(self.n_users, self.n_items, rows, timestamps, self.user_ids, self.item_ids)


@dataclass(frozen=True, eq=False)
class SplitDataset:
    train: InteractionMatrix
    test_items: np.ndarray  # held-out item index per user
    negatives: list[np.ndarray] = field(default_factory=list)


def binarize_and_filter(
    raw: list[RawInteraction], min_interactions: int = DEFAULT_MIN_INTERACTIONS
) -> InteractionMatrix:
    """
    Ratings > 0 become positives; duplicate (user, item) pairs collapse to the
    latest timestamp; users with fewer than min_interactions positives are
    dropped. Items are the distinct items of the retained users, reindexed
    densely in raw-id order.
    """
    if not raw:
        raise IngestionError("No interactions to binarize")

    frame = pd.DataFrame(
        {
            "user": np.fromiter((r.user for r in raw), dtype=np.int64, count=len(raw)),
            "item": np.fromiter((r.item for r in raw), dtype=np.int64, count=len(raw)),
            "rating": np.fromiter((r.rating for r in raw), dtype=np.float64, count=len(raw)),
            "timestamp": np.fromiter(
                (np.nan if r.timestamp is None else r.timestamp for r in raw), dtype=np.float64, count=len(raw)
            ),
        }
    )
    frame = frame[frame["rating"] > 0]
    frame = frame.sort_values("timestamp", kind="stable", na_position="first")
    before = len(frame)
    frame = frame.drop_duplicates(["user", "item"], keep="last")
    if len(frame) < before:
        logger.info("Collapsed %d duplicate user-item pairs", before - len(frame))

    counts = frame.groupby("user").size()
    kept_users = counts[counts >= min_interactions].index
    dropped = len(counts) - len(kept_users)
    if dropped:
        logger.info("Dropped %d users with fewer than %d interactions", dropped, min_interactions)
    frame = frame[frame["user"].isin(kept_users)]
    if frame.empty:
        raise IngestionError(f"No user has at least {min_interactions} positive interactions")

    user_ids = np.sort(frame["user"].unique())
    item_ids = np.sort(frame["item"].unique())
    frame = frame.assign(
        u=np.searchsorted(user_ids, frame["user"].to_numpy()),
        i=np.searchsorted(item_ids, frame["item"].to_numpy()),
    ).sort_values(["u", "i"], kind="stable")

    u_col = frame["u"].to_numpy()
    i_col = frame["i"].to_numpy(dtype=np.int64)
    t_col = frame["timestamp"].to_numpy(dtype=np.float64)
    bounds = np.searchsorted(u_col, np.arange(len(user_ids) + 1))
    rows = [i_col[bounds[u] : bounds[u + 1]].copy() for u in range(len(user_ids))]
    stamps = [t_col[bounds[u] : bounds[u + 1]].copy() for u in range(len(user_ids))]
    return InteractionMatrix(len(user_ids), len(item_ids), rows, stamps, user_ids, item_ids)


def dataset_stats(mat: InteractionMatrix) -> dict[str, float | int]:
    """#ratings, #users, #items and sparsity% rounded to 2 decimals."""
    ratings = mat.n_interactions
    sparsity = 100.0 * (1.0 - ratings / (mat.n_users * mat.n_items))
    return {
        "ratings": ratings,
        "users": mat.n_users,
        "items": mat.n_items,
        "sparsity": round(sparsity, 2),
    }


def leave_one_out_split(mat: InteractionMatrix, rng: np.random.Generator) -> SplitDataset:
    """
    Hold out each user's latest positive; ties and missing timestamps are
    broken by a seeded uniform choice. Negatives are attached separately.
    """
    test_items = np.empty(mat.n_users, dtype=np.int64)
    rows, stamps = [], []
    for u in range(mat.n_users):
        row, ts = mat.rows[u], mat.timestamps[u]
        if row.size < 2:
            raise IngestionError(f"User {mat.user_ids[u]} has {row.size} positives; leave-one-out needs 2")
        known = ~np.isnan(ts)
        if known.any():
            latest = np.flatnonzero(known & (ts == np.nanmax(ts)))
            pos = int(latest[0]) if latest.size == 1 else int(rng.choice(latest))
        else:
            pos = int(rng.integers(row.size))
        test_items[u] = row[pos]
        rows.append(np.delete(row, pos))
        stamps.append(np.delete(ts, pos))
    return SplitDataset(mat.with_rows(rows, stamps), test_items)


def sample_negatives(
    mat: InteractionMatrix,
    per_positive: int = DEFAULT_NEGATIVES_PER_POSITIVE,
    rng: np.random.Generator | None = None,
    heldout: np.ndarray | None = None,
) -> list[np.ndarray]:
    """
    per_positive * |positives(u)| items per user, drawn uniformly with
    replacement from items the user never interacted with (held-out item
    included in the exclusion when given).
    """
    if per_positive < 0:
        raise ValueError(f"per_positive must be >= 0, got {per_positive}")
    negatives = []
    all_items = np.arange(mat.n_items)
    for u in range(mat.n_users):
        row = mat.rows[u]
        if per_positive == 0 or row.size == 0:
            negatives.append(np.empty(0, dtype=np.int64))
            continue
        excluded = row if heldout is None else np.union1d(row, heldout[u : u + 1])
        candidates = np.setdiff1d(all_items, excluded, assume_unique=True)
        if candidates.size == 0:
            logger.warning("User %s interacted with every item; no negatives sampled", mat.user_ids[u])
            negatives.append(np.empty(0, dtype=np.int64))
            continue
        if rng is None:
            raise ValueError("sample_negatives needs a random generator")
        negatives.append(rng.choice(candidates, size=per_positive * row.size, replace=True).astype(np.int64))
    return negatives


def prepare_split(
    mat: InteractionMatrix, seed: int, per_positive: int = DEFAULT_NEGATIVES_PER_POSITIVE
) -> SplitDataset:
    """Leave-one-out split plus negatives, each from its own named substream of seed."""
    split = leave_one_out_split(mat, derive_rng(seed, SPLIT))
    negatives = sample_negatives(split.train, per_positive, derive_rng(seed, NEGATIVES), heldout=split.test_items)
    return replace(split, negatives=negatives)


def load_interactions(
    path: str | Path,
    fmt: DatasetFormat = "movielens-tab",
    delimiter: str | None = None,
    min_interactions: int = DEFAULT_MIN_INTERACTIONS,
) -> InteractionMatrix:
    return binarize_and_filter(load_dataset(path, fmt, delimiter), min_interactions)
