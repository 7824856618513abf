"""Data pipeline: TSV ingestion, iterative core filtering, leave-one-out
splitting, user-length grouping, and deterministic batching.

Split layout per user sequence s of length n (after filtering/truncation):
test predicts s[n-1] from s[:n-1], validation predicts s[n-2] from s[:n-2],
and training predicts s[n-3] from s[:n-3]. Users need n >= 4 for a training
row; n == 3 users keep their validation/test rows only.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError

__all__ = [
    "Interaction",
    "InteractionSequence",
    "SplitRow",
    "SplitDataset",
    "Batch",
    "GROUP_NAMES",
    "ingest",
    "write_tsv",
    "filter_and_bound",
    "split_leave_one_out",
    "group_label",
    "make_batch",
    "batch_iter",
    "dataset_stats",
    "save_split",
    "load_split",
]

logger = logging.getLogger(__name__)

GROUP_NAMES = ("Short", "Medium", "Long")
SPLIT_FORMAT = "mambarec-split-v1"


@dataclass
class Interaction:
    item_id: str
    timestamp: int
    rating: float = 0.0


@dataclass
class InteractionSequence:
    """One user's interactions, sorted ascending by (timestamp, rating)."""

    user_id: str
    items: list[Interaction] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class SplitRow:
    user: int  # dense user index (1-based)
    inputs: list[int]  # dense item ids, truncated to the most recent max_len
    target: int


@dataclass
class SplitDataset:
    user_ids: list[str]  # dense index u <-> user_ids[u - 1]; 0 reserved
    item_ids: list[str]  # dense index i <-> item_ids[i - 1]; 0 = padding
    max_len: int
    train: list[SplitRow]
    valid: list[SplitRow]
    test: list[SplitRow]
    groups: dict[int, str]  # dense user index -> Short/Medium/Long

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    def rows(self, which: str) -> list[SplitRow]:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[which]
        except KeyError:
            raise ContractError(f"unknown split {which!r}") from None


@dataclass
class Batch:
    items: np.ndarray  # [B, N] int64, left-padded with 0
    lengths: np.ndarray  # [B] true input lengths
    targets: np.ndarray  # [B] dense item ids
    users: np.ndarray  # [B] dense user indices


# ---------------------------------------------------------------------------
# ingestion


def ingest(path) -> list[InteractionSequence]:
    """Parse a TSV with header user_id, item_id, timestamp[, rating].

    Rows are grouped by user in first-seen order and sorted ascending by
    (timestamp, rating); out-of-order input is repaired by the sort.
    """
    sequences: dict[str, InteractionSequence] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if reader.fieldnames is None:
            return []
        required = {"user_id", "item_id", "timestamp"}
        missing = required - set(reader.fieldnames)
        if missing:
            raise DataError(f"{path}: header missing columns {sorted(missing)}")
        has_rating = "rating" in reader.fieldnames
        for row in reader:
            line = reader.line_num
            user = row.get("user_id")
            item = row.get("item_id")
            ts_raw = row.get("timestamp")
            if not user or not item or ts_raw in (None, ""):
                raise DataError(f"{path}:{line}: incomplete row")
            try:
                ts = int(ts_raw)
            except ValueError:
                raise DataError(f"{path}:{line}: bad timestamp {ts_raw!r}") from None
            rating = 0.0
            if has_rating and row.get("rating") not in (None, ""):
                try:
                    rating = float(row["rating"])
                except ValueError:
                    raise DataError(f"{path}:{line}: bad rating {row['rating']!r}") from None
            seq = sequences.get(user)
            if seq is None:
                seq = sequences[user] = InteractionSequence(user)
            seq.items.append(Interaction(item, ts, rating))
    out = list(sequences.values())
    for seq in out:
        seq.items.sort(key=lambda it: (it.timestamp, it.rating))
    return out


def write_tsv(sequences: list[InteractionSequence], path) -> None:
    """Serialize sequences back to the ingestion format (round-trip support)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["user_id", "item_id", "timestamp", "rating"])
        for seq in sequences:
            for it in seq.items:
                writer.writerow([seq.user_id, it.item_id, it.timestamp, it.rating])


# ---------------------------------------------------------------------------
# filtering and splitting


def filter_and_bound(
    sequences: list[InteractionSequence],
    min_len: int = 5,
    max_len_cap: int | None = None,
) -> list[InteractionSequence]:
    """Iterate {drop rare items, drop short users, truncate to cap} to a fixpoint.

    Dropping an item shortens its users, which can push them below the
    threshold, so a single pass is not enough; the loop runs until nothing
    changes, which makes the whole operation idempotent.
    """
    current = [InteractionSequence(s.user_id, list(s.items)) for s in sequences]
    while True:
        changed = False
        if max_len_cap:
            for seq in current:
                if len(seq.items) > max_len_cap:
                    seq.items = seq.items[-max_len_cap:]
                    changed = True
        counts: dict[str, int] = {}
        for seq in current:
            for it in seq.items:
                counts[it.item_id] = counts.get(it.item_id, 0) + 1
        rare = {item for item, c in counts.items() if c < min_len}
        if rare:
            for seq in current:
                kept = [it for it in seq.items if it.item_id not in rare]
                if len(kept) != len(seq.items):
                    seq.items = kept
                    changed = True
        survivors = [seq for seq in current if len(seq.items) >= min_len]
        if len(survivors) != len(current):
            changed = True
        current = survivors
        if not changed:
            return current


def group_label(train_visible: int) -> str:
    """Short (0, 5], Medium (5, 20], Long (20, inf) by train-visible count."""
    if train_visible <= 5:
        return "Short"
    if train_visible <= 20:
        return "Medium"
    return "Long"


def split_leave_one_out(sequences: list[InteractionSequence], max_len: int) -> SplitDataset:
    """Build the three splits and the id maps.

    Dense ids are assigned in first-appearance order over the time-sorted
    stream, so the artifact is stable for identical input. Users shorter than
    3 are dropped (the split needs all three roles); users of length 3 have an
    empty training prefix and contribute validation/test rows only.
    """
    user_ids: list[str] = []
    item_ids: list[str] = []
    item_index: dict[str, int] = {}
    train: list[SplitRow] = []
    valid: list[SplitRow] = []
    test: list[SplitRow] = []
    groups: dict[int, str] = {}
    dropped = 0
    for seq in sequences:
        n = len(seq.items)
        if n < 3:
            dropped += 1
            continue
        user_ids.append(seq.user_id)
        u = len(user_ids)
        ids = []
        for it in seq.items:
            idx = item_index.get(it.item_id)
            if idx is None:
                item_ids.append(it.item_id)
                idx = item_index[it.item_id] = len(item_ids)
            ids.append(idx)
        groups[u] = group_label(n - 2)
        test.append(SplitRow(u, ids[max(0, n - 1 - max_len) : n - 1], ids[n - 1]))
        valid.append(SplitRow(u, ids[max(0, n - 2 - max_len) : n - 2], ids[n - 2]))
        if n >= 4:
            train.append(SplitRow(u, ids[max(0, n - 3 - max_len) : n - 3], ids[n - 3]))
    if dropped:
        logger.warning("dropped %d users shorter than 3 interactions", dropped)
    return SplitDataset(user_ids, item_ids, max_len, train, valid, test, groups)


# ---------------------------------------------------------------------------
# batching


def make_batch(rows: list[SplitRow], max_len: int) -> Batch:
    """Left-pad a row group into fixed-width id matrices."""
    if not rows:
        raise ContractError("cannot build an empty batch")
    bsz = len(rows)
    items = np.zeros((bsz, max_len), dtype=np.int64)
    lengths = np.zeros(bsz, dtype=np.int64)
    targets = np.zeros(bsz, dtype=np.int64)
    users = np.zeros(bsz, dtype=np.int64)
    for i, row in enumerate(rows):
        seq = row.inputs[-max_len:]
        if not seq:
            raise ContractError(f"user {row.user}: empty input sequence in batch")
        items[i, max_len - len(seq) :] = seq
        lengths[i] = len(seq)
        targets[i] = row.target
        users[i] = row.user
    return Batch(items, lengths, targets, users)


def batch_iter(split: SplitDataset, which: str, batch_size: int, shuffle_seed: int | None = None):
    """Yield batches in deterministic order; the final partial batch is kept."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    rows = split.rows(which)
    order = np.arange(len(rows))
    if shuffle_seed is not None:
        np.random.default_rng(shuffle_seed).shuffle(order)
    for start in range(0, len(rows), batch_size):
        chunk = [rows[i] for i in order[start : start + batch_size]]
        yield make_batch(chunk, split.max_len)


# ---------------------------------------------------------------------------
# stats and artifact io


def dataset_stats(sequences: list[InteractionSequence]) -> dict:
    n_users = len(sequences)
    items = {it.item_id for seq in sequences for it in seq.items}
    n_inter = sum(len(seq) for seq in sequences)
    sparsity = 1.0 - n_inter / (n_users * len(items)) if n_users and items else 0.0
    return {
        "users": n_users,
        "items": len(items),
        "interactions": n_inter,
        "sparsity": sparsity,
        "avg_length": n_inter / n_users if n_users else 0.0,
    }


def save_split(split: SplitDataset, path) -> None:
    payload = {
        "format": SPLIT_FORMAT,
        "max_len": split.max_len,
        "user_ids": split.user_ids,
        "item_ids": split.item_ids,
        "groups": {str(u): g for u, g in split.groups.items()},
        "splits": {
            which: [[row.user, row.inputs, row.target] for row in split.rows(which)]
            for which in ("train", "valid", "test")
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_split(path) -> SplitDataset:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as err:
            raise DataError(f"{path}: not a valid split artifact: {err}") from None
    if payload.get("format") != SPLIT_FORMAT:
        raise DataError(f"{path}: unrecognized split format {payload.get('format')!r}")
    splits = {
        which: [SplitRow(user, inputs, target) for user, inputs, target in payload["splits"][which]]
        for which in ("train", "valid", "test")
    }
    return SplitDataset(
        user_ids=payload["user_ids"],
        item_ids=payload["item_ids"],
        max_len=int(payload["max_len"]),
        train=splits["train"],
        valid=splits["valid"],
        test=splits["test"],
        groups={int(u): g for u, g in payload["groups"].items()},
    )
