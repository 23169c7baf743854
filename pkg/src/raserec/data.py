"""Interaction logs, k-core filtering, leave-one-out splits and the
prefix/target example streams built from them."""

from __future__ import annotations

import logging
import math
from bisect import bisect_left
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numeric import load_container, save_container

logger = logging.getLogger(__name__)


class MalformedRowError(ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class EmptyCorpusError(ValueError):
    pass


@dataclass
class InteractionLog:
    """Per-user chronological item lists with dense ids.

    ``user_ids[u]`` / ``item_ids[i]`` give the raw string id for dense id
    ``u`` / ``i``. ``sequences[u]`` and ``timestamps[u]`` are aligned int64
    arrays sorted by time.
    """

    user_ids: list[str]
    item_ids: list[str]
    sequences: list[np.ndarray]
    timestamps: list[np.ndarray]

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_interactions(self) -> int:
        return int(sum(len(s) for s in self.sequences))

    def stats(self) -> dict:
        n = self.num_interactions
        return {
            "users": self.num_users,
            "items": self.num_items,
            "inters": n,
            "avg_length": n / max(self.num_users, 1),
            "sparsity": 1.0 - n / max(self.num_users * self.num_items, 1),
        }

    def stats_table(self, name: str = "dataset") -> str:
        s = self.stats()
        head = f"{'Dataset':<12}{'#users':>10}{'#items':>10}{'#inters':>12}{'#avg.length':>13}{'sparsity':>11}"
        row = (f"{name:<12}{s['users']:>10}{s['items']:>10}{s['inters']:>12}"
               f"{s['avg_length']:>13.2f}{s['sparsity'] * 100:>10.2f}%")
        return head + "\n" + row + "\n"

    def tensors(self) -> dict[str, np.ndarray]:
        lengths = np.array([len(s) for s in self.sequences], dtype=np.int64)
        items = np.concatenate(self.sequences) if self.sequences else np.zeros(0, np.int64)
        stamps = np.concatenate(self.timestamps) if self.timestamps else np.zeros(0, np.int64)
        return {"lengths": lengths, "items": items.astype(np.int64), "timestamps": stamps.astype(np.int64)}

    def save(self, path, meta: dict | None = None) -> None:
        save_container(path, self.tensors(),
                       {"kind": "corpus", "user_ids": self.user_ids, "item_ids": self.item_ids, **(meta or {})})

    @classmethod
    def load(cls, path) -> "InteractionLog":
        tensors, meta = load_container(path)
        if meta.get("kind") != "corpus":
            raise ValueError(f"{path} is not a corpus file")
        bounds = np.concatenate([[0], np.cumsum(tensors["lengths"])])
        seqs = [tensors["items"][a:b].copy() for a, b in zip(bounds[:-1], bounds[1:])]
        stamps = [tensors["timestamps"][a:b].copy() for a, b in zip(bounds[:-1], bounds[1:])]
        return cls(list(meta["user_ids"]), list(meta["item_ids"]), seqs, stamps)


def read_interactions(path) -> list[tuple[str, str, int]]:
    """Parse a tab-separated ``user, item, timestamp`` file.

    A first line whose timestamp field is not an integer is taken as a header.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise MalformedRowError(line_no, f"expected 3 tab-separated fields, got {len(parts)}")
            user, item, stamp = parts[0], parts[1], parts[2]
            try:
                ts = int(stamp)
            except ValueError:
                if line_no == 1:
                    continue
                raise MalformedRowError(line_no, f"timestamp {stamp!r} is not an integer") from None
            rows.append((user, item, ts))
    return rows


def k_core(rows: Sequence[tuple[str, str, int]], min_core: int = 5) -> list[tuple[str, str, int]]:
    """Drop users and items with fewer than ``min_core`` interactions until
    nothing changes."""
    rows = list(rows)
    while True:
        ucount = Counter(r[0] for r in rows)
        icount = Counter(r[1] for r in rows)
        kept = [r for r in rows if ucount[r[0]] >= min_core and icount[r[1]] >= min_core]
        if len(kept) == len(rows):
            return kept
        rows = kept


def build_log(rows: Sequence[tuple[str, str, int]]) -> InteractionLog:
    """Dense ids in first-appearance order; per-user stable sort by time."""
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    for order, (user, item, ts) in enumerate(rows):
        u = user_index.setdefault(user, len(user_index))
        i = item_index.setdefault(item, len(item_index))
        per_user[u].append((ts, order, i))
    sequences, timestamps = [], []
    for u in range(len(user_index)):
        events = sorted(per_user[u])
        sequences.append(np.array([e[2] for e in events], dtype=np.int64))
        timestamps.append(np.array([e[0] for e in events], dtype=np.int64))
    return InteractionLog(list(user_index), list(item_index), sequences, timestamps)


def ingest_interactions(path, min_core: int = 5) -> InteractionLog:
    rows = read_interactions(path)
    filtered = k_core(rows, min_core)
    if not filtered:
        raise EmptyCorpusError(f"no interactions survive {min_core}-core filtering of {path}")
    log = build_log(filtered)
    s = log.stats()
    logger.info(
        "ingested %s: %d users, %d items, %d interactions, avg length %.2f, sparsity %.2f%%",
        path, s["users"], s["items"], s["inters"], s["avg_length"], 100 * s["sparsity"],
    )
    return log


# ---------------------------------------------------------------------------
# Splits and examples
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainExample:
    """``prefix`` (already truncated) predicts ``target``.

    ``t`` is the untruncated prefix length, so ``target`` sits at 1-based
    position ``t + 1`` of the user's sequence. ``timestamp`` is the time of
    the target interaction.
    """

    prefix: tuple[int, ...]
    target: int
    user: int
    t: int
    timestamp: int = 0

    @property
    def origin(self) -> tuple[int, int]:
        return (self.user, self.t)


@dataclass
class HeldOut:
    users: np.ndarray
    prefixes: list[np.ndarray]
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


@dataclass
class Split:
    """Leave-one-out split.

    ``train[u]`` holds every item of user ``u`` except the last two; the
    validation target is the second-last item and the test target the last.
    """

    num_items: int
    users: np.ndarray
    train: list[np.ndarray]
    train_timestamps: list[np.ndarray]
    valid: HeldOut
    test: HeldOut
    full: list[np.ndarray]
    dropped_users: int = 0
    meta: dict = field(default_factory=dict)

    def item_popularity(self) -> np.ndarray:
        """Per-item interaction count over the training sequences."""
        if not self.train:
            return np.zeros(self.num_items, dtype=np.int64)
        return np.bincount(np.concatenate(self.train), minlength=self.num_items)

    def restrict(self, users) -> "Split":
        """Sub-split over a subset of this split's users (given by dense user id)."""
        keep = np.isin(self.users, np.asarray(list(users)))
        idx = np.flatnonzero(keep)
        return Split(
            num_items=self.num_items,
            users=self.users[idx],
            train=[self.train[i] for i in idx],
            train_timestamps=[self.train_timestamps[i] for i in idx],
            valid=HeldOut(self.valid.users[idx], [self.valid.prefixes[i] for i in idx], self.valid.targets[idx]),
            test=HeldOut(self.test.users[idx], [self.test.prefixes[i] for i in idx], self.test.targets[idx]),
            full=[self.full[i] for i in idx],
            dropped_users=self.dropped_users,
            meta=dict(self.meta),
        )


def leave_one_out_split(log: InteractionLog) -> Split:
    users, train, train_ts, full = [], [], [], []
    v_prefix, v_target, t_prefix, t_target = [], [], [], []
    dropped = 0
    for u, (seq, ts) in enumerate(zip(log.sequences, log.timestamps)):
        if len(seq) < 3:
            dropped += 1
            continue
        users.append(u)
        full.append(seq)
        train.append(seq[:-2])
        train_ts.append(ts[:-2])
        v_prefix.append(seq[:-2])
        v_target.append(seq[-2])
        t_prefix.append(seq[:-1])
        t_target.append(seq[-1])
    if dropped:
        logger.warning("dropped %d users with fewer than 3 interactions", dropped)
    users = np.array(users, dtype=np.int64)
    return Split(
        num_items=log.num_items,
        users=users,
        train=train,
        train_timestamps=train_ts,
        valid=HeldOut(users, v_prefix, np.array(v_target, dtype=np.int64)),
        test=HeldOut(users, t_prefix, np.array(t_target, dtype=np.int64)),
        full=full,
        dropped_users=dropped,
    )


def truncate_sequence(seq: Sequence[int], max_len: int) -> Sequence[int]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    return seq[-max_len:] if len(seq) > max_len else seq


def build_reference_set(split: Split, max_len: int) -> list[TrainExample]:
    """All ``<prefix, next item>`` pairs of the training sequences, in user
    order then time order."""
    examples = []
    for u, seq, ts in zip(split.users, split.train, split.train_timestamps):
        items = seq.tolist()
        for t in range(1, len(items)):
            examples.append(
                TrainExample(tuple(truncate_sequence(items[:t], max_len)), items[t], int(u), t, int(ts[t]))
            )
    return examples


def build_target_index(examples: Sequence[TrainExample]) -> dict[int, list[int]]:
    """Map target item to the positions of the examples predicting it."""
    index: dict[int, list[int]] = defaultdict(list)
    for pos, ex in enumerate(examples):
        index[ex.target].append(pos)
    return dict(index)


def sample_retrieval_positive(
    position: int,
    examples: Sequence[TrainExample],
    target_index: dict[int, list[int]],
    rng: np.random.Generator,
) -> int | None:
    """Position of a uniformly drawn other example sharing the target, or
    None when the example is the only one with its target."""
    candidates = target_index.get(examples[position].target, ())
    n = len(candidates)
    if n < 2:
        return None
    # candidates are ascending; draw among the n - 1 others by skipping self
    j = int(rng.integers(n - 1))
    return candidates[j + 1] if j >= bisect_left(candidates, position) else candidates[j]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def inject_noise(
    prefix: Sequence[int],
    ratio: float,
    rng: np.random.Generator,
    num_items: int,
    history: Sequence[int] | None = None,
    max_len: int | None = None,
) -> list[int]:
    """Insert ``round(ratio * len(prefix))`` random negative items.

    Negatives are distinct items outside ``history`` (default: the prefix
    itself), each placed at a uniformly drawn slot. The result is truncated
    to ``max_len`` when given.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"noise ratio must lie in [0, 1], got {ratio}")
    out = list(prefix)
    count = round_half_up(ratio * len(out))
    if count:
        seen = set(history if history is not None else prefix)
        pool = np.setdiff1d(np.arange(num_items), np.fromiter(seen, dtype=np.int64))
        if len(pool) < count:
            raise ValueError("not enough negative items to inject")
        negatives = rng.choice(pool, size=count, replace=False)
        for item in negatives:
            out.insert(int(rng.integers(len(out) + 1)), int(item))
    if max_len is not None:
        out = list(truncate_sequence(out, max_len))
    return out
