"""Explicit memory: <user representation, target item embedding> entries
and an inverted-file index over their L2-normalised keys."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .data import TrainExample
from .encoder import SeqEncoder, encode_eval
from .numeric import load_container, numpy_rng, save_container

logger = logging.getLogger(__name__)

Filter = Callable[[np.ndarray], np.ndarray]


class CheckpointMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryEntry:
    key: np.ndarray
    normed_key: np.ndarray
    value: np.ndarray
    target_item: int
    timestamp: int
    origin: tuple[int, int]
    prefix_len: int


def _normalise(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


@dataclass
class MemoryBank:
    """Column-wise entry table; entry ``i`` is row ``i`` of every array."""

    keys: np.ndarray
    values: np.ndarray
    targets: np.ndarray
    timestamps: np.ndarray
    users: np.ndarray
    steps: np.ndarray
    prefix_lens: np.ndarray
    checkpoint_id: str
    normed: np.ndarray = field(default=None, repr=False)
    _origins: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.normed is None:
            self.normed = _normalise(self.keys)

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def entry(self, i: int) -> MemoryEntry:
        return MemoryEntry(self.keys[i], self.normed[i], self.values[i], int(self.targets[i]),
                           int(self.timestamps[i]), (int(self.users[i]), int(self.steps[i])),
                           int(self.prefix_lens[i]))

    def origin_id(self, origin: tuple[int, int]) -> int | None:
        if self._origins is None:
            self._origins = {(int(u), int(t)): i for i, (u, t) in enumerate(zip(self.users, self.steps))}
        return self._origins.get((int(origin[0]), int(origin[1])))

    def subset(self, ids) -> "MemoryBank":
        ids = np.asarray(ids)
        return MemoryBank(self.keys[ids], self.values[ids], self.targets[ids], self.timestamps[ids],
                          self.users[ids], self.steps[ids], self.prefix_lens[ids], self.checkpoint_id,
                          self.normed[ids])

    def concat(self, other: "MemoryBank") -> "MemoryBank":
        if other.checkpoint_id != self.checkpoint_id:
            raise CheckpointMismatchError(
                f"entries encoded with {other.checkpoint_id}, bank uses {self.checkpoint_id}")
        cat = np.concatenate
        return MemoryBank(cat([self.keys, other.keys]), cat([self.values, other.values]),
                          cat([self.targets, other.targets]), cat([self.timestamps, other.timestamps]),
                          cat([self.users, other.users]), cat([self.steps, other.steps]),
                          cat([self.prefix_lens, other.prefix_lens]), self.checkpoint_id,
                          cat([self.normed, other.normed]))

    def tensors(self) -> dict[str, np.ndarray]:
        return {"keys": self.keys, "values": self.values, "targets": self.targets,
                "timestamps": self.timestamps, "users": self.users, "steps": self.steps,
                "prefix_lens": self.prefix_lens, "normed": self.normed}

    def save(self, path, meta: dict | None = None) -> None:
        save_container(path, self.tensors(), {"kind": "memory_bank", "checkpoint_id": self.checkpoint_id,
                                              **(meta or {})})

    @classmethod
    def load(cls, path) -> "MemoryBank":
        t, meta = load_container(path)
        if meta.get("kind") != "memory_bank":
            raise ValueError(f"{path} is not a memory bank")
        return cls(t["keys"], t["values"], t["targets"], t["timestamps"], t["users"], t["steps"],
                   t["prefix_lens"], meta["checkpoint_id"], t["normed"])


@torch.no_grad()
def encode_bank(refs: Sequence[TrainExample], encoder: SeqEncoder, checkpoint_id: str,
                batch_size: int = 1024) -> MemoryBank:
    """Encode reference pairs with the frozen backbone in eval mode."""
    keys = encode_eval(encoder, [r.prefix for r in refs], batch_size).numpy()
    targets = np.array([r.target for r in refs], dtype=np.int64)
    table = encoder.item_embeddings.weight.detach().numpy()
    return MemoryBank(
        keys=keys,
        values=table[targets].copy(),
        targets=targets,
        timestamps=np.array([r.timestamp for r in refs], dtype=np.int64),
        users=np.array([r.user for r in refs], dtype=np.int64),
        steps=np.array([r.t for r in refs], dtype=np.int64),
        prefix_lens=np.array([r.t for r in refs], dtype=np.int64),
        checkpoint_id=checkpoint_id,
    )


# ---------------------------------------------------------------------------
# IVF index
# ---------------------------------------------------------------------------


def _row_dots(rows: np.ndarray, q: np.ndarray) -> np.ndarray:
    # elementwise product + last-axis sum: a row's result does not depend on
    # how many other rows are in the call
    return (rows * q).sum(axis=-1)


@dataclass
class SearchHits:
    ids: np.ndarray
    cosines: np.ndarray
    candidates: int = 0
    ops: int = 0

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class IvfIndex:
    centroids: np.ndarray
    lists: list[np.ndarray]
    nprobe: int = 1
    exhaustive: bool = False
    seed: int = 0
    inertia: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.lists)

    def assignments(self, n: int) -> np.ndarray:
        out = np.full(n, -1, dtype=np.int64)
        for c, ids in enumerate(self.lists):
            out[ids] = c
        return out

    def probe(self, query: np.ndarray, nprobe: int | None = None) -> np.ndarray:
        nprobe = min(self.nprobe if nprobe is None else nprobe, self.k)
        sims = _row_dots(self.centroids, query)
        order = np.lexsort((np.arange(self.k), -sims))
        return order[:nprobe]

    def search(self, bank: MemoryBank, query, topk: int, exclude: int | None = None,
               filter: Filter | np.ndarray | None = None, nprobe: int | None = None) -> SearchHits:
        """Top-``topk`` entries by cosine among the probed lists.

        Ties go to the lower entry id. ``exclude`` is an entry id to drop;
        ``filter`` is a boolean mask over the bank or a callable producing
        one for an array of ids.
        """
        if topk < 1:
            raise ValueError("topk must be >= 1")
        q = _normalise(np.asarray(query, dtype=np.float64))
        probed = self.probe(q, nprobe)
        if len(probed) == 1:
            cand = self.lists[probed[0]]
        else:
            cand = np.sort(np.concatenate([self.lists[c] for c in probed]))
        ops = self.k * bank.dim + len(cand) * bank.dim
        keep = np.ones(len(cand), dtype=bool)
        if exclude is not None:
            keep &= cand != exclude
        if filter is not None:
            keep &= filter(cand) if callable(filter) else np.asarray(filter)[cand]
        cand = cand[keep]
        if not len(cand):
            return SearchHits(np.zeros(0, np.int64), np.zeros(0), 0, ops)
        cos = _row_dots(bank.normed[cand], q)
        order = np.lexsort((cand, -cos))[:topk]
        return SearchHits(cand[order], cos[order], len(cand), ops)

    def add(self, bank_normed: np.ndarray, start: int) -> None:
        """Route rows ``start..`` of ``bank_normed`` to their nearest centroid."""
        new_ids = np.arange(start, len(bank_normed))
        if not len(new_ids):
            return
        if self.exhaustive:
            self.lists[0] = np.concatenate([self.lists[0], new_ids])
            return
        assign = np.argmax(bank_normed[new_ids] @ self.centroids.T, axis=1)
        for c in np.unique(assign):
            self.lists[c] = np.concatenate([self.lists[c], new_ids[assign == c]])

    def tensors(self) -> dict[str, np.ndarray]:
        sizes = np.array([len(l) for l in self.lists], dtype=np.int64)
        flat = np.concatenate(self.lists) if self.lists else np.zeros(0, np.int64)
        return {"centroids": self.centroids, "list_sizes": sizes, "list_ids": flat.astype(np.int64)}

    def save(self, path, meta: dict | None = None) -> None:
        save_container(path, self.tensors(),
                       {"kind": "ivf_index", "nprobe": self.nprobe, "exhaustive": self.exhaustive,
                        "seed": self.seed, "inertia": self.inertia, **(meta or {})})

    @classmethod
    def load(cls, path) -> tuple["IvfIndex", dict]:
        t, meta = load_container(path)
        if meta.get("kind") != "ivf_index":
            raise ValueError(f"{path} is not an IVF index")
        bounds = np.concatenate([[0], np.cumsum(t["list_sizes"])])
        lists = [t["list_ids"][a:b].copy() for a, b in zip(bounds[:-1], bounds[1:])]
        return cls(t["centroids"], lists, meta["nprobe"], meta["exhaustive"], meta["seed"],
                   list(meta["inertia"])), meta


def spherical_kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 25):
    """Cosine k-means on unit rows.

    Returns ``(centroids, assignment, inertia_per_iteration)`` where inertia
    is the summed ``1 - cos`` to the assigned centroid. A cluster left empty
    after an assignment step takes the worst-fitting member of the currently
    largest cluster as its new centroid.
    """
    n = len(x)
    centroids = x[np.sort(rng.choice(n, size=k, replace=False))].copy()
    history = []
    prev = None
    for it in range(max_iter):
        sims = x @ centroids.T
        assign = np.argmax(sims, axis=1)
        best = sims[np.arange(n), assign]
        counts = np.bincount(assign, minlength=k)
        for c in np.flatnonzero(counts == 0):
            big = int(np.argmax(counts))
            members = np.flatnonzero(assign == big)
            m = members[np.argmin(best[members])]
            assign[m] = c
            centroids[c] = x[m]
            best[m] = 1.0
            counts[big] -= 1
            counts[c] = 1
        history.append(float(np.sum(1.0 - best)))
        if (prev is not None and np.array_equal(assign, prev)) or it == max_iter - 1:
            break
        prev = assign.copy()
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        norms = np.linalg.norm(sums, axis=1)
        ok = norms > 0
        centroids[ok] = sums[ok] / norms[ok, None]
    return centroids, assign, history


def build_ivf_index(bank: MemoryBank, k: int = 128, seed: int = 0, nprobe: int = 1,
                    max_iter: int = 25) -> IvfIndex:
    n = len(bank)
    if n < k:
        logger.warning("bank has %d entries < %d clusters; using an exhaustive index", n, k)
        centroid = _normalise(bank.normed.sum(axis=0)) if n else np.zeros(bank.dim)
        return IvfIndex(centroid[None], [np.arange(n, dtype=np.int64)], 1, True, seed)
    centroids, assign, history = spherical_kmeans(bank.normed, k, numpy_rng(seed, "kmeans"), max_iter)
    lists = [np.flatnonzero(assign == c).astype(np.int64) for c in range(k)]
    return IvfIndex(centroids, lists, nprobe, False, seed, history)


def retrieve_topk(index: IvfIndex, bank: MemoryBank, query, topk: int,
                  exclude: tuple[int, int] | None = None, filter: Filter | np.ndarray | None = None,
                  nprobe: int | None = None):
    """Ranked ``(key, value, meta)`` tuples for the ``topk`` nearest memories."""
    ex = bank.origin_id(exclude) if exclude is not None else None
    hits = index.search(bank, query, topk, ex, filter, nprobe)
    return [
        (bank.keys[i], bank.values[i],
         {"entry": int(i), "cosine": float(c), "origin": (int(bank.users[i]), int(bank.steps[i])),
          "target": int(bank.targets[i])})
        for i, c in zip(hits.ids, hits.cosines)
    ]


def search_many(index: IvfIndex, bank: MemoryBank, queries, topk: int,
                exclude_ids: np.ndarray | None = None, nprobe: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Batched search. Returns ``(ids, cosines)`` of shape ``(B, topk)``
    padded with -1 / nan where fewer candidates exist."""
    queries = np.asarray(queries)
    b = len(queries)
    ids = np.full((b, topk), -1, dtype=np.int64)
    cos = np.full((b, topk), np.nan)
    for r in range(b):
        ex = None if exclude_ids is None or exclude_ids[r] < 0 else int(exclude_ids[r])
        hits = index.search(bank, queries[r], topk, ex, None, nprobe)
        ids[r, :len(hits)] = hits.ids
        cos[r, :len(hits)] = hits.cosines
    return ids, cos


# ---------------------------------------------------------------------------
# Bank surgery
# ---------------------------------------------------------------------------


def partition_bank(bank: MemoryBank, lo: int, hi: int) -> dict[str, np.ndarray]:
    """Entry ids of the short / medium / long partitions.

    S: prefix_len < lo; M: lo <= prefix_len <= hi; L: prefix_len > hi.
    """
    if not lo < hi:
        raise ValueError("partition bounds must satisfy lo < hi")
    p = bank.prefix_lens
    return {
        "S": np.flatnonzero(p < lo),
        "M": np.flatnonzero((p >= lo) & (p <= hi)),
        "L": np.flatnonzero(p > hi),
    }


def drift_filter(bank: MemoryBank, ratio: float) -> MemoryBank:
    """Drop the ``floor(ratio * N)`` most recent entries (later id first on
    equal timestamps). Remaining entries keep their relative order."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError("drift ratio must lie in [0, 1)")
    n = len(bank)
    drop = int(np.floor(ratio * n))
    if drop == 0:
        return bank.subset(np.arange(n))
    order = np.lexsort((np.arange(n), bank.timestamps))
    keep = np.sort(order[:n - drop])
    return bank.subset(keep)


def append_entries(bank: MemoryBank, index: IvfIndex, new: MemoryBank) -> tuple[MemoryBank, IvfIndex]:
    """New bank and index with ``new`` routed to the existing centroids."""
    merged = bank.concat(new)
    updated = IvfIndex(index.centroids.copy(), [l.copy() for l in index.lists], index.nprobe,
                       index.exhaustive, index.seed, list(index.inertia))
    updated.add(merged.normed, len(bank))
    return merged, updated
