"""Synthetic interaction logs with known generating rules, used by the test
suite and the desk-scale acceptance run."""

from __future__ import annotations

import numpy as np

from .data import InteractionLog


def _log(seqs: list[list[int]], num_items: int) -> InteractionLog:
    sequences = [np.asarray(s, dtype=np.int64) for s in seqs]
    stamps, clock = [], 0
    for s in sequences:
        stamps.append(np.arange(clock, clock + len(s), dtype=np.int64))
        clock += len(s)
    return InteractionLog([f"u{u}" for u in range(len(seqs))], [f"i{i}" for i in range(num_items)],
                          sequences, stamps)


def cyclic_pattern_log(num_users: int = 200, cycles: int = 4, cycle_len: int = 3,
                       min_len: int = 5, max_len: int = 10, seed: int = 0) -> InteractionLog:
    """Every user walks one of ``cycles`` disjoint item cycles (a -> b -> c -> a
    ...) from a random start; the next item is always determined by the last."""
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(num_users):
        c = int(rng.integers(cycles))
        start = int(rng.integers(cycle_len))
        n = int(rng.integers(min_len, max_len + 1))
        seqs.append([c * cycle_len + (start + j) % cycle_len for j in range(n)])
    return _log(seqs, cycles * cycle_len)


def random_log(num_users: int, num_items: int, min_len: int = 3, max_len: int = 12, seed: int = 0) -> InteractionLog:
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(num_items, size=int(rng.integers(min_len, max_len + 1))).tolist() for _ in range(num_users)]
    return _log(seqs, num_items)


def write_tsv(path, rows, header: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("user_id\titem_id\ttimestamp\n")
        for u, i, t in rows:
            fh.write(f"{u}\t{i}\t{t}\n")


def log_rows(log: InteractionLog) -> list[tuple[str, str, int]]:
    rows = []
    for u, (seq, ts) in enumerate(zip(log.sequences, log.timestamps)):
        rows.extend((log.user_ids[u], log.item_ids[i], int(t)) for i, t in zip(seq, ts))
    return rows


def tail_recall_log(num_users: int = 2000, pretrain_users: int = 500, cycles: int = 8, cycle_len: int = 5,
                    noise_items: int = 5, repeats: int = 3, seed: int = 0):
    """Corpus whose tail rule is visible to the backbone only once.

    Items ``0 .. cycles*cycle_len - 1`` form disjoint cycles; item
    ``cycles*cycle_len + c`` is the trigger of cycle ``c``. The first
    ``pretrain_users`` users (the backbone's stream) walk a cycle and hit its
    trigger at random points, followed by one of a few fixed noise items;
    for each cycle exactly one of them follows the trigger with the cycle's
    tail target instead. Every later user walks a cycle and then alternates
    trigger and tail target ``repeats`` times, so the test target of such a
    user is the tail target.

    Returns ``(log, pretrain_user_ids, tail_target_per_cycle)``.
    """
    rng = np.random.default_rng(seed)
    n_head = cycles * cycle_len
    trigger = [n_head + c for c in range(cycles)]
    tail = [((c + 3) % cycles) * cycle_len for c in range(cycles)]
    noise = [i for i in range(n_head) if i % cycle_len == 2][:noise_items]

    def walk(c, start, n):
        return [c * cycle_len + (start + j) % cycle_len for j in range(n)]

    seqs = []
    witnessed = set()
    for u in range(num_users):
        c = int(rng.integers(cycles))
        start = int(rng.integers(cycle_len))
        if u < pretrain_users:
            n = int(rng.integers(8, 14))
            seq = walk(c, start, n)
            hits = sorted(rng.choice(np.arange(1, n - 3), size=int(rng.integers(1, 3)), replace=False), reverse=True)
            for pos in hits:
                if c not in witnessed:
                    follow = tail[c]
                    witnessed.add(c)
                else:
                    follow = int(rng.choice([i for i in noise if i != tail[c]]))
                seq[pos:pos] = [trigger[c], follow]
        else:
            seq = walk(c, start, int(rng.integers(3, 7))) + [trigger[c], tail[c]] * repeats
        seqs.append(seq)
    return _log(seqs, n_head + cycles), np.arange(pretrain_users), tail
