"""Leave-one-out evaluation and the ablation protocols built on it."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .data import Split, inject_noise
from .encoder import SeqEncoder, encode_eval
from .memory import IvfIndex, MemoryBank, build_ivf_index, drift_filter, partition_bank
from .metrics import metric_row, target_ranks
from .numeric import numpy_rng
from .ram import FusionConfig, RetrievalAugmentedModule, Retriever, augmented_scores

InferFn = Callable[[list[list[int]]], "torch.Tensor | np.ndarray"]

COLUMNS = ("HR@5", "HR@10", "NDCG@5", "NDCG@10")


class MissingArtifactError(RuntimeError):
    pass


@dataclass
class MetricsReport:
    overall: dict[str, float]
    ranks: np.ndarray
    groups: dict[str, dict[int, dict[str, float]]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def records(self, label: str = "overall") -> list[dict]:
        out = [{"row": label, **self.overall, "users": int(len(self.ranks))}]
        for name, table in self.groups.items():
            for gid, row in table.items():
                out.append({"row": label, "grouping": name, "group": gid, **row})
        return out

    def to_jsonl(self, label: str = "overall") -> str:
        return "".join(json.dumps({**r, "meta": self.meta}, sort_keys=True) + "\n" for r in self.records(label))

    def to_table(self, label: str = "overall") -> str:
        lines = [format_row("", COLUMNS, header=True), format_row(label, [self.overall[c] for c in COLUMNS])]
        for name, table in self.groups.items():
            lines.append(f"-- {name}")
            for gid, row in table.items():
                lines.append(format_row(f"group {gid}", [row[c] for c in COLUMNS]))
        return "\n".join(lines) + "\n"


def format_row(label, cells, header: bool = False) -> str:
    if header:
        return f"{label:<24}" + "".join(f"{c:>10}" for c in cells)
    return f"{label:<24}" + "".join(f"{c:>10.4f}" for c in cells)


def evaluate(
    infer_fn: InferFn,
    split: Split,
    cutoffs: Sequence[int] = (5, 10),
    stage: str = "test",
    prefixes: Sequence[Sequence[int]] | None = None,
    groups: dict[str, np.ndarray] | None = None,
    batch_size: int = 1024,
    meta: dict | None = None,
) -> MetricsReport:
    """Rank each held-out target over the whole catalog.

    ``infer_fn`` maps a batch of prefixes to a ``(B, |V|)`` score block.
    ``groups`` maps a grouping name to one label per user.
    """
    held = split.test if stage == "test" else split.valid
    if prefixes is None:
        prefixes = [p.tolist() for p in held.prefixes]
    ranks = []
    for lo in range(0, len(prefixes), batch_size):
        batch = [list(p) for p in prefixes[lo:lo + batch_size]]
        ranks.append(target_ranks(infer_fn(batch), held.targets[lo:lo + batch_size]))
    ranks = np.concatenate(ranks) if ranks else np.zeros(0, np.int64)
    report = MetricsReport(metric_row(ranks, cutoffs), ranks, meta=dict(meta or {}))
    for name, labels in (groups or {}).items():
        labels = np.asarray(labels)
        report.groups[name] = {int(g): metric_row(ranks[labels == g], cutoffs) for g in np.unique(labels)}
    return report


def _balanced_groups(keys: np.ndarray, tiebreak: np.ndarray, g: int) -> np.ndarray:
    order = np.lexsort((np.arange(len(keys)), tiebreak, keys))
    labels = np.empty(len(keys), dtype=np.int64)
    for gid, chunk in enumerate(np.array_split(order, g), start=1):
        labels[chunk] = gid
    return labels


def group_by_item_popularity(split: Split, g: int = 10) -> np.ndarray:
    """Equal-size groups of test users by training popularity of their
    target (GroupId 1 = least popular). Equal popularity falls back to item
    id order, then user order."""
    pop = split.item_popularity()[split.test.targets]
    return _balanced_groups(pop, split.test.targets, g)


def group_by_user_frequency(split: Split, g: int = 8) -> np.ndarray:
    """Equal-size groups of test users by test-prefix length (GroupId 1 =
    shortest). Equal lengths fall back to user order."""
    lengths = np.array([len(p) for p in split.test.prefixes])
    return _balanced_groups(lengths, split.test.users, g)


# ---------------------------------------------------------------------------
# Inference adapters
# ---------------------------------------------------------------------------


def backbone_infer(encoder: SeqEncoder) -> InferFn:
    @torch.no_grad()
    def infer(prefixes):
        return encoder.score(encode_eval(encoder, prefixes))
    return infer


def augmented_infer_fn(retriever: Retriever, ram: RetrievalAugmentedModule, fusion: FusionConfig) -> InferFn:
    def infer(prefixes):
        return augmented_scores(prefixes, retriever, ram, fusion)
    return infer


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


@dataclass
class Artifacts:
    split: Split
    encoder: SeqEncoder | None = None
    bank: MemoryBank | None = None
    index: IvfIndex | None = None
    ram: RetrievalAugmentedModule | None = None
    fusion: FusionConfig = field(default_factory=FusionConfig)
    clusters: int = 128
    nprobe: int = 1
    seed: int = 0
    partition_bounds: tuple[int, int] = (3, 6)

    def require(self, *names: str) -> None:
        for name in names:
            if getattr(self, name) is None:
                raise MissingArtifactError(f"ablation needs the {name} artifact")

    def retriever(self, bank: MemoryBank | None = None, index: IvfIndex | None = None) -> Retriever:
        return Retriever(self.encoder, bank if bank is not None else self.bank,
                         index if index is not None else self.index, self.nprobe)

    def reindex(self, bank: MemoryBank) -> IvfIndex:
        return build_ivf_index(bank, self.clusters, self.seed, self.nprobe)


@dataclass
class AblationTable:
    kind: str
    rows: list[tuple[str, dict[str, float]]]
    extra: dict = field(default_factory=dict)

    def row(self, label: str) -> dict[str, float]:
        for name, values in self.rows:
            if name == label:
                return values
        raise KeyError(label)

    def to_table(self) -> str:
        cols = list(self.rows[0][1]) if self.rows else list(COLUMNS)
        lines = [f"{'':<24}" + "".join(f"{c:>12}" for c in cols)]
        for label, values in self.rows:
            lines.append(f"{label:<24}" + "".join(f"{values[c]:>12.4f}" for c in cols))
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"ablation": self.kind, "row": label, **values}, sort_keys=True) + "\n"
                       for label, values in self.rows)


def ablate_drift(art: Artifacts, ratios=(0.0, 0.1, 0.2, 0.3)) -> AblationTable:
    art.require("encoder", "bank", "index", "ram")
    rows = []
    for r in ratios:
        if r == 0.0:
            bank, index = art.bank, art.index
        else:
            bank = drift_filter(art.bank, r)
            index = art.reindex(bank)
        rep = evaluate(augmented_infer_fn(art.retriever(bank, index), art.ram, art.fusion), art.split)
        rows.append(("Full" if r == 0.0 else f"{round(r * 100)}%", rep.overall))
    return AblationTable("drift", rows)


def ablate_partition(art: Artifacts) -> AblationTable:
    art.require("encoder", "bank", "index", "ram")
    parts = partition_bank(art.bank, *art.partition_bounds)
    rows = []
    sizes = {k: int(len(v)) for k, v in parts.items()}
    for n in (1, 2, 3):
        for combo in itertools.combinations("SML", n):
            ids = np.sort(np.concatenate([parts[c] for c in combo]))
            if not len(ids):
                continue
            if len(ids) == len(art.bank):
                bank, index = art.bank, art.index
            else:
                bank = art.bank.subset(ids)
                index = art.reindex(bank)
            rep = evaluate(augmented_infer_fn(art.retriever(bank, index), art.ram, art.fusion), art.split)
            rows.append(("{" + ",".join(combo) + "}", rep.overall))
    return AblationTable("partition", rows, {"sizes": sizes})


def noisy_test_prefixes(split: Split, ratio: float, seed: int, max_len: int) -> list[list[int]]:
    rng = numpy_rng(seed, f"noise/{ratio:.4f}")
    return [inject_noise(p.tolist(), ratio, rng, split.num_items, history=full.tolist(), max_len=max_len)
            for p, full in zip(split.test.prefixes, split.full)]


def ablate_noise(art: Artifacts, ratios=(0.0, 0.1, 0.2, 0.3)) -> AblationTable:
    art.require("encoder", "bank", "index", "ram")
    rows = []
    aug = augmented_infer_fn(art.retriever(), art.ram, art.fusion)
    plain = backbone_infer(art.encoder)
    for r in ratios:
        prefixes = noisy_test_prefixes(art.split, r, art.seed, art.encoder.cfg.max_len)
        rows.append((f"{round(r * 100)}% w/ aug", evaluate(aug, art.split, prefixes=prefixes).overall))
        rows.append((f"{round(r * 100)}% w/o aug", evaluate(plain, art.split, prefixes=prefixes).overall))
    return AblationTable("noise", rows)


ALPHAS = tuple(round(0.1 * i, 1) for i in range(11))
BETAS = ALPHAS
TOPKS = tuple(range(5, 60, 5))


def sweep_cells(base: FusionConfig, mode: str = "axis", alphas=ALPHAS, betas=BETAS, topks=TOPKS) -> list[FusionConfig]:
    """Fusion settings to evaluate: one axis at a time around ``base``
    (``axis``) or the full product (``grid``)."""
    if mode == "grid":
        return [FusionConfig(a, b, k) for a, b, k in itertools.product(alphas, betas, topks)]
    if mode != "axis":
        raise ValueError(f"unknown sweep mode {mode!r}")
    cells = [replace(base, alpha=a) for a in alphas]
    cells += [replace(base, beta=b) for b in betas]
    cells += [replace(base, topk=k) for k in topks]
    seen, unique = set(), []
    for c in cells:
        key = (c.alpha, c.beta, c.topk)
        if key not in seen:
            seen.add(key)
            unique.append(c)
    return unique


def ablate_sweep(
    art: Artifacts,
    train_fn: Callable[[FusionConfig, int], RetrievalAugmentedModule],
    cells: Iterable[FusionConfig],
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
) -> AblationTable:
    """Retrain the module for every cell and seed; report mean and standard
    deviation of each metric over seeds."""
    art.require("encoder", "bank", "index")
    rows = []
    for cell in cells:
        per_seed = []
        for s in seeds:
            ram = train_fn(cell, s)
            per_seed.append(evaluate(augmented_infer_fn(art.retriever(), ram, cell), art.split).overall)
        row = {}
        for c in COLUMNS:
            vals = np.array([p[c] for p in per_seed])
            row[c] = float(vals.mean())
            row[c + " std"] = float(vals.std())
        rows.append((f"a={cell.alpha:.1f} b={cell.beta:.1f} K={cell.topk}", row))
    return AblationTable("sweep", rows)


def run_ablation(kind: str, art: Artifacts, **options) -> AblationTable:
    if kind == "drift":
        return ablate_drift(art, **options)
    if kind == "partition":
        return ablate_partition(art)
    if kind == "noise":
        return ablate_noise(art, **options)
    if kind == "sweep":
        return ablate_sweep(art, **options)
    raise ValueError(f"unknown ablation {kind!r}")
