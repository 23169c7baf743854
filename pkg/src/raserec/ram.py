"""Retrieval-augmented module: dual-channel cross attention over retrieved
memories, convex fusion with the backbone representation, fine-tuning with
the backbone frozen, and augmented inference."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import Split, TrainExample, build_reference_set
from .encoder import SeqEncoder, encode_eval
from .memory import CheckpointMismatchError, IvfIndex, MemoryBank, search_many
from .metrics import hr_at_n, ndcg_at_n, target_ranks
from .numeric import ConfigError, MultiHeadAttention, dtype_for, freeze, make_adam, module_state, numpy_rng, torch_generator
from .pretrain import EpochRecord, PretrainConfig, TrainResult

logger = logging.getLogger(__name__)


@dataclass
class FusionConfig:
    alpha: float = 0.5
    beta: float = 0.9
    topk: int = 20

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ConfigError("alpha and beta must lie in [0, 1]")
        if self.topk < 1:
            raise ConfigError("topk must be >= 1")


class RetrievalAugmentedModule(nn.Module):
    """Two independent cross-attention channels, no positional signal over
    the retrieved set."""

    def __init__(self, hidden: int, heads: int, seed: int = 0, precision: int = 32, init_std: float = 0.02):
        super().__init__()
        self.hidden = hidden
        self.heads = heads
        self.channel1 = MultiHeadAttention(hidden, heads)
        self.channel2 = MultiHeadAttention(hidden, heads)
        self.to(dtype_for(precision))
        gen = torch_generator(seed, "init/ram")
        self.channel1.reset_parameters(gen, init_std)
        self.channel2.reset_parameters(gen, init_std)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, h, mem_keys, mem_values, mask, alpha: float, beta: float):
        """``h`` is ``(B, d)``, memories ``(B, K, d)`` with ``mask`` marking
        real entries. Rows without any memory come back as ``h``."""
        has = mask.any(dim=1)
        safe = mask.clone()
        safe[~has, 0] = True
        c1 = mhca(h, mem_keys, mem_values, self.channel1, safe)
        c2 = mhca(h, mem_values, mem_keys, self.channel2, safe)
        fused = fuse(h, c1, c2, alpha, beta)
        return torch.where(has[:, None], fused, h)


def mhca(h, keys, values, attn: MultiHeadAttention, mask=None):
    return attn(h[:, None], keys, values, key_mask=mask)[:, 0]


def channel_one(h, retrieved_keys, retrieved_values, ram: RetrievalAugmentedModule, mask=None):
    """Query the retrieved user representations, aggregate their target items."""
    return mhca(h, retrieved_keys, retrieved_values, ram.channel1, mask)


def channel_two(h, retrieved_keys, retrieved_values, ram: RetrievalAugmentedModule, mask=None):
    """Query the retrieved target items, aggregate their user representations."""
    return mhca(h, retrieved_values, retrieved_keys, ram.channel2, mask)


def fuse(h, h_c1, h_c2, alpha: float, beta: float):
    if not (0.0 <= alpha <= 1.0 and 0.0 <= beta <= 1.0):
        raise ValueError(f"fusion coefficients must lie in [0, 1], got alpha={alpha}, beta={beta}")
    return alpha * h + (1.0 - alpha) * (beta * h_c1 + (1.0 - beta) * h_c2)


def gather_memories(bank: MemoryBank, ids: np.ndarray, dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Keys, values and mask tensors for an ``(B, K)`` id block (-1 = none)."""
    mask = ids >= 0
    if not len(bank):
        zeros = torch.zeros(*ids.shape, bank.dim, dtype=dtype)
        return zeros, zeros.clone(), torch.as_tensor(mask)
    safe = np.where(mask, ids, 0)
    keys = torch.as_tensor(bank.keys[safe], dtype=dtype)
    values = torch.as_tensor(bank.values[safe], dtype=dtype)
    m = torch.as_tensor(mask)
    return keys * m[..., None], values * m[..., None], m


@dataclass
class RaftConfig(PretrainConfig):
    nprobe: int = 1


@dataclass
class Retriever:
    """Frozen backbone + bank + index bundle used for augmented scoring."""

    encoder: SeqEncoder
    bank: MemoryBank
    index: IvfIndex
    nprobe: int | None = None

    def representations(self, prefixes, batch_size: int = 1024) -> torch.Tensor:
        return encode_eval(self.encoder, [list(p) for p in prefixes], batch_size)

    def lookup(self, h: torch.Tensor, topk: int, exclude_ids=None):
        return search_many(self.index, self.bank, h.detach().numpy(), topk, exclude_ids, self.nprobe)


def augmented_representation(ram, retriever: Retriever, h, ids, fusion: FusionConfig):
    keys, values, mask = gather_memories(retriever.bank, ids, h.dtype)
    return ram(h, keys, values, mask, fusion.alpha, fusion.beta)


@torch.no_grad()
def augmented_scores(prefixes: Sequence[Sequence[int]], retriever: Retriever, ram, fusion: FusionConfig,
                     return_trace: bool = False):
    """Full-catalog scores at the fused representation for a batch of prefixes."""
    h = retriever.representations(prefixes)
    ids, cos = retriever.lookup(h, fusion.topk)
    h_aug = augmented_representation(ram, retriever, h, ids, fusion)
    scores = retriever.encoder.score(h_aug)
    if return_trace:
        return scores, ids, cos
    return scores


def raft_train(
    split: Split,
    retriever: Retriever,
    checkpoint_id: str,
    fusion: FusionConfig,
    config: RaftConfig,
    examples: list[TrainExample] | None = None,
) -> tuple[RetrievalAugmentedModule, TrainResult]:
    """Fit the retrieval-augmented module with every backbone weight frozen.

    Each training example retrieves from the bank without its own entry.
    Because the backbone is frozen and encodes in eval mode, queries and
    retrievals are computed once up front.
    """
    config.validate()
    fusion.validate()
    encoder, bank = retriever.encoder, retriever.bank
    if bank.checkpoint_id != checkpoint_id:
        raise CheckpointMismatchError(f"bank built from {bank.checkpoint_id}, backbone is {checkpoint_id}")
    freeze(encoder)
    encoder.eval()
    if examples is None:
        examples = build_reference_set(split, encoder.cfg.max_len)
    if not examples:
        raise ValueError("no training examples for fine-tuning")

    h_train = retriever.representations([ex.prefix for ex in examples])
    exclude = np.array([-1 if (i := bank.origin_id(ex.origin)) is None else i for ex in examples], dtype=np.int64)
    ids_train, _ = retriever.lookup(h_train, fusion.topk, exclude)
    targets = torch.as_tensor([ex.target for ex in examples], dtype=torch.long)
    h_valid = retriever.representations([p.tolist() for p in split.valid.prefixes])
    ids_valid, _ = retriever.lookup(h_valid, fusion.topk)

    ram = RetrievalAugmentedModule(encoder.cfg.hidden, encoder.cfg.heads, seed=config.seed,
                                   precision=encoder.cfg.precision, init_std=encoder.cfg.init_std)
    optimizer = make_adam(ram, config.lr, (config.beta1, config.beta2), config.adam_eps)
    table = encoder.item_embeddings.weight.detach()
    order_rng = numpy_rng(config.seed, "sampling/raft-order")

    def validate() -> tuple[float, float]:
        ram.eval()
        with torch.no_grad():
            h_aug = augmented_representation(ram, retriever, h_valid, ids_valid, fusion)
            ranks = target_ranks(h_aug @ table.T, split.valid.targets)
        return hr_at_n(ranks, 10), ndcg_at_n(ranks, 10)

    result = TrainResult(module_state(ram), 0, -1.0)
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        ram.train()
        perm = order_rng.permutation(len(examples))
        total, batches = 0.0, 0
        diverged = False
        for lo in range(0, len(perm), config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            h_aug = augmented_representation(ram, retriever, h_train[idx], ids_train[idx], fusion)
            loss = F.cross_entropy(h_aug @ table.T, targets[idx])
            if not torch.isfinite(loss):
                diverged = True
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += loss.item()
            batches += 1
        if diverged:
            logger.error("non-finite fine-tuning loss in epoch %d", epoch)
            result.diverged = True
            break
        hr10, ndcg10 = validate()
        record = EpochRecord(epoch, total / max(batches, 1), float("nan"), hr10, ndcg10, time.perf_counter() - start)
        result.history.append(record)
        logger.info(record.line())
        if (hr10, ndcg10) > (result.best_hr10, result.best_ndcg10):
            result.best_hr10, result.best_ndcg10, result.best_epoch, stale = hr10, ndcg10, epoch, 0
            result.best_state = module_state(ram)
        else:
            stale += 1
            if stale >= config.patience:
                break
    ram.load_state_dict(result.best_state)
    ram.eval()
    return ram, result


@dataclass
class Recommendation:
    items: np.ndarray
    scores: np.ndarray
    retrieved: list[dict] = field(default_factory=list)
    fallback: bool = False


@torch.no_grad()
def augmented_infer(prefixes: Sequence[Sequence[int]], retriever: Retriever, ram, fusion: FusionConfig,
                    top_n: int = 10) -> list[Recommendation]:
    """Top-``top_n`` items per prefix with a trace of the retrieved memories.

    Ties in score are ordered by lower item id. When retrieval returns no
    memory the backbone representation is used unchanged and ``fallback``
    is set.
    """
    scores, ids, cos = augmented_scores(prefixes, retriever, ram, fusion, return_trace=True)
    scores = scores.numpy()
    out = []
    n_items = scores.shape[1]
    for r in range(len(prefixes)):
        order = np.lexsort((np.arange(n_items), -scores[r]))[:top_n]
        trace = [
            {"entry": int(e), "origin": (int(retriever.bank.users[e]), int(retriever.bank.steps[e])),
             "cosine": float(c)}
            for e, c in zip(ids[r], cos[r]) if e >= 0
        ]
        out.append(Recommendation(order, scores[r, order], trace, fallback=not trace))
    return out
