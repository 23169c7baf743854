"""Collaborative pre-training: next-item softmax loss plus an in-batch
InfoNCE loss over pairs of prefixes that share their next item."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from .data import Split, TrainExample, build_reference_set, build_target_index, sample_retrieval_positive
from .encoder import EncoderConfig, SeqEncoder, encode_eval
from .metrics import hr_at_n, ndcg_at_n, target_ranks
from .numeric import ConfigError, make_adam, module_state, numpy_rng, torch_generator

logger = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    lr: float = 0.001
    batch_size: int = 1024
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    temperature: float = 1.0
    ret_weight: float = 0.1
    seed: int = 2024

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.ret_weight < 0:
            raise ConfigError("retrieval-loss weight must be non-negative")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience, max_epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


def rec_loss(h: torch.Tensor, targets, encoder: SeqEncoder) -> torch.Tensor:
    """Mean negative log-likelihood of the targets under a full-catalog
    softmax of ``h @ V.T``. Accepts one representation or a batch."""
    if h.dim() == 1:
        h = h[None]
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    return F.cross_entropy(encoder.score(h), targets)


def ret_loss(h_a: torch.Tensor, h_b: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Symmetric InfoNCE with in-batch negatives.

    Row ``i`` of ``h_a`` and ``h_b`` form a positive pair. Each of the 2B
    representations is an anchor whose denominator holds its partner and
    the 2(B - 1) representations of the other pairs. Returns the sum of both
    directions averaged over pairs.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    b = h_a.shape[0]
    if b < 1:
        raise ValueError("empty pair batch")
    z = torch.cat([h_a, h_b])
    sim = (z @ z.T) / temperature
    sim = sim.masked_fill(torch.eye(2 * b, dtype=torch.bool), float("-inf"))
    partner = torch.cat([torch.arange(b, 2 * b), torch.arange(b)])
    return F.cross_entropy(sim, partner, reduction="sum") / b


@dataclass
class EpochRecord:
    epoch: int
    rec: float
    ret: float
    val_hr10: float
    val_ndcg10: float
    seconds: float

    def line(self) -> str:
        ret = "nan" if math.isnan(self.ret) else f"{self.ret:.6f}"
        return (f"epoch={self.epoch}\tL_rec={self.rec:.6f}\tL_ret={ret}\t"
                f"val_HR@10={self.val_hr10:.6f}\tval_NDCG@10={self.val_ndcg10:.6f}\ttime={self.seconds:.2f}")


@dataclass
class TrainResult:
    best_state: dict
    best_epoch: int
    best_hr10: float
    best_ndcg10: float = -1.0
    history: list[EpochRecord] = field(default_factory=list)
    diverged: bool = False

    def log_text(self) -> str:
        return "".join(r.line() + "\n" for r in self.history)


@torch.no_grad()
def validate_backbone(encoder: SeqEncoder, split: Split, batch_size: int = 1024) -> tuple[float, float]:
    h = encode_eval(encoder, [p.tolist() for p in split.valid.prefixes], batch_size)
    ranks = target_ranks(encoder.score(h), split.valid.targets)
    return hr_at_n(ranks, 10), ndcg_at_n(ranks, 10)


def pretrain(
    split: Split,
    encoder_cfg: EncoderConfig,
    config: PretrainConfig,
    examples: list[TrainExample] | None = None,
    compute_retrieval: bool = True,
) -> tuple[SeqEncoder, TrainResult]:
    """Train a fresh backbone and return it loaded with the best-validation
    weights.

    ``compute_retrieval=False`` skips the pair branch entirely; with
    ``ret_weight=0`` the two settings yield identical weights because pair
    sampling and pair dropout draw from their own streams.
    """
    config.validate()
    if examples is None:
        examples = build_reference_set(split, encoder_cfg.max_len)
    if not examples:
        raise ValueError("training corpus has no examples")
    encoder = SeqEncoder(encoder_cfg, seed=config.seed)
    optimizer = make_adam(encoder, config.lr, (config.beta1, config.beta2), config.adam_eps)
    order_rng = numpy_rng(config.seed, "sampling/order")
    pair_rng = numpy_rng(config.seed, "sampling/positives")
    drop_gen = torch_generator(config.seed, "dropout/main")
    pair_gen = torch_generator(config.seed, "dropout/pairs")
    target_index = build_target_index(examples)
    targets_all = np.array([ex.target for ex in examples], dtype=np.int64)

    result = TrainResult(module_state(encoder), 0, -1.0)
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        encoder.train()
        perm = order_rng.permutation(len(examples))
        rec_sum, ret_sum, ret_batches, n_batches = 0.0, 0.0, 0, 0
        diverged = False
        for lo in range(0, len(perm), config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            h = encoder.encode([examples[i].prefix for i in idx], drop_gen)
            loss_rec = rec_loss(h, targets_all[idx], encoder)
            loss = loss_rec
            if compute_retrieval:
                partners = [sample_retrieval_positive(int(i), examples, target_index, pair_rng) for i in idx]
                keep = [k for k, p in enumerate(partners) if p is not None]
                if keep:
                    h_b = encoder.encode([examples[partners[k]].prefix for k in keep], pair_gen)
                    loss_ret = ret_loss(h[keep], h_b, config.temperature)
                    loss = loss + config.ret_weight * loss_ret
                    ret_sum += loss_ret.item()
                    ret_batches += 1
            if not torch.isfinite(loss):
                diverged = True
                break
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            rec_sum += loss_rec.item()
            n_batches += 1
        if diverged:
            logger.error("non-finite loss in epoch %d; keeping epoch %d weights", epoch, result.best_epoch)
            result.diverged = True
            break
        hr10, ndcg10 = validate_backbone(encoder, split)
        record = EpochRecord(epoch, rec_sum / max(n_batches, 1),
                             ret_sum / ret_batches if ret_batches else float("nan"),
                             hr10, ndcg10, time.perf_counter() - start)
        result.history.append(record)
        logger.info(record.line())
        # HR@10 decides; NDCG@10 breaks ties so a saturated HR@10 still tracks progress
        if (hr10, ndcg10) > (result.best_hr10, result.best_ndcg10):
            result.best_hr10, result.best_ndcg10, result.best_epoch, stale = hr10, ndcg10, epoch, 0
            result.best_state = module_state(encoder)
        else:
            stale += 1
            if stale >= config.patience:
                break
    encoder.load_state_dict(result.best_state)
    encoder.eval()
    return encoder, result
