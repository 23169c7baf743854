"""Self-attentive sequence encoder (the backbone).

Items of a prefix occupy the last ``len`` slots of the position table, so
the representative hidden state always sits at position ``T - 1``. Batches
are bucketed by prefix length instead of padded: attention never sees a
padding token.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .numeric import (
    ConfigError,
    MultiHeadAttention,
    dropout,
    dtype_for,
    init_linear_,
    torch_generator,
)

MIN_GEMM_ROWS = 32


@dataclass
class EncoderConfig:
    num_items: int
    hidden: int = 64
    max_len: int = 50
    layers: int = 2
    heads: int = 2
    dropout: float = 0.5
    attn_dropout: float = 0.5
    inner: int = 256
    ln_eps: float = 1e-12
    init_std: float = 0.02
    precision: int = 32

    def validate(self) -> None:
        if self.num_items < 1:
            raise ConfigError("catalog is empty")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden size {self.hidden} not divisible by {self.heads} heads")
        if self.max_len < 1 or self.layers < 0:
            raise ConfigError("max_len must be >= 1 and layers >= 0")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.attn_dropout < 1.0):
            raise ConfigError("dropout rates must lie in [0, 1)")


class TransformerLayer(nn.Module):
    """Causal self-attention and a GELU feed-forward block, each wrapped in
    dropout, a residual connection and post layer norm."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.p = cfg.dropout
        self.attn = MultiHeadAttention(cfg.hidden, cfg.heads, cfg.attn_dropout)
        self.ln1 = nn.LayerNorm(cfg.hidden, eps=cfg.ln_eps)
        self.ff1 = nn.Linear(cfg.hidden, cfg.inner)
        self.ff2 = nn.Linear(cfg.inner, cfg.hidden)
        self.ln2 = nn.LayerNorm(cfg.hidden, eps=cfg.ln_eps)

    def reset_parameters(self, generator, std):
        self.attn.reset_parameters(generator, std)
        init_linear_(self.ff1, generator, std)
        init_linear_(self.ff2, generator, std)
        for ln in (self.ln1, self.ln2):
            nn.init.ones_(ln.weight)
            nn.init.zeros_(ln.bias)

    def forward(self, x, generator=None):
        a = self.attn(x, x, x, causal=True, generator=generator)
        x = self.ln1(x + dropout(a, self.p, generator, self.training))
        f = self.ff2(F.gelu(self.ff1(x)))
        return self.ln2(x + dropout(f, self.p, generator, self.training))


class SeqEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.item_embeddings = nn.Embedding(cfg.num_items, cfg.hidden)
        self.position_embeddings = nn.Embedding(cfg.max_len, cfg.hidden)
        self.layers = nn.ModuleList(TransformerLayer(cfg) for _ in range(cfg.layers))
        self.to(dtype_for(cfg.precision))
        self.reset_parameters(torch_generator(seed, "init"))

    @property
    def dtype(self) -> torch.dtype:
        return self.item_embeddings.weight.dtype

    def reset_parameters(self, generator: torch.Generator) -> None:
        std = self.cfg.init_std
        for emb in (self.item_embeddings, self.position_embeddings):
            nn.init.trunc_normal_(emb.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
        for layer in self.layers:
            layer.reset_parameters(generator, std)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- forward pieces -------------------------------------------------

    def embed(self, items: torch.Tensor) -> torch.Tensor:
        """``(B, n)`` item ids -> ``(B, n, d)`` input vectors, right-aligned
        on the position table."""
        n = items.shape[-1]
        if n > self.cfg.max_len:
            raise ValueError(f"sequence of length {n} exceeds max_len {self.cfg.max_len}")
        if items.numel() and (int(items.min()) < 0 or int(items.max()) >= self.cfg.num_items):
            raise IndexError("item id outside the catalog")
        positions = torch.arange(self.cfg.max_len - n, self.cfg.max_len)
        return self.item_embeddings(items) + self.position_embeddings(positions)

    def hidden_states(self, items: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        """Final-layer states for every position of equal-length sequences."""
        x = dropout(self.embed(items), self.cfg.dropout, generator, self.training)
        for layer in self.layers:
            x = layer(x, generator)
        return x

    def encode(self, prefixes: Sequence[Sequence[int]], generator: torch.Generator | None = None) -> torch.Tensor:
        """Last-position representation of each prefix, ``(B, d)``.

        Prefixes are truncated to ``max_len`` and grouped by length; output
        rows follow input order.
        """
        t = self.cfg.max_len
        buckets: dict[int, list[int]] = defaultdict(list)
        clipped = []
        for i, p in enumerate(prefixes):
            p = list(p)[-t:]
            if not p:
                raise ValueError("cannot encode an empty prefix")
            clipped.append(p)
            buckets[len(p)].append(i)
        out = torch.empty(len(clipped), self.cfg.hidden, dtype=self.dtype)
        for n in sorted(buckets):
            idx = buckets[n]
            rows = [clipped[i] for i in idx]
            if not self.training and len(rows) * n < MIN_GEMM_ROWS:
                # BLAS picks a different kernel for very few rows; pad with
                # copies so a lone prefix matches its batched encoding bit for bit
                pad = -(-MIN_GEMM_ROWS // n) - len(rows)
                rows = rows + [rows[0]] * pad
            items = torch.tensor(rows, dtype=torch.long)
            out[idx] = self.hidden_states(items, generator)[: len(idx), -1]
        return out

    def score(self, h: torch.Tensor) -> torch.Tensor:
        """Inner product of each representation with every item embedding."""
        return h @ self.item_embeddings.weight.T

    def config_dict(self) -> dict:
        return asdict(self.cfg)


# Functional spellings of the encoder operations.


def embed_sequence(prefix: Sequence[int], params: SeqEncoder) -> torch.Tensor:
    return params.embed(torch.tensor([list(prefix)], dtype=torch.long))[0]


def seq_enc(prefix: Sequence[int], params: SeqEncoder, train_mode: bool = False,
            generator: torch.Generator | None = None) -> torch.Tensor:
    if len(prefix) == 0:
        raise ValueError("cannot encode an empty prefix")
    was = params.training
    params.train(train_mode)
    try:
        with torch.set_grad_enabled(train_mode and torch.is_grad_enabled()):
            return params.encode([prefix], generator)[0]
    finally:
        params.train(was)


def score_items(h: torch.Tensor, params: SeqEncoder) -> torch.Tensor:
    return params.score(h)


@torch.no_grad()
def encode_eval(encoder: SeqEncoder, prefixes: Sequence[Sequence[int]], batch_size: int = 1024) -> torch.Tensor:
    """Eval-mode representations for many prefixes, in chunks."""
    was = encoder.training
    encoder.eval()
    try:
        chunks = [encoder.encode(prefixes[i:i + batch_size]) for i in range(0, len(prefixes), batch_size)]
    finally:
        encoder.train(was)
    if not chunks:
        return torch.empty(0, encoder.cfg.hidden, dtype=encoder.dtype)
    return torch.cat(chunks)
