"""Tensor plumbing shared by the backbone and the retrieval-augmented module.

Tensors, parameters and reverse-mode gradients come from torch. What lives
here is the part the rest of the package relies on behaving exactly:
seeded random sub-streams, a generator-driven dropout, multi-head attention
with explicit causal / key masks, a central-difference gradient checker and
the checkpoint container.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

DTYPES = {32: torch.float32, 64: torch.float64}

CHECKPOINT_MAGIC = b"RSRCKPT\x00"
CHECKPOINT_VERSION = 1

_NP_DTYPES = {
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "int32": np.dtype("<i4"),
    "bool": np.dtype("?"),
}


class ConfigError(ValueError):
    """Raised when a structural hyperparameter is inconsistent."""


def dtype_for(precision: int) -> torch.dtype:
    try:
        return DTYPES[precision]
    except KeyError:
        raise ConfigError(f"precision must be 32 or 64, got {precision}") from None


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------


def derive_seed(seed: int, stream: str) -> int:
    """Stable 63-bit seed for a named sub-stream of ``seed``."""
    digest = hashlib.sha256(f"{seed}/{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def torch_generator(seed: int, stream: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, stream))
    return gen


def numpy_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, stream))


# ---------------------------------------------------------------------------
# Elementary ops
# ---------------------------------------------------------------------------


def softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Max-shifted softmax along ``dim``."""
    if logits.numel() == 0 or logits.shape[dim] == 0:
        raise ValueError("softmax of an empty tensor is undefined")
    shifted = logits - logits.amax(dim=dim, keepdim=True)
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=dim, keepdim=True)


def dropout(x: torch.Tensor, p: float, generator: torch.Generator | None, training: bool) -> torch.Tensor:
    """Inverted dropout whose mask is drawn from ``generator``."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        return torch.zeros_like(x)
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def init_linear_(layer: nn.Linear, generator: torch.Generator, std: float = 0.02) -> None:
    nn.init.trunc_normal_(layer.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with per-head projections.

    Inputs are batched: queries ``(B, Lq, d)``, keys and values ``(B, Lk, d)``.
    ``key_mask`` marks valid keys with True; masked keys receive exactly zero
    weight. Every query row must keep at least one valid key.
    """

    def __init__(self, d: int, heads: int, attn_dropout: float = 0.0):
        super().__init__()
        if heads < 1 or d % heads:
            raise ConfigError(f"model dim {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.attn_dropout = attn_dropout
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def reset_parameters(self, generator: torch.Generator, std: float = 0.02) -> None:
        for layer in (self.q_proj, self.k_proj, self.v_proj, self.out_proj):
            init_linear_(layer, generator, std)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def attend(
        self,
        queries: torch.Tensor,
        keys: torch.Tensor,
        values: torch.Tensor,
        causal: bool = False,
        key_mask: torch.Tensor | None = None,
        generator: torch.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(weights, context)`` before the output projection.

        ``weights`` is ``(B, heads, Lq, Lk)``; ``context`` is ``(B, Lq, d)``
        with heads concatenated.
        """
        if keys.shape[1] != values.shape[1]:
            raise ValueError("key and value counts differ")
        q = self._split(self.q_proj(queries))
        k = self._split(self.k_proj(keys))
        v = self._split(self.v_proj(values))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        lq, lk = scores.shape[-2:]
        mask = None
        if causal:
            if lq != lk:
                raise ValueError("causal attention needs as many queries as keys")
            mask = torch.ones(lq, lk, dtype=torch.bool).tril()[None, None]
        if key_mask is not None:
            km = key_mask[:, None, None, :]
            mask = km if mask is None else mask & km
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = softmax(scores, dim=-1)
        dropped = dropout(weights, self.attn_dropout, generator, self.training)
        context = (dropped @ v).transpose(1, 2).reshape(queries.shape[0], lq, self.d)
        return weights, context

    def forward(self, queries, keys, values, causal=False, key_mask=None, generator=None):
        _, context = self.attend(queries, keys, values, causal, key_mask, generator)
        return self.out_proj(context)


def multi_head_attention(
    queries: torch.Tensor,
    keys: torch.Tensor,
    values: torch.Tensor,
    heads: int,
    causal: bool,
    params: MultiHeadAttention,
) -> torch.Tensor:
    """Functional entry point; ``params`` must have been built for ``heads``."""
    if params.heads != heads:
        raise ConfigError(f"parameter set has {params.heads} heads, asked for {heads}")
    return params(queries, keys, values, causal=causal)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


class NonFiniteLossError(FloatingPointError):
    pass


def grad_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Iterable[tuple[str, nn.Parameter]] | Mapping[str, nn.Parameter],
    eps: float = 1e-6,
    max_coords: int = 24,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` is re-evaluated with single coordinates nudged by +/-eps; it
    must be deterministic. Up to ``max_coords`` coordinates per parameter are
    sampled. The error for one coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    named = list(params.items()) if isinstance(params, Mapping) else list(params)
    for _, p in named:
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLossError("loss is non-finite at the unperturbed point")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in named:
        analytic = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        flat = p.data.view(-1)
        n = flat.numel()
        coords = np.arange(n) if n <= max_coords else rng.choice(n, size=max_coords, replace=False)
        for c in coords:
            c = int(c)
            orig = flat[c].item()
            with torch.no_grad():
                flat[c] = orig + eps
                plus = loss_fn().item()
                flat[c] = orig - eps
                minus = loss_fn().item()
                flat[c] = orig
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NonFiniteLossError(f"non-finite loss when perturbing {name}[{c}]")
            numeric = (plus - minus) / (2 * eps)
            a = analytic.view(-1)[c].item()
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def make_adam(module: nn.Module, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    """Adam over the trainable parameters only; frozen ones are never touched."""
    trainable = [p for p in module.parameters() if p.requires_grad]
    if not trainable:
        raise ConfigError("module has no trainable parameters")
    return torch.optim.Adam(trainable, lr=lr, betas=betas, eps=eps)


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------
#
# layout: magic(8) | u32 version | u64 header length | header JSON | payload
# all integers and array payloads are little-endian.


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    name = arr.dtype.name
    if name not in _NP_DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr, dtype=_NP_DTYPES[name])


def tensors_digest(tensors: Mapping[str, object]) -> str:
    """Content hash over names, shapes, dtypes and bytes (order-independent)."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        h.update(f"{name}|{arr.dtype.name}|{arr.shape}".encode())
        h.update(arr.tobytes())
    return h.hexdigest()[:16]


def encode_container(tensors: Mapping[str, object], meta: Mapping | None = None) -> bytes:
    entries = []
    payload = io.BytesIO()
    for name, value in tensors.items():
        arr = _to_numpy(value)
        raw = arr.tobytes()
        entries.append(
            {"name": name, "dtype": arr.dtype.name, "shape": list(arr.shape),
             "offset": payload.tell(), "nbytes": len(raw)}
        )
        payload.write(raw)
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "byte_order": "little", "meta": dict(meta or {}),
         "tensors": entries},
        sort_keys=True,
    ).encode()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(header)) + header + payload.getvalue()


def decode_container(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint container")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    header = json.loads(blob[20:20 + hlen])
    base = 20 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=_NP_DTYPES[e["dtype"]])
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return tensors, header["meta"]


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_container(path, tensors: Mapping[str, object], meta: Mapping | None = None) -> None:
    atomic_write_bytes(path, encode_container(tensors, meta))


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_container(Path(path).read_bytes())


def module_state(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def load_module_state(module: nn.Module, tensors: Mapping[str, np.ndarray]) -> None:
    ref = module.state_dict()
    missing = set(ref) - set(tensors)
    if missing:
        raise KeyError(f"checkpoint lacks tensors: {sorted(missing)}")
    state = {k: torch.from_numpy(np.array(tensors[k])).to(ref[k].dtype) for k in ref}
    module.load_state_dict(state)
