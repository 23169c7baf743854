"""Run configuration: flat ``key = value`` files with ``include`` lines."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, get_type_hints

from .encoder import EncoderConfig
from .numeric import ConfigError
from .pretrain import PretrainConfig
from .ram import FusionConfig, RaftConfig


@dataclass
class RunConfig:
    # data
    data_path: str = ""
    dataset: str = "dataset"
    min_core: int = 5
    # backbone
    hidden: int = 64
    max_len: int = 50
    layers: int = 2
    heads: int = 2
    dropout: float = 0.5
    attn_dropout: float = 0.5
    inner: int = 256
    ln_eps: float = 1e-12
    precision: int = 32
    # optimisation, shared by both stages unless overridden
    lr: float = 0.001
    batch_size: int = 1024
    beta1: float = 0.9
    beta2: float = 0.999
    max_epochs: int = 100
    patience: int = 10
    temperature: float = 1.0
    ret_weight: float = 0.1
    raft_lr: float = 0.001
    raft_max_epochs: int = 100
    raft_patience: int = 10
    # memory bank
    clusters: int = 128
    nprobe: int = 1
    kmeans_iters: int = 25
    partition_lo: int = 3
    partition_hi: int = 6
    # fusion
    alpha: float = 0.5
    beta: float = 0.9
    topk: int = 20
    seed: int = 2024
    # evaluation-time settings (not part of the run fingerprint)
    eval_alpha: float = -1.0
    eval_beta: float = -1.0
    eval_topk: int = 0
    top_n: int = 10
    popularity_groups: int = 10
    frequency_groups: int = 8
    ablation: str = "drift"
    drift_ratios: str = "0,0.1,0.2,0.3"
    noise_ratios: str = "0,0.1,0.2,0.3"
    sweep_mode: str = "axis"
    sweep_seeds: int = 5
    sweep_alphas: str = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"
    sweep_betas: str = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"
    sweep_topks: str = "5,10,15,20,25,30,35,40,45,50,55"

    EVAL_ONLY = frozenset({
        "eval_alpha", "eval_beta", "eval_topk", "top_n", "popularity_groups", "frequency_groups",
        "ablation", "drift_ratios", "noise_ratios", "sweep_mode", "sweep_seeds",
        "sweep_alphas", "sweep_betas", "sweep_topks",
    })

    # -- derived sub-configs ----------------------------------------------

    def encoder_config(self, num_items: int) -> EncoderConfig:
        return EncoderConfig(num_items=num_items, hidden=self.hidden, max_len=self.max_len, layers=self.layers,
                             heads=self.heads, dropout=self.dropout, attn_dropout=self.attn_dropout,
                             inner=self.inner, ln_eps=self.ln_eps, precision=self.precision)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(lr=self.lr, batch_size=self.batch_size, beta1=self.beta1, beta2=self.beta2,
                              max_epochs=self.max_epochs, patience=self.patience,
                              temperature=self.temperature, ret_weight=self.ret_weight, seed=self.seed)

    def raft_config(self) -> RaftConfig:
        return RaftConfig(lr=self.raft_lr, batch_size=self.batch_size, beta1=self.beta1, beta2=self.beta2,
                          max_epochs=self.raft_max_epochs, patience=self.raft_patience, seed=self.seed,
                          nprobe=self.nprobe)

    def fusion(self) -> FusionConfig:
        return FusionConfig(self.alpha, self.beta, self.topk)

    def eval_fusion(self) -> FusionConfig:
        return FusionConfig(
            self.alpha if self.eval_alpha < 0 else self.eval_alpha,
            self.beta if self.eval_beta < 0 else self.eval_beta,
            self.topk if self.eval_topk <= 0 else self.eval_topk,
        )

    # -- validation / identity --------------------------------------------

    def validate(self) -> None:
        if self.min_core < 1:
            raise ConfigError("min_core must be >= 1")
        EncoderConfig(num_items=1, hidden=self.hidden, max_len=self.max_len, layers=self.layers,
                      heads=self.heads, dropout=self.dropout, attn_dropout=self.attn_dropout,
                      precision=self.precision).validate()
        self.pretrain_config().validate()
        self.raft_config().validate()
        self.fusion().validate()
        self.eval_fusion().validate()
        if self.clusters < 1 or self.nprobe < 1 or self.kmeans_iters < 1:
            raise ConfigError("clusters, nprobe and kmeans_iters must be >= 1")
        if not self.partition_lo < self.partition_hi:
            raise ConfigError("partition_lo must be < partition_hi")
        if self.ablation not in ("drift", "partition", "noise", "sweep"):
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.sweep_mode not in ("axis", "grid"):
            raise ConfigError("sweep_mode must be axis or grid")
        for r in self.ratios("drift_ratios"):
            if not 0 <= r < 1:
                raise ConfigError("drift ratios must lie in [0, 1)")
        for r in self.ratios("noise_ratios"):
            if not 0 <= r <= 1:
                raise ConfigError("noise ratios must lie in [0, 1]")
        for name in ("sweep_alphas", "sweep_betas"):
            if not all(0 <= v <= 1 for v in self.ratios(name)):
                raise ConfigError(f"{name} must lie in [0, 1]")
        if not all(k >= 1 and k == int(k) for k in self.ratios("sweep_topks")):
            raise ConfigError("sweep_topks must be positive integers")
        if self.sweep_seeds < 1:
            raise ConfigError("sweep_seeds must be >= 1")

    def ratios(self, name: str) -> list[float]:
        try:
            return [float(x) for x in getattr(self, name).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{name} must be a comma-separated list of numbers") from None

    def canonical(self, keys: Iterable[str] | None = None) -> str:
        names = sorted(keys if keys is not None else (f.name for f in fields(self)))
        return "\n".join(f"{k}={getattr(self, k)!r}" for k in names)

    def fingerprint(self) -> str:
        keys = [f.name for f in fields(self) if f.name not in self.EVAL_ONLY]
        return hashlib.sha256(self.canonical(keys).encode()).hexdigest()[:12]

    def eval_fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:12]


_HINTS = get_type_hints(RunConfig)


def _coerce(key: str, raw: str):
    kind = _HINTS[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def read_config_file(path, _seen: frozenset = frozenset()) -> dict[str, str]:
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    values: dict[str, str] = {}
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include ") or line.startswith("include="):
            target = line[len("include"):].lstrip(" =").strip()
            values.update(read_config_file(path.parent / target, _seen | {path}))
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{line_no}: {exc}") from None
        values[key] = value
    return values


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file (with includes), then ``key=value`` overrides."""
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(read_config_file(path))
    for item in overrides:
        k, v = parse_assignment(item)
        raw[k] = v
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in raw.items()})
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))

