"""``raserec <command> --config <path> [--set key=value ...]``

Commands run in pipeline order (ingest, pretrain, build-bank, raft) and
then eval / ablate. Every artifact lives under
``$RASEREC_ARTIFACTS/<config fingerprint>/`` and records the content ids of
the artifacts it was derived from; a stale or foreign upstream file is
rejected rather than silently recomputed.

Exit status: 0 success, 1 a self-check failed, 2 invalid configuration,
3 missing upstream artifact or input file, 4 artifact lineage mismatch,
5 malformed or empty input data.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig, dump_config, load_config
from .data import (
    EmptyCorpusError,
    InteractionLog,
    MalformedRowError,
    build_reference_set,
    ingest_interactions,
    leave_one_out_split,
)
from .encoder import EncoderConfig, SeqEncoder
from .evaluate import (
    Artifacts,
    MissingArtifactError,
    augmented_infer_fn,
    backbone_infer,
    evaluate,
    group_by_item_popularity,
    group_by_user_frequency,
    run_ablation,
    sweep_cells,
)
from .memory import CheckpointMismatchError, IvfIndex, MemoryBank, build_ivf_index, encode_bank
from .numeric import (
    ConfigError,
    atomic_write_bytes,
    load_container,
    load_module_state,
    module_state,
    save_container,
    tensors_digest,
)
from .pretrain import pretrain
from .ram import RetrievalAugmentedModule, Retriever, raft_train

logger = logging.getLogger("raserec")

ARTIFACT_ENV = "RASEREC_ARTIFACTS"

EXIT_OK = 0
EXIT_SELF_CHECK = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_LINEAGE = 4
EXIT_DATA = 5


class MissingDependencyError(RuntimeError):
    pass


class LineageError(RuntimeError):
    pass


@dataclass
class Run:
    cfg: RunConfig
    root: Path

    @property
    def dir(self) -> Path:
        return self.root / self.cfg.fingerprint()

    @property
    def reports(self) -> Path:
        return self.dir / "reports" / self.cfg.eval_fingerprint()

    def path(self, name: str) -> Path:
        return self.dir / name

    def require(self, name: str, producer: str) -> Path:
        path = self.path(name)
        if not path.exists():
            raise MissingDependencyError(f"{path} not found; run `raserec {producer}` with this config first")
        return path

    def write_text(self, path: Path, text: str) -> None:
        atomic_write_bytes(path, text.encode("utf-8"))
        logger.info("wrote %s", path)

    def stamp(self, **extra) -> dict:
        return {"fingerprint": self.cfg.fingerprint(), **extra}


def artifact_root() -> Path:
    return Path(os.environ.get(ARTIFACT_ENV, "artifacts"))


# ---------------------------------------------------------------------------
# Loading with lineage checks
# ---------------------------------------------------------------------------


@dataclass
class Loaded:
    log: InteractionLog
    corpus_id: str
    encoder: SeqEncoder | None = None
    checkpoint_id: str | None = None
    bank: MemoryBank | None = None
    bank_id: str | None = None
    index: IvfIndex | None = None
    index_id: str | None = None
    ram: RetrievalAugmentedModule | None = None
    ram_id: str | None = None


def load_corpus(run: Run) -> Loaded:
    log = InteractionLog.load(run.require("corpus.bin", "ingest"))
    return Loaded(log, tensors_digest(log.tensors()))


def load_backbone(run: Run, art: Loaded) -> Loaded:
    tensors, meta = load_container(run.require("backbone.ckpt", "pretrain"))
    if meta.get("corpus_id") != art.corpus_id:
        raise LineageError(f"backbone was trained on corpus {meta.get('corpus_id')}, current corpus is {art.corpus_id}")
    ckpt = tensors_digest(tensors)
    if ckpt != meta.get("checkpoint_id"):
        raise LineageError("backbone checkpoint content does not match its recorded id")
    encoder = SeqEncoder(EncoderConfig(**meta["encoder"]))
    load_module_state(encoder, tensors)
    encoder.eval()
    art.encoder, art.checkpoint_id = encoder, ckpt
    return art


def load_bank(run: Run, art: Loaded) -> Loaded:
    bank = MemoryBank.load(run.require("bank.bin", "build-bank"))
    if bank.checkpoint_id != art.checkpoint_id:
        raise LineageError(f"bank encoded with backbone {bank.checkpoint_id}, current backbone is {art.checkpoint_id}")
    index, meta = IvfIndex.load(run.require("index.bin", "build-bank"))
    bank_id = tensors_digest(bank.tensors())
    if meta.get("bank_id") != bank_id:
        raise LineageError(f"index was built over bank {meta.get('bank_id')}, current bank is {bank_id}")
    art.bank, art.bank_id = bank, bank_id
    art.index, art.index_id = index, tensors_digest(index.tensors())
    return art


def load_ram(run: Run, art: Loaded, required: bool = True) -> Loaded:
    path = run.path("ram.ckpt")
    if not path.exists() and not required:
        return art
    tensors, meta = load_container(run.require("ram.ckpt", "raft"))
    for key in ("checkpoint_id", "bank_id", "index_id"):
        if meta.get(key) != getattr(art, key):
            raise LineageError(f"module was fine-tuned against {key} {meta.get(key)}, current is {getattr(art, key)}")
    ram = RetrievalAugmentedModule(meta["hidden"], meta["heads"], precision=meta["precision"])
    load_module_state(ram, tensors)
    ram.eval()
    art.ram, art.ram_id = ram, tensors_digest(tensors)
    return art


# ---------------------------------------------------------------------------
# Commands. Each returns the list of failed self-checks.
# ---------------------------------------------------------------------------


def cmd_ingest(run: Run) -> list[str]:
    cfg = run.cfg
    if not cfg.data_path:
        raise ConfigError("data_path is not set")
    source = Path(cfg.data_path)
    if not source.exists():
        raise MissingDependencyError(f"interaction file {source} not found")
    log = ingest_interactions(source, cfg.min_core)
    failures = []
    items = np.concatenate(log.sequences)
    if min(len(s) for s in log.sequences) < cfg.min_core or np.bincount(items).min() < cfg.min_core:
        failures.append("k-core: a user or item is below min_core")
    if any(np.any(np.diff(ts) < 0) for ts in log.timestamps):
        failures.append("chronology: a user sequence is not sorted by time")
    corpus_id = tensors_digest(log.tensors())
    log.save(run.path("corpus.bin"), run.stamp(corpus_id=corpus_id, source=str(source)))
    split = leave_one_out_split(log)
    stats = log.stats_table(cfg.dataset)
    stats += f"users dropped by the split (fewer than 3 interactions): {split.dropped_users}\n"
    run.write_text(run.path("stats.txt"), stats)
    print(stats, end="")
    return failures


def cmd_pretrain(run: Run) -> list[str]:
    cfg = run.cfg
    art = load_corpus(run)
    split = leave_one_out_split(art.log)
    enc_cfg = cfg.encoder_config(art.log.num_items)
    encoder, result = pretrain(split, enc_cfg, cfg.pretrain_config())
    state = module_state(encoder)
    ckpt = tensors_digest(state)
    meta = run.stamp(kind="backbone", corpus_id=art.corpus_id, checkpoint_id=ckpt, encoder=asdict(enc_cfg),
                     best_epoch=result.best_epoch, best_val_hr10=result.best_hr10, diverged=result.diverged)
    save_container(run.path("backbone.ckpt"), state, meta)
    run.write_text(run.path("pretrain_log.txt"), result.log_text())
    failures = []
    if result.diverged:
        failures.append("training diverged; kept the best checkpoint before the non-finite loss")
    if not all(np.isfinite(v.numpy()).all() for v in state.values()):
        failures.append("backbone has non-finite parameters")
    if tensors_digest(load_container(run.path("backbone.ckpt"))[0]) != ckpt:
        failures.append("backbone checkpoint does not round-trip")
    print(f"backbone {ckpt}: best epoch {result.best_epoch}, val HR@10 {result.best_hr10:.4f}")
    return failures


def cmd_build_bank(run: Run) -> list[str]:
    cfg = run.cfg
    art = load_backbone(run, load_corpus(run))
    split = leave_one_out_split(art.log)
    refs = build_reference_set(split, art.encoder.cfg.max_len)
    bank = encode_bank(refs, art.encoder, art.checkpoint_id)
    index = build_ivf_index(bank, cfg.clusters, cfg.seed, cfg.nprobe, cfg.kmeans_iters)
    bank_id = tensors_digest(bank.tensors())
    bank.save(run.path("bank.bin"), run.stamp(corpus_id=art.corpus_id, bank_id=bank_id))
    index.save(run.path("index.bin"), run.stamp(bank_id=bank_id, checkpoint_id=art.checkpoint_id))
    failures = []
    if len(bank) != sum(max(len(s) - 1, 0) for s in split.train):
        failures.append("bank size differs from the number of training prefixes")
    if not np.allclose(np.linalg.norm(bank.normed, axis=1), 1.0, atol=1e-6):
        failures.append("normalised keys are not unit length")
    ids = np.sort(np.concatenate(index.lists)) if index.lists else np.zeros(0)
    if not np.array_equal(ids, np.arange(len(bank))):
        failures.append("index lists do not cover every entry exactly once")
    table = art.encoder.item_embeddings.weight.detach().numpy()
    if not np.array_equal(bank.values, table[bank.targets]):
        failures.append("bank values differ from the item embedding rows")
    train_len = {int(u): len(s) for u, s in zip(split.users, split.train)}
    if any(int(t) >= train_len[int(u)] for u, t in zip(bank.users, bank.steps)):
        failures.append("an entry derives from a held-out target")
    sizes = [len(l) for l in index.lists]
    print(f"bank {bank_id}: {len(bank)} entries, {index.k} lists (sizes {min(sizes)}..{max(sizes)})"
          + (" [exhaustive]" if index.exhaustive else ""))
    return failures


def cmd_raft(run: Run) -> list[str]:
    cfg = run.cfg
    art = load_bank(run, load_backbone(run, load_corpus(run)))
    split = leave_one_out_split(art.log)
    before = art.checkpoint_id
    fusion = cfg.fusion()
    ram, result = raft_train(split, Retriever(art.encoder, art.bank, art.index, cfg.nprobe),
                             art.checkpoint_id, fusion, cfg.raft_config())
    state = module_state(ram)
    meta = run.stamp(kind="ram", checkpoint_id=art.checkpoint_id, bank_id=art.bank_id, index_id=art.index_id,
                     hidden=ram.hidden, heads=ram.heads, precision=art.encoder.cfg.precision,
                     fusion=asdict(fusion), best_epoch=result.best_epoch, best_val_hr10=result.best_hr10,
                     diverged=result.diverged)
    save_container(run.path("ram.ckpt"), state, meta)
    run.write_text(run.path("raft_log.txt"), result.log_text())
    failures = []
    if tensors_digest(module_state(art.encoder)) != before:
        failures.append("backbone parameters changed during fine-tuning")
    if tensors_digest(art.bank.tensors()) != art.bank_id:
        failures.append("memory bank changed during fine-tuning")
    if result.diverged:
        failures.append("fine-tuning diverged; kept the best module before the non-finite loss")
    ratio = ram.num_parameters() / art.encoder.num_parameters()
    print(f"module {tensors_digest(state)}: best epoch {result.best_epoch}, val HR@10 {result.best_hr10:.4f}, "
          f"{ram.num_parameters()} parameters ({100 * ratio:.1f}% of the backbone)")
    return failures


def _report_checks(report, n_users: int) -> list[str]:
    failures = []
    cohorts = [report.overall] + [row for table in report.groups.values() for row in table.values()]
    for row in cohorts:
        if not all(0.0 <= v <= 1.0 for v in row.values()):
            failures.append("a metric lies outside [0, 1]")
        for n in (5, 10):
            if row[f"NDCG@{n}"] > row[f"HR@{n}"]:
                failures.append(f"NDCG@{n} exceeds HR@{n}")
    if len(report.ranks) != n_users:
        failures.append("not every test user was ranked")
    return sorted(set(failures))


def cmd_eval(run: Run) -> list[str]:
    cfg = run.cfg
    art = load_ram(run, load_bank(run, load_backbone(run, load_corpus(run))))
    split = leave_one_out_split(art.log)
    fusion = cfg.eval_fusion()
    groups = {"popularity": group_by_item_popularity(split, cfg.popularity_groups),
              "frequency": group_by_user_frequency(split, cfg.frequency_groups)}
    lineage = {"fingerprint": cfg.fingerprint(), "eval_fingerprint": cfg.eval_fingerprint(),
               "checkpoint_id": art.checkpoint_id}
    base = evaluate(backbone_infer(art.encoder), split, groups=groups, meta=lineage)
    aug = evaluate(augmented_infer_fn(Retriever(art.encoder, art.bank, art.index, cfg.nprobe), art.ram, fusion),
                   split, groups=groups,
                   meta={**lineage, "bank_id": art.bank_id, "ram_id": art.ram_id, "fusion": asdict(fusion)})
    run.write_text(run.reports / "report.txt", base.to_table("backbone") + "\n" + aug.to_table("RaSeRec"))
    run.write_text(run.reports / "report.jsonl", base.to_jsonl("backbone") + aug.to_jsonl("RaSeRec"))
    failures = _report_checks(base, len(split.test)) + _report_checks(aug, len(split.test))
    for name, labels in groups.items():
        sizes = np.bincount(labels)[1:]
        if np.ptp(sizes) > 1:
            failures.append(f"{name} groups are not size-balanced")
    print(aug.to_table("RaSeRec"), end="")
    return failures


def cmd_ablate(run: Run) -> list[str]:
    cfg = run.cfg
    kind = cfg.ablation
    art = load_ram(run, load_bank(run, load_backbone(run, load_corpus(run))), required=kind != "sweep")
    split = leave_one_out_split(art.log)
    bundle = Artifacts(split, art.encoder, art.bank, art.index, art.ram, cfg.eval_fusion(), cfg.clusters,
                       cfg.nprobe, cfg.seed, (cfg.partition_lo, cfg.partition_hi))
    options = {}
    if kind == "drift":
        options["ratios"] = cfg.ratios("drift_ratios")
    elif kind == "noise":
        options["ratios"] = cfg.ratios("noise_ratios")
    elif kind == "sweep":
        retriever = bundle.retriever()

        def train_fn(cell, seed):
            return raft_train(split, retriever, art.checkpoint_id, cell, replace(cfg.raft_config(), seed=seed))[0]

        cells = sweep_cells(cfg.fusion(), cfg.sweep_mode, cfg.ratios("sweep_alphas"), cfg.ratios("sweep_betas"),
                            [int(k) for k in cfg.ratios("sweep_topks")])
        options = {"train_fn": train_fn, "cells": cells,
                   "seeds": [cfg.seed + i for i in range(cfg.sweep_seeds)]}
    table = run_ablation(kind, bundle, **options)
    run.write_text(run.reports / f"ablation_{kind}.txt", table.to_table())
    run.write_text(run.reports / f"ablation_{kind}.jsonl", table.to_jsonl())
    failures = []
    anchor = {"drift": "Full", "partition": "{S,M,L}", "noise": "0% w/ aug"}.get(kind)
    if anchor and any(label == anchor for label, _ in table.rows):
        plain = evaluate(augmented_infer_fn(bundle.retriever(), bundle.ram, bundle.fusion), split).overall
        if table.row(anchor) != plain:
            failures.append(f"{anchor} row differs from the plain evaluation")
    print(table.to_table(), end="")
    return failures


COMMANDS = {
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "build-bank": cmd_build_bank,
    "raft": cmd_raft,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raserec", description="Retrieval-augmented sequential recommendation.")
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", help="key = value config file (supports `include <path>`)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    parser.add_argument("--log-level", default="INFO")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        run = Run(cfg, artifact_root())
        failures = COMMANDS[args.command](run)
        run.write_text(run.path("config.txt"), dump_config(cfg))
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (MissingDependencyError, MissingArtifactError) as exc:
        logger.error("missing dependency: %s", exc)
        return EXIT_MISSING
    except (LineageError, CheckpointMismatchError) as exc:
        logger.error("lineage mismatch: %s", exc)
        return EXIT_LINEAGE
    except (MalformedRowError, EmptyCorpusError) as exc:
        logger.error("bad input data: %s", exc)
        return EXIT_DATA
    if failures:
        for f in failures:
            logger.error("self-check failed: %s", f)
        return EXIT_SELF_CHECK
    logger.info("%s finished; artifacts in %s", args.command, run.dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
