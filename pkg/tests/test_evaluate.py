import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from raserec.data import Split, build_reference_set, leave_one_out_split
from raserec.evaluate import (
    AblationTable,
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
from raserec.memory import build_ivf_index, encode_bank
from raserec.metrics import UndefinedMetricError, hr_at_n, metric_row, ndcg_at_n, target_ranks
from raserec.numeric import module_state, tensors_digest
from raserec.ram import FusionConfig, RetrievalAugmentedModule
from raserec.synthetic import random_log

from conftest import make_encoder


class TestMetrics:
    def test_all_first(self):
        assert hr_at_n([1, 1, 1], 5) == 1.0 and ndcg_at_n([1, 1], 10) == 1.0

    def test_counting(self):
        assert hr_at_n([1, 7, 20], 5) == 1 / 3

    def test_closed_forms(self):
        assert ndcg_at_n([3], 5) == 0.5
        assert ndcg_at_n([1, 3, 10], 5) == 0.5

    def test_empty(self):
        with pytest.raises(UndefinedMetricError):
            hr_at_n([], 5)
        with pytest.raises(UndefinedMetricError):
            ndcg_at_n(np.zeros(0), 5)

    def test_bad_cutoff(self):
        with pytest.raises(ValueError):
            hr_at_n([1], 0)

    @given(st.lists(st.integers(1, 100), min_size=1, max_size=50), st.integers(1, 60))
    def test_bounds_and_monotone(self, ranks, n):
        hr, nd = hr_at_n(ranks, n), ndcg_at_n(ranks, n)
        assert 0 <= nd <= hr <= 1
        assert hr_at_n(ranks, n + 1) >= hr and ndcg_at_n(ranks, n + 1) >= nd

    def test_rank_tie_rule(self):
        scores = np.array([[0.5, 0.9, 0.5, 0.5, 0.1]])
        assert target_ranks(scores, [0]).tolist() == [2]
        assert target_ranks(scores, [2]).tolist() == [3]
        assert target_ranks(scores, [3]).tolist() == [4]
        assert target_ranks(scores, [1]).tolist() == [1]

    @given(st.lists(st.floats(-3, 3), min_size=2, max_size=30), st.data())
    def test_rank_oracle(self, scores, data):
        t = data.draw(st.integers(0, len(scores) - 1))
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        assert target_ranks(np.array([scores]), [t])[0] == order.index(t) + 1


def small_split(seed=0):
    return leave_one_out_split(random_log(100, 30, min_len=3, max_len=15, seed=seed))


class TestEvaluate:
    def test_oracle_infer(self):
        sp = small_split()
        targets = dict(zip(map(tuple, (p.tolist() for p in sp.test.prefixes)), sp.test.targets))

        def oracle(prefixes):
            out = np.zeros((len(prefixes), sp.num_items))
            for r, p in enumerate(prefixes):
                out[r, targets[tuple(p)]] = 1.0
            return out

        rep = evaluate(oracle, sp)
        assert rep.overall["HR@5"] == 1.0 and rep.overall["NDCG@5"] == 1.0

    def test_constant_infer(self):
        sp = small_split()
        rep = evaluate(lambda ps: np.zeros((len(ps), sp.num_items)), sp, cutoffs=(5, 10), batch_size=7)
        assert np.array_equal(rep.ranks, sp.test.targets + 1)
        for n in (5, 10):
            assert rep.overall[f"HR@{n}"] == float(np.mean(sp.test.targets < n))
        print(f"\nconstant scores: HR@10={rep.overall['HR@10']:.3f} vs N/|V|={10 / sp.num_items:.3f}")

    def test_pure_and_serialised(self):
        sp = small_split()
        enc = make_encoder(num_items=sp.num_items, hidden=16, precision=32)
        groups = {"popularity": group_by_item_popularity(sp, 10)}
        a = evaluate(backbone_infer(enc), sp, groups=groups, meta={"fingerprint": "abc"})
        b = evaluate(backbone_infer(enc), sp, groups=groups, meta={"fingerprint": "abc"})
        assert a.to_jsonl() == b.to_jsonl() and a.to_table() == b.to_table()
        lines = a.to_jsonl().splitlines()
        assert len(lines) == 1 + 10
        assert "HR@5" in a.to_table().splitlines()[0]
        for table in a.groups.values():
            for row in table.values():
                assert row["NDCG@10"] <= row["HR@10"]

    def test_valid_stage(self):
        sp = small_split()
        rep = evaluate(lambda ps: np.zeros((len(ps), sp.num_items)), sp, stage="valid")
        assert np.array_equal(rep.ranks, sp.valid.targets + 1)


def split_with(test_targets, prefix_lens, popularity_source=()):
    n = len(test_targets)
    users = np.arange(n)
    train = [np.array(list(popularity_source) if u == 0 else [0], dtype=np.int64) for u in range(n)]
    prefixes = [np.zeros(k, dtype=np.int64) for k in prefix_lens]
    from raserec.data import HeldOut
    held = HeldOut(users, prefixes, np.asarray(test_targets))
    return Split(num_items=max(max(test_targets), max(popularity_source, default=0)) + 1, users=users,
                 train=train, train_timestamps=train, valid=held, test=held, full=train)


class TestGrouping:
    def test_ten_groups_of_ten(self):
        sp = small_split()
        labels = group_by_item_popularity(sp, 10)
        assert np.bincount(labels)[1:].tolist() == [len(labels) // 10] * 10 or \
            np.ptp(np.bincount(labels)[1:]) <= 1

    @given(st.lists(st.integers(0, 9), min_size=8, max_size=120), st.integers(1, 10))
    def test_balanced_and_sorted(self, targets, g):
        rng = np.random.default_rng(len(targets))
        source = rng.integers(0, 10, size=50).tolist()
        sp = split_with(targets, [1] * len(targets), source)
        labels = group_by_item_popularity(sp, g)
        sizes = np.bincount(labels, minlength=g + 1)[1:]
        assert sizes.sum() == len(targets) and np.ptp(sizes) <= 1
        pop = sp.item_popularity()[sp.test.targets]
        means = [pop[labels == k].mean() for k in range(1, g + 1) if (labels == k).any()]
        assert all(a <= b for a, b in zip(means, means[1:]))

    def test_equal_popularity_falls_back_to_item_id(self):
        sp = split_with([5, 3, 9, 1], [1, 1, 1, 1])
        labels = group_by_item_popularity(sp, 2)
        assert labels.tolist() == [2, 1, 2, 1]

    def test_frequency_groups(self):
        lens = [5, 1, 9, 3, 3, 7, 2, 8]
        sp = split_with([0] * 8, lens)
        labels = group_by_user_frequency(sp, 4)
        assert np.bincount(labels)[1:].tolist() == [2, 2, 2, 2]
        means = [np.mean([l for l, g in zip(lens, labels) if g == k]) for k in range(1, 5)]
        assert means == sorted(means)
        # equal lengths fall back to user order
        assert group_by_user_frequency(split_with([0] * 4, [2] * 4), 2).tolist() == [1, 1, 2, 2]


@pytest.fixture(scope="module")
def artifacts():
    torch.set_num_threads(1)
    sp = leave_one_out_split(random_log(120, 40, min_len=4, max_len=16, seed=8))
    enc = make_encoder(num_items=sp.num_items, hidden=16, max_len=10, precision=32, seed=2).eval()
    ckpt = tensors_digest(module_state(enc))
    bank = encode_bank(build_reference_set(sp, 10), enc, ckpt)
    index = build_ivf_index(bank, k=8, seed=0)
    ram = RetrievalAugmentedModule(16, 2, seed=0, init_std=0.2).eval()
    return Artifacts(sp, enc, bank, index, ram, FusionConfig(0.5, 0.9, 5), clusters=8, seed=0)


class TestAblations:
    def plain(self, art):
        return evaluate(augmented_infer_fn(art.retriever(), art.ram, art.fusion), art.split).overall

    def test_alpha_one_report_identical(self, artifacts):
        art = artifacts
        aug = evaluate(augmented_infer_fn(art.retriever(), art.ram, FusionConfig(1.0, 0.9, 5)), art.split)
        base = evaluate(backbone_infer(art.encoder), art.split)
        assert aug.to_jsonl() == base.to_jsonl()

    def test_drift(self, artifacts):
        table = run_ablation("drift", artifacts, ratios=(0.0, 0.1, 0.3))
        assert [r[0] for r in table.rows] == ["Full", "10%", "30%"]
        assert table.row("Full") == self.plain(artifacts)

    def test_partition(self, artifacts):
        table = run_ablation("partition", artifacts)
        labels = [r[0] for r in table.rows]
        assert labels == ["{S}", "{M}", "{L}", "{S,M}", "{S,L}", "{M,L}", "{S,M,L}"]
        assert table.row("{S,M,L}") == self.plain(artifacts)
        assert sum(table.extra["sizes"].values()) == len(artifacts.bank)

    def test_noise(self, artifacts):
        table = run_ablation("noise", artifacts, ratios=(0.0, 0.2))
        assert table.row("0% w/ aug") == self.plain(artifacts)
        assert table.row("0% w/o aug") == evaluate(backbone_infer(artifacts.encoder), artifacts.split).overall
        assert len(table.rows) == 4

    def test_sweep(self, artifacts):
        def train_fn(cell, seed):
            return RetrievalAugmentedModule(16, 2, seed=seed, init_std=0.2).eval()

        cells = [FusionConfig(0.5, 0.9, 5), FusionConfig(1.0, 0.9, 5)]
        table = run_ablation("sweep", artifacts, train_fn=train_fn, cells=cells, seeds=(0, 1, 2))
        assert len(table.rows) == 2
        alpha_one = table.rows[1][1]
        base = evaluate(backbone_infer(artifacts.encoder), artifacts.split).overall
        # no RAM path at alpha=1: every seed scores the same, zero spread
        assert alpha_one["HR@10"] == pytest.approx(base["HR@10"], abs=1e-12)
        assert alpha_one["HR@10 std"] < 1e-12
        assert "std" in table.to_table() and len(table.to_jsonl().splitlines()) == 2

    def test_sweep_cells(self):
        base = FusionConfig(0.5, 0.9, 20)
        axis = sweep_cells(base, "axis")
        assert len(axis) == 11 + 11 + 11 - 2
        grid = sweep_cells(base, "grid")
        assert len(grid) == 11 * 11 * 11
        assert {c.topk for c in grid} == set(range(5, 60, 5))
        assert math.isclose(max(c.alpha for c in grid), 1.0)

    def test_missing_artifact(self, artifacts):
        art = Artifacts(artifacts.split, artifacts.encoder)
        with pytest.raises(MissingArtifactError, match="bank"):
            run_ablation("drift", art)

    def test_table_format(self):
        t = AblationTable("drift", [("Full", metric_row(np.array([1, 2, 30])))])
        assert t.to_table().splitlines()[1].startswith("Full")
