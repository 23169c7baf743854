import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from raserec.data import build_reference_set
from raserec.encoder import encode_eval
from raserec.memory import CheckpointMismatchError, IvfIndex, build_ivf_index, encode_bank
from raserec.metrics import hr_at_n, ndcg_at_n, target_ranks
from raserec.numeric import grad_check, module_state, tensors_digest
from raserec.ram import (
    FusionConfig,
    RaftConfig,
    RetrievalAugmentedModule,
    Retriever,
    augmented_infer,
    augmented_scores,
    channel_one,
    channel_two,
    fuse,
    raft_train,
)

from conftest import make_encoder, naive_attention


def make_ram(d=8, heads=2, seed=0, std=0.3):
    ram = RetrievalAugmentedModule(d, heads, seed=seed, precision=64, init_std=std)
    return ram.eval()


def rand(*shape, seed=0):
    return torch.tensor(np.random.default_rng(seed).normal(size=shape))


@pytest.fixture
def setup(pattern_split):
    enc = make_encoder(num_items=pattern_split.num_items, hidden=16, max_len=10, precision=32, seed=1).eval()
    refs = build_reference_set(pattern_split, 10)
    ckpt = tensors_digest(module_state(enc))
    bank = encode_bank(refs, enc, ckpt)
    index = build_ivf_index(bank, k=8, seed=0)
    return enc, bank, index, ckpt


class TestChannels:
    def test_single_memory_passes_value(self):
        ram = make_ram()
        h, k, v = rand(1, 8, seed=1), rand(1, 1, 8, seed=2), rand(1, 1, 8, seed=3)
        _, ctx1 = ram.channel1.attend(h[:, None], k, v)
        assert torch.allclose(ctx1[0, 0], ram.channel1.v_proj(v)[0, 0], atol=1e-12)
        _, ctx2 = ram.channel2.attend(h[:, None], v, k)
        assert torch.allclose(ctx2[0, 0], ram.channel2.v_proj(k)[0, 0], atol=1e-12)

    def test_identical_keys_mean_of_values(self):
        ram = make_ram()
        h = rand(1, 8, seed=1)
        keys = rand(1, 1, 8, seed=2).repeat(1, 4, 1)
        values = rand(1, 4, 8, seed=3)
        _, ctx = ram.channel1.attend(h[:, None], keys, values)
        assert torch.allclose(ctx[0, 0], ram.channel1.v_proj(values)[0].mean(0), atol=1e-12)

    def test_loop_oracles(self):
        ram = make_ram(seed=3)
        h, k, v = rand(1, 8, seed=4), rand(1, 4, 8, seed=5), rand(1, 4, 8, seed=6)
        c1 = channel_one(h, k, v, ram)[0].detach().numpy()
        c2 = channel_two(h, k, v, ram)[0].detach().numpy()
        hn, kn, vn = h.numpy(), k[0].numpy(), v[0].numpy()
        np.testing.assert_allclose(c1, naive_attention(hn, kn, vn, ram.channel1)[0], atol=1e-6)
        np.testing.assert_allclose(c2, naive_attention(hn, vn, kn, ram.channel2)[0], atol=1e-6)

    def test_swap_symmetry(self):
        ram, swapped = make_ram(seed=1), make_ram(seed=2)
        swapped.channel1.load_state_dict(ram.channel2.state_dict())
        swapped.channel2.load_state_dict(ram.channel1.state_dict())
        h, k, v = rand(2, 8, seed=1), rand(2, 3, 8, seed=2), rand(2, 3, 8, seed=3)
        assert torch.equal(channel_one(h, v, k, swapped), channel_two(h, k, v, ram))
        assert torch.equal(channel_two(h, v, k, swapped), channel_one(h, k, v, ram))

    def test_permutation_invariance(self):
        ram = make_ram()
        h, k, v = rand(1, 8, seed=1), rand(1, 5, 8, seed=2), rand(1, 5, 8, seed=3)
        perm = torch.tensor([3, 0, 4, 1, 2])
        for ch in (channel_one, channel_two):
            assert torch.allclose(ch(h, k, v, ram), ch(h, k[:, perm], v[:, perm], ram), atol=1e-12)

    def test_parameter_count_small(self):
        enc = make_encoder(num_items=12101, hidden=64, max_len=50, layers=2)
        ram = RetrievalAugmentedModule(64, 2)
        ratio = ram.num_parameters() / enc.num_parameters()
        print(f"\nRAM parameters: {ram.num_parameters()} = {100 * ratio:.2f}% of the backbone")
        assert ratio < 0.1


class TestFuse:
    def test_corners(self):
        h, c1, c2 = rand(3, 4, seed=1), rand(3, 4, seed=2), rand(3, 4, seed=3)
        assert torch.equal(fuse(h, c1, c2, 1.0, 0.3), h)
        assert torch.equal(fuse(h, c1, c2, 0.0, 1.0), c1)
        assert torch.equal(fuse(h, c1, c2, 0.0, 0.0), c2)

    def test_hand_values(self):
        h, c1, c2 = torch.tensor([1.0, 2.0]), torch.tensor([3.0, -1.0]), torch.tensor([0.0, 4.0])
        # 0.5*h + 0.5*(0.5*c1 + 0.5*c2)
        assert fuse(h, c1, c2, 0.5, 0.5).tolist() == [1.25, 1.75]

    def test_out_of_range(self):
        x = torch.zeros(2)
        for a, b in ((1.2, 0.5), (0.5, -0.1)):
            with pytest.raises(ValueError):
                fuse(x, x, x, a, b)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_score_linearity(self, a, b):
        h, c1, c2 = rand(8, seed=1), rand(8, seed=2), rand(8, seed=3)
        V = rand(20, 8, seed=4)
        lhs = fuse(h, c1, c2, a, b) @ V.T
        rhs = a * (h @ V.T) + (1 - a) * (b * (c1 @ V.T) + (1 - b) * (c2 @ V.T))
        assert torch.allclose(lhs, rhs, atol=1e-5)

    @given(st.floats(0, 1), st.floats(0, 1))
    def test_common_winner_stays_first(self, a, b):
        V = torch.eye(6, dtype=torch.float64)
        h = torch.tensor([0.1, 0.9, 0.3, 0.0, 0.2, 0.1], dtype=torch.float64)
        c1 = torch.tensor([0.0, 2.0, 1.0, 0.5, 0.0, 0.0], dtype=torch.float64)
        c2 = torch.tensor([0.3, 0.4, 0.1, 0.0, 0.0, 0.35], dtype=torch.float64)
        assert int((fuse(h, c1, c2, a, b) @ V.T).argmax()) == 1

    def test_config_validation(self):
        from raserec.numeric import ConfigError
        with pytest.raises(ConfigError):
            FusionConfig(topk=0).validate()


class TestRaft:
    def test_gradient_through_both_channels(self):
        enc = make_encoder()  # |V|=5, d=8, L=1
        ram = RetrievalAugmentedModule(8, 2, seed=1, precision=64, init_std=0.3)
        h = enc.encode([[1, 2, 3]]).detach()
        keys, values = rand(1, 2, 8, seed=1), enc.item_embeddings.weight.detach()[[0, 4]][None]
        mask = torch.ones(1, 2, dtype=torch.bool)
        V = enc.item_embeddings.weight.detach()

        def loss():
            h_aug = ram(h, keys, values, mask, 0.5, 0.6)
            return torch.nn.functional.cross_entropy(h_aug @ V.T, torch.tensor([4]))

        assert grad_check(loss, ram.named_parameters(), max_coords=300) < 1e-4

    def test_freeze_contract(self, pattern_split, setup):
        enc, bank, index, ckpt = setup
        before = {k: v.clone() for k, v in enc.state_dict().items()}
        bank_before = {k: v.copy() for k, v in bank.tensors().items()}
        cfg = RaftConfig(lr=0.01, batch_size=32, max_epochs=2, patience=2, seed=0)
        ram, res = raft_train(pattern_split, Retriever(enc, bank, index), ckpt, FusionConfig(0.5, 0.9, 5), cfg)
        assert len(res.history) == 2
        for k, v in enc.state_dict().items():
            assert torch.equal(v, before[k]), k
        for k, v in bank.tensors().items():
            assert v.tobytes() == bank_before[k].tobytes()
        assert not any(p.requires_grad for p in enc.parameters())

    def test_alpha_one_matches_backbone(self, pattern_split, setup):
        enc, bank, index, ckpt = setup
        cfg = RaftConfig(lr=0.01, batch_size=32, max_epochs=1, patience=1, seed=0)
        _, res = raft_train(pattern_split, Retriever(enc, bank, index), ckpt, FusionConfig(1.0, 0.9, 5), cfg)
        h = encode_eval(enc, [p.tolist() for p in pattern_split.valid.prefixes])
        ranks = target_ranks(enc.score(h), pattern_split.valid.targets)
        assert res.history[0].val_hr10 == hr_at_n(ranks, 10)
        assert res.history[0].val_ndcg10 == ndcg_at_n(ranks, 10)

    def test_mismatch_refused(self, pattern_split, setup):
        enc, bank, index, _ = setup
        with pytest.raises(CheckpointMismatchError):
            raft_train(pattern_split, Retriever(enc, bank, index), "deadbeef", FusionConfig(), RaftConfig())


class TestInference:
    def test_alpha_one_identical_to_backbone(self, pattern_split, setup):
        enc, bank, index, _ = setup
        ram = RetrievalAugmentedModule(16, 2, seed=0)
        rng = np.random.default_rng(0)
        prefixes = [rng.integers(pattern_split.num_items, size=int(rng.integers(1, 12))).tolist() for _ in range(100)]
        aug = augmented_scores(prefixes, Retriever(enc, bank, index), ram, FusionConfig(1.0, 0.9, 5))
        base = enc.score(encode_eval(enc, prefixes)).detach()
        assert aug.numpy().tobytes() == base.numpy().tobytes()

    def test_probe_all_equals_exhaustive(self, pattern_split, setup):
        enc, bank, index, _ = setup
        ram = RetrievalAugmentedModule(16, 2, seed=0, init_std=0.2)
        flat = IvfIndex(np.ones((1, 16)) / 4.0, [np.arange(len(bank))], exhaustive=True)
        fusion = FusionConfig(0.5, 0.9, 5)
        rng = np.random.default_rng(1)
        prefixes = [rng.integers(pattern_split.num_items, size=int(rng.integers(1, 12))).tolist() for _ in range(100)]
        a = augmented_infer(prefixes, Retriever(enc, bank, index, nprobe=index.k), ram, fusion)
        b = augmented_infer(prefixes, Retriever(enc, bank, flat), ram, fusion)
        for x, y in zip(a, b):
            assert x.items.tolist() == y.items.tolist()
            assert [t["entry"] for t in x.retrieved] == [t["entry"] for t in y.retrieved]

    def test_fallback_without_memories(self, pattern_split, setup):
        enc, bank, _, _ = setup
        empty = bank.subset(np.zeros(0, dtype=np.int64))
        index = build_ivf_index(empty, k=8)
        ram = RetrievalAugmentedModule(16, 2, seed=0)
        recs = augmented_infer([[1, 2], [3]], Retriever(enc, empty, index), ram, FusionConfig(0.5, 0.9, 5), top_n=4)
        base = enc.score(encode_eval(enc, [[1, 2], [3]])).detach().numpy()
        for r, row in zip(recs, base):
            assert r.fallback and r.retrieved == []
            assert r.items.tolist() == np.lexsort((np.arange(len(row)), -row))[:4].tolist()

    def test_trace(self, pattern_split, setup):
        enc, bank, index, _ = setup
        ram = RetrievalAugmentedModule(16, 2, seed=0)
        rec = augmented_infer([[0, 1, 2]], Retriever(enc, bank, index), ram, FusionConfig(0.5, 0.9, 3), top_n=5)[0]
        assert len(rec.items) == 5 and not rec.fallback
        assert 1 <= len(rec.retrieved) <= 3
        cos = [t["cosine"] for t in rec.retrieved]
        assert cos == sorted(cos, reverse=True)
        assert np.all(np.diff(rec.scores) <= 0)
