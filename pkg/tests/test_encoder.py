import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from raserec.data import truncate_sequence
from raserec.encoder import EncoderConfig, SeqEncoder, embed_sequence, encode_eval, score_items, seq_enc
from raserec.numeric import ConfigError

from conftest import make_encoder


class TestEmbed:
    def test_zero_tables(self, tiny_encoder):
        with torch.no_grad():
            tiny_encoder.item_embeddings.weight.zero_()
            tiny_encoder.position_embeddings.weight.zero_()
        assert torch.all(embed_sequence([1, 2, 3], tiny_encoder) == 0)

    def test_single_item_right_aligned(self, tiny_encoder):
        V = tiny_encoder.item_embeddings.weight
        P = tiny_encoder.position_embeddings.weight
        out = embed_sequence([3], tiny_encoder)
        assert torch.equal(out[0], V[3] + P[-1])

    def test_elementwise_oracle(self, tiny_encoder):
        V = tiny_encoder.item_embeddings.weight.detach().numpy()
        P = tiny_encoder.position_embeddings.weight.detach().numpy()
        prefix = [4, 0, 2]
        T = tiny_encoder.cfg.max_len
        expected = np.stack([V[item] + P[T - len(prefix) + i] for i, item in enumerate(prefix)])
        np.testing.assert_array_equal(embed_sequence(prefix, tiny_encoder).detach().numpy(), expected)

    def test_out_of_range(self, tiny_encoder):
        with pytest.raises(IndexError):
            embed_sequence([5], tiny_encoder)
        with pytest.raises(IndexError):
            embed_sequence([-1], tiny_encoder)


class TestSeqEnc:
    def test_empty_prefix(self, tiny_encoder):
        with pytest.raises(ValueError):
            seq_enc([], tiny_encoder)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            SeqEncoder(EncoderConfig(num_items=5, hidden=9, heads=2))

    def test_zero_layers_is_embedding(self):
        enc = make_encoder(layers=0)
        prefix = [1, 4, 2]
        assert torch.equal(seq_enc(prefix, enc), embed_sequence(prefix, enc)[-1])

    def test_causality_in_hidden_states(self):
        enc = make_encoder(num_items=20, hidden=16, layers=2, max_len=12).eval()
        rng = np.random.default_rng(0)
        for _ in range(10):
            items = rng.integers(20, size=8)
            t = int(rng.integers(1, 8))
            other = items.copy()
            other[t:] = rng.integers(20, size=8 - t)
            with torch.no_grad():
                a = enc.hidden_states(torch.tensor(items)[None])
                b = enc.hidden_states(torch.tensor(other)[None])
            assert torch.equal(a[0, :t], b[0, :t])

    def test_deterministic_two_layer(self):
        a = seq_enc([1, 2, 3, 4, 0], make_encoder(layers=2, seed=9))
        b = seq_enc([1, 2, 3, 4, 0], make_encoder(layers=2, seed=9))
        assert torch.equal(a, b)

    def test_train_mode_uses_dropout(self):
        enc = make_encoder(dropout=0.5)
        g = torch.Generator().manual_seed(0)
        a = seq_enc([1, 2, 3], enc, train_mode=True, generator=g)
        b = seq_enc([1, 2, 3], enc, train_mode=True, generator=g)
        assert not torch.equal(a, b)
        assert torch.equal(seq_enc([1, 2, 3], enc), seq_enc([1, 2, 3], enc))

    def test_truncation_consistency(self):
        enc = make_encoder(num_items=30, hidden=16, max_len=6, layers=2)
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = rng.integers(30, size=int(rng.integers(7, 15))).tolist()
            assert torch.equal(seq_enc(p, enc), seq_enc(truncate_sequence(p, 6), enc))

    def test_batched_equals_single(self):
        enc = make_encoder(num_items=30, hidden=16, max_len=10, layers=2, precision=32)
        rng = np.random.default_rng(2)
        prefixes = [rng.integers(30, size=int(rng.integers(1, 12))).tolist() for _ in range(40)]
        batch = encode_eval(enc, prefixes)
        for i, p in enumerate(prefixes):
            assert torch.equal(batch[i], seq_enc(p, enc))

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=1, max_size=10))
    def test_finite(self, prefix):
        enc = make_encoder(precision=32)
        assert torch.isfinite(seq_enc(prefix, enc)).all()


class TestScore:
    def test_orthonormal_self_similarity(self):
        enc = make_encoder(num_items=5, hidden=8)
        q, _ = torch.linalg.qr(torch.randn(8, 8, dtype=torch.float64))
        with torch.no_grad():
            enc.item_embeddings.weight.copy_(q[:5])
        for j in range(5):
            assert int(score_items(enc.item_embeddings.weight[j], enc).argmax()) == j

    def test_zero(self, tiny_encoder):
        assert torch.all(score_items(torch.zeros(8, dtype=torch.float64), tiny_encoder) == 0)

    def test_loop_oracle(self, tiny_encoder):
        h = torch.randn(8, dtype=torch.float64)
        V = tiny_encoder.item_embeddings.weight.detach()
        expected = [sum(float(h[k]) * float(V[i, k]) for k in range(8)) for i in range(5)]
        np.testing.assert_allclose(score_items(h, tiny_encoder).detach().numpy(), expected, atol=1e-5)
