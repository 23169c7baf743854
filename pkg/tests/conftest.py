import math

import numpy as np
import pytest
import torch

from raserec.data import leave_one_out_split
from raserec.encoder import EncoderConfig, SeqEncoder
from raserec.memory import MemoryBank
from raserec.synthetic import cyclic_pattern_log


def make_encoder(num_items=5, hidden=8, layers=1, heads=2, max_len=10, precision=64, dropout=0.0, seed=0):
    cfg = EncoderConfig(num_items=num_items, hidden=hidden, max_len=max_len, layers=layers, heads=heads,
                        dropout=dropout, attn_dropout=dropout, inner=4 * hidden, precision=precision)
    return SeqEncoder(cfg, seed=seed)


def random_bank(n, d, seed=0, checkpoint_id="ckpt"):
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(n, d))
    return MemoryBank(
        keys=keys,
        values=rng.normal(size=(n, d)),
        targets=rng.integers(50, size=n),
        timestamps=rng.integers(1000, size=n),
        users=np.arange(n, dtype=np.int64),
        steps=np.ones(n, dtype=np.int64),
        prefix_lens=rng.integers(1, 12, size=n),
        checkpoint_id=checkpoint_id,
    )


def naive_attention(q_in, k_in, v_in, mha, causal=False):
    """Per-head, per-query loops in numpy."""
    Wq, bq = mha.q_proj.weight.detach().numpy(), mha.q_proj.bias.detach().numpy()
    Wk, bk = mha.k_proj.weight.detach().numpy(), mha.k_proj.bias.detach().numpy()
    Wv, bv = mha.v_proj.weight.detach().numpy(), mha.v_proj.bias.detach().numpy()
    Wo, bo = mha.out_proj.weight.detach().numpy(), mha.out_proj.bias.detach().numpy()
    q, k, v = q_in @ Wq.T + bq, k_in @ Wk.T + bk, v_in @ Wv.T + bv
    hd = mha.head_dim
    out = np.zeros((len(q_in), mha.d))
    for h in range(mha.heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(len(q_in)):
            limit = i + 1 if causal else len(k_in)
            s = np.array([q[i, sl] @ k[j, sl] / math.sqrt(hd) for j in range(limit)])
            w = np.exp(s - s.max())
            w /= w.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(limit))
    return out @ Wo.T + bo


@pytest.fixture
def tiny_encoder():
    return make_encoder()


@pytest.fixture
def pattern_split():
    return leave_one_out_split(cyclic_pattern_log(num_users=60, cycles=3, seed=3))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
