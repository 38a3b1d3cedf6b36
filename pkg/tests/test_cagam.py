"""Channel and position attention against a direct numpy oracle."""
import math

import numpy as np
import pytest

from rendezvous.autodiff import Tensor, backward, ops
from rendezvous.cagam import CAGAM, ChannelAttention, PositionAttention, attention_to_csv, attention_to_json
from rendezvous.encoder import ModelConfig
from rendezvous.errors import DimensionError

CFG = ModelConfig(image_hw=(12, 16), depth=5, n_instruments=3, n_verbs=4, n_targets=6, n_triplets=7)


def conv1x1(x, conv):
    return x @ conv.weight.data[0, 0] + conv.bias.data


def softmax(z):
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def oracle(branch, x, h_i, kind):
    """Flattened HW x C_I matrices; channel uses Q^T K and V A, position Q K^T and A V."""
    H, W, _ = x.shape
    xz = conv1x1(x, branch.remap).reshape(H * W, -1)
    qc = conv1x1(xz, branch.q_ctx)
    kc = conv1x1(xz, branch.k_ctx)
    hf = h_i.reshape(H * W, -1)
    qd, kd = conv1x1(hf, branch.q_cam), conv1x1(hf, branch.k_cam)
    if kind == "channel":
        a = softmax((qd.T @ kd) * (qc.T @ kc) / math.sqrt(H * W))
        e = xz @ a
    else:
        a = softmax((qd @ kd.T) * (qc @ kc.T) / math.sqrt(xz.shape[1]))
        e = a @ xz
    return branch.beta.data[0] * e.reshape(H, W, -1) + xz.reshape(H, W, -1), a


@pytest.mark.parametrize("cls,kind", [(ChannelAttention, "channel"), (PositionAttention, "position")])
def test_branch_matches_oracle(cls, kind):
    rng = np.random.default_rng(0)
    branch = cls(CFG, rng)
    branch.beta.data[...] = 0.7
    H, W = CFG.feature_hw
    x, h = rng.normal(size=(H, W, 5)), rng.normal(size=(H, W, 3))
    out = branch(Tensor(x), Tensor(h))
    e, a = oracle(branch, x, h, kind)
    np.testing.assert_allclose(out.enhanced.data, e, atol=1e-12)
    np.testing.assert_allclose(out.attention.data, a, atol=1e-12)


def test_attention_shapes_and_row_sums():
    rng = np.random.default_rng(1)
    m = CAGAM(CFG, rng)
    H, W = CFG.feature_hw
    out = m(Tensor(rng.normal(size=(2, H, W, 5))), Tensor(rng.normal(size=(2, H, W, 5))),
            Tensor(rng.normal(size=(2, H, W, 3))))
    assert out["a_channel"].shape == (2, 3, 3)
    assert out["a_position"].shape == (2, H * W, H * W)
    for a in (out["a_channel"], out["a_position"]):
        np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-12)
    assert out["y_v"].shape == (2, 4) and out["y_t"].shape == (2, 6)
    assert out["h_v"].shape == (2, H, W, 4)


@pytest.mark.parametrize("cls", [ChannelAttention, PositionAttention])
def test_zero_beta_is_bit_identical_to_unguided_path(cls):
    guided = cls(CFG, np.random.default_rng(2))
    plain = cls(CFG, np.random.default_rng(2), guided=False)
    assert guided.beta.data[0] == 0.0
    rng = np.random.default_rng(3)
    H, W = CFG.feature_hw
    x, h = Tensor(rng.normal(size=(H, W, 5))), Tensor(rng.normal(size=(H, W, 3)))
    a, b = guided(x, h), plain(x, h)
    assert np.array_equal(a.enhanced.data, b.enhanced.data)
    assert b.attention is None


def test_beta_receives_gradient_through_the_enhancement():
    rng = np.random.default_rng(4)
    branch = PositionAttention(CFG, rng)
    H, W = CFG.feature_hw
    out = branch(Tensor(rng.normal(size=(H, W, 5))), Tensor(rng.normal(size=(H, W, 3))))
    backward(ops.sum(ops.mul(out.enhanced, Tensor(rng.normal(size=out.enhanced.shape)))))
    assert branch.beta.grad is not None and branch.beta.grad[0] != 0


def test_grid_and_channel_mismatches_raise():
    branch = ChannelAttention(CFG, np.random.default_rng(5))
    H, W = CFG.feature_hw
    with pytest.raises(DimensionError):
        branch(Tensor(np.zeros((H, W, 5))), Tensor(np.zeros((H, W + 1, 3))))
    with pytest.raises(DimensionError):
        branch(Tensor(np.zeros((H, W, 5))), Tensor(np.zeros((H, W, 2))))


def test_attention_exports():
    a = np.array([[0.25, 0.75], [1.0, 0.0]])
    assert attention_to_csv(a) == "0.25,0.75\n1.0,0.0\n"
    assert '"shape": [2, 2]' in attention_to_json(a)
    with pytest.raises(DimensionError):
        attention_to_csv(np.zeros((2, 2, 2)))


def test_single_instrument_channel_attention_is_one():
    cfg = ModelConfig(image_hw=(8, 8), depth=3, n_instruments=1)
    rng = np.random.default_rng(6)
    out = ChannelAttention(cfg, rng)(Tensor(rng.normal(size=(2, 2, 3))), Tensor(rng.normal(size=(2, 2, 1))))
    np.testing.assert_array_equal(out.attention.data, [[1.0]])


def scalar_loop_channel(branch, x, h):
    """Single-position channel branch evaluated element by element."""
    def conv(v, c):
        w, b = c.weight.data[0, 0], c.bias.data
        return [sum(v[i] * w[i][o] for i in range(len(v))) + b[o] for o in range(len(b))]
    xz = conv(x, branch.remap)
    qc, kc, qd, kd = conv(xz, branch.q_ctx), conv(xz, branch.k_ctx), conv(h, branch.q_cam), conv(h, branch.k_cam)
    n = len(xz)
    logits = [[qd[a] * kd[b] * qc[a] * kc[b] / branch.xi for b in range(n)] for a in range(n)]
    att = [[math.exp(v) / sum(math.exp(u) for u in row) for v in row] for row in logits]
    return [branch.beta.data[0] * sum(xz[a] * att[a][b] for a in range(n)) + xz[b] for b in range(n)]


def test_one_by_one_grid_channel_branch_matches_scalar_loop():
    cfg = ModelConfig(image_hw=(4, 4), depth=3, n_instruments=2)
    assert cfg.feature_hw == (1, 1)
    rng = np.random.default_rng(7)
    branch = ChannelAttention(cfg, rng)
    branch.beta.data[:] = 0.4
    x, h = rng.normal(size=3), rng.normal(size=2)
    out = branch(Tensor(x.reshape(1, 1, 3)), Tensor(h.reshape(1, 1, 2)))
    np.testing.assert_allclose(out.enhanced.data.reshape(-1), scalar_loop_channel(branch, x, h), atol=1e-12)


def test_two_by_one_grid_position_branch_matches_scalar_loop():
    cfg = ModelConfig(image_hw=(8, 4), depth=2, n_instruments=1)
    assert cfg.feature_hw == (2, 1)
    rng = np.random.default_rng(8)
    branch = PositionAttention(cfg, rng)
    branch.beta.data[:] = -0.6
    x, h = rng.normal(size=(2, 1, 2)), rng.normal(size=(2, 1, 1))
    out = branch(Tensor(x), Tensor(h))

    def c(v, conv):
        return float(v @ conv.weight.data[0, 0][:, 0] + conv.bias.data[0])

    xz = [c(x[p, 0], branch.remap) for p in range(2)]
    qd = [c(np.array([h[p, 0, 0]]), branch.q_cam) for p in range(2)]
    kd = [c(np.array([h[p, 0, 0]]), branch.k_cam) for p in range(2)]
    qc = [c(np.array([xz[p]]), branch.q_ctx) for p in range(2)]
    kc = [c(np.array([xz[p]]), branch.k_ctx) for p in range(2)]
    logits = [[qd[p] * kd[q] * qc[p] * kc[q] / 1.0 for q in range(2)] for p in range(2)]
    att = [[math.exp(v) / sum(math.exp(u) for u in row) for v in row] for row in logits]
    want = [-0.6 * sum(att[p][q] * xz[q] for q in range(2)) + xz[p] for p in range(2)]
    np.testing.assert_allclose(out.enhanced.data.reshape(-1), want, atol=1e-12)
