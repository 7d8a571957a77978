"""Batch-normalized LSTM cell and sequence application."""
import numpy as np
import pytest

from shakebn import tensor as T
from shakebn.bnlstm import GATE_ORDER, BNLSTMCell, bnlstm_forward, bnlstm_step
from shakebn.tensor import ShapeError, Tensor


def make_cell(d=3, h=4, gamma0=0.1, seed=0, **kw):
    return BNLSTMCell(d, h, np.random.default_rng(seed), gamma0=gamma0,
                      dtype=np.float64, **kw)


def zero_cell(d=3, h=4):
    cell = make_cell(d, h)
    cell.w_x.data[:] = 0.0
    cell.w_h.data[:] = 0.0
    return cell


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def test_gate_order_convention():
    assert GATE_ORDER == ("f", "i", "o", "g")


def test_zero_cell_produces_zero_state():
    cell = zero_cell()
    h, c = cell.zero_state(5)
    h_t, c_t = bnlstm_step(cell, Tensor(rand((5, 3))), h, c, "train")
    assert np.allclose(c_t.data, 0.0)
    assert np.allclose(h_t.data, 0.0)


def test_large_forget_bias_carries_cell_state():
    cell = zero_cell()
    cell.bias.data[:4] = 50.0  # f gates sit first in the 4H partition
    c_prev = Tensor(rand((6, 4), seed=1))
    h_prev = Tensor(np.zeros((6, 4)))
    _, c_t = bnlstm_step(cell, Tensor(rand((6, 3))), h_prev, c_prev, "train")
    assert np.allclose(c_t.data, c_prev.data, atol=1e-12)


def test_gate_partition_roundtrip():
    gates = Tensor(rand((5, 16)))
    parts = T.split(gates, 4, axis=1)
    assert np.array_equal(T.concat(parts, axis=1).data, gates.data)


def test_cell_state_bounded_growth():
    cell = make_cell(seed=3)
    h, c = cell.zero_state(8)
    x = rand((8, 3), seed=4) * 5
    for t in range(6):
        prev_c = c.data.copy()
        h, c = bnlstm_step(cell, Tensor(x), h, c, "train", t=t)
        assert np.all(np.abs(c.data) <= np.abs(prev_c) + 1.0 + 1e-12)


def test_step_shape_validation():
    cell = make_cell()
    h, c = cell.zero_state(4)
    with pytest.raises(ShapeError):
        bnlstm_step(cell, Tensor(rand((4, 5))), h, c, "train")
    with pytest.raises(ShapeError):
        bnlstm_step(cell, Tensor(rand((4, 3))), Tensor(rand((4, 7))), c, "train")


def test_forward_t1_equals_single_step():
    cell = make_cell(seed=6)
    x = rand((1, 4, 3), seed=7)
    outs = bnlstm_forward(cell, Tensor(x), "train")
    cell2 = make_cell(seed=6)
    h0, c0 = cell2.zero_state(4)
    h1, _ = bnlstm_step(cell2, Tensor(x[0]), h0, c0, "train", t=0)
    assert len(outs) == 1
    assert np.allclose(outs[0].data, h1.data)


def test_forward_zero_weight_cell_all_zero():
    cell = zero_cell()
    outs = bnlstm_forward(cell, Tensor(rand((5, 4, 3))), "train")
    assert all(np.allclose(o.data, 0.0) for o in outs)


def test_forward_rejects_bad_rank_and_empty():
    cell = make_cell()
    with pytest.raises(ShapeError):
        bnlstm_forward(cell, Tensor(rand((4, 3))), "train")
    with pytest.raises(ShapeError):
        bnlstm_forward(cell, Tensor(np.zeros((0, 4, 3))), "train")


def test_eval_mode_pure_and_deterministic():
    cell = make_cell(seed=8)
    x = Tensor(rand((4, 5, 3), seed=9))
    first = [o.data.copy() for o in bnlstm_forward(cell, x, "eval")]
    stats = [bn.running_mean.copy() for bn in cell.batchnorms()]
    second = [o.data for o in bnlstm_forward(cell, x, "eval")]
    assert all(np.array_equal(a, b) for a, b in zip(first, second))
    assert all(np.array_equal(s, bn.running_mean)
               for s, bn in zip(stats, cell.batchnorms()))


def test_per_timestep_stats_shared_gamma():
    cell = make_cell(h=4, max_timesteps=3)
    bnlstm_forward(cell, Tensor(rand((3, 6, 3), seed=10)), "train")
    # statistics diverge across timesteps, but the scale parameter is shared
    assert not np.array_equal(cell.bn_x[0].running_mean, cell.bn_x[1].running_mean)
    assert cell.bn_x[0].gamma is cell.bn_x[1].gamma is cell.bn_x[2].gamma


def test_timesteps_beyond_max_reuse_last_stats():
    cell = make_cell(max_timesteps=2)
    x = Tensor(rand((4, 6, 3), seed=11))
    bnlstm_forward(cell, x, "train")
    # steps 2 and 3 fold into the last BN slot, so it saw three updates
    assert len(cell.bn_x) == 2


def test_gamma0_reaches_all_bns():
    cell = make_cell(gamma0=0.05)
    for bn in cell.batchnorms():
        assert np.all(bn.gamma.data == 0.05)


def test_gate_bns_carry_no_shift():
    cell = make_cell()
    assert not cell.bn_x[0].beta_shift.requires_grad
    assert not cell.bn_h[0].beta_shift.requires_grad
    assert cell.bn_c[0].beta_shift.requires_grad


def test_unrolled_gradient_matches_finite_differences():
    from shakebn.verify import gradcheck_cell
    errs = gradcheck_cell()
    assert max(errs.values()) < 1e-4
