"""Finite-difference gradient checks across the layer/block/cell catalog.

Everything runs at 64-bit with stochastic shake coefficients frozen to
recorded values, so each check is a deterministic scalar function of its
input or of one parameter tensor.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .blocks import LAYOUTS, ResidualBlock
from .bnlstm import BNLSTMCell, bnlstm_step
from .normalization import BatchNorm, CCLHead, ccl_logits, softmax_xent
from .shaking import ShakeConfig, sample_simplex
from .tensor import Tensor, finite_diff_check

__all__ = ["gradcheck_layers", "gradcheck_blocks", "gradcheck_cell", "run_gradcheck"]

TOL = 1e-4


def _sq(y):
    return T.scale(T.tsum(T.mul(y, y)), 0.5)


def _param_check(f_of_param, param: Tensor, eps=1e-5):
    """Gradient check with respect to a parameter tensor.

    finite_diff_check differentiates w.r.t. its Tensor argument, so the
    wrapper swaps the candidate values into the parameter, rebuilds the graph,
    and routes the parameter's gradient back to the argument.
    """
    original = param.data

    def wrapped(p64):
        param.grad = None
        param.data = p64.data
        y = f_of_param()
        out = Tensor(y.data.copy(), _prev=(p64,))

        def bw(gg):
            T.backward(y)
            if param.grad is not None:
                from .tensor import _acc
                _acc(p64, param.grad * float(gg))
        out._backward = bw
        return out


    try:
        err = finite_diff_check(wrapped, Tensor(original.copy()), eps=eps)
    finally:
        param.data = original
        param.grad = None
    return err


def gradcheck_layers(rng=None):
    rng = rng or np.random.default_rng(11)
    results = {}

    x = Tensor(rng.normal(size=(3, 5)) + 0.1)
    results["relu"] = finite_diff_check(lambda t: _sq(T.relu(t)), x)
    results["sigmoid"] = finite_diff_check(lambda t: _sq(T.sigmoid(t)), x)
    results["tanh"] = finite_diff_check(lambda t: _sq(T.tanh(t)), x)

    b = Tensor(rng.normal(size=(3, 5)))
    results["add"] = finite_diff_check(lambda t: _sq(T.add(t, Tensor(b.data))), x)
    results["mul"] = finite_diff_check(lambda t: _sq(T.mul(t, Tensor(b.data))), x)
    results["scale"] = finite_diff_check(lambda t: _sq(T.scale(t, -1.7)), x)

    w = rng.normal(size=(5, 4))
    results["matmul"] = finite_diff_check(lambda t: _sq(T.matmul(t, Tensor(w))), x)
    xm = Tensor(rng.normal(size=(4, 5)))
    results["matmul_rhs"] = finite_diff_check(
        lambda t: _sq(T.matmul(Tensor(xm.data), t)), Tensor(w))

    xc = Tensor(rng.normal(size=(2, 4, 6, 6)))
    k = rng.normal(size=(6, 2, 3, 3))
    results["conv2d_input"] = finite_diff_check(
        lambda t: _sq(T.conv2d(t, Tensor(k), stride=2, pad=1, groups=2)), xc)
    results["conv2d_kernel"] = finite_diff_check(
        lambda t: _sq(T.conv2d(Tensor(xc.data), t, stride=2, pad=1, groups=2)), Tensor(k))

    results["global_avg_pool"] = finite_diff_check(lambda t: _sq(T.global_avg_pool(t)), xc)
    results["avg_pool2x2"] = finite_diff_check(lambda t: _sq(T.avg_pool2x2(t)), xc)

    bn = BatchNorm(4, gamma0=0.7, dtype=np.float64)
    bn.gamma.data = rng.normal(size=4) + 1.0
    bn.beta_shift.data = rng.normal(size=4)
    results["bn_train_input"] = finite_diff_check(lambda t: _sq(bn(t, "train")), xc)
    results["bn_train_gamma"] = _param_check(
        lambda: _sq(bn(Tensor(xc.data.copy()), "train")), bn.gamma)
    bn.running_mean = rng.normal(size=4)
    bn.running_var = rng.random(4) + 0.5
    results["bn_eval_input"] = finite_diff_check(lambda t: _sq(bn(t, "eval")), xc)

    labels = rng.integers(0, 4, size=6)
    xl = Tensor(rng.normal(size=(6, 4)))
    results["softmax_xent"] = finite_diff_check(lambda t: softmax_xent(t, labels), xl)

    head = CCLHead(5, 3, rng, dtype=np.float64)
    labels3 = rng.integers(0, 3, size=3)
    results["ccl_logits_phi"] = finite_diff_check(
        lambda t: softmax_xent(ccl_logits(t, head), labels3), x)
    results["ccl_logits_weights"] = _param_check(
        lambda: softmax_xent(ccl_logits(Tensor(x.data.copy()), head),
                             np.array([0, 1, 2])),
        head.class_weights)
    return results


def _frozen_coeffs(cfg, batch, height, rng):
    rows = batch if cfg.granularity == "per_image" else 1
    coef = np.empty((rows, cfg.subbands, cfg.n_branches))
    for band in range(cfg.subbands):
        for r in range(rows):
            coef[r, band] = sample_simplex(cfg.n_branches, rng)
    return {"alpha": coef, "beta": coef}


def gradcheck_blocks(rng=None):
    """Frozen-coefficient train-mode forward of each layout, including the
    downsampling shortcut, checked against finite differences."""
    rng = rng or np.random.default_rng(23)
    results = {}
    cfg = ShakeConfig(n_branches=2, granularity="per_image", subbands=2)
    for layout in LAYOUTS:
        block = ResidualBlock(layout, 3, 4, 2, cfg, rng, gamma0=0.5, dtype=np.float64)
        x = Tensor(rng.normal(size=(3, 3, 8, 8)))
        frozen = _frozen_coeffs(cfg, 3, 4, rng)

        def f(t, block=block, frozen=frozen):
            return _sq(block(t, "train", shake_frozen=frozen))
        results[f"{layout}_input"] = finite_diff_check(f, x)
        weight = block.branches[0].convs["conv1"].weight
        results[f"{layout}_weight"] = _param_check(
            lambda block=block, frozen=frozen, x=x:
                _sq(block(Tensor(x.data.copy()), "train", shake_frozen=frozen)),
            weight)
    return results


def gradcheck_cell(rng=None):
    """Three unrolled steps of the batch-normalized LSTM in train mode."""
    rng = rng or np.random.default_rng(37)
    cell = BNLSTMCell(3, 4, rng, gamma0=0.3, max_timesteps=4, dtype=np.float64)
    seq = rng.normal(size=(3, 4, 3))  # T=3, batch=4, dim=3

    def unrolled(x):
        h, c = cell.zero_state(4)
        steps = T.split(x, 3, axis=0)
        for t in range(3):
            x_t = T.reshape(steps[t], (4, 3))
            h, c = bnlstm_step(cell, x_t, h, c, "train", t=t)
        return _sq(h)

    results = {"bnlstm_input": finite_diff_check(unrolled, Tensor(seq))}
    for name in ("w_x", "w_h", "bias"):
        param = getattr(cell, name)
        results[f"bnlstm_{name}"] = _param_check(
            lambda seq=seq: unrolled(Tensor(seq.copy())), param)
    results["bnlstm_bn_x_gamma"] = _param_check(
        lambda seq=seq: unrolled(Tensor(seq.copy())), cell.bn_x[0].gamma)
    return results


def run_gradcheck(target="all"):
    """Returns {name: max relative error}; caller compares against TOL."""
    results = {}
    if target in ("all", "layer"):
        results.update(gradcheck_layers())
    if target in ("all", "block"):
        results.update(gradcheck_blocks())
    if target in ("all", "cell"):
        results.update(gradcheck_cell())
    if not results:
        raise ValueError(f"run_gradcheck: unknown target {target!r}")
    return results
