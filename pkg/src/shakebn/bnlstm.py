"""Batch-normalized LSTM cell.

Gate pre-activations are BN(W_x x_t) + BN(W_h h_{t-1}) + b, the cell update
is sigma(f) * c_prev + sigma(i) * tanh(g), and the output is
sigma(o) * tanh(BN(c_t)). Normalization statistics are kept per timestep for
the first max_timesteps steps (shared gamma/beta); the scale initialization
gamma0 is the knob under study.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .normalization import BatchNorm
from .tensor import ShapeError, Tensor

__all__ = ["BNLSTMCell", "bnlstm_step", "bnlstm_forward"]

GATE_ORDER = ("f", "i", "o", "g")


def _shared_bn_stack(channels, count, gamma0, shift, dtype):
    """Per-timestep BN states sharing one gamma/beta parameter pair."""
    stack = [BatchNorm(channels, gamma0=gamma0, shift=shift, dtype=dtype)
             for _ in range(count)]
    for bn in stack[1:]:
        bn.gamma = stack[0].gamma
        bn.beta_shift = stack[0].beta_shift
    return stack


class BNLSTMCell:
    def __init__(self, input_dim, hidden, rng, gamma0=0.1, max_timesteps=32,
                 dtype=np.float32):
        self.input_dim = int(input_dim)
        self.hidden = int(hidden)
        self.max_timesteps = int(max_timesteps)
        self.dtype = dtype
        d, h = self.input_dim, self.hidden
        self.w_x = Tensor(T.he_normal(rng, (d, 4 * h), d, dtype), requires_grad=True)
        self.w_h = Tensor(T.he_normal(rng, (h, 4 * h), h, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(4 * h, dtype=dtype), requires_grad=True)
        # b supplies the shift for the gate pre-activations, so bn_x/bn_h carry
        # gamma only; bn_c keeps its own shift
        self.bn_x = _shared_bn_stack(4 * h, self.max_timesteps, gamma0, False, dtype)
        self.bn_h = _shared_bn_stack(4 * h, self.max_timesteps, gamma0, False, dtype)
        self.bn_c = _shared_bn_stack(h, self.max_timesteps, gamma0, True, dtype)

    def zero_state(self, batch):
        z = np.zeros((batch, self.hidden), dtype=self.dtype)
        return Tensor(z.copy()), Tensor(z.copy())

    def named_parameters(self, prefix=""):
        return {
            prefix + "w_x": self.w_x,
            prefix + "w_h": self.w_h,
            prefix + "bias": self.bias,
            prefix + "bn_x.gamma": self.bn_x[0].gamma,
            prefix + "bn_h.gamma": self.bn_h[0].gamma,
            prefix + "bn_c.gamma": self.bn_c[0].gamma,
            prefix + "bn_c.beta": self.bn_c[0].beta_shift,
        }

    def batchnorms(self):
        return list(self.bn_x) + list(self.bn_h) + list(self.bn_c)


def bnlstm_step(cell: BNLSTMCell, x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
                mode, t=0):
    if x_t.shape[1] != cell.input_dim:
        raise ShapeError(f"bnlstm_step: input dim {x_t.shape[1]} vs cell {cell.input_dim}")
    if h_prev.shape != c_prev.shape or h_prev.shape[1] != cell.hidden:
        raise ShapeError(f"bnlstm_step: state shapes {h_prev.shape}/{c_prev.shape} "
                         f"vs hidden {cell.hidden}")
    ti = min(t, cell.max_timesteps - 1)
    gates = T.add_rowvec(
        T.add(cell.bn_x[ti](T.matmul(x_t, cell.w_x), mode),
              cell.bn_h[ti](T.matmul(h_prev, cell.w_h), mode)),
        cell.bias)
    f, i, o, g = T.split(gates, 4, axis=1)
    c_t = T.add(T.mul(T.sigmoid(f), c_prev), T.mul(T.sigmoid(i), T.tanh(g)))
    h_t = T.mul(T.sigmoid(o), T.tanh(cell.bn_c[ti](c_t, mode)))
    return h_t, c_t


def bnlstm_forward(cell: BNLSTMCell, sequence: Tensor, mode):
    """Iterate the cell over a (T, batch, input_dim) sequence from zero state."""
    if sequence.data.ndim != 3:
        raise ShapeError(f"bnlstm_forward: expects (T, batch, dim), got {sequence.shape}")
    steps = sequence.shape[0]
    if steps < 1:
        raise ShapeError("bnlstm_forward: empty sequence")
    h, c = cell.zero_state(sequence.shape[1])
    outputs = []
    xs = T.split(sequence, steps, axis=0)
    for t in range(steps):
        x_t = T.reshape(xs[t], sequence.shape[1:])
        h, c = bnlstm_step(cell, x_t, h, c, mode, t=t)
        outputs.append(h)
    return outputs
