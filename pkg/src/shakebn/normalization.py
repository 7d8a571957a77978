"""Batch normalization with train/eval modes, configurable scale init, and
the affine-free centralizing variant used in front of the classifier."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _acc

__all__ = ["BatchNorm", "CCLHead", "ccl_transform", "ccl_logits", "softmax_xent"]


class BatchNorm:
    """Per-channel batch normalization.

    Train mode normalizes with current mini-batch statistics (population
    variance, pooled over batch and spatial axes) and updates running stats
    as running <- (1-momentum)*running + momentum*batch_stat. Eval mode uses
    running stats only and never mutates state.

    affine=False pins gamma to 1 and the shift to 0 (non-trainable); that is
    the centralizing transform used by the discriminative head.
    """

    def __init__(self, channels, affine=True, gamma0=1.0, momentum=0.1,
                 eps=1e-5, shift=True, dtype=np.float32):
        self.channels = int(channels)
        self.affine = bool(affine)
        self.gamma0 = 1.0 if not affine else float(gamma0)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.gamma = Tensor(np.full(channels, self.gamma0, dtype=dtype),
                            requires_grad=self.affine)
        # shift=False keeps gamma trainable but pins the shift at 0 (a bias
        # elsewhere supplies it, as in the recurrent cell)
        self.beta_shift = Tensor(np.zeros(channels, dtype=dtype),
                                 requires_grad=self.affine and bool(shift))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def _axes_and_bshape(self, x: Tensor):
        if x.data.ndim == 4:
            if x.shape[1] != self.channels:
                raise ShapeError(f"bn: input has {x.shape[1]} channels, state has {self.channels}")
            return (0, 2, 3), (1, self.channels, 1, 1)
        if x.data.ndim == 2:
            if x.shape[1] != self.channels:
                raise ShapeError(f"bn: input has {x.shape[1]} features, state has {self.channels}")
            return (0,), (1, self.channels)
        raise ShapeError(f"bn: expects 2-D or 4-D input, got {x.shape}")

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        if mode not in ("train", "eval"):
            raise ValueError(f"bn: unknown mode {mode!r}")
        axes, bshape = self._axes_and_bshape(x)
        gamma, beta = self.gamma, self.beta_shift
        gb = gamma.data.reshape(bshape)
        bb = beta.data.reshape(bshape)

        if mode == "train":
            m = int(np.prod([x.shape[a] for a in axes]))
            if m < 2:
                raise ShapeError("bn: train mode needs at least 2 values per channel")
            mean = x.data.mean(axis=axes)
            var = x.data.var(axis=axes)  # population variance
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
            y = gb * xhat + bb
            dt = self.running_mean.dtype.type
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean.astype(dt))
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var.astype(dt))
            out = Tensor(y.astype(x.dtype, copy=False), _prev=(x, gamma, beta), _op="bn_train")
            inv_b = inv_std.reshape(bshape)

            def bw(g):
                dxhat = g * gb
                mean_dxhat = dxhat.mean(axis=axes).reshape(bshape)
                mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes).reshape(bshape)
                _acc(x, inv_b * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat))
                if gamma.requires_grad:
                    _acc(gamma, (g * xhat).sum(axis=axes))
                if beta.requires_grad:
                    _acc(beta, g.sum(axis=axes))
            out._backward = bw
            return out

        inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
        xhat = (x.data - self.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
        y = gb * xhat + bb
        out = Tensor(y.astype(x.dtype, copy=False), _prev=(x, gamma, beta), _op="bn_eval")
        scale_b = (gb * inv_std.reshape(bshape))

        def bw(g):
            _acc(x, g * scale_b)
            if gamma.requires_grad:
                _acc(gamma, (g * xhat).sum(axis=axes))
            if beta.requires_grad:
                _acc(beta, g.sum(axis=axes))
        out._backward = bw
        return out

    def named_parameters(self, prefix=""):
        out = {}
        if self.gamma.requires_grad:
            out[prefix + "gamma"] = self.gamma
        if self.beta_shift.requires_grad:
            out[prefix + "beta"] = self.beta_shift
        return out

    def named_buffers(self, prefix=""):
        return {prefix + "running_mean": self.running_mean,
                prefix + "running_var": self.running_var}

    def load_buffers(self, prefix, table):
        self.running_mean = table[prefix + "running_mean"].copy()
        self.running_var = table[prefix + "running_var"].copy()


def ccl_transform(x: Tensor, state: BatchNorm, mode: str) -> Tensor:
    """Centralizing transform: batch normalization with the affine map disabled."""
    if state.affine:
        raise ValueError("ccl_transform: state must have affine disabled")
    return state(x, mode)


class CCLHead:
    """Classifier head scoring centralized features against unit class weights.

    logit[i, j] = phi_i . w_j / ||w_j||, i.e. ||phi_i|| * cos(angle between
    phi_i and class weight j); fed to ordinary softmax cross-entropy.
    """

    def __init__(self, dim, classes, rng, dtype=np.float32):
        self.dim = int(dim)
        self.classes = int(classes)
        w = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(classes, dim)).astype(dtype)
        self.class_weights = Tensor(w, requires_grad=True)

    def named_parameters(self, prefix=""):
        return {prefix + "class_weights": self.class_weights}


def ccl_logits(phi: Tensor, head: CCLHead) -> Tensor:
    if phi.data.ndim != 2 or phi.shape[1] != head.dim:
        raise ShapeError(f"ccl_logits: features {phi.shape} vs head dim {head.dim}")
    w = head.class_weights
    norms = np.linalg.norm(w.data, axis=1)
    if np.any(norms == 0):
        raise ValueError("ccl_logits: zero-norm class weight")
    what = w.data / norms[:, None]
    out = Tensor((phi.data @ what.T).astype(phi.dtype, copy=False),
                 _prev=(phi, w), _op="ccl_logits")

    def bw(g):
        _acc(phi, g @ what)
        s = g.T @ phi.data                      # (K, d) accumulated feature sums per class
        proj = (s * what).sum(axis=1, keepdims=True)
        _acc(w, (s - proj * what) / norms[:, None])
    out._backward = bw
    return out


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_xent: labels shape {labels.shape} vs batch {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"softmax_xent: label out of range [0, {k})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.dtype), _prev=(logits,), _op="xent")
    probs = np.exp(z - lse[:, None])

    def bw(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        _acc(logits, float(g) * d.astype(logits.dtype) / n)
    out._backward = bw
    return out
