"""N-branch shaking: stochastic convex combination of branch outputs with
independently sampled forward and backward coefficients.

Granularity is per mini-batch or per image; coefficients may additionally be
drawn independently per contiguous sub-band of the feature-map height axis.
Inference replaces the random combination with the exact branch mean.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _acc, split

__all__ = ["ShakeConfig", "sample_simplex", "stochastic_gate",
           "shake_forward", "subband_split"]

SUBBAND_AXIS = 2  # feature-map height (frequency axis for spectrogram-like input)


@dataclass
class ShakeConfig:
    n_branches: int = 2
    forward_mode: str = "shake"    # shake | even
    backward_mode: str = "shake"   # shake | even | keep
    granularity: str = "per_image"  # per_image | per_batch
    subbands: int = 1
    p_off: float = 0.0

    def __post_init__(self):
        if self.n_branches < 1:
            raise ValueError("n_branches must be >= 1")
        if self.forward_mode not in ("shake", "even"):
            raise ValueError(f"unknown forward_mode {self.forward_mode!r}")
        if self.backward_mode not in ("shake", "even", "keep"):
            raise ValueError(f"unknown backward_mode {self.backward_mode!r}")
        if self.granularity not in ("per_image", "per_batch"):
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.subbands < 1:
            raise ValueError("subbands must be >= 1")
        if not 0.0 <= self.p_off <= 1.0:
            raise ValueError("p_off must lie in [0, 1]")


def sample_simplex(n, rng):
    """Uniform sample on the (n-1)-simplex via sorted uniform gaps.

    n=2 reduces to [u, 1-u] with u ~ Uniform[0,1).
    """
    if n < 1:
        raise ValueError("sample_simplex: n must be >= 1")
    if n == 1:
        return np.ones(1)
    cuts = np.sort(rng.random(n - 1))
    return np.diff(np.concatenate(([0.0], cuts, [1.0])))


def stochastic_gate(cfg: ShakeConfig, rng):
    """Decide whether shaking is active for this step.

    Off with probability p_off; gated-off steps use even coefficients in both
    directions. p_off=0 consumes no RNG draw.
    """
    if cfg.p_off == 0.0:
        return "on"
    return "off" if rng.random() < cfg.p_off else "on"


def _band_layout(shape, cfg: ShakeConfig):
    """(rows, bands, band extent broadcast shape builder) for the input shape."""
    if len(shape) == 4:
        batch, _, h, _ = shape
        if h % cfg.subbands:
            raise ShapeError(f"subbands={cfg.subbands} does not divide height {h}")
        bands = cfg.subbands
    elif len(shape) == 2:
        if cfg.subbands != 1:
            raise ShapeError("sub-band shaking needs 4-D feature maps")
        batch, bands = shape[0], 1
    else:
        raise ShapeError(f"shake_forward: expects 2-D or 4-D branches, got {shape}")
    rows = batch if cfg.granularity == "per_image" else 1
    return rows, bands


def _draw(n, rows, bands, rng):
    coef = np.empty((rows, bands, n))
    for b in range(bands):
        for r in range(rows):
            coef[r, b] = sample_simplex(n, rng)
    return coef


def _masks(coef, shape, dtype):
    """Expand (rows, bands, n) coefficients to one broadcastable mask per branch."""
    rows, bands, n = coef.shape
    if len(shape) == 4:
        h = shape[2]
        per_band = np.repeat(coef, h // bands, axis=1)     # (rows, h, n)
        return [per_band[:, :, k].reshape(rows, 1, h, 1).astype(dtype) for k in range(n)]
    return [coef[:, 0, k].reshape(rows, 1).astype(dtype) for k in range(n)]


def shake_forward(branches, cfg: ShakeConfig, mode, rng=None, frozen=None,
                  record=None):
    """Combine branch tensors.

    Train mode: output = sum_n alpha_n * branch_n with alpha drawn per step /
    image / sub-band; backward scales the upstream gradient by independently
    drawn beta (backward_mode=shake), the recorded alpha (keep), or 1/N (even).
    Eval mode: the exact arithmetic mean, no RNG consumed.

    frozen may carry precomputed {"alpha": ..., "beta": ...} coefficient arrays
    of shape (rows, bands, N) to make the step deterministic (gradient checks,
    decoupling tests). record, if given, is filled with the coefficients used.
    """
    branches = list(branches)
    n = len(branches)
    if n != cfg.n_branches:
        raise ShapeError(f"shake_forward: got {n} branches, config says {cfg.n_branches}")
    shape = branches[0].shape
    for b in branches[1:]:
        if b.shape != shape:
            raise ShapeError(f"shake_forward: branch shapes differ, {shape} vs {b.shape}")
    rows, bands = _band_layout(shape, cfg)
    dtype = branches[0].dtype

    if mode == "eval":
        fwd, bwd = "even", "even"
    elif mode == "train":
        if frozen is None and stochastic_gate(cfg, rng) == "off":
            fwd, bwd = "even", "even"
        else:
            fwd, bwd = cfg.forward_mode, cfg.backward_mode
    else:
        raise ValueError(f"shake_forward: unknown mode {mode!r}")

    even_coef = np.full((rows, bands, n), 1.0 / n)
    if fwd == "shake":
        alpha = frozen["alpha"] if frozen is not None else _draw(n, rows, bands, rng)
    else:
        alpha = even_coef
    if bwd == "shake":
        if frozen is not None:
            beta = frozen.get("beta", alpha)
        else:
            beta = _draw(n, rows, bands, rng)
    elif bwd == "keep":
        beta = alpha
    else:
        beta = even_coef
    if record is not None:
        record.update(alpha=alpha, beta=beta, forward=fwd, backward=bwd)

    if fwd == "even":
        # exact arithmetic mean in fixed order: branch-averaging at inference
        acc = branches[0].data.copy()
        for b in branches[1:]:
            acc += b.data
        acc /= n
        y = acc
    else:
        amasks = _masks(alpha, shape, dtype)
        y = amasks[0] * branches[0].data
        for k in range(1, n):
            y = y + amasks[k] * branches[k].data

    out = Tensor(y.astype(dtype, copy=False), _prev=tuple(branches), _op="shake")

    if bwd == "even":
        inv_n = 1.0 / n

        def bw(g):
            for b in branches:
                _acc(b, g * inv_n)
    else:
        bmasks = _masks(beta, shape, dtype)

        def bw(g):
            for k, b in enumerate(branches):
                _acc(b, g * bmasks[k])
    out._backward = bw
    return out


def subband_split(x: Tensor, n_bands, axis=SUBBAND_AXIS):
    """Split a feature map into contiguous equal sub-bands; concat restores x."""
    return split(x, n_bands, axis)
