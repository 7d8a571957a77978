"""Multi-branch residual blocks in five Conv/BN/ReLU layouts, and the
shaking-regularized ResNeXt-style network builder with an optional
low-dimensional embedding tap before the classifier head."""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .normalization import BatchNorm, CCLHead, ccl_logits, ccl_transform
from .shaking import ShakeConfig, shake_forward
from .tensor import Tensor

__all__ = ["LAYOUTS", "BranchSpec", "NetworkSpec", "Conv2d", "Linear",
           "Branch", "ResidualBlock", "Network", "build_block", "build_network"]

# Per-branch op order for each layout. The distinguishing property: exactly
# PreActBN and BNShake end with a BN immediately before the shake combination.
LAYOUTS = {
    "PostAct": ("conv1", "bn_a", "relu", "conv2", "bn_b"),
    "RPreAct": ("relu", "conv1", "bn_a", "relu", "conv2", "bn_b"),
    "PreAct": ("bn_a", "relu", "conv1", "bn_b", "relu", "conv2"),
    "PreActBN": ("bn_a", "relu", "conv1", "bn_b", "relu", "conv2", "bn_c"),
    "BNShake": ("relu", "conv1", "relu", "conv2", "bn_a"),
}

# Layouts whose trailing BN normalizes the whole branch output (the BN of
# X_{l+1} = sum_n alpha_n BN(f_n(X_l)) + X_l) rather than pairing with the
# second conv stage. PostAct/RPreAct also end in a BN, but there it belongs
# to the conv-BN unit of the residual function itself.
_OUTPUT_BN = {"PreActBN": "bn_c", "BNShake": "bn_a"}


@dataclass
class BranchSpec:
    groups: int = 1


@dataclass
class NetworkSpec:
    depth: int = 20
    cardinality: int = 2
    base_width: int = 4
    layout: str = "PreActBN"
    classes: int = 10
    in_channels: int = 1
    embed_dim: int | None = None
    head: str = "softmax"          # softmax | ccl
    gamma0: float = 1.0
    shake: ShakeConfig = field(default_factory=ShakeConfig)
    branch_spec: BranchSpec = field(default_factory=BranchSpec)

    def blocks_per_stage(self):
        if self.depth < 8 or (self.depth - 2) % 6:
            raise ValueError(f"depth {self.depth} not of the form 6n+2 for 3 stages of 2-conv blocks")
        return (self.depth - 2) // 6


class Conv2d:
    def __init__(self, cin, cout, rng, k=3, stride=1, pad=1, groups=1, dtype=np.float32):
        fan_in = (cin // groups) * k * k
        self.stride, self.pad, self.groups = stride, pad, groups
        self.weight = Tensor(T.he_normal(rng, (cout, cin // groups, k, k), fan_in, dtype),
                             requires_grad=True)

    def __call__(self, x):
        return T.conv2d(x, self.weight, stride=self.stride, pad=self.pad, groups=self.groups)

    def named_parameters(self, prefix=""):
        return {prefix + "weight": self.weight}


class Linear:
    def __init__(self, cin, cout, rng, dtype=np.float32):
        self.weight = Tensor(T.he_normal(rng, (cin, cout), cin, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix=""):
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


class Branch:
    """One residual branch: two 3x3 conv stages with layout-placed BN/ReLU."""

    def __init__(self, layout, in_ch, out_ch, stride, rng, groups=1,
                 gamma0=1.0, dtype=np.float32):
        self.layout = layout
        self.ops = LAYOUTS[layout]
        self.convs = {}
        self.bns = {}
        ch = in_ch
        for op in self.ops:
            if op == "conv1":
                self.convs[op] = Conv2d(in_ch, out_ch, rng, stride=stride,
                                        groups=groups, dtype=dtype)
                ch = out_ch
            elif op == "conv2":
                self.convs[op] = Conv2d(out_ch, out_ch, rng, groups=groups, dtype=dtype)
            elif op.startswith("bn"):
                self.bns[op] = BatchNorm(ch, gamma0=gamma0, dtype=dtype)

    @property
    def op_order(self):
        """Kind sequence for static layout inspection."""
        kinds = {"conv1": "Conv", "conv2": "Conv", "relu": "ReLU"}
        return tuple(kinds.get(op, "BN") for op in self.ops)

    def ends_with_bn(self):
        return self.op_order[-1] == "BN"

    @property
    def output_bn(self):
        """The BN normalizing the full branch output, when the layout has one."""
        return self.bns.get(_OUTPUT_BN.get(self.layout))

    def __call__(self, x, mode):
        y = x
        for op in self.ops:
            if op == "relu":
                y = T.relu(y)
            elif op.startswith("conv"):
                y = self.convs[op](y)
            else:
                y = self.bns[op](y, mode)
        return y

    def named_parameters(self, prefix=""):
        out = {}
        for name, conv in self.convs.items():
            out.update(conv.named_parameters(f"{prefix}{name}."))
        for name, bn in self.bns.items():
            out.update(bn.named_parameters(f"{prefix}{name}."))
        return out

    def batchnorms(self):
        return list(self.bns.values())


class Shortcut:
    """Identity, or a 1x1 stride-s conv + BN projection when shapes change."""

    def __init__(self, in_ch, out_ch, stride, rng, gamma0=1.0, dtype=np.float32):
        self.identity = stride == 1 and in_ch == out_ch
        if not self.identity:
            self.conv = Conv2d(in_ch, out_ch, rng, k=1, stride=stride, pad=0, dtype=dtype)
            self.bn = BatchNorm(out_ch, gamma0=gamma0, dtype=dtype)

    def __call__(self, x, mode):
        if self.identity:
            return x
        return self.bn(self.conv(x), mode)

    def named_parameters(self, prefix=""):
        if self.identity:
            return {}
        out = self.conv.named_parameters(prefix + "conv.")
        out.update(self.bn.named_parameters(prefix + "bn."))
        return out

    def batchnorms(self):
        return [] if self.identity else [self.bn]


class ResidualBlock:
    def __init__(self, layout, in_ch, out_ch, stride, shake_cfg, rng,
                 branch_spec=None, gamma0=1.0, dtype=np.float32):
        if layout not in LAYOUTS:
            raise ValueError(f"unknown layout {layout!r}")
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        branch_spec = branch_spec or BranchSpec()
        self.layout = layout
        self.shake = shake_cfg
        self.branches = [
            Branch(layout, in_ch, out_ch, stride, rng, groups=branch_spec.groups,
                   gamma0=gamma0, dtype=dtype)
            for _ in range(shake_cfg.n_branches)
        ]
        self.shortcut = Shortcut(in_ch, out_ch, stride, rng, gamma0=gamma0, dtype=dtype)

    def __call__(self, x, mode, rng=None, shake_frozen=None):
        outs = [b(x, mode) for b in self.branches]
        combined = shake_forward(outs, self.shake, mode, rng=rng, frozen=shake_frozen)
        y = T.add(self.shortcut(x, mode), combined)
        if self.layout == "PostAct":
            y = T.relu(y)
        return y

    def named_parameters(self, prefix=""):
        out = self.shortcut.named_parameters(prefix + "shortcut.")
        for i, b in enumerate(self.branches):
            out.update(b.named_parameters(f"{prefix}branch{i}."))
        return out

    def batchnorms(self):
        bns = self.shortcut.batchnorms()
        for b in self.branches:
            bns.extend(b.batchnorms())
        return bns


def build_block(layout, in_ch, out_ch, stride, shake_cfg, rng,
                branch_spec=None, gamma0=1.0, dtype=np.float32):
    return ResidualBlock(layout, in_ch, out_ch, stride, shake_cfg, rng,
                         branch_spec=branch_spec, gamma0=gamma0, dtype=dtype)


STEM_CHANNELS = 16


class Network:
    """Stem conv -> 3 stages of residual blocks (stride-2 transitions,
    channel doubling) -> global average pool -> optional embedding layer ->
    softmax or centralized-coordinate head."""

    def __init__(self, spec: NetworkSpec, rng, dtype=np.float32):
        self.spec = spec
        per_stage = spec.blocks_per_stage()
        shake = spec.shake
        if shake.n_branches != spec.cardinality:
            shake = ShakeConfig(n_branches=spec.cardinality,
                                forward_mode=shake.forward_mode,
                                backward_mode=shake.backward_mode,
                                granularity=shake.granularity,
                                subbands=shake.subbands,
                                p_off=shake.p_off)
        self.stem = Conv2d(spec.in_channels, STEM_CHANNELS, rng, dtype=dtype)
        self.stem_bn = BatchNorm(STEM_CHANNELS, gamma0=spec.gamma0, dtype=dtype) \
            if spec.layout == "PostAct" else None
        self.blocks = []
        in_ch = STEM_CHANNELS
        width = spec.base_width
        for stage in range(3):
            stride = 1 if stage == 0 else 2
            for i in range(per_stage):
                self.blocks.append(ResidualBlock(
                    spec.layout, in_ch, width, stride if i == 0 else 1, shake, rng,
                    branch_spec=spec.branch_spec, gamma0=spec.gamma0, dtype=dtype))
                in_ch = width
            width *= 2
        self.final_bn = None
        if spec.layout != "PostAct":
            self.final_bn = BatchNorm(in_ch, gamma0=spec.gamma0, dtype=dtype)
        feat = in_ch
        self.embed = Linear(feat, spec.embed_dim, rng, dtype=dtype) if spec.embed_dim else None
        head_in = spec.embed_dim or feat
        if spec.head == "ccl":
            self.head_bn = BatchNorm(head_in, affine=False, dtype=dtype)
            self.head = CCLHead(head_in, spec.classes, rng, dtype=dtype)
        elif spec.head == "softmax":
            self.head_bn = None
            self.head = Linear(head_in, spec.classes, rng, dtype=dtype)
        else:
            raise ValueError(f"unknown head {spec.head!r}")

    def forward(self, x: Tensor, mode, rng=None, return_embedding=False):
        y = self.stem(x)
        if self.stem_bn is not None:
            y = T.relu(self.stem_bn(y, mode))
        for block in self.blocks:
            y = block(y, mode, rng=rng)
        if self.final_bn is not None:
            y = T.relu(self.final_bn(y, mode))
        y = T.global_avg_pool(y)
        if return_embedding and self.embed is None:
            raise ValueError("network has no embedding tap (spec.embed_dim unset)")
        emb = self.embed(y) if self.embed is not None else y
        if isinstance(self.head, CCLHead):
            phi = ccl_transform(emb, self.head_bn, mode)
            logits = ccl_logits(phi, self.head)
        else:
            logits = self.head(emb)
        if return_embedding:
            return logits, emb
        return logits

    def __call__(self, x, mode, rng=None):
        return self.forward(x, mode, rng=rng)

    def named_parameters(self):
        out = self.stem.named_parameters("stem.")
        if self.stem_bn is not None:
            out.update(self.stem_bn.named_parameters("stem_bn."))
        for i, blk in enumerate(self.blocks):
            out.update(blk.named_parameters(f"block{i}."))
        if self.final_bn is not None:
            out.update(self.final_bn.named_parameters("final_bn."))
        if self.embed is not None:
            out.update(self.embed.named_parameters("embed."))
        if self.head_bn is not None:
            out.update(self.head_bn.named_parameters("head_bn."))
        out.update(self.head.named_parameters("head."))
        return out

    def batchnorms(self):
        bns = [] if self.stem_bn is None else [self.stem_bn]
        for blk in self.blocks:
            bns.extend(blk.batchnorms())
        if self.final_bn is not None:
            bns.append(self.final_bn)
        if self.head_bn is not None:
            bns.append(self.head_bn)
        return bns

    def named_buffers(self):
        out = {}
        for i, bn in enumerate(self.batchnorms()):
            out.update(bn.named_buffers(f"bn{i}."))
        return out

    def load_buffers(self, table):
        for i, bn in enumerate(self.batchnorms()):
            bn.load_buffers(f"bn{i}.", table)

    def parameter_count(self):
        return sum(p.size for p in self.named_parameters().values())

    @contextmanager
    def frozen_stats(self):
        """Run train-mode forwards without touching BN running statistics."""
        bns = self.batchnorms()
        saved = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in bns]
        try:
            yield
        finally:
            for bn, (m, v) in zip(bns, saved):
                bn.running_mean, bn.running_var = m, v


def build_network(spec: NetworkSpec, rng, dtype=np.float32) -> Network:
    return Network(spec, rng, dtype=dtype)
