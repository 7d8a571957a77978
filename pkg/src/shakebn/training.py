"""SGD training loop with cosine learning-rate schedule, unweighted accuracy,
generalization-gap reporting, metrics CSV, and a versioned binary checkpoint."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import NetworkSpec, build_network
from .data_io import Dataset, minibatches
from .normalization import softmax_xent
from .tensor import ShapeError

__all__ = ["TrainConfig", "RunMetrics", "cosine_lr", "sgd_step", "SGDState",
           "unweighted_accuracy", "predict", "train_run",
           "metrics_csv", "save_checkpoint", "load_checkpoint"]

log = logging.getLogger(__name__)


def cosine_lr(t, total, lr0):
    """lr = 0.5 * lr0 * (1 + cos(pi * t / total)), annealing lr0 -> 0."""
    if t < 0 or t > total:
        raise ValueError(f"cosine_lr: step {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + np.cos(np.pi * t / total))


@dataclass
class TrainConfig:
    epochs: int = 20
    batch: int = 32
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    augment: str = "none"


class SGDState:
    def __init__(self, params, lr0, momentum=0.9, weight_decay=1e-4):
        self.lr0 = lr0
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}


def sgd_step(params, opt: SGDState, lr):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v."""
    for name, p in params.items():
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"sgd_step: grad shape {p.grad.shape} vs param {p.data.shape} ({name})")
        v = opt.velocity[name]
        v *= opt.momentum
        v += p.grad
        if opt.weight_decay:
            v += opt.weight_decay * p.data
        p.data -= (lr * v).astype(p.data.dtype, copy=False)


def unweighted_accuracy(preds, labels, class_count):
    """Mean per-class recall in percent; absent classes are excluded."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("unweighted_accuracy: empty input")
    if labels.min() < 0 or labels.max() >= class_count:
        raise ValueError("unweighted_accuracy: label out of range")
    recalls = []
    absent = []
    for k in range(class_count):
        mask = labels == k
        if not mask.any():
            absent.append(k)
            continue
        recalls.append(float((preds[mask] == k).mean()))
    if absent:
        log.info("unweighted_accuracy: classes %s absent from labels, excluded", absent)
    return 100.0 * float(np.mean(recalls))


def predict(network, ds: Dataset, batch=256):
    out = np.empty(len(ds), dtype=np.int64)
    for start in range(0, len(ds), batch):
        x = T.Tensor(ds.images[start:start + batch])
        logits = network.forward(x, "eval")
        out[start:start + batch] = logits.data.argmax(axis=1)
    return out


@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)  # per-epoch dicts

    @property
    def final(self):
        return self.rows[-1]

    @property
    def train_ua(self):
        return self.final["train_ua"]

    @property
    def valid_ua(self):
        return self.final["valid_ua"]

    @property
    def gap(self):
        return self.final["gap"]


METRIC_FIELDS = ("epoch", "lr", "train_loss", "train_ua", "valid_ua", "gap")


def metrics_csv(metrics: RunMetrics):
    lines = [",".join(METRIC_FIELDS)]
    for row in metrics.rows:
        lines.append(",".join(
            str(row["epoch"]) if f == "epoch" else format(row[f], ".10g")
            for f in METRIC_FIELDS))
    return "\n".join(lines) + "\n"


def _evaluate(network, train_ds, valid_ds, class_count):
    train_ua = unweighted_accuracy(predict(network, train_ds), train_ds.labels, class_count)
    valid_ua = unweighted_accuracy(predict(network, valid_ds), valid_ds.labels, class_count)
    return train_ua, valid_ua, train_ua - valid_ua


def train_run(spec: NetworkSpec, train_ds: Dataset, valid_ds: Dataset,
              cfg: TrainConfig, seed, dtype=np.float32, network=None):
    """Train one seed; returns (RunMetrics, network).

    Deterministic: init, shuffling and shake draws all derive from the seed.
    epochs=0 reports metrics from the freshly initialized model.
    """
    if len(train_ds) and train_ds.images.shape[1] != spec.in_channels:
        raise ValueError(f"dataset has {train_ds.images.shape[1]} channels, "
                         f"spec expects {spec.in_channels}")
    init_rng = np.random.default_rng(seed)
    shake_rng = np.random.default_rng(seed + 7_919)
    if network is None:
        network = build_network(spec, init_rng, dtype=dtype)
    params = network.named_parameters()
    opt = SGDState(params, cfg.lr0, cfg.momentum, cfg.weight_decay)

    steps_per_epoch = max(1, len(train_ds) // cfg.batch + (len(train_ds) % cfg.batch > 0))
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    metrics = RunMetrics()

    if cfg.epochs == 0:
        train_ua, valid_ua, gap = _evaluate(network, train_ds, valid_ds, train_ds.class_count)
        metrics.rows.append(dict(epoch=0, lr=cfg.lr0, train_loss=float("nan"),
                                 train_ua=train_ua, valid_ua=valid_ua, gap=gap))
        return metrics, network

    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        lr = cfg.lr0
        for images, labels in minibatches(train_ds, cfg.batch, seed + 31 * epoch,
                                          augment=cfg.augment):
            if len(labels) < 2:
                continue  # batch statistics need >= 2 samples
            lr = cosine_lr(step, total_steps, cfg.lr0)
            x = T.Tensor(images.astype(dtype))
            logits = network.forward(x, "train", rng=shake_rng)
            loss = softmax_xent(logits, labels)
            for p in params.values():
                p.zero_grad()
            T.backward(loss)
            sgd_step(params, opt, lr)
            losses.append(float(loss.data))
            step += 1
        train_ua, valid_ua, gap = _evaluate(network, train_ds, valid_ds, train_ds.class_count)
        metrics.rows.append(dict(epoch=epoch + 1, lr=float(lr),
                                 train_loss=float(np.mean(losses)) if losses else float("nan"),
                                 train_ua=train_ua, valid_ua=valid_ua, gap=gap))
    return metrics, network


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, named little-endian arrays (params
# plus BN running statistics)

CKPT_MAGIC = b"SHAKEBN1"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def checkpoint_table(network):
    table = {name: p.data for name, p in network.named_parameters().items()}
    table.update({"buffer." + k: v for k, v in network.named_buffers().items()})
    return table


def save_checkpoint(path, table):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(table)))
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name])
            code = _DTYPE_CODES[np.dtype(arr.dtype.newbyteorder("<"))]
            nb = name.encode()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    table = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        table[name] = np.frombuffer(data[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
    return table


def restore_network(network, table):
    params = network.named_parameters()
    for name, p in params.items():
        if name not in table:
            raise ValueError(f"checkpoint missing parameter {name}")
        if table[name].shape != p.data.shape:
            raise ValueError(f"checkpoint/spec mismatch on {name}: "
                             f"{table[name].shape} vs {p.data.shape}")
        p.data = table[name].astype(p.data.dtype, copy=True)
    buffers = {k[len("buffer."):]: v for k, v in table.items() if k.startswith("buffer.")}
    network.load_buffers(buffers)
    return network
