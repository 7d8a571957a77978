"""Embedding extraction and dispersion analyses: class centers, relative
distance curves, inter-class margin/angle statistics, train-vs-eval
comparison, and a one-sided paired t-test."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data_io import Dataset

__all__ = ["EmbeddingSet", "DispersionReport", "extract_embeddings",
           "class_centers", "relative_distance_curve", "dispersion_stats",
           "paired_t_test_one_sided", "student_t_sf",
           "export_report", "embeddings_csv", "read_embeddings_csv"]


@dataclass
class EmbeddingSet:
    vectors: np.ndarray   # (n, d)
    labels: np.ndarray    # (n,)
    mode: str             # network mode used at extraction

    def __post_init__(self):
        if len(self.vectors) != len(self.labels):
            raise ValueError("EmbeddingSet: vector/label count mismatch")


@dataclass
class DispersionReport:
    centers: np.ndarray            # (K, d) eval-mode class centers
    max_radius_train: np.ndarray   # (K,) max train-mode distance to center
    max_radius_eval: np.ndarray    # (K,)
    grid: np.ndarray               # relative distances r
    pooled_curve: np.ndarray
    per_class_curve: np.ndarray    # (K, len(grid))
    center_angles: np.ndarray      # (K, K) pairwise angles, radians
    min_margin: float              # min inter-class sample distance (eval mode)
    extras: dict = field(default_factory=dict)


def extract_embeddings(network, ds: Dataset, mode, rng=None, batch=256) -> EmbeddingSet:
    """Forward passes tapping the embedding layer.

    Train mode samples shaking and uses batch statistics but leaves BN running
    stats untouched; eval mode is pure.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"extract_embeddings: unknown mode {mode!r}")
    chunks = []

    def run():
        for start in range(0, len(ds), batch):
            x = T.Tensor(ds.images[start:start + batch])
            _, emb = network.forward(x, mode, rng=rng, return_embedding=True)
            chunks.append(emb.data.copy())

    if mode == "train":
        with network.frozen_stats():
            run()
    else:
        run()
    return EmbeddingSet(np.concatenate(chunks), ds.labels.copy(), mode)


def class_centers(es: EmbeddingSet):
    """Per-class arithmetic mean of embedding vectors."""
    classes = np.unique(es.labels)
    k_max = int(classes.max()) + 1
    centers = np.zeros((k_max, es.vectors.shape[1]))
    for k in range(k_max):
        mask = es.labels == k
        if not mask.any():
            raise ValueError(f"class_centers: class {k} has no samples")
        centers[k] = es.vectors[mask].mean(axis=0)
    return centers


def _distances_to_centers(es: EmbeddingSet, centers):
    return np.linalg.norm(es.vectors - centers[es.labels], axis=1)


def relative_distance_curve(train_es: EmbeddingSet, eval_es: EmbeddingSet, grid):
    """Fraction of eval-mode class samples within r * (max train-mode distance).

    Centers come from the eval-mode set; R_k is the largest train-mode
    distance of class k to that center. Returns (per_class, pooled) arrays.
    """
    if len(train_es.labels) != len(eval_es.labels) or \
            np.any(train_es.labels != eval_es.labels):
        raise ValueError("relative_distance_curve: sample sets differ")
    grid = np.asarray(grid, dtype=float)
    centers = class_centers(eval_es)
    d_train = _distances_to_centers(train_es, centers)
    d_eval = _distances_to_centers(eval_es, centers)
    k_count = centers.shape[0]
    per_class = np.zeros((k_count, grid.size))
    for k in range(k_count):
        mask = eval_es.labels == k
        r_k = float(d_train[mask].max())
        if r_k == 0.0:
            if np.any(d_eval[mask] > 0):
                raise ValueError(f"relative_distance_curve: class {k} has zero "
                                 "train-mode radius but nonzero eval distances")
            per_class[k] = 1.0  # all samples exactly at the center
            continue
        rel = d_eval[mask] / r_k
        per_class[k] = [(rel <= r).mean() for r in grid]
    # pooled: every sample against its own class radius
    radii = np.array([d_train[eval_es.labels == k].max() for k in range(k_count)])
    safe = np.where(radii[eval_es.labels] == 0, np.inf, radii[eval_es.labels])
    rel_all = np.where(d_eval == 0, 0.0, d_eval / safe)
    pooled = np.array([(rel_all <= r).mean() for r in grid])
    return per_class, pooled


def dispersion_stats(es: EmbeddingSet):
    """Pairwise center angles and minimum inter-class sample distance."""
    if es.vectors.shape[1] < 2:
        raise ValueError("dispersion_stats: need dimension >= 2")
    centers = class_centers(es)
    k = centers.shape[0]
    if k < 2:
        raise ValueError("dispersion_stats: need at least 2 classes")
    norms = np.linalg.norm(centers, axis=1)
    if np.any(norms == 0):
        raise ValueError("dispersion_stats: zero-norm center")
    unit = centers / norms[:, None]
    cosines = np.clip(unit @ unit.T, -1.0, 1.0)
    angles = np.arccos(cosines)
    margin = np.inf
    for a in range(k):
        va = es.vectors[es.labels == a]
        for b in range(a + 1, k):
            vb = es.vectors[es.labels == b]
            diff = va[:, None, :] - vb[None, :, :]
            margin = min(margin, float(np.sqrt((diff ** 2).sum(axis=2)).min()))
    return angles, float(margin)


def build_report(train_es: EmbeddingSet, eval_es: EmbeddingSet, grid=None) -> DispersionReport:
    grid = np.asarray(grid if grid is not None else np.linspace(0, 1, 21))
    centers = class_centers(eval_es)
    d_train = _distances_to_centers(train_es, centers)
    d_eval = _distances_to_centers(eval_es, centers)
    k = centers.shape[0]
    per_class, pooled = relative_distance_curve(train_es, eval_es, grid)
    angles, margin = dispersion_stats(eval_es)
    return DispersionReport(
        centers=centers,
        max_radius_train=np.array([d_train[eval_es.labels == i].max() for i in range(k)]),
        max_radius_eval=np.array([d_eval[eval_es.labels == i].max() for i in range(k)]),
        grid=grid,
        pooled_curve=pooled,
        per_class_curve=per_class,
        center_angles=angles,
        min_margin=margin,
    )


# ---------------------------------------------------------------------------
# one-sided paired t-test (upper tail)

def _betacf(a, b, x, max_iter=300, eps=1e-14):
    # Lentz continued fraction for the incomplete beta function
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < 1e-300:
        d = 1e-300
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-300:
            d = 1e-300
        c = 1.0 + aa / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < 1e-300:
            d = 1e-300
        c = 1.0 + aa / c
        if abs(c) < 1e-300:
            c = 1e-300
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError("betacf: continued fraction failed to converge")


def _betainc_reg(a, b, x):
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    front = math.exp(math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                     + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t, df):
    """P(T > t) for Student's t with df degrees of freedom."""
    if df < 1:
        raise ValueError("student_t_sf: df must be >= 1")
    x = df / (df + t * t)
    tail = 0.5 * _betainc_reg(df / 2.0, 0.5, x)
    return tail if t >= 0 else 1.0 - tail


def paired_t_test_one_sided(a, b):
    """Upper-tail paired t-test of mean(a - b) > 0; returns (t, df, p)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired_t_test_one_sided: need two equal-length lists, n >= 2")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        raise ValueError("paired_t_test_one_sided: differences have zero variance")
    n = d.size
    t = d.mean() / (sd / math.sqrt(n))
    df = n - 1
    return float(t), df, student_t_sf(t, df)


# ---------------------------------------------------------------------------
# export

def _report_dict(report: DispersionReport):
    return {
        "centers": report.centers.tolist(),
        "max_radius_train": report.max_radius_train.tolist(),
        "max_radius_eval": report.max_radius_eval.tolist(),
        "grid": report.grid.tolist(),
        "pooled_curve": report.pooled_curve.tolist(),
        "per_class_curve": report.per_class_curve.tolist(),
        "center_angles": report.center_angles.tolist(),
        "min_margin": report.min_margin,
        **report.extras,
    }


def export_report(report, path, fmt="json"):
    """Write a dispersion report (or any row-dict metrics) deterministically."""
    if fmt == "json":
        payload = _report_dict(report) if isinstance(report, DispersionReport) else report
        text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    elif fmt == "csv":
        if isinstance(report, DispersionReport):
            lines = ["r,pooled" + "".join(f",class{k}" for k in range(report.per_class_curve.shape[0]))]
            for i, r in enumerate(report.grid):
                lines.append(format(r, ".10g") + "," + format(report.pooled_curve[i], ".10g")
                             + "".join("," + format(v, ".10g") for v in report.per_class_curve[:, i]))
            text = "\n".join(lines) + "\n"
        else:
            raise ValueError("csv export supports DispersionReport only")
    else:
        raise ValueError(f"export_report: unknown format {fmt!r}")
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"export_report: cannot write {path}: {exc}") from exc


def embeddings_csv(es: EmbeddingSet):
    d = es.vectors.shape[1]
    header = "label," + ",".join(f"x{i + 1}" for i in range(d)) + ",mode"
    lines = [header]
    for vec, lab in zip(es.vectors, es.labels):
        lines.append(f"{int(lab)}," + ",".join(format(float(v), ".10g") for v in vec)
                     + f",{es.mode}")
    return "\n".join(lines) + "\n"


def read_embeddings_csv(path) -> EmbeddingSet:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "label" or header[-1] != "mode":
            raise ValueError(f"{path}: not an embeddings CSV")
        vecs, labels, mode = [], [], "eval"
        for line in fh:
            parts = line.strip().split(",")
            if not parts or parts == [""]:
                continue
            labels.append(int(parts[0]))
            vecs.append([float(v) for v in parts[1:-1]])
            mode = parts[-1]
    return EmbeddingSet(np.asarray(vecs), np.asarray(labels, dtype=np.int64), mode)
