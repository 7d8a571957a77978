"""Embedding dispersion analyses and the paired t-test machinery."""
import json
import math

import numpy as np
import pytest

from shakebn.analysis import (EmbeddingSet, build_report, class_centers,
                              dispersion_stats, embeddings_csv, export_report,
                              extract_embeddings, paired_t_test_one_sided,
                              read_embeddings_csv, relative_distance_curve,
                              student_t_sf)
from shakebn.blocks import NetworkSpec, build_network
from shakebn.data_io import make_blobs
from shakebn.shaking import ShakeConfig


def es(vectors, labels, mode="eval"):
    return EmbeddingSet(np.asarray(vectors, float), np.asarray(labels), mode)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# ---------------------------------------------------------------------------
# centers

def test_center_is_midpoint_of_symmetric_pair():
    set_ = es([[1.0, 0.0], [3.0, 2.0], [5.0, 5.0]], [0, 0, 1])
    centers = class_centers(set_)
    assert np.allclose(centers, [[2.0, 1.0], [5.0, 5.0]])


def test_centers_match_bruteforce_oracle():
    vecs, labels = rand((40, 3)), np.random.default_rng(1).integers(0, 4, 40)
    centers = class_centers(es(vecs, labels))
    for k in range(4):
        assert np.allclose(centers[k], vecs[labels == k].mean(axis=0))


def test_centers_translation_equivariance():
    vecs, labels = rand((20, 2)), np.random.default_rng(2).integers(0, 3, 20)
    v = np.array([1.5, -2.0])
    base = class_centers(es(vecs, labels))
    shifted = class_centers(es(vecs + v, labels))
    assert np.allclose(shifted, base + v)


def test_empty_class_raises():
    with pytest.raises(ValueError):
        class_centers(es([[0.0, 0.0]], [1]))  # class 0 missing


# ---------------------------------------------------------------------------
# relative-distance curve

def test_curve_all_at_centers_is_one():
    vecs = np.repeat([[1.0, 1.0], [-1.0, -1.0]], 3, axis=0)
    labels = [0] * 3 + [1] * 3
    per_class, pooled = relative_distance_curve(es(vecs, labels, "train"),
                                                es(vecs, labels, "eval"),
                                                [0.0, 0.5, 1.0])
    assert np.all(per_class == 1.0)
    assert np.all(pooled == 1.0)


def test_curve_uniform_distances_tracks_r():
    rng = np.random.default_rng(3)
    n = 4000
    radii = rng.uniform(0, 1, n)
    angles = rng.uniform(0, 2 * np.pi, n)
    pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    pts = np.concatenate([pts, -pts])  # symmetric: center stays at 0
    labels = np.zeros(2 * n, dtype=int)
    train = es(np.vstack([pts, [[1.0, 0.0]]]), np.zeros(2 * n + 1, int), "train")
    eval_ = es(np.vstack([pts, [[0.0, 0.0]]]), np.zeros(2 * n + 1, int), "eval")
    grid = [0.25, 0.5, 0.75]
    _, pooled = relative_distance_curve(train, eval_, grid)
    assert np.allclose(pooled, grid, atol=0.03)


def test_curve_monotone_and_one_at_full_radius():
    vecs_t = rand((60, 2), seed=4)
    vecs_e = vecs_t * 0.8
    labels = np.random.default_rng(5).integers(0, 3, 60)
    grid = np.linspace(0, 1, 11)
    per_class, pooled = relative_distance_curve(es(vecs_t, labels, "train"),
                                                es(vecs_e, labels, "eval"), grid)
    assert np.all(np.diff(pooled) >= 0)
    assert np.all(np.diff(per_class, axis=1) >= 0)


def test_curve_rejects_mismatched_samples():
    with pytest.raises(ValueError):
        relative_distance_curve(es([[0, 0], [1, 1]], [0, 1], "train"),
                                es([[0, 0], [1, 1]], [1, 0], "eval"), [0.5])


def test_curve_degenerate_radius_error():
    # train collapsed at center, eval spread out: no radius to normalize by
    train = es([[1.0, 1.0], [1.0, 1.0], [0.0, 0.0]], [0, 0, 1], "train")
    eval_ = es([[2.0, 1.0], [0.0, 1.0], [0.0, 0.0]], [0, 0, 1], "eval")
    with pytest.raises(ValueError):
        relative_distance_curve(train, eval_, [0.5])


# ---------------------------------------------------------------------------
# dispersion stats

def test_antipodal_centers_angle_pi():
    set_ = es([[1.0, 0.0], [-1.0, 0.0]], [0, 1])
    angles, _ = dispersion_stats(set_)
    assert angles[0, 1] == pytest.approx(np.pi)


def test_axis_centers_right_angles():
    vecs = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]
    angles, _ = dispersion_stats(es(vecs, [0, 1, 2, 3]))
    assert angles[0, 1] == pytest.approx(np.pi / 2)
    assert angles[1, 2] == pytest.approx(np.pi / 2)
    assert angles[0, 2] == pytest.approx(np.pi)


def test_margin_matches_bruteforce():
    vecs, labels = rand((30, 2), seed=6), np.random.default_rng(7).integers(0, 3, 30)
    _, margin = dispersion_stats(es(vecs, labels))
    best = min(np.linalg.norm(va - vb)
               for a in range(3) for b in range(3) if a < b
               for va in vecs[labels == a] for vb in vecs[labels == b])
    assert margin == pytest.approx(best)


def test_zero_norm_center_rejected():
    with pytest.raises(ValueError):
        dispersion_stats(es([[1.0, 0.0], [-1.0, 0.0], [0.5, 0.5]], [0, 0, 1]))


# ---------------------------------------------------------------------------
# t-test

def test_zero_mean_differences():
    t, df, p = paired_t_test_one_sided([2.0, 1.0, 2.0, 1.0], [1.0, 2.0, 1.0, 2.0])
    assert t == pytest.approx(0.0)
    assert p == pytest.approx(0.5)


def test_oracle_example_d123():
    t, df, p = paired_t_test_one_sided([2.0, 3.0, 4.0], [1.0, 1.0, 1.0])
    assert t == pytest.approx(2 / (1 / math.sqrt(3)), abs=1e-12)  # = 3.464
    assert t == pytest.approx(3.464, abs=1e-3)
    assert df == 2
    assert p == pytest.approx(0.037, abs=1e-3)


def test_df_convention_n_minus_one():
    a = np.arange(12, dtype=float)
    b = a[::-1].copy()
    _, df, _ = paired_t_test_one_sided(a, b)
    assert df == 11  # the 4x3-fold convention: 12 pairs -> df 11


def test_antisymmetry():
    a, b = rand((8,), seed=8), rand((8,), seed=9)
    t1, _, p1 = paired_t_test_one_sided(a, b)
    t2, _, p2 = paired_t_test_one_sided(b, a)
    assert t2 == pytest.approx(-t1)
    assert p2 == pytest.approx(1.0 - p1)


def test_degenerate_differences_rejected():
    with pytest.raises(ValueError):
        paired_t_test_one_sided([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])


def test_t_tail_against_numerical_integration():
    def sf_oracle(t, df):
        # P(T > t) = 1/2 - integral of the density over [0, t] (bounded
        # interval, so plain quadrature handles the heavy tails exactly)
        xs = np.linspace(0.0, t, 400_001)
        c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
        ys = c * (1 + xs ** 2 / df) ** (-(df + 1) / 2)
        return 0.5 - float(np.trapezoid(ys, xs))

    for df in (1, 2, 3, 5, 10, 30):
        for t in (0.0, 0.5, 1.5, 3.0):
            assert student_t_sf(t, df) == pytest.approx(sf_oracle(t, df), abs=1e-6)


# ---------------------------------------------------------------------------
# extraction and export

def small_network():
    spec = NetworkSpec(depth=8, cardinality=2, base_width=2, layout="PreActBN",
                       classes=3, in_channels=1, embed_dim=2,
                       shake=ShakeConfig(n_branches=2))
    return build_network(spec, np.random.default_rng(0))


def test_eval_extraction_pure():
    net = small_network()
    ds = make_blobs(3, 8, (1, 8, 8), 0.3, seed=1)
    a = extract_embeddings(net, ds, "eval")
    b = extract_embeddings(net, ds, "eval")
    assert np.array_equal(a.vectors, b.vectors)
    assert a.mode == "eval"


def test_train_extraction_leaves_running_stats_untouched():
    net = small_network()
    ds = make_blobs(3, 8, (1, 8, 8), 0.3, seed=2)
    before = {k: v.copy() for k, v in net.named_buffers().items()}
    extract_embeddings(net, ds, "train", rng=np.random.default_rng(3))
    after = net.named_buffers()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_extraction_requires_tap_and_known_mode():
    spec = NetworkSpec(depth=8, cardinality=2, base_width=2, classes=3,
                       in_channels=1, shake=ShakeConfig(n_branches=2))
    no_tap = build_network(spec, np.random.default_rng(0))
    ds = make_blobs(3, 4, (1, 8, 8), 0.3, seed=4)
    with pytest.raises(ValueError):
        extract_embeddings(no_tap, ds, "eval")
    with pytest.raises(ValueError):
        extract_embeddings(small_network(), ds, "test")


def test_report_json_roundtrip(tmp_path):
    vecs, labels = rand((30, 2), seed=10), np.random.default_rng(11).integers(0, 3, 30)
    report = build_report(es(vecs, labels, "train"), es(vecs * 0.9, labels, "eval"))
    path = tmp_path / "report.json"
    export_report(report, path)
    export_report(report, tmp_path / "again.json")
    assert path.read_bytes() == (tmp_path / "again.json").read_bytes()
    payload = json.loads(path.read_text())
    for key in ("centers", "grid", "pooled_curve", "per_class_curve",
                "center_angles", "min_margin", "max_radius_train"):
        assert key in payload


def test_report_csv_schema(tmp_path):
    vecs, labels = rand((30, 2), seed=12), np.random.default_rng(13).integers(0, 3, 30)
    report = build_report(es(vecs, labels, "train"), es(vecs, labels, "eval"),
                          grid=[0.0, 0.5, 1.0])
    path = tmp_path / "report.csv"
    export_report(report, path, fmt="csv")
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "r,pooled,class0,class1,class2"
    assert len(lines) == 4


def test_embeddings_csv_roundtrip(tmp_path):
    set_ = es(rand((10, 2), seed=14), np.random.default_rng(15).integers(0, 3, 10),
              "train")
    path = tmp_path / "emb.csv"
    path.write_text(embeddings_csv(set_))
    back = read_embeddings_csv(path)
    assert np.allclose(back.vectors, set_.vectors, atol=1e-9)
    assert np.array_equal(back.labels, set_.labels)
    assert back.mode == "train"
    header = path.read_text().split("\n")[0]
    assert header == "label,x1,x2,mode"
