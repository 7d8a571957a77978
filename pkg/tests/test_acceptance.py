"""End-to-end acceptance checks for the release gate.

Criteria 5 and 6 consume the cached study artifacts under
``tests/artifacts/``; the first run trains them (about an hour of CPU for
the embedding study).  Delete that directory to force a retrain.
"""
import time

import numpy as np
import pytest

from acceptance_support import (ensure_adding_study, ensure_desk_study,
                                ARTIFACTS, STUDY_SEEDS)
from shakebn import tensor as T
from shakebn.analysis import paired_t_test_one_sided, read_embeddings_csv, \
    class_centers, relative_distance_curve, _distances_to_centers
from shakebn.blocks import LAYOUTS, NetworkSpec, build_block, build_network
from shakebn.data_io import make_blobs, standardize
from shakebn.shaking import ShakeConfig, sample_simplex, shake_forward
from shakebn.tensor import Tensor
from shakebn.training import TrainConfig, metrics_csv, train_run
from shakebn.verify import run_gradcheck

TOL = 1e-4


# ---------------------------------------------------------------------------
# 1. gradient suite

def test_criterion_1_gradient_suite():
    t0 = time.time()
    results = run_gradcheck("all")
    elapsed = time.time() - t0
    assert results, "gradient suite produced no checks"
    worst = max(results.values())
    failing = {k: v for k, v in results.items() if not (v < TOL)}
    assert not failing, f"gradient checks above {TOL}: {failing}"
    assert worst < TOL
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. shaking semantics

def _branch_pair(rng, shape=(3, 4, 6, 6)):
    return [Tensor(rng.standard_normal(shape), requires_grad=True)
            for _ in range(2)]


def test_criterion_2a_eval_is_exact_mean():
    rng = np.random.default_rng(0)
    branches = _branch_pair(rng)
    out = shake_forward(branches, ShakeConfig(), "eval")
    mean = 0.5 * (branches[0].data + branches[1].data)
    np.testing.assert_array_equal(out.data, mean)


def test_criterion_2b_backward_beta_and_alpha_invariance():
    rng = np.random.default_rng(1)
    g = rng.standard_normal((3, 4, 6, 6))
    beta = np.array([[[0.3, 0.7]], [[0.9, 0.1]], [[0.5, 0.5]]])
    for alpha in (np.array([[[0.2, 0.8]], [[0.6, 0.4]], [[0.1, 0.9]]]),
                  np.array([[[1.0, 0.0]], [[0.0, 1.0]], [[0.5, 0.5]]])):
        branches = _branch_pair(np.random.default_rng(2))
        out = shake_forward(branches, ShakeConfig(), "train",
                            frozen={"alpha": alpha, "beta": beta})
        T.backward(T.tsum(T.mul(out, Tensor(g))))
        for n, br in enumerate(branches):
            expected = beta[:, 0, n][:, None, None, None] * g
            np.testing.assert_allclose(br.grad, expected, atol=1e-12)


def test_criterion_2c_monte_carlo_mean():
    rng = np.random.default_rng(3)
    branches = _branch_pair(rng, shape=(2, 3, 4, 4))
    eval_out = shake_forward(branches, ShakeConfig(), "eval").data
    shake_rng = np.random.default_rng(4)
    acc = np.zeros_like(eval_out)
    for _ in range(10_000):
        acc += shake_forward(branches, ShakeConfig(), "train",
                             rng=shake_rng).data
    acc /= 10_000
    scale = np.abs(branches[0].data - branches[1].data).max()
    np.testing.assert_allclose(acc, eval_out, atol=0.02 * scale)


def test_criterion_2d_single_subband_equals_full_band():
    x = np.random.default_rng(5).standard_normal((4, 3, 8, 8))
    branches_a = [Tensor(x), Tensor(-x)]
    branches_b = [Tensor(x), Tensor(-x)]
    out_full = shake_forward(branches_a, ShakeConfig(), "train",
                             rng=np.random.default_rng(77))
    out_b1 = shake_forward(branches_b, ShakeConfig(subbands=1), "train",
                           rng=np.random.default_rng(77))
    np.testing.assert_array_equal(out_full.data, out_b1.data)


# ---------------------------------------------------------------------------
# 3. simplex sampler

@pytest.mark.parametrize("n", [2, 3])
def test_criterion_3_simplex_sampler(n):
    rng = np.random.default_rng(100 + n)
    draws = np.array([sample_simplex(n, rng) for _ in range(10_000)])
    assert draws.shape == (10_000, n)
    assert (draws >= 0).all()
    np.testing.assert_allclose(draws.sum(axis=1), 1.0, atol=1e-12)
    if n == 2:
        assert abs(draws[:, 0].mean() - 0.5) < 0.02


# ---------------------------------------------------------------------------
# 4. layout catalog

def test_criterion_4_branch_output_bn_catalog():
    rng = np.random.default_rng(0)
    with_output_bn = set()
    for layout in LAYOUTS:
        block = build_block(layout, 4, 4, 1, ShakeConfig(), rng)
        if any(br.output_bn is not None for br in block.branches):
            with_output_bn.add(layout)
    assert with_output_bn == {"PreActBN", "BNShake"}


def test_criterion_4_resnext_parameter_count():
    spec = NetworkSpec(depth=26, cardinality=2, base_width=64)
    net = build_network(spec, np.random.default_rng(0))
    target = 11.7e6
    assert abs(net.parameter_count() - target) / target < 0.02


# ---------------------------------------------------------------------------
# 5. desk-scale embedding study (cached artifacts)

@pytest.fixture(scope="module")
def desk_manifest():
    return ensure_desk_study()


def _final_valid_ua(manifest, layout, seed):
    for run in manifest["runs"]:
        if run["layout"] == layout and run["seed"] == seed:
            return run["valid_ua"]
    raise AssertionError(f"missing run {layout} seed {seed}")


def test_criterion_5_budget(desk_manifest):
    assert desk_manifest["elapsed_total"] < 3600.0


def test_criterion_5a_preactbn_matches_or_beats_preact(desk_manifest):
    wins = sum(_final_valid_ua(desk_manifest, "PreActBN", s)
               >= _final_valid_ua(desk_manifest, "PreAct", s)
               for s in STUDY_SEEDS)
    assert wins >= 2, desk_manifest["runs"]


def _embedding_pair(seed):
    stem = ARTIFACTS / "desk_study" / f"embed_PreActBN_seed{seed}"
    return (read_embeddings_csv(f"{stem}_train.csv"),
            read_embeddings_csv(f"{stem}_eval.csv"))


def test_criterion_5b_pooled_curve_at_r03(desk_manifest):
    values = []
    for seed in STUDY_SEEDS:
        train_es, eval_es = _embedding_pair(seed)
        _, pooled = relative_distance_curve(train_es, eval_es, [0.3])
        values.append(float(pooled[0]))
    assert all(v >= 0.90 for v in values), values


def test_criterion_5c_train_radius_exceeds_eval(desk_manifest):
    for seed in STUDY_SEEDS:
        train_es, eval_es = _embedding_pair(seed)
        centers = class_centers(eval_es)
        d_train = _distances_to_centers(train_es, centers)
        d_eval = _distances_to_centers(eval_es, centers)
        for k in range(centers.shape[0]):
            mask = eval_es.labels == k
            assert d_train[mask].max() > d_eval[mask].max(), (seed, k)


# ---------------------------------------------------------------------------
# 6. BN-LSTM gamma0 study (cached artifacts)

def test_criterion_6_small_gamma_trains_better():
    manifest = ensure_adding_study()
    by_key = {(r["gamma0"], r["seed"]): r["final_loss"]
              for r in manifest["runs"]}
    wins = sum(by_key[(0.1, s)] < by_key[(1.0, s)] for s in STUDY_SEEDS)
    assert wins >= 2, by_key


# ---------------------------------------------------------------------------
# 7. paired t-test oracle

def test_criterion_7_t_test_oracle():
    t, df, p = paired_t_test_one_sided([2.0, 3.0, 4.0], [1.0, 1.0, 1.0])
    assert df == 2
    assert abs(t - 3.464) < 1e-3
    assert abs(p - 0.037) < 1e-3
    rng = np.random.default_rng(0)
    t, df, p = paired_t_test_one_sided(rng.standard_normal(12),
                                       rng.standard_normal(12))
    assert df == 11


# ---------------------------------------------------------------------------
# 8. reproducibility

def test_criterion_8_byte_identical_metrics():
    rng_data = 0
    train = make_blobs(3, 30, (1, 8, 8), 0.3, seed=rng_data)
    valid = make_blobs(3, 15, (1, 8, 8), 0.3, seed=rng_data + 1)
    train, valid = standardize(train, valid)
    spec = NetworkSpec(depth=8, cardinality=2, base_width=2, classes=3)
    cfg = TrainConfig(epochs=2, batch=16, lr0=0.1)
    csvs = []
    for _ in range(2):
        metrics, _net = train_run(spec, train, valid, cfg, seed=7)
        csvs.append(metrics_csv(metrics))
    assert csvs[0] == csvs[1]
    assert csvs[0].encode() == csvs[1].encode()
