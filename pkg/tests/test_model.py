import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from msnmon import model
from msnmon.errors import DimensionError, InvalidData, RankError


def names(m):
    return tuple(f"v{i}" for i in range(m))


def calib(data):
    data = np.asarray(data, dtype=float)
    return model.CalibrationMatrix(data=data, variable_names=names(data.shape[1]))


# ---------------------------------------------------------------- oracles

def oracle_scaler(data):
    """Two-pass mean/std, straight loops."""
    n, m = data.shape
    means = np.array([sum(data[:, j]) / n for j in range(m)])
    stds = np.array(
        [math.sqrt(sum((data[:, j] - means[j]) ** 2) / (n - 1)) for j in range(m)]
    )
    stds[stds < 1e-12] = 1.0
    return means, stds


def oracle_pca(data, a):
    """Independent route: SVD of the scaled matrix instead of eigh of the covariance."""
    means, stds = oracle_scaler(data)
    scaled = (data - means) / stds
    _, s, vt = np.linalg.svd(scaled, full_matrices=False)
    evals = s**2 / (data.shape[0] - 1)
    return scaled, evals, vt[:a].T


def align_signs(a, b):
    """Flip columns of b to match a (PCA loadings are sign-ambiguous)."""
    out = b.copy()
    for j in range(b.shape[1]):
        if np.dot(a[:, j], b[:, j]) < 0:
            out[:, j] = -out[:, j]
    return out


def oracle_qd(model_, x_raw):
    """Literal per-element evaluation of the score/residual statistics."""
    xs = (np.asarray(x_raw, float) - model_.scaler.means) / model_.scaler.stds
    t = np.array(
        [sum(xs[m_] * model_.loadings[m_, a] for m_ in range(len(xs)))
         for a in range(model_.num_components)]
    )
    e = xs - np.array(
        [sum(t[a] * model_.loadings[m_, a] for a in range(len(t)))
         for m_ in range(len(xs))]
    )
    q = sum(float(em) ** 2 for em in e)
    d = sum(
        ((t[a] - model_.score_means[a]) / model_.score_stds[a]) ** 2
        for a in range(len(t))
    )
    return q, d


# ---------------------------------------------------------------- scaler

def test_fit_scaler_constant_column_substituted():
    s = model.fit_scaler(calib([[1, 2], [3, 2]]))
    assert_allclose(s.means, [2.0, 2.0])
    assert_allclose(s.stds, [math.sqrt(2.0), 1.0])


def test_fit_scaler_all_zeros():
    s = model.fit_scaler(calib(np.zeros((3, 2))))
    assert_allclose(s.means, [0.0, 0.0])
    assert_allclose(s.stds, [1.0, 1.0])


def test_fit_scaler_matches_two_pass_oracle():
    rng = np.random.default_rng(11)
    data = rng.normal(3.0, 2.5, size=(50, 10))
    s = model.fit_scaler(calib(data))
    means, stds = oracle_scaler(data)
    assert_allclose(s.means, means, atol=1e-12)
    assert_allclose(s.stds, stds, atol=1e-12)


def test_fit_scaler_rejects_non_finite():
    data = np.ones((3, 2))
    data[1, 1] = np.nan
    with pytest.raises(InvalidData):
        calib(data)


def test_apply_scaler_at_means_is_zero():
    data = np.random.default_rng(0).normal(size=(5, 3))
    s = model.fit_scaler(calib(data))
    assert_allclose(model.apply_scaler(s, s.means), np.zeros(3), atol=1e-15)


def test_apply_scaler_identity():
    s = model.Scaler(means=np.zeros(4), stds=np.ones(4))
    x = np.array([1.0, -2.0, 0.5, 9.0])
    assert_allclose(model.apply_scaler(s, x), x)
    # idempotent under the identity scaler
    assert_allclose(model.apply_scaler(s, model.apply_scaler(s, x)), x)


def test_apply_scaler_elementwise_oracle():
    rng = np.random.default_rng(1)
    s = model.Scaler(means=rng.normal(size=6), stds=rng.uniform(0.5, 2.0, 6))
    x = rng.normal(size=6)
    expected = np.array([(x[i] - s.means[i]) / s.stds[i] for i in range(6)])
    assert_allclose(model.apply_scaler(s, x), expected, atol=1e-15)


def test_apply_scaler_dimension_mismatch():
    s = model.Scaler(means=np.zeros(3), stds=np.ones(3))
    with pytest.raises(DimensionError):
        model.apply_scaler(s, np.zeros(4))


# ---------------------------------------------------------------- pca fit

def test_fit_pca_rank_one_data():
    rng = np.random.default_rng(2)
    direction = np.array([2.0, -1.0, 0.5, 3.0])
    t = rng.normal(size=40)
    data = np.outer(t, direction) + np.array([5.0, 1.0, 0.0, -2.0])
    fitted = model.fit_pca(calib(data), 1)
    # after scaling every column is +-t/std(t); the single loading is the
    # normalized sign pattern of the generating direction
    expected = np.sign(direction) / math.sqrt(len(direction))
    got = fitted.loadings[:, 0]
    if np.dot(got, expected) < 0:
        expected = -expected
    assert_allclose(got, expected, atol=1e-10)
    assert fitted.residual_eigenvalues.size == 0 or np.all(
        fitted.residual_eigenvalues < 1e-10
    )


def test_fit_pca_full_rank_reconstruction_and_zero_q():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(30, 5))
    fitted = model.fit_pca(calib(data), 5)
    scaled = model.apply_scaler(fitted.scaler, data)
    recon = scaled @ fitted.loadings @ fitted.loadings.T
    assert_allclose(recon, scaled, atol=1e-8)
    for row in scaled:
        q, _ = model.statistics_for(fitted, row)
        assert q < 1e-8


def test_fit_pca_matches_dense_oracle():
    rng = np.random.default_rng(4)
    data = rng.normal(size=(50, 10)) @ rng.normal(size=(10, 10))
    fitted = model.fit_pca(calib(data), 3)
    _, evals, loadings = oracle_pca(data, 3)
    assert_allclose(
        fitted.loadings, align_signs(fitted.loadings, loadings), atol=1e-8
    )
    # score variances are the retained eigenvalues; the rest go to the residual
    got = np.concatenate([fitted.score_stds**2, fitted.residual_eigenvalues])
    assert_allclose(got, evals[: len(got)], rtol=1e-8)


def test_fit_pca_rank_error():
    data = np.outer(np.arange(10.0), [1.0, 2.0])  # rank 1 after scaling
    with pytest.raises(RankError):
        model.fit_pca(calib(data), 2)


def test_fit_pca_variance_ordering_and_orthonormality():
    rng = np.random.default_rng(5)
    data = rng.normal(size=(60, 8)) * rng.uniform(0.5, 4.0, size=8)
    fitted = model.fit_pca(calib(data), 4)
    ev = np.concatenate([fitted.score_stds**2, fitted.residual_eigenvalues])
    assert np.all(np.diff(ev) <= 1e-10)
    gram = fitted.loadings.T @ fitted.loadings
    assert_allclose(gram, np.eye(4), atol=1e-10)


# ------------------------------------------------------- projection stats

@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(6)
    data = rng.normal(size=(50, 10)) @ rng.normal(size=(10, 10))
    return model.fit_pca(calib(data), 3)


def test_project_zero(fitted):
    assert_allclose(model.project(fitted, np.zeros(10)), np.zeros(3))


def test_project_loading_column_gives_unit_vector(fitted):
    t = model.project(fitted, fitted.loadings[:, 0])
    expected = np.zeros(3)
    expected[0] = 1.0
    assert_allclose(t, expected, atol=1e-10)


def test_project_matvec_oracle(fitted):
    rng = np.random.default_rng(7)
    x = rng.normal(size=10)
    expected = np.array(
        [sum(x[m] * fitted.loadings[m, a] for m in range(10)) for a in range(3)]
    )
    assert_allclose(model.project(fitted, x), expected, atol=1e-12)


def test_residual_inside_span_is_zero(fitted):
    x = fitted.loadings @ np.array([1.0, -2.0, 0.5])
    t = model.project(fitted, x)
    assert_allclose(model.residual(fitted, x, t), np.zeros(10), atol=1e-10)


def test_residual_full_rank_model_is_zero():
    rng = np.random.default_rng(8)
    data = rng.normal(size=(40, 6))
    full = model.fit_pca(calib(data), 6)
    x = rng.normal(size=6)
    t = model.project(full, x)
    assert_allclose(model.residual(full, x, t), np.zeros(6), atol=1e-10)


def test_residual_explicit_oracle(fitted):
    rng = np.random.default_rng(9)
    x = rng.normal(size=10)
    t = model.project(fitted, x)
    expected = x - fitted.loadings @ t
    assert_allclose(model.residual(fitted, x, t), expected, atol=1e-12)


def test_q_statistic_values():
    assert model.q_statistic(np.zeros(4)) == 0.0
    assert model.q_statistic(np.array([1.0, 2.0])) == 5.0
    rng = np.random.default_rng(10)
    e = rng.normal(size=17)
    assert_allclose(model.q_statistic(e), float(np.dot(e, e)), rtol=1e-12)


def test_d_statistic_values(fitted):
    assert model.d_statistic(fitted, fitted.score_means) == 0.0
    unit = model.PcaModel(
        scaler=model.Scaler(means=np.zeros(2), stds=np.ones(2)),
        loadings=np.eye(2),
        num_components=2,
        score_means=np.zeros(2),
        score_stds=np.ones(2),
        residual_eigenvalues=np.array([]),
        calib_count=10,
    )
    assert model.d_statistic(unit, np.array([3.0, 4.0])) == 25.0
    rng = np.random.default_rng(12)
    t = rng.normal(size=3)
    expected = sum(
        ((t[a] - fitted.score_means[a]) / fitted.score_stds[a]) ** 2 for a in range(3)
    )
    assert_allclose(model.d_statistic(fitted, t), expected, rtol=1e-12)


def test_pythagoras_property(fitted):
    rng = np.random.default_rng(13)
    for _ in range(20):
        x = rng.normal(size=10)
        t = model.project(fitted, x)
        e = model.residual(fitted, x, t)
        assert_allclose(
            float(x @ x), float(t @ t) + float(e @ e), rtol=1e-8
        )


def test_qd_match_bruteforce_on_heldout(fitted):
    rng = np.random.default_rng(14)
    raw = rng.normal(size=(20, 10)) @ rng.normal(size=(10, 10))
    for row in raw:
        xs = model.apply_scaler(fitted.scaler, row)
        q, d = model.statistics_for(fitted, xs)
        q_ref, d_ref = oracle_qd(fitted, row)
        assert_allclose(q, q_ref, rtol=1e-8)
        assert_allclose(d, d_ref, rtol=1e-8)


# --------------------------------------------------------- control limits

def test_ucl_q_floor_on_empty_residual_space():
    rng = np.random.default_rng(15)
    data = rng.normal(size=(30, 4))
    full = model.fit_pca(calib(data), 4)
    limits = model.control_limits(full, 0.99)
    assert limits.ucl_q == pytest.approx(1e-9)


def test_limits_monotone_in_confidence(fitted):
    lo = model.control_limits(fitted, 0.95)
    hi = model.control_limits(fitted, 0.99)
    assert hi.ucl_q > lo.ucl_q
    assert hi.ucl_d > lo.ucl_d


def test_limits_exceedance_monte_carlo():
    rng = np.random.default_rng(16)
    m, a, alpha = 10, 3, 0.99
    calib_data = rng.standard_normal((5000, m))
    fitted = model.fit_pca(calib(calib_data), a)
    limits = model.control_limits(fitted, alpha)
    fresh = rng.standard_normal((5000, m))
    scaled = model.apply_scaler(fitted.scaler, fresh)
    t = scaled @ fitted.loadings
    e = scaled - t @ fitted.loadings.T
    q = np.einsum("ij,ij->i", e, e)
    z = (t - fitted.score_means) / fitted.score_stds
    d = np.einsum("ij,ij->i", z, z)
    assert np.mean(q > limits.ucl_q) <= 3 * (1 - alpha)
    assert np.mean(d > limits.ucl_d) <= 3 * (1 - alpha)


def test_percentile_limits(fitted):
    qs = np.linspace(0.0, 10.0, 101)
    ds = np.linspace(0.0, 5.0, 101)
    limits = model.control_limits(
        fitted, 0.99, method="percentile", calib_q=qs, calib_d=ds
    )
    assert limits.ucl_q == pytest.approx(9.9)
    assert limits.ucl_d == pytest.approx(4.95)
    with pytest.raises(InvalidData):
        model.control_limits(fitted, 0.99, method="percentile")


def test_d_limit_requires_enough_calibration():
    bad = model.PcaModel(
        scaler=model.Scaler(means=np.zeros(3), stds=np.ones(3)),
        loadings=np.eye(3),
        num_components=3,
        score_means=np.zeros(3),
        score_stds=np.ones(3),
        residual_eigenvalues=np.array([]),
        calib_count=3,
    )
    with pytest.raises(RankError):
        model.control_limits(bad, 0.99)


# ----------------------------------------------------------------- EWMA

def test_ewma_zero_weight_keeps_latest_batch_only():
    rng = np.random.default_rng(17)
    first = rng.normal(size=(20, 4))
    second = rng.normal(2.0, 1.0, size=(15, 4))
    state = model.ewma_seed(first, weight=0.0)
    state = model.ewma_update(state, second)
    assert_allclose(state.mean_acc, second.mean(axis=0), atol=1e-12)
    assert_allclose(state.crossprod_acc, second.T @ second / 15, atol=1e-12)


def test_ewma_full_weight_never_changes():
    rng = np.random.default_rng(18)
    first = rng.normal(size=(20, 4))
    state = model.ewma_seed(first, weight=1.0)
    updated = model.ewma_update(state, rng.normal(5.0, 3.0, size=(10, 4)))
    assert_allclose(updated.mean_acc, state.mean_acc)
    assert_allclose(updated.crossprod_acc, state.crossprod_acc)


def test_ewma_two_steps_match_manual_recurrence():
    rng = np.random.default_rng(19)
    batches = [rng.normal(size=(12, 3)) for _ in range(3)]
    state = model.ewma_seed(batches[0], weight=0.5)
    for b in batches[1:]:
        state = model.ewma_update(state, b)

    mean = batches[0].mean(axis=0)
    cross = batches[0].T @ batches[0] / 12
    for b in batches[1:]:
        mean = 0.5 * mean + 0.5 * b.mean(axis=0)
        cross = 0.5 * cross + 0.5 * (b.T @ b / 12)
    assert_allclose(state.mean_acc, mean, atol=1e-10)
    assert_allclose(state.crossprod_acc, cross, atol=1e-10)
    assert state.obs_seen == 36


def test_refit_from_ewma_consistent_with_initial_fit():
    rng = np.random.default_rng(20)
    data = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5))
    state = model.ewma_seed(data, weight=0.5)
    refit = model.refit_from_ewma(state, 2, names(5))
    direct = model.fit_pca(calib(data), 2)
    # population (refit) vs sample (fit) normalization differ by (N-1)/N
    assert_allclose(refit.scaler.means, direct.scaler.means, atol=1e-10)
    assert_allclose(
        refit.scaler.stds, direct.scaler.stds * math.sqrt(199 / 200), rtol=1e-10
    )
    assert_allclose(
        np.abs(refit.loadings.T @ direct.loadings), np.eye(2), atol=1e-6
    )
    gram = refit.loadings.T @ refit.loadings
    assert_allclose(gram, np.eye(2), atol=1e-10)


def test_refit_orthonormal_after_many_updates():
    rng = np.random.default_rng(21)
    state = model.ewma_seed(rng.normal(size=(50, 6)), weight=0.7)
    for _ in range(10):
        state = model.ewma_update(state, rng.normal(size=(30, 6)))
        refit = model.refit_from_ewma(state, 3)
        assert_allclose(refit.loadings.T @ refit.loadings, np.eye(3), atol=1e-10)


# ------------------------------------------------------------ persistence

def test_model_snapshot_round_trip_exact(fitted):
    text = model.dump_model(fitted)
    back = model.load_model(text)
    assert np.array_equal(back.scaler.means, fitted.scaler.means)
    assert np.array_equal(back.scaler.stds, fitted.scaler.stds)
    assert np.array_equal(back.loadings, fitted.loadings)
    assert np.array_equal(back.score_means, fitted.score_means)
    assert np.array_equal(back.score_stds, fitted.score_stds)
    assert np.array_equal(back.residual_eigenvalues, fitted.residual_eigenvalues)
    assert back.calib_count == fitted.calib_count
    assert back.variable_names == fitted.variable_names


def test_model_snapshot_rejects_garbage():
    with pytest.raises(InvalidData):
        model.load_model("not a snapshot\n")


# ----------------------------------------------------------- properties

finite_rows = st.integers(min_value=5, max_value=30)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=finite_rows)
def test_property_pythagoras_and_orthonormality(seed, n):
    rng = np.random.default_rng(seed)
    m = int(rng.integers(3, 8))
    data = rng.normal(size=(max(n, m + 2), m)) * rng.uniform(0.5, 3.0, m)
    a = int(rng.integers(1, m))
    try:
        fitted_ = model.fit_pca(calib(data), a)
    except RankError:
        return
    assert_allclose(
        fitted_.loadings.T @ fitted_.loadings, np.eye(a), atol=1e-10
    )
    x = rng.normal(size=m)
    t = model.project(fitted_, x)
    e = model.residual(fitted_, x, t)
    assert_allclose(float(x @ x), float(t @ t) + float(e @ e), rtol=1e-8, atol=1e-10)
