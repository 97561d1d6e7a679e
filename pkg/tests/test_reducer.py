import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from gmoa import reducer as red
from gmoa.datagen import gen_gmm, preset


def _fd_check(theta, X, rng):
    S = rng.normal(size=theta.project(X).shape)
    loss = lambda v: float(np.sum(S * theta.with_flat(v).project(X)))
    return rel_err(theta.backward(X, S), central_diff(loss, theta.flat(), 1e-6))


# projections


def test_angle2d_axes():
    x = np.array([[3.0, 5.0]])
    assert red.Angle2D(0.0).project(x)[0, 0] == pytest.approx(3.0, abs=1e-15)
    assert red.Angle2D(math.pi / 2).project(x)[0, 0] == pytest.approx(5.0, abs=1e-12)


def test_angle3d_along_own_direction():
    z = red.Angle3D(1.833, 2.034).project(np.array([[-3.0, -5.0, 10.0]]))
    assert z[0, 0] == pytest.approx(11.58, abs=0.05)


@given(st.floats(-10, 10), st.floats(-10, 10))
@settings(max_examples=80, deadline=None)
def test_angle_directions_unit(a, b):
    assert np.linalg.norm(red.Angle2D(a).direction()) == pytest.approx(1.0, abs=1e-12)
    assert np.linalg.norm(red.Angle3D(a, b).direction()) == pytest.approx(1.0, abs=1e-12)


def test_linear_projection_and_shape_errors():
    W = np.array([[1.0, 0.0], [2.0, 1.0], [0.0, 3.0]])
    X = np.array([[1.0, 1.0, 1.0]])
    np.testing.assert_allclose(red.Linear(W).project(X), [[3.0, 4.0]])
    with pytest.raises(red.ReducerError):
        red.Linear(W).project(np.ones((2, 2)))
    with pytest.raises(red.ReducerError):
        red.Angle2D(0.0).project(np.ones((2, 3)))


def test_mlp_shapes_must_chain():
    with pytest.raises(red.ReducerError):
        red.Mlp([(np.ones((3, 4)), np.zeros(4)), (np.ones((5, 2)), np.zeros(2))])


def test_flat_roundtrip(rng):
    mlp = red.random_mlp([4, 8, 2], seed=1)
    v = mlp.flat()
    assert v.shape == (mlp.n_params,)
    np.testing.assert_array_equal(mlp.with_flat(v).flat(), v)
    lin = red.Linear(rng.normal(size=(3, 2)))
    np.testing.assert_array_equal(lin.with_flat(lin.flat()).W, lin.W)


def test_dict_roundtrip():
    for th in (red.Angle2D(0.3), red.Angle3D(0.1, 0.2), red.Linear(np.eye(2)), red.random_mlp([3, 4, 2], 0)):
        back = red.from_dict(th.to_dict())
        np.testing.assert_array_equal(back.flat(), th.flat())


# gradients


def test_linear_single_sample_outer_product():
    x = np.array([[1.0, -2.0, 0.5]])
    s = np.array([[3.0, 4.0]])
    g = red.grad_theta(red.Linear(np.zeros((3, 2))), x, s)
    np.testing.assert_allclose(g.reshape(3, 2), np.outer(x[0], s[0]))


def test_mlp_zero_sensitivity():
    mlp = red.random_mlp([4, 8, 2], seed=0)
    X = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_array_equal(mlp.backward(X, np.zeros((5, 2))), 0.0)


def test_mlp_grad_matches_fd(rng):
    mlp = red.random_mlp([4, 8, 2], seed=2)
    X = rng.normal(size=(10, 4))
    assert _fd_check(mlp, X, rng) < 1e-5


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_deep_mlp_grad_matches_fd(activation):
    rng = np.random.default_rng(8)
    mlp = red.random_mlp([3, 6, 5, 2], seed=3, activation=activation)
    X = rng.normal(size=(7, 3))
    assert _fd_check(mlp, X, rng) < 1e-5


def test_angle_grads_match_fd(rng):
    X2, X3 = rng.normal(size=(20, 2)), rng.normal(size=(20, 3))
    assert _fd_check(red.Angle2D(0.7), X2, rng) < 1e-8
    assert _fd_check(red.Angle3D(0.7, -1.1), X3, rng) < 1e-8
    assert _fd_check(red.Linear(rng.normal(size=(3, 2))), X3, rng) < 1e-8


def test_backward_shape_mismatch():
    with pytest.raises(red.ReducerError):
        red.Angle2D(0.0).backward(np.ones((3, 2)), np.ones((4, 1)))


# PCA


def test_pca_axis_aligned():
    X = np.column_stack([np.linspace(-3, 3, 20), np.zeros(20)])
    W = red.init_linear_pca(X, 1).W[:, 0]
    np.testing.assert_allclose(W, [1.0, 0.0], atol=1e-12)


def test_pca_orthonormal(rng):
    W = red.init_linear_pca(rng.normal(size=(500, 4)), 2).W
    np.testing.assert_allclose(W.T @ W, np.eye(2), atol=1e-10)


def test_pca_finds_cluster_gap():
    ds = gen_gmm(preset("paper2d", 2000, 0))
    w = red.init_linear_pca(ds.X, 1).W[:, 0]
    target = np.array([3.0, 5.0]) / math.sqrt(34)
    angle = math.degrees(math.acos(min(1.0, abs(w @ target))))
    assert angle < 5.0


def test_pca_sign_convention(rng):
    W = red.init_linear_pca(rng.normal(size=(100, 3)) * [3, 2, 1], 2).W
    for col in W.T:
        assert col[np.argmax(np.abs(col))] > 0


def test_pca_rank_deficient():
    X = np.column_stack([np.arange(10.0), 2 * np.arange(10.0)])
    with pytest.raises(red.ReducerError):
        red.init_linear_pca(X, 2)
    with pytest.raises(red.ReducerError):
        red.init_linear_pca(np.ones((2, 3)), 2)


# embedding fit


def test_embedding_fit_descends(rng):
    X = rng.normal(size=(60, 4))
    target = red.random_mlp([4, 5, 2], seed=9).project(X)
    fit = red.init_mlp_from_embedding(X, target, hidden=(8,), epochs=50, seed=0)
    assert fit.mse < fit.history[0]
    assert np.all(np.diff(fit.history) <= 0)


def test_embedding_fit_linear_recovers_pca(rng):
    X = rng.normal(size=(200, 5)) * [4, 2, 1, 0.5, 0.2]
    P = red.pca_embedding(X, 2)
    fit = red.init_mlp_from_embedding(X, P, hidden=(), epochs=2000, lr=0.05, seed=0)
    assert fit.mse < 1e-3 * P.var()


def test_embedding_fit_zero_epochs(rng):
    X = rng.normal(size=(20, 3))
    fit = red.init_mlp_from_embedding(X, rng.normal(size=(20, 2)), hidden=(4,), epochs=0, seed=5)
    np.testing.assert_array_equal(fit.mlp.flat(), red.random_mlp([3, 4, 2], seed=5).flat())


def test_embedding_fit_row_mismatch(rng):
    with pytest.raises(red.ReducerError):
        red.init_mlp_from_embedding(rng.normal(size=(5, 3)), np.zeros((4, 2)))


# normalization


def test_normalize_statistics(rng):
    X = rng.normal(size=(100, 4)) * 3 + 1
    mlp = red.random_mlp([4, 8, 2], seed=4)
    out = red.normalize_output_layer(mlp, X).project(X)
    assert np.max(np.abs(out.mean(axis=0))) < 1e-8
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-8)


def test_normalize_only_last_layer(rng):
    X = rng.normal(size=(50, 4))
    mlp = red.random_mlp([4, 6, 3, 2], seed=4)
    norm = red.normalize_output_layer(mlp, X)
    for (W0, b0), (W1, b1) in zip(mlp.layers[:-1], norm.layers[:-1]):
        np.testing.assert_array_equal(W0, W1)
        np.testing.assert_array_equal(b0, b1)


def test_normalize_idempotent(rng):
    X = rng.normal(size=(50, 4))
    once = red.normalize_output_layer(red.random_mlp([4, 6, 2], seed=1), X)
    twice = red.normalize_output_layer(once, X)
    np.testing.assert_allclose(twice.flat(), once.flat(), atol=1e-12)


def test_normalize_degenerate():
    mlp = red.Mlp([(np.zeros((3, 2)), np.ones(2))])
    with pytest.raises(red.DegenerateOutputError):
        red.normalize_output_layer(mlp, np.random.default_rng(0).normal(size=(10, 3)))


def test_normalize_requires_mlp():
    with pytest.raises(red.ReducerError):
        red.normalize_output_layer(red.Angle2D(0.0), np.ones((2, 2)))


# embedding csv


def test_embedding_csv_roundtrip(tmp_path, rng):
    Z = rng.normal(size=(7, 2))
    path = tmp_path / "emb.csv"
    red.save_embedding_csv(path, Z)
    assert path.read_text().splitlines()[0] == "id,z1,z2"
    np.testing.assert_array_equal(red.load_embedding_csv(path), Z)
    with pytest.raises(ValueError):
        red.load_embedding_csv(path, n_rows=8)
