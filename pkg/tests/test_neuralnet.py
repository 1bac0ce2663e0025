import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from oracles import (
    finite_difference_gradients,
    max_relative_error,
    naive_conv1d,
    naive_dense,
    naive_flatten,
    naive_forward,
    naive_maxpool,
)
from sleepeff.dataset import FeatureDescriptor, FeatureSchema, MergedTable
from sleepeff.errors import DivergedError, ShapeError, UnknownArchitecture
from sleepeff.neuralnet import (
    ARCHITECTURE_IDS,
    ArchitectureSpec,
    Checkpoint,
    Conv1D,
    Dense,
    Flatten,
    MaxPool,
    RegressionHead,
    TrainConfig,
    backward,
    build_architecture,
    conv1d_forward,
    dense_forward,
    flatten,
    forward,
    forward_batch,
    init_params,
    load_checkpoint,
    maxpool_forward,
    predict,
    predict_array,
    save_checkpoint,
    train,
)

# Per-layer output shapes for a (93, 1) input, copied from the published table.
PUBLISHED_SHAPES = {
    "A1": [(74, 32), (37, 32), (37, 16), (37, 16), 592],
    "A2": [(91, 32), (45, 32), (43, 32), (21, 32), (21, 16), 336],
    "A3": [(89, 32), (44, 32), (40, 32), (20, 32), (20, 16), 320],
    "A4": [(89, 32), (85, 32), (42, 32), (38, 32), (34, 32), (17, 32), (17, 16), 272],
    "A5": [(89, 32), (44, 32), (40, 32), (20, 32), (20, 16), (20, 16), 320],
    "A6": [(82, 32), (41, 32), (30, 32), (15, 32), (4, 32), (2, 32), 64],
}


def table_of(X, y, names=None):
    X = np.asarray(X, dtype=float)
    names = names or [f"x{i}" for i in range(X.shape[1])]
    schema = FeatureSchema(tuple(FeatureDescriptor(n, "survey") for n in names))
    n = len(y)
    dates = [dt.date(2015, 1, 1) + dt.timedelta(days=i) for i in range(n)]
    return MergedTable(schema, ["P"] * n, dates, X, y)


# ---------------------------------------------------------------------------
# architectures and shapes


@pytest.mark.parametrize("arch", ARCHITECTURE_IDS)
def test_shapes_match_published_table(arch):
    spec = build_architecture(arch)
    assert spec.shapes()[:-1] == PUBLISHED_SHAPES[arch]
    assert spec.shapes()[-1] == 1
    assert spec.expected_shapes == PUBLISHED_SHAPES[arch]


def test_a1_layer_list():
    spec = build_architecture("A1")
    assert list(spec.layers) == [
        Conv1D(20, 32, "relu"), MaxPool(2), Dense(16, "linear"), Dense(16, "linear"),
        Flatten(), RegressionHead(),
    ]


def test_a6_layer_list():
    spec = build_architecture("A6")
    assert list(spec.layers) == [Conv1D(12), MaxPool(2)] * 3 + [Flatten(), RegressionHead()]


def test_unknown_architecture():
    with pytest.raises(UnknownArchitecture):
        build_architecture("A7")


def test_short_input_is_a_shape_error():
    with pytest.raises(ShapeError):
        build_architecture("A6", 20)
    assert build_architecture("A2", 20).shapes()[-2] == 48  # 18, 9, 7, 3 positions


def test_spec_round_trip():
    spec = build_architecture("A4")
    assert ArchitectureSpec.from_dict(spec.to_dict()) == spec


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        Conv1D(0)
    with pytest.raises(ValueError):
        Dense(4, "tanh")
    with pytest.raises(ValueError):
        MaxPool(0)


# ---------------------------------------------------------------------------
# layer math examples


def test_conv_examples():
    x = np.array([[1.0], [2], [3], [4], [5]])
    w = np.array([[[1.0, 0.0, -1.0]]])
    np.testing.assert_array_equal(conv1d_forward(x, w, np.zeros(1)), [[-2], [-2], [-2]])
    ident = conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(ident, x)
    out = conv1d_forward(np.zeros((93, 1)), np.zeros((32, 1, 20)), np.zeros(32), "relu")
    assert out.shape == (74, 32)


def test_conv_too_short():
    with pytest.raises(ShapeError):
        conv1d_forward(np.zeros((2, 1)), np.zeros((1, 1, 3)), np.zeros(1))


def test_maxpool_examples():
    np.testing.assert_array_equal(maxpool_forward(np.array([[5.0], [1], [4], [4], [7]])), [[5], [4]])
    assert maxpool_forward(np.zeros((74, 32))).shape == (37, 32)
    np.testing.assert_array_equal(maxpool_forward(np.full((6, 2), 3.0)), np.full((3, 2), 3.0))
    with pytest.raises(ShapeError):
        maxpool_forward(np.zeros((1, 1)))


def test_dense_examples():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(dense_forward(x, np.array([[1.0, 1.0]]), np.zeros(1)), [[3], [7]])
    np.testing.assert_array_equal(dense_forward(x, np.eye(2), np.zeros(2)), x)
    assert dense_forward(np.zeros((37, 32)), np.zeros((16, 32)), np.zeros(16)).shape == (37, 16)
    with pytest.raises(ShapeError):
        dense_forward(x, np.zeros((1, 3)), np.zeros(1))


def test_flatten_examples():
    np.testing.assert_array_equal(flatten(np.array([[1.0, 2.0], [3.0, 4.0]])), [1, 2, 3, 4])
    assert flatten(np.zeros((37, 16))).shape == (592,)
    assert flatten(np.zeros((2, 32))).shape == (64,)


small_maps = st.tuples(st.integers(1, 16), st.integers(1, 3)).flatmap(
    lambda s: hnp.arrays(np.float64, s, elements=st.floats(-10, 10))
)


@settings(max_examples=40, deadline=None)
@given(small_maps, st.integers(1, 4), st.integers(1, 4), st.sampled_from(["relu", "linear"]),
       st.integers(0, 2**31))
def test_conv_matches_naive(x, k, filters, activation, seed):
    if x.shape[0] < k:
        return
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(filters, x.shape[1], k))
    b = rng.normal(size=filters)
    got = conv1d_forward(x, w, b, activation)
    assert np.max(np.abs(got - naive_conv1d(x, w, b, activation))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(small_maps, st.integers(1, 3))
def test_pool_matches_naive(x, pool):
    if x.shape[0] < pool:
        return
    np.testing.assert_array_equal(maxpool_forward(x, pool), naive_maxpool(x, pool))


@settings(max_examples=40, deadline=None)
@given(small_maps, st.integers(1, 4), st.integers(0, 2**31))
def test_dense_and_flatten_match_naive(x, units, seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=(units, x.shape[1]))
    b = rng.normal(size=units)
    assert np.max(np.abs(dense_forward(x, w, b) - naive_dense(x, w, b))) <= 1e-12
    np.testing.assert_array_equal(flatten(x), naive_flatten(x))


# ---------------------------------------------------------------------------
# forward


def tiny_spec(length=4, k=2, filters=1):
    return ArchitectureSpec(
        "tiny", "C-P-FC", (Conv1D(k, filters), MaxPool(2), Dense(2), Flatten(), RegressionHead()),
        length,
    )


def test_zero_weights_predict_bias():
    spec = build_architecture("A3")
    params = init_params(spec, 0)
    for p in params:
        for key in p:
            p[key] = np.zeros_like(p[key])
    params[-1]["bias"] = np.asarray(0.37)
    rng = np.random.default_rng(1)
    assert forward(spec, params, rng.normal(size=93)) == 0.37


def test_a1_forward_is_finite():
    spec = build_architecture("A1")
    assert np.isfinite(forward(spec, init_params(spec, 0), np.random.default_rng(0).normal(size=93)))


def test_tiny_forward_matches_oracle():
    spec = tiny_spec()
    rng = np.random.default_rng(4)
    for _ in range(20):
        params = init_params(spec, rng)
        params[-1]["bias"] = np.asarray(rng.normal())
        x = rng.normal(size=4)
        assert abs(forward(spec, params, x) - naive_forward(spec, params, x)) <= 1e-12


def test_forward_rejects_bad_input():
    spec = build_architecture("A2")
    params = init_params(spec, 0)
    with pytest.raises(ShapeError):
        forward(spec, params, np.zeros(92))
    with pytest.raises(ValueError):
        forward(spec, params, np.full(93, np.nan))


def test_relu_outputs_nonnegative():
    rng = np.random.default_rng(2)
    out = conv1d_forward(rng.normal(size=(16, 2)), rng.normal(size=(3, 2, 3)), rng.normal(size=3),
                         "relu")
    assert np.all(out >= 0)


def test_linear_network_is_affine_in_one_parameter():
    spec = ArchitectureSpec(
        "lin", "C-FC", (Conv1D(3, 4, "linear"), Dense(2), Flatten(), RegressionHead()), 8
    )
    rng = np.random.default_rng(0)
    params = init_params(spec, rng)
    x = rng.normal(size=8)
    values = []
    for t in (-1.0, 0.5, 2.0):
        params[0]["weight"][1, 0, 2] = t
        values.append(forward(spec, params, x))
    slope1 = (values[1] - values[0]) / 1.5
    slope2 = (values[2] - values[1]) / 1.5
    assert slope1 == pytest.approx(slope2, rel=1e-10, abs=1e-12)


# ---------------------------------------------------------------------------
# backward


def test_zero_error_gives_zero_gradients():
    spec = build_architecture("A2")
    params = init_params(spec, 0)
    X = np.random.default_rng(0).normal(size=(3, 93))
    y = forward_batch(spec, params, X)
    grads, loss = backward(spec, params, X, y)
    assert loss == 0.0
    assert all(np.all(g[k] == 0) for g in grads for k in g)


def test_head_gradient_closed_form():
    spec = ArchitectureSpec("head", "FC", (Flatten(), RegressionHead()), 1)
    params = [{}, {"weight": np.array([0.7]), "bias": np.asarray(0.2)}]
    x, y = 1.5, 0.4
    grads, _ = backward(spec, params, np.array([[x]]), np.array([y]))
    assert grads[1]["weight"][0] == pytest.approx(2 * (0.7 * x + 0.2 - y) * x, abs=1e-15)
    assert float(grads[1]["bias"]) == pytest.approx(2 * (0.7 * x + 0.2 - y), abs=1e-15)


def test_oracle_agrees_with_closed_form_head():
    spec = ArchitectureSpec("head", "FC", (Flatten(), RegressionHead()), 3)
    rng = np.random.default_rng(0)
    params = init_params(spec, rng)
    X, y = rng.normal(size=(5, 3)), rng.normal(size=5)
    fd, _ = finite_difference_gradients(spec, params, X, y)
    err = X @ params[1]["weight"] + params[1]["bias"] - y
    np.testing.assert_allclose(fd[1]["weight"], 2 * X.T @ err / 5, rtol=1e-8)


def test_tiny_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    for spec in (tiny_spec(8, 3, 2), tiny_spec(6, 2, 3)):
        params = init_params(spec, rng)
        X, y = rng.normal(size=(4, spec.input_length)), rng.normal(size=4)
        grads, _ = backward(spec, params, X, y)
        fd, _ = finite_difference_gradients(spec, params, X, y)
        assert max_relative_error(grads, fd) < 1e-4


def test_a2_gradients_match_finite_differences():
    spec = build_architecture("A2")
    rng = np.random.default_rng(11)
    params = init_params(spec, rng)
    X, y = rng.normal(size=(4, 93)), rng.uniform(size=4)
    grads, _ = backward(spec, params, X, y)
    fd, _ = finite_difference_gradients(spec, params, X, y)
    assert max_relative_error(grads, fd) < 1e-4


def test_maxpool_gradient_goes_to_first_maximum():
    spec = ArchitectureSpec("pool", "P", (MaxPool(2), Flatten(), RegressionHead()), 4)
    params = [{}, {}, {"weight": np.array([1.0, 1.0]), "bias": np.asarray(0.0)}]
    spec_in = ArchitectureSpec("cp", "C-P", (Conv1D(1, 1, "linear"),) + spec.layers, 4)
    params_in = [{"weight": np.ones((1, 1, 1)), "bias": np.zeros(1)}] + params
    X = np.array([[2.0, 2.0, 1.0, 3.0]])
    grads, _ = backward(spec_in, params_in, X, np.array([0.0]))
    # only positions 0 and 3 feed the output, so the kernel sees x0 + x3
    assert grads[0]["weight"][0, 0, 0] == pytest.approx(2 * 5.0 * (2.0 + 3.0))


def test_relu_derivative_at_zero_is_zero():
    spec = ArchitectureSpec("r", "C", (Conv1D(1, 1, "relu"), Flatten(), RegressionHead()), 1)
    params = [{"weight": np.ones((1, 1, 1)), "bias": np.zeros(1)},
              {}, {"weight": np.array([1.0]), "bias": np.asarray(0.0)}]
    grads, _ = backward(spec, params, np.array([[0.0]]), np.array([1.0]))
    assert grads[0]["bias"][0] == 0.0


def test_backward_shape_errors():
    spec = build_architecture("A2")
    params = init_params(spec, 0)
    with pytest.raises(ShapeError):
        backward(spec, params, np.zeros((2, 93)), np.zeros(3))
    with pytest.raises(ShapeError):
        backward(spec, params, np.zeros((0, 93)), np.zeros(0))


# ---------------------------------------------------------------------------
# training


def linear_table(n=200, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 3))
    y = 0.5 + 0.1 * X[:, 0] - 0.2 * X[:, 1] + 0.05 * X[:, 2]
    return table_of(X, y)


def test_head_only_model_fits_linear_target():
    spec = ArchitectureSpec("head", "FC", (Flatten(), RegressionHead()), 3)
    for cfg in (
        TrainConfig(epochs=200, batch_size=16, learning_rate=0.01),
        TrainConfig(epochs=200, batch_size=16, learning_rate=0.05, optimizer="sgd",
                    target_scaling=False),
    ):
        _, history = train(spec, linear_table(), cfg)
        assert history[-1]["train_mae"] < 1e-3


def test_training_is_deterministic(tiny_table):
    spec = build_architecture("A2")
    cfg = TrainConfig(epochs=2, batch_size=32, seed=5)
    p1, h1 = train(spec, tiny_table, cfg)
    p2, h2 = train(spec, tiny_table, cfg)
    assert h1 == h2
    for a, b in zip(p1, p2):
        for key in a:
            np.testing.assert_array_equal(a[key], b[key])


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_huge_learning_rate_diverges(tiny_table, optimizer):
    spec = build_architecture("A2")
    cfg = TrainConfig(optimizer=optimizer, learning_rate=1e6, epochs=3, batch_size=32)
    with pytest.raises(DivergedError) as err:
        train(spec, tiny_table, cfg)
    assert err.value.epoch >= 1


def test_history_rescoring_and_predict(tiny_table):
    spec = build_architecture("A3")
    params, history = train(spec, tiny_table, TrainConfig(epochs=2, batch_size=64))
    assert [h["epoch"] for h in history] == [1, 2]
    pred = predict(spec, params, tiny_table)
    err = pred - tiny_table.target
    assert float(np.mean(err * err)) == history[-1]["train_mse"]
    assert float(np.mean(np.abs(err))) == history[-1]["train_mae"]
    perm = np.random.default_rng(0).permutation(len(tiny_table))
    np.testing.assert_array_equal(predict(spec, params, tiny_table.take(perm)), pred[perm])


def test_zero_model_predicts_constant(tiny_table):
    spec = build_architecture("A1")
    params = init_params(spec, 0)
    for p in params:
        for key in p:
            p[key] = np.zeros_like(p[key])
    params[-1]["bias"] = np.asarray(0.94)
    assert np.all(predict(spec, params, tiny_table) == 0.94)


def test_predict_shape_mismatch(tiny_table):
    spec = build_architecture("A2", 20)
    with pytest.raises(ShapeError):
        predict(spec, init_params(spec, 0), tiny_table)


def test_train_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epoch": 3})
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()


def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_table):
    spec = build_architecture("A5")
    params, _ = train(spec, tiny_table, TrainConfig(epochs=1))
    path = tmp_path / "a5.json"
    save_checkpoint(path, Checkpoint(spec, params, "abc", TrainConfig().to_dict(), {"mae": 1.0}))
    ckpt = load_checkpoint(path)
    assert ckpt.spec == spec and ckpt.schema_fingerprint == "abc"
    np.testing.assert_array_equal(
        predict_array(ckpt.spec, ckpt.params, tiny_table.features),
        predict_array(spec, params, tiny_table.features),
    )
