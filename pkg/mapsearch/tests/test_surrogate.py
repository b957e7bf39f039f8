import copy
import dataclasses

import numpy as np
import pytest

from mapsearch.errors import (
    ConfigError,
    FingerprintMismatchError,
    ModelFileError,
    SchemaError,
    TrainingDivergedError,
)
from mapsearch.models import AlgorithmKind, Problem
from mapsearch.services import dataset as ds
from mapsearch.services import surrogate
from mapsearch.services.mapspace import MapSpaceCtx, get_mapping


def _finite_difference(fn, x, eps=1e-6):
    grad = np.zeros_like(x)
    for i in range(len(x)):
        up, down = x.copy(), x.copy()
        up[i] += eps
        down[i] -= eps
        grad[i] = (fn(up) - fn(down)) / (2 * eps)
    return grad


def _softplus_model(conv1d_dataset, desk, seed=0):
    stats = ds.fit_norm(conv1d_dataset, desk)
    return surrogate.build_model(AlgorithmKind.CONV1D, (12, 8), "softplus", seed=seed, norm=stats)


def test_widths_follow_the_kind():
    model = surrogate.build_model(AlgorithmKind.CONV, (8,))
    assert model.widths == (62, 8, 12)
    assert surrogate.output_width(AlgorithmKind.MTTKRP) == 15
    with pytest.raises(ConfigError):
        surrogate.build_model(AlgorithmKind.CONV, (8,), activation="tanh")


def test_zero_weights_output_the_bias():
    model = surrogate.build_model(AlgorithmKind.CONV1D, (4,))
    for w in model.weights:
        w[:] = 0.0
    model.biases[-1][:] = np.arange(12)
    np.testing.assert_array_equal(surrogate.forward(model, np.ones(22)), np.arange(12))
    with pytest.raises(SchemaError):
        surrogate.forward(model, np.ones(21))


def test_huber_loss_values():
    assert surrogate.loss([0.5], [0.0], "huber")[0] == pytest.approx(0.125)
    assert surrogate.loss([2.0], [0.0], "huber")[0] == pytest.approx(1.5)
    assert surrogate.loss([2.0], [0.0], "mse")[0] == pytest.approx(4.0)
    assert surrogate.loss([-2.0], [0.0], "mae")[0] == pytest.approx(2.0)
    with pytest.raises(ConfigError):
        surrogate.loss([0.0], [0.0], "hinge")


@pytest.mark.parametrize("kind", surrogate.LOSSES)
def test_loss_gradient(kind, rng):
    pred, target = rng.normal(size=6) * 2, rng.normal(size=6)
    _, grad = surrogate.loss(pred, target, kind)
    numeric = _finite_difference(lambda p: surrogate.loss(p, target, kind)[0], pred)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)


def test_input_gradient_matches_finite_differences(conv1d_dataset, desk, rng):
    model = _softplus_model(conv1d_dataset, desk)
    x = rng.normal(size=22)
    w = rng.normal(size=12)
    grad = surrogate.input_gradient(model, x, w)
    numeric = _finite_difference(lambda v: float(surrogate.forward(model, v) @ w), x)
    assert np.all(grad[:2] == 0.0)
    np.testing.assert_allclose(grad[2:], numeric[2:], rtol=1e-4, atol=1e-7)


def test_input_gradient_is_linear_in_the_weights(conv1d_dataset, desk, rng):
    model = _softplus_model(conv1d_dataset, desk)
    x = rng.normal(size=22)
    a, b = rng.normal(size=12), rng.normal(size=12)
    np.testing.assert_allclose(
        surrogate.input_gradient(model, x, 2 * a + b),
        2 * surrogate.input_gradient(model, x, a) + surrogate.input_gradient(model, x, b),
        rtol=1e-9, atol=1e-12)
    with pytest.raises(SchemaError):
        surrogate.input_gradient(model, x, np.ones(3))


def test_edp_objective_gradient(conv1d_dataset, desk, rng):
    model = _softplus_model(conv1d_dataset, desk, seed=2)
    x = rng.normal(size=22)
    value, grad = surrogate.edp_objective(model, x)
    assert value == pytest.approx(surrogate.predicted_edp_ratio(model, x))
    numeric = _finite_difference(lambda v: surrogate.edp_objective(model, v)[0], x)
    np.testing.assert_allclose(grad[2:], numeric[2:], rtol=1e-4, atol=1e-5)


def test_training_is_deterministic_and_learns(conv1d_dataset, desk):
    stats = ds.fit_norm(conv1d_dataset, desk)
    cfg = surrogate.TrainConfig(epochs=6, batch_size=32, lr=1e-2, lr_decay_every=3)
    runs = []
    for _ in range(2):
        model = surrogate.build_model(AlgorithmKind.CONV1D, (16,), "relu", seed=1, norm=stats)
        runs.append(surrogate.train(model, conv1d_dataset, cfg))
    for w1, w2 in zip(runs[0].model.weights, runs[1].model.weights):
        np.testing.assert_array_equal(w1, w2)
    curve = runs[0].curve
    assert list(curve.columns) == ["epoch", "lr", "train_loss", "test_loss"]
    assert list(curve["lr"]) == pytest.approx([1e-2] * 3 + [1e-3] * 3)
    assert curve["train_loss"].iloc[-1] < curve["train_loss"].iloc[0]


def test_training_memorizes_a_single_record(conv1d_dataset, desk):
    train = conv1d_dataset.subset("train")
    one = ds.Dataset(train.kind, dict(train.header), train.split[:1], train.x[:1], train.y[:1])
    stats = dataclasses.replace(ds.fit_norm(conv1d_dataset, desk), fingerprint=one.train_fingerprint())
    model = surrogate.build_model(AlgorithmKind.CONV1D, (16, 16), "relu", seed=0, norm=stats)
    cfg = surrogate.TrainConfig(epochs=3000, batch_size=1, lr=1e-2, lr_decay_every=10 ** 6)
    result = surrogate.train(model, one, cfg)
    assert result.curve["train_loss"].iloc[-1] < 1e-6
    assert result.curve["test_loss"].isna().all()


def test_training_needs_normalization(conv1d_dataset):
    model = surrogate.build_model(AlgorithmKind.CONV1D, (4,))
    with pytest.raises(SchemaError):
        surrogate.train(model, conv1d_dataset, surrogate.TrainConfig(epochs=1))


def test_divergence_is_reported(conv1d_dataset, desk):
    model = surrogate.build_model(AlgorithmKind.CONV1D, (8,), norm=ds.fit_norm(conv1d_dataset, desk))
    model.weights[0][0, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        surrogate.train(model, conv1d_dataset, surrogate.TrainConfig(epochs=1))


def test_train_config_validation():
    with pytest.raises(ConfigError):
        surrogate.TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        surrogate.TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        surrogate.TrainConfig(loss="hinge")


def test_rank_quality_is_a_correlation(conv1d_model, conv1d_dataset):
    rho = surrogate.rank_quality(conv1d_model, conv1d_dataset)
    assert -1.0 <= rho <= 1.0


def test_predict_cost_has_the_kind_layout(conv1d_model, desk):
    problem = Problem(AlgorithmKind.CONV1D, (16, 3))
    m = get_mapping(MapSpaceCtx(problem, desk), 0)
    cv = surrogate.predict_cost(conv1d_model, problem, m)
    assert cv.kind is AlgorithmKind.CONV1D
    assert np.isfinite(cv.as_array()).all()


def test_save_load_is_bit_exact(conv1d_model, tmp_path, rng):
    path = str(tmp_path / "model.npz")
    surrogate.save(conv1d_model, path)
    loaded = surrogate.load(path)
    assert loaded.widths == conv1d_model.widths
    assert loaded.norm.accel == conv1d_model.norm.accel
    assert loaded.norm.fingerprint == conv1d_model.norm.fingerprint
    for a, b in zip(loaded.weights + loaded.biases, conv1d_model.weights + conv1d_model.biases):
        np.testing.assert_array_equal(a, b)
    x = rng.normal(size=(4, 22))
    np.testing.assert_array_equal(surrogate.forward(loaded, x), surrogate.forward(conv1d_model, x))


def test_corrupt_model_file(tmp_path):
    path = tmp_path / "broken.npz"
    path.write_bytes(b"not a zip archive")
    with pytest.raises(ModelFileError):
        surrogate.load(str(path))
    with pytest.raises(ModelFileError):
        surrogate.load(str(tmp_path / "missing.npz"))


def test_compatibility_checks(conv1d_model, desk, tiny):
    problem = Problem(AlgorithmKind.CONV1D, (16, 3))
    surrogate.check_compatible(conv1d_model, MapSpaceCtx(problem, desk))
    with pytest.raises(FingerprintMismatchError):
        surrogate.check_compatible(conv1d_model, MapSpaceCtx(problem, tiny))
    with pytest.raises(FingerprintMismatchError):
        surrogate.check_compatible(conv1d_model, MapSpaceCtx(Problem(AlgorithmKind.MTTKRP, (2, 2, 2, 2)), desk))
    bare = copy.copy(conv1d_model)
    bare.norm = None
    with pytest.raises(FingerprintMismatchError):
        surrogate.check_compatible(bare, MapSpaceCtx(problem, desk))
