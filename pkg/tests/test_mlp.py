import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lasermon.errors import TrainingDiverged, ValidationError
from lasermon.mlp import (
    ACTIVATIONS, MlpArchitecture, MlpModel, TrainConfig, fit_epochs, gradients, init_model,
    load_model, loss, predict, save_model, train, _Optimizer,
)
from lasermon.preprocess import fit_minmax


def linear_model(w, b):
    w = np.asarray(w, float).reshape(-1, 1)
    return MlpModel(MlpArchitecture(w.shape[0]), [w], [np.array([float(b)])])


def test_init_shapes_and_determinism():
    arch = MlpArchitecture(5, (3,), "tanh")
    a, b = init_model(arch, 4), init_model(arch, 4)
    assert a.n_parameters == 5 * 3 + 3 + 3 * 1 + 1 == 22
    for x, y in zip(a.weights, b.weights):
        np.testing.assert_array_equal(x, y)
    assert all(np.all(bias == 0) for bias in a.biases)
    lin = init_model(MlpArchitecture(4), 0)
    assert len(lin.weights) == 1 and lin.weights[0].shape == (4, 1)


def test_init_limits():
    relu = init_model(MlpArchitecture(50, (40,), "relu"), 1)
    assert np.abs(relu.weights[0]).max() <= np.sqrt(6 / 50)
    tanh = init_model(MlpArchitecture(50, (40,), "tanh"), 1)
    assert np.abs(tanh.weights[0]).max() <= np.sqrt(6 / 90)


def test_architecture_validation():
    with pytest.raises(ValidationError):
        MlpArchitecture(0)
    with pytest.raises(ValidationError):
        MlpArchitecture(3, (0,))
    with pytest.raises(ValidationError):
        MlpArchitecture(3, (2,), "swish")
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="lbfgs")
    with pytest.raises(ValidationError):
        TrainConfig(l1=-1.0)


def test_predict_examples(rng):
    m = init_model(MlpArchitecture(3, (4,), "sigmoid"), 0)
    for w in m.weights:
        w[:] = 0
    m.biases[-1][:] = 2.5
    assert np.all(predict(m, rng.normal(size=(6, 3))) == 2.5)
    lin = linear_model([1.0, -2.0, 0.5], 0.25)
    assert predict(lin, [2.0, 1.0, 4.0]) == 2.0 - 2.0 + 2.0 + 0.25
    deep = init_model(MlpArchitecture(3, (5, 4), "leaky_relu"), 2)
    X = rng.normal(size=(7, 3))
    np.testing.assert_allclose(predict(deep, X), [predict(deep, x) for x in X], rtol=0, atol=1e-15)
    with pytest.raises(ValidationError):
        predict(deep, np.ones((2, 4)))


def test_loss_examples():
    m = linear_model([0.0], 0.0)
    assert loss(m, [[1.0], [2.0]], [3.0, 4.0]) == 12.5
    fit = linear_model([2.0], 1.0)
    X = np.array([[0.0], [1.0]])
    y = 2 * X[:, 0] + 1
    assert loss(fit, X, y) == 0.0
    assert loss(fit, X, y, l2=1.0) == 4.0
    assert loss(fit, X, y, l1=0.5) == 1.0
    with pytest.raises(ValidationError):
        loss(fit, np.empty((0, 1)), [])


def test_linear_single_sample_gradient():
    m = linear_model([0.5, -1.0], 0.2)
    x, y = np.array([3.0, 2.0]), 4.0
    y_hat = 0.5 * 3 - 2 + 0.2
    gw, gb = gradients(m, x[None], [y])
    np.testing.assert_allclose(gw[0][:, 0], 2 * (y_hat - y) * x, rtol=1e-14)
    assert gb[0][0] == pytest.approx(2 * (y_hat - y))


def test_gradient_zero_at_least_squares_solution(rng):
    X = rng.normal(size=(30, 4))
    y = X @ rng.normal(size=4) + 0.3 * rng.normal(size=30)
    A = np.c_[X, np.ones(30)]
    coef = np.linalg.lstsq(A, y, rcond=None)[0]
    gw, gb = gradients(linear_model(coef[:4], coef[4]), X, y)
    assert np.abs(gw[0]).max() < 1e-10 and abs(gb[0][0]) < 1e-10


def test_l1_subgradient_sign_zero():
    m = linear_model([0.0, 2.0], 0.0)
    X, y = np.zeros((1, 2)), [0.0]
    gw, _ = gradients(m, X, y, l1=0.7)
    assert gw[0][:, 0].tolist() == [0.0, 0.7]


def _fd_check(model, X, y, l1, l2, h=1e-5):
    gw, gb = gradients(model, X, y, l1, l2)
    worst = 0.0
    for params, grads in ((model.weights, gw), (model.biases, gb)):
        for p, g in zip(params, grads):
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                i = it.multi_index
                old = p[i]
                p[i] = old + h
                up = loss(model, X, y, l1, l2)
                p[i] = old - h
                down = loss(model, X, y, l1, l2)
                p[i] = old
                num = (up - down) / (2 * h)
                rel = abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-6)
                worst = max(worst, rel)
    return worst


@pytest.mark.parametrize("draw", range(24))
def test_gradients_match_finite_differences(draw):
    rng = np.random.default_rng(1000 + draw)
    activation = ACTIVATIONS[draw % 4]
    l1 = (0.0, 0.01, 0.0, 0.03)[(draw // 4) % 4]
    l2 = (0.0, 0.0, 0.02, 0.05)[(draw // 4) % 4]
    d = int(rng.integers(1, 6))
    widths = tuple(int(w) for w in rng.integers(1, 6, size=int(rng.integers(0, 3))))
    model = init_model(MlpArchitecture(d, widths, activation), draw)
    for b in model.biases:
        b[:] = rng.normal(scale=0.1, size=b.shape)
    n = int(rng.integers(1, 9))
    X, y = rng.normal(size=(n, d)), rng.normal(size=n)
    assert _fd_check(model, X, y, l1, l2) < 1e-4


def test_sgd_hand_step():
    # one weight, one sample: loss (w x - y)^2, gradient 2 (w x - y) x
    m = linear_model([1.5], 0.0)
    m.biases[0][:] = 0.0
    X, y = np.array([[2.0]]), np.array([1.0])
    cfg = TrainConfig(learning_rate=0.1, batch_size=1, optimizer="sgd")
    out = fit_epochs(m, X, y, cfg, 1)
    assert out.weights[0][0, 0] == pytest.approx(1.5 - 0.1 * 2 * (3.0 - 1.0) * 2.0, abs=1e-15)
    assert out.biases[0][0] == pytest.approx(-0.1 * 2 * 2.0, abs=1e-15)


@pytest.mark.parametrize("kind", ["sgd_momentum", "rmsprop", "adam"])
def test_optimizer_update_equations(kind):
    g_seq = [np.array([0.5]), np.array([-1.0]), np.array([2.0])]
    p = np.array([1.0])
    opt = _Optimizer(kind, 0.1, [p])
    w, m, s = 1.0, 0.0, 0.0
    for t, g in enumerate(g_seq, start=1):
        opt.step([p], [g.copy()])
        g = float(g[0])
        if kind == "sgd_momentum":
            m = 0.9 * m - 0.1 * g
            w += m
        elif kind == "rmsprop":
            s = 0.9 * s + 0.1 * g * g
            w -= 0.1 * g / (np.sqrt(s) + 1e-8)
        else:
            m = 0.9 * m + 0.1 * g
            s = 0.999 * s + 0.001 * g * g
            w -= 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(s / (1 - 0.999**t)) + 1e-8)
        assert p[0] == pytest.approx(w, rel=1e-14)


def test_learns_linear_target(rng):
    x = rng.uniform(-1, 1, size=(100, 1))
    y = 3 * x[:, 0]
    cfg = TrainConfig(learning_rate=0.05, batch_size=10, max_epochs=200, optimizer="sgd",
                      early_stopping_patience=200)
    model, hist = train(linear_model([0.0], 0.0), x, y, x, y, cfg)
    w_ls = np.linalg.lstsq(x, y, rcond=None)[0][0]
    assert abs(model.weights[0][0, 0] - w_ls) < 0.01
    assert hist.train_mse[hist.best_epoch - 1] <= 1e-3


def test_zero_learning_rate_is_flat(rng):
    X, y = rng.normal(size=(20, 3)), rng.normal(size=20)
    m = init_model(MlpArchitecture(3, (4,), "tanh"), 3)
    cfg = TrainConfig(learning_rate=0.0, batch_size=5, max_epochs=5, early_stopping_patience=10)
    out, hist = train(m, X, y, X, y, cfg)
    for a, b in zip(out.weights, m.weights):
        np.testing.assert_array_equal(a, b)
    assert len(set(hist.train_mse)) == 1


def test_training_determinism_and_best_epoch(rng):
    X, y = rng.normal(size=(60, 4)), rng.normal(size=60)
    Xv, yv = rng.normal(size=(20, 4)), rng.normal(size=20)
    m = init_model(MlpArchitecture(4, (8,), "relu"), 1)
    cfg = TrainConfig(learning_rate=0.01, batch_size=8, max_epochs=80, early_stopping_patience=15, seed=5)
    a, ha = train(m, X, y, Xv, yv, cfg)
    b, hb = train(m, X, y, Xv, yv, cfg)
    assert ha.train_mse == hb.train_mse and ha.val_mse == hb.val_mse
    best = float(np.mean((predict(a, Xv) - yv) ** 2))
    assert best == pytest.approx(min(ha.val_mse), rel=1e-12)
    assert all(best <= v + 1e-15 for v in ha.val_mse)
    assert ha.best_epoch == int(np.argmin(ha.val_mse)) + 1


@settings(max_examples=10)
@given(st.integers(0, 1000))
def test_returned_model_is_best_epoch(seed):
    rng = np.random.default_rng(seed)
    X, y = rng.normal(size=(30, 2)), rng.normal(size=30)
    Xv, yv = rng.normal(size=(10, 2)), rng.normal(size=10)
    cfg = TrainConfig(learning_rate=0.05, batch_size=4, max_epochs=20, early_stopping_patience=5, seed=seed)
    model, hist = train(init_model(MlpArchitecture(2, (3,), "tanh"), seed), X, y, Xv, yv, cfg)
    val = float(np.mean((predict(model, Xv) - yv) ** 2))
    assert val <= min(hist.val_mse) + 1e-12


def test_divergence_raises():
    X = np.array([[1e3], [2e3]])
    y = np.array([1e6, -1e6])
    cfg = TrainConfig(learning_rate=10.0, batch_size=2, max_epochs=50, optimizer="sgd")
    with pytest.raises(TrainingDiverged) as err:
        train(linear_model([1.0], 0.0), X, y, X, y, cfg)
    assert err.value.epoch >= 1


def test_save_load_round_trip(tmp_path, rng):
    X = rng.normal(size=(10, 3))
    m = init_model(MlpArchitecture(3, (4, 2), "leaky_relu"), 6, fit_minmax(X, ["a", "b", "c"]))
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.architecture == m.architecture
    np.testing.assert_array_equal(predict(back, back.transform(X)), predict(m, m.transform(X)))
    assert back.stats.columns == ("a", "b", "c")
