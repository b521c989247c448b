import numpy as np
import pytest

from kdssl.errors import ConfigurationError, InvalidInputError, InvalidStateError
from kdssl.losses import SoftTargets, class_weights, combined_loss
from kdssl.model import EVAL, TRAIN, ModelSpec, build_model, init_model
from kdssl.numkernel import finite_diff_grad, relative_error, tempered_softmax


def _loss_through_model(model, X, y, w, tg, lam, mask_rng_seed=None):
    """Scalar combined loss as a function of one parameter tensor, same dropout mask each call."""
    def f(i):
        def g(v):
            old = model.params[i]
            model.params[i] = v
            model.touch()
            rng = None if mask_rng_seed is None else np.random.default_rng(mask_rng_seed)
            z, _ = model.forward(X, TRAIN if rng is not None else EVAL, rng)
            model.params[i] = old
            model.touch()
            return combined_loss(z, y, w, tg, lam)[0]
        return g
    return f


def _jitter(model, rng):
    # zero biases can put a pre-activation exactly on the ReLU kink; move off it
    for p in model.params:
        p += rng.normal(scale=0.1, size=p.shape)
    model.touch()


@pytest.mark.parametrize("trial", range(20))
def test_mlp_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(500 + trial)
    d, C = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    hidden = tuple(int(h) for h in rng.integers(2, 7, size=int(rng.integers(1, 3))))
    dropout = 0.3 if trial % 2 else 0.0
    model = init_model(ModelSpec(d, C, hidden=hidden, dropout=dropout), seed=trial)
    _jitter(model, rng)
    N = int(rng.integers(1, 6))
    X = rng.normal(size=(N, d))
    y = rng.integers(0, C, N)
    w = class_weights(rng.integers(1, 20, C))
    T = float(rng.uniform(0.5, 3.0))
    tg = SoftTargets(tempered_softmax(rng.normal(size=(N, C)), T), T)
    lam = float(rng.uniform(0, 10))
    seed = 77 if dropout else None
    z, cache = model.forward(X, TRAIN if seed else EVAL, np.random.default_rng(seed) if seed else None)
    grads = model.backward(cache, combined_loss(z, y, w, tg, lam)[1])
    f = _loss_through_model(model, X, y, w, tg, lam, seed)
    for i, p in enumerate(model.params):
        assert relative_error(grads[i], finite_diff_grad(f(i), p.copy())) <= 1e-6


@pytest.mark.parametrize("trial", range(3))
def test_convnet_gradient_matches_finite_differences(trial):
    rng = np.random.default_rng(900 + trial)
    spec = ModelSpec(36, 3, hidden=(5,), dropout=0.25, kind="conv", image_shape=(6, 6), channels=(2, 3))
    model = init_model(spec, seed=trial)
    _jitter(model, rng)
    X = rng.normal(size=(3, 36))
    y = np.array([0, 1, 2])
    w = class_weights([3, 4, 5])
    tg = SoftTargets(tempered_softmax(rng.normal(size=(3, 3)), 2.0), 2.0)
    z, cache = model.forward(X, TRAIN, np.random.default_rng(5))
    grads = model.backward(cache, combined_loss(z, y, w, tg, 3.0)[1])
    f = _loss_through_model(model, X, y, w, tg, 3.0, 5)
    for i, p in enumerate(model.params):
        assert relative_error(grads[i], finite_diff_grad(f(i), p.copy())) <= 1e-6


def test_eval_mode_is_deterministic_and_ignores_rng(rng):
    model = init_model(ModelSpec(4, 3, hidden=(6,), dropout=0.5), seed=1)
    X = rng.normal(size=(5, 4))
    g = np.random.default_rng(0)
    state = g.bit_generator.state
    a, _ = model.forward(X, EVAL, g)
    assert g.bit_generator.state == state
    np.testing.assert_array_equal(a, model.forward(X, EVAL)[0])


def test_train_mode_dropout_changes_logits_and_needs_rng(rng):
    model = init_model(ModelSpec(4, 3, hidden=(32,), dropout=0.5), seed=1)
    X = rng.normal(size=(5, 4))
    a, _ = model.forward(X, TRAIN, np.random.default_rng(0))
    assert not np.allclose(a, model.forward(X, EVAL)[0])
    with pytest.raises(InvalidInputError):
        model.forward(X, TRAIN, None)


def test_inverted_dropout_is_unbiased_in_expectation():
    model = init_model(ModelSpec(3, 2, hidden=(10,), dropout=0.5), seed=3)
    X = np.ones((1, 3))
    g = np.random.default_rng(1)
    draws = np.array([model.forward(X, TRAIN, g)[0][0] for _ in range(20000)])
    ref = model.forward(X, EVAL)[0][0]
    assert np.linalg.norm(draws.mean(axis=0) - ref) <= 0.02 * np.linalg.norm(ref)


def test_stale_cache_rejected(rng):
    model = init_model(ModelSpec(4, 3, hidden=(6,)), seed=1)
    z, cache = model.forward(rng.normal(size=(2, 4)))
    model.touch()
    with pytest.raises(InvalidStateError):
        model.backward(cache, np.zeros_like(z))
    other = init_model(ModelSpec(4, 3, hidden=(6,)), seed=1)
    z, cache = model.forward(rng.normal(size=(2, 4)))
    with pytest.raises(InvalidStateError):
        other.backward(cache, np.zeros_like(z))


def test_init_is_seeded():
    spec = ModelSpec(4, 3, hidden=(6,))
    a, b, c = init_model(spec, 1), init_model(spec, 1), init_model(spec, 2)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert not np.array_equal(a.params[0], c.params[0])


def test_input_shape_checked():
    model = init_model(ModelSpec(4, 3), seed=0)
    with pytest.raises(InvalidInputError):
        model.forward(np.zeros((2, 5)))


@pytest.mark.parametrize("kwargs", [
    dict(input_dim=4, num_classes=1), dict(input_dim=4, num_classes=3, dropout=1.0),
    dict(input_dim=4, num_classes=3, hidden=(0,)), dict(input_dim=4, num_classes=3, kind="rnn"),
    dict(input_dim=16, num_classes=3, kind="conv", image_shape=(3, 5)),
])
def test_model_spec_validation(kwargs):
    with pytest.raises(ConfigurationError):
        ModelSpec(**kwargs)


def test_spec_and_params_roundtrip(rng):
    spec = ModelSpec(36, 3, hidden=(5,), kind="conv", image_shape=(6, 6), channels=(2, 3))
    assert ModelSpec.from_dict(spec.to_dict()) == spec
    model = init_model(spec, 0)
    twin = build_model(spec, [p.copy() for p in model.params])
    X = rng.normal(size=(2, 36))
    np.testing.assert_array_equal(twin.predict_logits(X), model.predict_logits(X))
    with pytest.raises(InvalidStateError):
        build_model(spec, model.params[:-1])


def test_zero_dropout_train_equals_eval(rng):
    model = init_model(ModelSpec(4, 3, hidden=(6,), dropout=0.0), seed=2)
    X = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(model.forward(X, TRAIN, np.random.default_rng(0))[0], model.forward(X)[0])


def test_linear_model_is_affine_with_closed_form_gradient(rng):
    model = init_model(ModelSpec(3, 2, hidden=(), dropout=0.0), seed=0)
    W, b = model.params
    assert np.all(b == 0)
    X = rng.normal(size=(4, 3))
    z, cache = model.forward(X)
    np.testing.assert_allclose(z, X @ W + b, atol=1e-15)
    gW, gb = model.backward(cache, np.ones_like(z))
    np.testing.assert_allclose(gW, np.outer(X.sum(axis=0), np.ones(2)), atol=1e-12)
    np.testing.assert_array_equal(gb, [4.0, 4.0])


def test_zero_upstream_gradient_gives_zero_grads(rng):
    model = init_model(ModelSpec(4, 3, hidden=(5, 6)), seed=0)
    z, cache = model.forward(rng.normal(size=(2, 4)), TRAIN, np.random.default_rng(1))
    assert all(np.all(g == 0) for g in model.backward(cache, np.zeros_like(z)))


def test_biases_zero_and_param_count():
    model = init_model(ModelSpec(4, 3, hidden=(5, 6)), seed=0)
    assert all(np.all(p == 0) for p in model.params[1::2])
    assert model.param_count == 4 * 5 + 5 + 5 * 6 + 6 + 6 * 3 + 3
