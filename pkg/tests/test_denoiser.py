import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from madiff.datagen import GarmentSpec, prototype_id, render
from madiff.denoiser import (
    GaussianMixtureModel,
    GaussianMixturePredictor,
    TinyDenoiser,
    analytic_eps,
    class_key,
    log_density,
    train_tiny_denoiser,
)
from madiff.diffusion import build_schedule
from madiff.errors import ConfigurationError, ParameterError
from madiff.nn import TrainConfig
from madiff.prompt import EmbeddingTable, PromptText, embed_prompt

SCHED = build_schedule(1000)


def fd_eps(gmm, x, t, c=None, h=1e-5):
    """-sqrt(1 - ab) * central-difference gradient of log p_t."""
    ab = SCHED.alpha_bar[t]
    g = np.zeros(x.size)
    flat = x.ravel()
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        up = log_density(gmm, (flat + e).reshape(x.shape), ab, c)
        dn = log_density(gmm, (flat - e).reshape(x.shape), ab, c)
        g[i] = (up - dn) / (2 * h)
    return -np.sqrt(1 - ab) * g.reshape(x.shape)


def test_point_mass_at_origin():
    gmm = GaussianMixtureModel([1.0], np.zeros((1, 2, 2)), sigma0=1e-9)
    x = np.array([[[0.3, -1.0], [2.0, 0.1]]])[0][None]
    t = 400
    eps = analytic_eps(gmm, x, t, None, SCHED)
    np.testing.assert_allclose(eps, x / np.sqrt(1 - SCHED.alpha_bar[t]), rtol=1e-9)


def test_single_component_closed_form():
    rng = np.random.default_rng(1)
    mu = rng.standard_normal((1, 2, 3))
    gmm = GaussianMixtureModel([1.0], mu, sigma0=0.3)
    x = rng.standard_normal((1, 2, 3))
    t = 250
    ab = SCHED.alpha_bar[t]
    var = (1 - ab) + ab * 0.09
    expected = np.sqrt(1 - ab) * (x - np.sqrt(ab) * mu[0]) / var
    np.testing.assert_allclose(analytic_eps(gmm, x, t, None, SCHED), expected, rtol=1e-12)
    np.testing.assert_allclose(fd_eps(gmm, x, t), expected, rtol=1e-5)


def test_midpoint_of_two_components():
    means = np.array([[[1.0, 0.0]], [[-1.0, 0.0]]])[:, None, :, :].reshape(2, 1, 1, 2)
    gmm = GaussianMixtureModel([0.5, 0.5], means, sigma0=0.1)
    x = np.zeros((1, 1, 2))
    t = 300
    ab = SCHED.alpha_bar[t]
    var = ab * 0.01 + 1 - ab
    each = [np.sqrt(1 - ab) * (x - np.sqrt(ab) * mu) / var for mu in means]
    np.testing.assert_allclose(analytic_eps(gmm, x, t, None, SCHED), np.mean(each, axis=0), atol=1e-14)


@given(seed=st.integers(0, 10_000), t=st.integers(1, 1000), k=st.integers(1, 4))
@settings(max_examples=30, deadline=None)
def test_matches_finite_difference_of_log_density(seed, t, k):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.2, 1.0, k)
    gmm = GaussianMixtureModel(w / w.sum(), rng.standard_normal((k, 1, 2, 2)), sigma0=rng.uniform(0.2, 1.0))
    x = rng.standard_normal((1, 2, 2))
    a = analytic_eps(gmm, x, t, None, SCHED)
    b = fd_eps(gmm, x, t)
    assert np.max(np.abs(a - b)) <= 1e-5 * max(1.0, np.max(np.abs(a)))


def test_conditioning_restricts_components():
    means = np.stack([np.full((1, 2, 2), 1.0), np.full((1, 2, 2), -1.0)])
    gmm = GaussianMixtureModel([0.5, 0.5], means, 0.1, classes={"red shirt": [0], "blue shirt": [1]})
    x = np.zeros((1, 2, 2))
    only_red = GaussianMixtureModel([1.0], means[:1], 0.1)
    np.testing.assert_allclose(
        analytic_eps(gmm, x, 500, PromptText("Red, shirt"), SCHED), analytic_eps(only_red, x, 500, None, SCHED)
    )
    emb = embed_prompt(PromptText("blue shirt"), EmbeddingTable())
    assert class_key(emb) == "blue shirt"
    with pytest.raises(ConfigurationError):
        analytic_eps(gmm, x, 500, "green shirt", SCHED)


def test_class_weights_override():
    means = np.stack([np.full((1, 1, 1), 1.0), np.full((1, 1, 1), -1.0)])
    gmm = GaussianMixtureModel([0.5, 0.5], means, 0.1, class_weights={"a": [0.9, 0.1]})
    np.testing.assert_allclose(gmm.conditioned_weights("a"), [0.9, 0.1])


def test_mixture_validation():
    with pytest.raises(ParameterError):
        GaussianMixtureModel([0.5, 0.6], np.zeros((2, 1, 1, 1)))
    with pytest.raises(ParameterError):
        GaussianMixtureModel([1.0], np.zeros((1, 1, 1, 1)), sigma0=0)


def test_json_round_trip_with_prototypes():
    specs = [GarmentSpec("t-shirt", "red", "short", "round", "solid"), GarmentSpec("dress", "blue", "long", "v", "dotted")]
    ids = [prototype_id(s, 3) for s in specs]
    means = np.stack([render(s, 3).image for s in specs])
    gmm = GaussianMixtureModel([0.25, 0.75], means, 0.05, classes={"x": [1]}, prototype_ids=ids)
    back = GaussianMixtureModel.from_json(gmm.to_json())
    np.testing.assert_array_equal(back.means, gmm.means)
    np.testing.assert_array_equal(back.weights, gmm.weights)
    assert back.classes == {"x": [1]}


def test_predictor_wrapper():
    gmm = GaussianMixtureModel([1.0], np.zeros((1, 1, 2, 2)), 0.2)
    pred = GaussianMixturePredictor(gmm, SCHED)
    x = np.ones((1, 2, 2))
    np.testing.assert_array_equal(pred.predict(x, 10), analytic_eps(gmm, x, 10, None, SCHED))


def test_tiny_denoiser_overfits_one_image():
    img = render(GarmentSpec("t-shirt", "red", "short", "round", "solid"), 0).image
    hyper = TrainConfig(batch_size=8, lr=1e-2, optimizer="adam", seed=0, max_steps=300)
    model = train_tiny_denoiser([(img, None)], hyper, build_schedule(100))
    losses = model.report.losses
    assert np.mean(losses[-20:]) < 0.1 * np.mean(losses[:5])


def test_tiny_denoiser_zero_steps_is_init():
    sched = build_schedule(100)
    img = np.zeros((3, 16, 16))
    model = train_tiny_denoiser([(img, None)], TrainConfig(max_steps=0, seed=4), sched)
    init = TinyDenoiser.init(sched, seed=4)
    for k in init.params:
        np.testing.assert_array_equal(model.params[k], init.params[k])


def test_tiny_denoiser_deterministic():
    sched = build_schedule(100)
    data = [(np.random.default_rng(0).uniform(-1, 1, (3, 8, 8)), None)]
    hyper = TrainConfig(max_steps=15, batch_size=4, lr=1e-2, seed=2)
    assert train_tiny_denoiser(data, hyper, sched).report.losses == train_tiny_denoiser(data, hyper, sched).report.losses
