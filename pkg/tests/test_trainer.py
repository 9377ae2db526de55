"""Adam arithmetic, the training loop, and its determinism guarantees."""

import numpy as np
import pytest

from petverify.core import InvalidConfigError
from petverify.fusion import FusionStrategy, fuse, init_fusion_model, param_order
from petverify.synth import SynthConfig, gen_population
from petverify.trainer import (
    AdamState,
    TrainConfig,
    adam_step,
    derive_seeds,
    init_adam_state,
    train,
)


def scalar_params(value=0.0):
    return {"w": np.array(value, dtype=np.float64)}


def test_adam_zero_gradient_leaves_params_alone():
    params = scalar_params(1.5)
    state = init_adam_state(params)
    updated, state = adam_step(params, {"w": np.array(0.0)}, state, 0.1)
    assert float(updated["w"]) == 1.5
    assert state.step == 1


def test_adam_first_step_magnitude():
    # with g=1 bias correction gives m_hat = v_hat = 1, so the update is
    # exactly lr / (1 + eps), whatever lr is
    lr = 0.25
    params = scalar_params(0.0)
    state = init_adam_state(params)
    updated, _ = adam_step(params, {"w": np.array(1.0)}, state, lr)
    expected = -lr * 1.0 / (1.0 + 1e-8)
    assert float(updated["w"]) == pytest.approx(expected, rel=1e-15)


def test_adam_zero_gradient_tail_decays_but_keeps_direction():
    params = scalar_params(0.0)
    state = init_adam_state(params)
    p1, state = adam_step(params, {"w": np.array(1.0)}, state, 0.1)
    step1 = float(p1["w"]) - 0.0
    p2, state = adam_step(p1, {"w": np.array(0.0)}, state, 0.1)
    step2 = float(p2["w"]) - float(p1["w"])
    p3, state = adam_step(p2, {"w": np.array(0.0)}, state, 0.1)
    step3 = float(p3["w"]) - float(p2["w"])
    # momentum keeps pushing the same way while both moments decay
    assert step1 < 0 and step2 < 0 and step3 < 0
    assert abs(step2) < abs(step1)
    assert abs(step3) < abs(step2)
    # hand arithmetic for the second step: m = 0.9*0.1, v = 0.999*0.001
    m_hat = 0.9 * 0.1 / (1 - 0.9**2)
    v_hat = 0.999 * 0.001 / (1 - 0.999**2)
    assert step2 == pytest.approx(-0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-12)


def test_adam_is_functional_not_in_place():
    params = scalar_params(2.0)
    state = init_adam_state(params)
    adam_step(params, {"w": np.array(1.0)}, state, 0.1)
    assert float(params["w"]) == 2.0
    assert float(state.first_moment["w"]) == 0.0
    assert state.step == 0


def test_adam_matches_element_wise_reference():
    rng = np.random.default_rng(6)
    params = {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal(4)}
    state = init_adam_state(params)
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(val) for k, val in params.items()}
    current = {k: val.copy() for k, val in params.items()}
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    for t in range(1, 6):
        grads = {k: rng.standard_normal(val.shape) for k, val in params.items()}
        current_lib, state = adam_step(
            current, grads, state, lr, beta1=b1, beta2=b2, eps=eps
        )
        for k in params:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
            mh = m[k] / (1 - b1**t)
            vh = v[k] / (1 - b2**t)
            current[k] = current[k] - lr * mh / (np.sqrt(vh) + eps)
            np.testing.assert_allclose(current_lib[k], current[k], rtol=1e-14)
        current = current_lib


def test_derive_seeds_is_stable_and_split():
    model_seed, epoch_seeds = derive_seeds(0, 4)
    again_model, again_epochs = derive_seeds(0, 4)
    assert model_seed == again_model
    assert epoch_seeds == again_epochs
    assert len(epoch_seeds) == 4
    assert len(set(epoch_seeds)) == 4
    assert model_seed not in epoch_seeds
    longer_model, longer_epochs = derive_seeds(0, 6)
    assert longer_model == model_seed
    assert longer_epochs[:4] == epoch_seeds


def small_population(seed=0, rho=0.9, sigma=0.05):
    config = SynthConfig(
        seed=seed, n_identities=20, images_per_identity=4, dim_image=32,
        dim_text=32, noise_scale=sigma, text_informativeness=rho,
        tokens_per_text=4,
    )
    return gen_population(config)


def gated_model(seed, epochs, shared_dim=64):
    model_seed, _ = derive_seeds(seed, epochs)
    return init_fusion_model(
        FusionStrategy.GATED, dim_image=32, dim_text=32, shared_dim=shared_dim,
        seed=model_seed,
    )


def test_train_config_validation():
    with pytest.raises(InvalidConfigError):
        TrainConfig(learning_rate=-1e-4)
    with pytest.raises(InvalidConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(InvalidConfigError):
        TrainConfig(beta1=1.0)
    with pytest.raises(InvalidConfigError):
        TrainConfig(adam_eps=0.0)


def test_zero_learning_rate_is_a_bitwise_noop():
    images, texts = small_population()
    config = TrainConfig(learning_rate=0.0, epochs=3, n_identities_per_batch=10,
                         seed=5)
    model = gated_model(5, 3)
    trained, history = train(model, images, texts, config)
    assert len(history) == 3
    for name in param_order(FusionStrategy.GATED):
        np.testing.assert_array_equal(trained.params[name], model.params[name])
    # outputs are consequently identical too
    probe_image = images[0].vector
    probe_text = texts[0].vector
    np.testing.assert_array_equal(
        fuse(trained, probe_image, probe_text), fuse(model, probe_image, probe_text)
    )


def test_training_descends_on_a_separable_population():
    images, texts = small_population(seed=0, rho=0.9, sigma=0.05)
    config = TrainConfig(learning_rate=1e-3, epochs=10, n_identities_per_batch=10,
                         seed=0)
    model = gated_model(0, 10)
    trained, history = train(model, images, texts, config)
    assert len(history) == 10
    assert all(np.isfinite(h) and h >= 0.0 for h in history)
    assert history[-1] < history[0]
    moved = any(
        not np.array_equal(trained.params[name], model.params[name])
        for name in param_order(FusionStrategy.GATED)
    )
    assert moved


def test_training_is_deterministic():
    images, texts = small_population(seed=2)
    config = TrainConfig(learning_rate=1e-3, epochs=4, n_identities_per_batch=10,
                         seed=9)
    first, first_history = train(gated_model(9, 4), images, texts, config)
    second, second_history = train(gated_model(9, 4), images, texts, config)
    assert first_history == second_history
    for name in param_order(FusionStrategy.GATED):
        np.testing.assert_array_equal(first.params[name], second.params[name])


def test_baseline_path_trains_nothing_but_reports_loss():
    images, _ = small_population(seed=1)
    config = TrainConfig(epochs=2, n_identities_per_batch=10, seed=0)
    model, history = train(None, images, None, config)
    assert model is None
    assert len(history) == 2
    assert all(h > 0.0 for h in history)


def test_missing_text_coverage_is_rejected():
    images, texts = small_population(seed=1)
    config = TrainConfig(epochs=1, n_identities_per_batch=10, seed=0)
    with pytest.raises(InvalidConfigError):
        train(gated_model(0, 1), images, texts[:-1], config)


def test_duplicate_image_ids_rejected():
    images, texts = small_population(seed=1)
    config = TrainConfig(epochs=1, n_identities_per_batch=10, seed=0)
    with pytest.raises(InvalidConfigError):
        train(gated_model(0, 1), images + images[:1], texts, config)
