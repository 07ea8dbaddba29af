'''
title: R4 - Posterior-score guidance, training and guided sampling

These tests cover services.guidance:
- guidance masks and the masked Gaussian log posterior
- g = grad_x log q(z | x) matches the closed form for a linear encoder and finite differences otherwise
- the closed-form KL agrees with a Monte-Carlo estimate
- the training loss reduces to the plain denoising loss without guidance, and its
  encoder gradient passes the finite-difference check
- the training loop (joint and frozen-denoiser) and divergence handling
- the guided sampler: zero guidance reproduces unconditional sampling
'''

import math
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from config import load_config, with_overrides
from services.diffusion import build_schedule, ddpm_loss, sample_unconditional
from services.guidance import (
    Adam, GuidanceMask, MaskError, RunLog, RunRecord, TrainingDivergedError, conditional_noise_estimate,
    draw_latents, guidance_score, guided_ancestral_loop, guided_coefficient, kl_to_standard_normal, kl_weight_at,
    log_posterior, sami_loss, sample_conditional, sample_from_latents, sample_unguided, train,
)
from services.networks import GaussianPosterior
from services.numerics import Tensor, add, finite_difference_check, grad, matmul, reshape, silu, softplus
from services.rng import RngStream


# ---------- helpers ----------
def _linear_encoder(A: np.ndarray, var: np.ndarray):
    """x [B, D] -> N(x A^T, diag var)."""
    def encode(x):
        mu = matmul(reshape(x, (-1, A.shape[1])), A.T)
        return GaussianPosterior(mu, Tensor(np.broadcast_to(var, mu.shape)))
    return encode


def _nonlinear_encoder(w_mean, w_var):
    """x [B, 4] -> N(silu(x W_mean), softplus(x W_var) + 0.1)."""
    def encode(x):
        flat = reshape(x, (-1, 4))
        return GaussianPosterior(silu(matmul(flat, w_mean)), add(softplus(matmul(flat, w_var)), 0.1))
    return encode


def _posterior(mean, var):
    return GaussianPosterior(Tensor(np.asarray(mean, dtype=float)), Tensor(np.asarray(var, dtype=float)))


# ---------- masks ----------
def test_mask_parsing():
    assert GuidanceMask.parse("all", 3).is_full
    mask = GuidanceMask.parse("0,2", 3)
    assert mask.active == (True, False, True)
    assert mask.count == 2
    np.testing.assert_array_equal(mask.weights(), [1.0, 0.0, 1.0])


def test_mask_errors():
    """Empty masks, out-of-range axes and garbage text are rejected."""
    with pytest.raises(MaskError):
        GuidanceMask((False, False))
    with pytest.raises(MaskError):
        GuidanceMask.from_indices(2, [2])
    with pytest.raises(MaskError):
        GuidanceMask.parse("x", 2)


# ---------- posterior terms ----------
def test_log_posterior_matches_gaussian_density():
    mean, var, z = np.array([0.5, -1.0]), np.array([0.25, 2.0]), np.array([1.0, 0.0])
    value = log_posterior(_posterior(mean, var), z, GuidanceMask.full(2)).item()
    expected = float(np.sum(-0.5 * ((z - mean) ** 2 / var + np.log(var) + math.log(2 * math.pi))))
    assert value == pytest.approx(expected)


def test_masked_log_posterior_drops_inactive_axes():
    mean, var, z = np.array([0.5, -1.0]), np.array([0.25, 2.0]), np.array([1.0, 0.0])
    masked = log_posterior(_posterior(mean, var), z, GuidanceMask.from_indices(2, [0])).item()
    expected = -0.5 * ((z[0] - mean[0]) ** 2 / var[0] + math.log(var[0]) + math.log(2 * math.pi))
    assert masked == pytest.approx(expected)


def test_mask_dimension_must_match_posterior():
    with pytest.raises(MaskError):
        log_posterior(_posterior([0.0, 0.0], [1.0, 1.0]), np.zeros(2), GuidanceMask.full(3))


def test_kl_to_standard_normal():
    """KL is 0 at N(0, I) and matches the closed form elsewhere."""
    assert kl_to_standard_normal(_posterior([0.0, 0.0], [1.0, 1.0])).item() == pytest.approx(0.0)
    value = kl_to_standard_normal(_posterior([1.0], [0.5])).item()
    assert value == pytest.approx(0.5 * (1.0 + 0.5 - 1.0 - math.log(0.5)))


def test_guidance_score_for_linear_encoder():
    """For q(z | x) = N(Ax, diag v): grad_x log q = A^T ((z - Ax) / v)."""
    rng = RngStream(0)
    A = rng.normal((2, 4))
    var = np.array([0.5, 2.0])
    x, z = rng.normal((3, 4)), rng.normal((3, 2))
    g = guidance_score(_linear_encoder(A, var), x, z, GuidanceMask.full(2))
    expected = ((z - x @ A.T) / var) @ A
    np.testing.assert_allclose(g.data, expected, atol=1e-12)


def test_masked_guidance_ignores_inactive_axis():
    rng = RngStream(1)
    A = rng.normal((2, 4))
    var = np.array([0.5, 2.0])
    x, z = rng.normal((1, 4)), rng.normal((1, 2))
    g = guidance_score(_linear_encoder(A, var), x, z, GuidanceMask.from_indices(2, [1]))
    expected = ((z[:, 1:] - x @ A[1:].T) / var[1]) @ A[1:]
    np.testing.assert_allclose(g.data, expected, atol=1e-12)


def test_guidance_score_for_nonlinear_encoder_matches_finite_differences():
    """g agrees with central differences of log q(z | x) when mean and variance both depend on x."""
    rng = RngStream(2)
    encoder = _nonlinear_encoder(rng.normal((4, 2)), rng.normal((4, 2)))
    x, z = rng.normal((3, 4)), rng.normal((3, 2))
    mask = GuidanceMask.full(2)
    g = guidance_score(encoder, x, z, mask)

    numeric = np.zeros_like(x)
    eps = 1e-6
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = eps
        upper = np.sum(log_posterior(encoder(Tensor(x + step)), z, mask).data)
        lower = np.sum(log_posterior(encoder(Tensor(x - step)), z, mask).data)
        numeric.flat[i] = (upper - lower) / (2 * eps)
    np.testing.assert_allclose(g.data, numeric, atol=1e-7)


def test_kl_matches_monte_carlo_estimate():
    """The closed-form KL equals the sample mean of log q(z) - log N(z; 0, I) for z drawn from q."""
    mean, var = np.array([1.0, -0.5]), np.array([0.5, 2.0])
    z = mean + np.sqrt(var) * RngStream(6).normal((200000, 2))
    log_ratio = np.sum(norm.logpdf(z, mean, np.sqrt(var)) - norm.logpdf(z), axis=1)
    assert kl_to_standard_normal(_posterior(mean, var)).item() == pytest.approx(log_ratio.mean(), abs=0.01)


def test_conditional_noise_estimate_sign():
    """eps_cond = eps_hat - sign * gamma_t * g."""
    sched = build_schedule("linear", 10)
    eps_hat, g = np.ones((2, 3)), np.full((2, 3), 2.0)
    gamma = float(sched.gamma(4))
    np.testing.assert_allclose(conditional_noise_estimate(eps_hat, g, 4, sched).data, 1 - 2 * gamma)
    np.testing.assert_allclose(conditional_noise_estimate(eps_hat, g, 4, sched, sign=-1.0).data, 1 + 2 * gamma)


# ---------- loss ----------
def test_unguided_loss_without_kl_equals_denoising_loss(tiny_bundle, tiny_images):
    """guided=False with beta = 0 consumes the stream like ddpm_loss and gives the same value."""
    images, _ = tiny_images
    config = tiny_bundle.config
    loss, record = sami_loss(tiny_bundle.denoiser_fn(), tiny_bundle.encoder_fn(), images[:4], tiny_bundle.schedule,
                             config.training, RngStream(8), kl_weight=0.0, guided=False)
    plain = ddpm_loss(tiny_bundle.denoiser_fn(), images[:4], tiny_bundle.schedule, RngStream(8))
    assert loss.item() == pytest.approx(plain.item())
    assert record.norm_guidance == 0.0


def test_guided_loss_reaches_both_networks(tiny_bundle, tiny_images):
    """The loss is differentiable in encoder and denoiser parameters (through g's double backward)."""
    images, _ = tiny_images
    loss, record = sami_loss(tiny_bundle.denoiser_fn(), tiny_bundle.encoder_fn(), images[:4], tiny_bundle.schedule,
                             tiny_bundle.config.training, RngStream(9))
    enc_grads = grad(loss, tiny_bundle.encoder.parameters())
    dec_grads = grad(loss, tiny_bundle.denoiser.parameters())
    assert any(np.any(g.data != 0) for g in enc_grads)
    assert any(np.any(g.data != 0) for g in dec_grads)
    assert np.isfinite(record.loss) and record.norm_guidance > 0


def test_several_guidance_samples_share_level_and_kl(tiny_bundle, tiny_images):
    """Extra z draws come after the level and noise draws, so t and the KL term are unchanged."""
    images, _ = tiny_images
    one = tiny_bundle.config.training
    three = with_overrides(tiny_bundle.config, "training", guidance_samples=3).training
    _, single = sami_loss(tiny_bundle.denoiser_fn(), tiny_bundle.encoder_fn(), images[:4], tiny_bundle.schedule,
                          one, RngStream(10))
    _, averaged = sami_loss(tiny_bundle.denoiser_fn(), tiny_bundle.encoder_fn(), images[:4], tiny_bundle.schedule,
                            three, RngStream(10))
    assert averaged.t == single.t
    assert averaged.kl == pytest.approx(single.kl)
    assert np.isfinite(averaged.loss) and averaged.norm_guidance > 0


def test_loss_gradient_in_encoder_weights_matches_finite_differences(tiny_config):
    """d loss / d W_mean passes the gradient check; it flows through the KL, z and the double backward of g."""
    sched = build_schedule("linear", 10, 0.01, 0.2)
    train_cfg = with_overrides(tiny_config, "training", kl_weight=0.5).training
    rng = RngStream(3)
    x0, w_var = rng.normal((4, 1, 2, 2)), 0.5 * rng.normal((4, 2))

    def denoiser(x_t, t):
        return Tensor(0.1 * np.asarray(x_t))

    def loss_at(w_mean):
        loss, _ = sami_loss(denoiser, _nonlinear_encoder(w_mean, w_var), x0, sched, train_cfg, RngStream(4))
        return loss

    assert finite_difference_check(loss_at, RngStream(5).normal((4, 2))) < 1e-5


def test_kl_weight_warm_up():
    """Exponential warm-up starts at kl_weight * start_factor and reaches kl_weight."""
    cfg = type("Cfg", (), {"kl_weight": 1e-2, "kl_anneal": "exponential", "kl_anneal_epochs": 11,
                           "kl_start_factor": 1e-4})()
    assert kl_weight_at(cfg, 0) == pytest.approx(1e-6)
    assert kl_weight_at(cfg, 5) == pytest.approx(1e-4)
    assert kl_weight_at(cfg, 10) == pytest.approx(1e-2)
    assert kl_weight_at(cfg, 20) == pytest.approx(1e-2)
    cfg.kl_anneal = "constant"
    assert kl_weight_at(cfg, 0) == pytest.approx(1e-2)


def test_last_training_epoch_uses_full_kl_weight(tiny_config):
    """When epochs equals kl_anneal_epochs the final epoch trains at kl_weight itself."""
    preset = load_config(Path(__file__).resolve().parents[1] / "configs" / "disks.cfg")
    for cfg in (preset.training, tiny_config.training):
        assert cfg.epochs == cfg.kl_anneal_epochs
        assert kl_weight_at(cfg, cfg.epochs - 1) == pytest.approx(cfg.kl_weight)
        assert kl_weight_at(cfg, 0) == pytest.approx(cfg.kl_weight * cfg.kl_start_factor)


def test_adam_first_step_moves_by_learning_rate():
    """After one Adam step every coordinate moves by lr against the sign of its gradient."""
    p = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    Adam([p], lr=0.1).step([Tensor(np.array([3.0, -0.5]))])
    np.testing.assert_allclose(p.data, [0.9, -0.9], atol=1e-6)


# ---------- training ----------
def test_training_runs_and_logs_every_step(tiny_config, tiny_images):
    images, _ = tiny_images
    bundle, run_log = train(tiny_config, images, RngStream(0))
    # 2 epochs x 2 batches of 4
    assert len(run_log) == 4
    assert run_log.column("step").tolist() == [0, 1, 2, 3]
    assert np.all(np.isfinite(run_log.column("loss")))
    assert bundle.encoder.latent_dim == 2


def test_training_is_deterministic(tiny_config, tiny_images):
    images, _ = tiny_images
    _, log_a = train(tiny_config, images, RngStream(4))
    _, log_b = train(tiny_config, images, RngStream(4))
    np.testing.assert_array_equal(log_a.column("loss"), log_b.column("loss"))


def test_frozen_denoiser_mode_keeps_denoiser(tiny_bundle, tiny_images):
    images, _ = tiny_images
    config = with_overrides(tiny_bundle.config, "training", mode="frozen-denoiser")
    before = {k: v.data.copy() for k, v in tiny_bundle.denoiser.tensors.items()}
    enc_before = {k: v.data.copy() for k, v in tiny_bundle.encoder.tensors.items()}
    trained, _ = train(config, images, RngStream(0), bundle=tiny_bundle)
    for name, value in before.items():
        np.testing.assert_array_equal(trained.denoiser.tensors[name].data, value)
    assert any(not np.array_equal(trained.encoder.tensors[k].data, v) for k, v in enc_before.items())


def test_divergence_raises_with_record(tiny_config, tiny_images, monkeypatch):
    """A non-finite loss stops training and reports the step that produced it."""
    images, _ = tiny_images

    def nan_loss(*args, **kwargs):
        return Tensor(float("nan")), RunRecord(step=0, t=3.0, loss=float("nan"))

    monkeypatch.setattr("services.guidance.sami_loss", nan_loss)
    with pytest.raises(TrainingDivergedError) as info:
        train(tiny_config, images, RngStream(0))
    assert info.value.record.step == 0
    assert math.isnan(info.value.record.loss)


def test_training_rejects_empty_dataset(tiny_config):
    with pytest.raises(ValueError):
        train(tiny_config, np.zeros((0, 1, 8, 8)), RngStream(0))


# ---------- sampling ----------
def test_coefficient_rules():
    sched = build_schedule("linear", 10, 0.01, 0.2)
    alpha = sched.alpha[5]
    assert guided_coefficient("derived", 5, sched) == pytest.approx((1 - alpha) / math.sqrt(alpha))
    assert guided_coefficient("algorithm", 5, sched) == pytest.approx(math.sqrt(1 - alpha))
    with pytest.raises(ValueError):
        guided_coefficient("average", 5, sched)


def test_zero_guidance_reproduces_unconditional_sampler():
    """With g = 0 the guided loop draws the same noise in the same order as the unconditional sampler."""
    sched = build_schedule("linear", 8, 0.01, 0.2)

    def eps_fn(x, t):
        return 0.1 * x

    guided, run_log = guided_ancestral_loop(eps_fn, lambda x, t: np.zeros_like(x), sched, RngStream(6), 3, (4,))
    plain = sample_unconditional(lambda x, t: Tensor(eps_fn(x, t)), sched, RngStream(6), 3, (4,))
    np.testing.assert_allclose(guided, plain)
    assert len(run_log) == 7
    assert run_log.column("t").tolist() == [7, 6, 5, 4, 3, 2, 1]
    assert np.all(run_log.column("norm_guidance") == 0)


def test_draw_latents_from_latent_or_image(tiny_bundle, tiny_images):
    images, _ = tiny_images
    fixed = draw_latents(tiny_bundle, RngStream(0), 3, latent=[0.5, -0.5])
    np.testing.assert_array_equal(fixed, np.tile([0.5, -0.5], (3, 1)))
    drawn = draw_latents(tiny_bundle, RngStream(0), 3, image=images[0])
    assert drawn.shape == (3, 2)
    with pytest.raises(ValueError):
        draw_latents(tiny_bundle, RngStream(0), 3)
    with pytest.raises(MaskError):
        draw_latents(tiny_bundle, RngStream(0), 3, latent=[1.0, 2.0, 3.0])


def test_conditional_sampling_shapes_and_log(tiny_bundle, tiny_images):
    images, _ = tiny_images
    samples, run_log = sample_conditional(tiny_bundle, RngStream(1), 2, image=images[0])
    assert samples.shape == (2, 1, 8, 8)
    assert np.all(np.isfinite(samples))
    assert len(run_log) == tiny_bundle.schedule.levels - 1
    assert np.all(run_log.column("norm_guidance") > 0)


def test_masked_sampling_from_latents(tiny_bundle):
    samples, _ = sample_from_latents(tiny_bundle, RngStream(2), np.zeros((2, 2)),
                                     mask=GuidanceMask.from_indices(2, [0]), coefficient_rule="algorithm")
    assert samples.shape == (2, 1, 8, 8)


def test_unguided_sampling_shape(tiny_bundle):
    assert sample_unguided(tiny_bundle, RngStream(3), 2).shape == (2, 1, 8, 8)


def test_sampling_does_not_touch_parameters(tiny_bundle):
    """Guided sampling runs on frozen copies; the bundle's tensors are unchanged."""
    before = {k: v.data.copy() for k, v in tiny_bundle.encoder.tensors.items()}
    sample_from_latents(tiny_bundle, RngStream(2), np.zeros((1, 2)))
    for name, value in before.items():
        np.testing.assert_array_equal(tiny_bundle.encoder.tensors[name].data, value)


def test_run_log_columns():
    run_log = RunLog()
    run_log.append(RunRecord(step=0, t=4.0, loss=1.5))
    assert run_log.rows()[0]["loss"] == 1.5
    assert math.isnan(run_log.column("kl")[0])
    with pytest.raises(KeyError):
        run_log.column("accuracy")
