'''
title: R7 - Representation diagnostics

These tests cover services.analysis on inputs whose answers are known:
- sample variability and reconstruction gain
- latent traversal endpoints
- posterior-variance profiles and their Spearman monotonicity
- global coherence, participation ratio and straightness
- Hutchinson smoothness probes (a linear encoder has zero Hessian energy)
- univariate factor alignment and the linear probe
'''

import numpy as np
import pytest

from services import analysis
from services.analysis import (
    MetricError, factor_alignment, latent_traverse, linear_probe, participation_ratio, reconstruction_gain,
    score_magnitude_profile, smoothness_probe, straightness, variability, variance_monotonicity,
)
from services.diffusion import build_schedule
from services.disks import Sequence
from services.guidance import RunLog, RunRecord
from services.networks import GaussianPosterior
from services.numerics import Tensor, add, matmul, mul, reshape, square, sum_
from services.rng import RngStream


# ---------- helpers ----------
def _linear_encoder(A: np.ndarray, var: float = 0.1):
    """Flattened image -> N(A x, var I)."""
    def encode(x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        flat = reshape(x, (x.shape[0], -1))
        mu = matmul(flat, A.T)
        return GaussianPosterior(mu, Tensor(np.full(mu.shape, var)))
    return encode


def _energy_encoder(A: np.ndarray):
    """Variance grows with the input energy, so noisier inputs get wider posteriors."""
    def encode(x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        flat = reshape(x, (x.shape[0], -1))
        mu = matmul(flat, A.T)
        energy = sum_(square(flat), axis=1, keepdims=True)
        variance = add(mul(energy, np.ones((1, A.shape[0]))), 0.01)
        return GaussianPosterior(mu, variance)
    return encode


# ---------- sample statistics ----------
def test_variability_is_mean_squared_spread_per_pixel():
    samples = np.array([[0.0, 0.0], [2.0, 2.0]])
    # mean (1, 1); each sample is at squared distance 2; per pixel 1
    assert variability(samples) == pytest.approx(1.0)
    with pytest.raises(MetricError):
        variability(samples[:1])


def test_reconstruction_gain():
    target = np.zeros((2, 2))
    cond = np.full((3, 2, 2), 0.5)
    uncond = np.full((3, 2, 2), 1.0)
    assert reconstruction_gain(target, cond, uncond) == pytest.approx(0.75)
    with pytest.raises(MetricError):
        reconstruction_gain(target, cond, np.zeros((3, 2, 2)))


def test_traverse_hits_endpoints_exactly():
    points = latent_traverse([0.1, 0.2], [0.7, -0.3], 4)
    assert len(points) == 4
    np.testing.assert_array_equal(points[0], [0.1, 0.2])
    np.testing.assert_array_equal(points[-1], [0.7, -0.3])
    np.testing.assert_allclose(points[1], [0.3, 0.2 - 0.5 / 3])
    with pytest.raises(MetricError):
        latent_traverse([0.0], [1.0], 1)


# ---------- variance ----------
def test_variance_profile_rises_with_noise():
    """For an encoder whose variance grows with input energy, the profile is monotone in t."""
    sched = build_schedule("linear", 50, 1e-3, 0.2)
    A = RngStream(0).normal((2, 16))
    images = np.full((16, 1, 4, 4), 0.1)
    levels = [0, 10, 25, 49]
    profile = analysis.posterior_variance_profile(_energy_encoder(A), images, sched, levels, RngStream(1), draws=4)
    assert profile.shape == (4, 2)
    # level 0 is the clean input: energy 16 * 0.01
    np.testing.assert_allclose(profile[0], 0.16 + 0.01)
    rho, per_axis = variance_monotonicity(profile, levels)
    assert rho == pytest.approx(1.0)
    assert per_axis.shape == (2,)


def test_unsorted_levels_rejected():
    with pytest.raises(MetricError):
        analysis.posterior_variance_profile(_linear_encoder(np.ones((1, 4))), np.zeros((1, 1, 2, 2)),
                                            build_schedule("linear", 10), [5, 1], RngStream(0))


def test_constant_axis_scores_zero():
    profile = np.array([[1.0, 0.1], [1.0, 0.2], [1.0, 0.3]])
    rho, per_axis = variance_monotonicity(profile, [0, 1, 2])
    np.testing.assert_allclose(per_axis, [0.0, 1.0])
    assert rho == pytest.approx(0.5)


def test_coherence_needs_fifty_images():
    with pytest.raises(MetricError):
        analysis.global_coherence(_linear_encoder(np.ones((1, 4))), np.zeros((10, 1, 2, 2)), 1,
                                  build_schedule("linear", 10), RngStream(0))


def test_coherence_report_for_energy_encoder():
    """All reported quantities are per axis; sensitivity is the mean norm of d var / d x."""
    sched = build_schedule("linear", 10, 1e-3, 0.1)
    A = RngStream(2).normal((2, 4))
    images = RngStream(3).uniform(0.0, 1.0, (60, 1, 2, 2))
    report = analysis.global_coherence(_energy_encoder(A), images, 5, sched, RngStream(4))
    assert report.coherence.shape == (2,)
    # both variance heads are the same function of x, so sensitivities agree
    assert report.sensitivity[0] == pytest.approx(report.sensitivity[1])
    assert np.all(report.sensitivity > 0)
    assert len(report.rows()) == 2
    assert sorted(report.ranking().tolist()) == [0, 1]


# ---------- sparsity and geometry ----------
def test_participation_ratio_extremes():
    assert participation_ratio([0.0, 3.0, 0.0]) == pytest.approx(1.0)
    assert participation_ratio([1.0, 1.0, 1.0, 1.0]) == pytest.approx(2.0)
    assert participation_ratio([-2.0, 2.0]) == pytest.approx(np.sqrt(2.0))
    with pytest.raises(MetricError):
        participation_ratio([0.0, 0.0])


def test_straightness_of_line_and_zigzag():
    line = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [4.0, 4.0]])
    cosines, mean = straightness(line)
    np.testing.assert_allclose(cosines, [1.0, 1.0])
    assert mean == pytest.approx(1.0)
    _, zigzag = straightness(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]))
    assert zigzag == pytest.approx(-1.0)


def test_straightness_errors():
    with pytest.raises(MetricError):
        straightness(np.zeros((2, 3)))
    with pytest.raises(MetricError, match="frames 1 and 2"):
        straightness(np.array([[0.0], [1.0], [1.0], [2.0]]))


def test_linear_encoder_preserves_straight_sequences():
    """Posterior means of a linear encoder move along a line whenever the frames do."""
    A = RngStream(5).normal((2, 4))
    base, step = RngStream(6).normal((1, 1, 2, 2)), RngStream(7).normal((1, 1, 2, 2))
    frames = np.concatenate([base + k * step for k in range(5)])
    seq = Sequence(frames, np.zeros((5, 3)), "linear-drift")
    result = analysis.latent_vs_pixel_straightness(_linear_encoder(A), [seq])
    assert result["latent"] == pytest.approx(1.0)
    assert result["pixel"] == pytest.approx(1.0)
    assert result["gain"] == pytest.approx(0.0, abs=1e-12)


# ---------- score profile ----------
def test_score_profile_from_sampling_log():
    run_log = RunLog()
    run_log.append(RunRecord(step=0, t=2.0, norm_eps=2.0, norm_guidance=1.0))
    run_log.append(RunRecord(step=1, t=1.0, norm_eps=0.0, norm_guidance=0.5))
    profile = score_magnitude_profile(run_log)
    np.testing.assert_allclose(profile.difference, [1.0, -0.5])
    np.testing.assert_allclose(profile.ratio, [0.5, 0.0])
    assert profile.rows()[0]["t"] == 2.0
    with pytest.raises(MetricError):
        score_magnitude_profile(RunLog())


# ---------- smoothness ----------
def test_linear_encoder_has_no_curvature():
    """A one-dimensional linear encoder: Jacobian energy is ||a||^2 for every probe, Hessian energy 0."""
    A = RngStream(8).normal((1, 4))
    images = RngStream(9).normal((3, 1, 2, 2))
    jac, hess = smoothness_probe(_linear_encoder(A), images, 4, RngStream(10))
    assert jac == pytest.approx(float(np.sum(A * A)))
    assert hess == pytest.approx(0.0, abs=1e-20)


def test_quadratic_encoder_has_curvature():
    """mu(x) = sum x^2 has Hessian 2I, so the probe returns 4 * D on average; Rademacher probes make it exact."""
    def encode(x):
        flat = reshape(x, (x.shape[0], -1))
        mu = sum_(square(flat), axis=1, keepdims=True)
        return GaussianPosterior(mu, Tensor(np.ones(mu.shape)))

    images = RngStream(11).normal((2, 1, 2, 2))
    _, hess = smoothness_probe(encode, images, 3, RngStream(12))
    assert hess == pytest.approx(4.0 * 4)


# ---------- alignment ----------
def test_alignment_finds_matching_axes():
    rng = RngStream(13)
    factors = rng.uniform(0.0, 1.0, (200, 2))
    latents = np.stack([2.0 * factors[:, 1] + 1.0, -factors[:, 0]], axis=1)
    report = factor_alignment(latents, factors)
    assert report.best_axis.tolist() == [1, 0]
    np.testing.assert_allclose(report.best_r2, [1.0, 1.0])
    assert report.distinct
    rows = report.rows(["c_x", "c_y"])
    assert rows[0]["factor"] == "c_x" and rows[0]["best_axis"] == 1


def test_alignment_constant_axis_and_size_check():
    factors = RngStream(14).uniform(0.0, 1.0, (120, 1))
    latents = np.stack([factors[:, 0], np.ones(120)], axis=1)
    report = factor_alignment(latents, factors)
    assert report.r2[0, 1] == 0.0
    with pytest.raises(MetricError):
        factor_alignment(latents[:50], factors[:50])


def test_linear_probe_recovers_sparse_readout():
    rng = RngStream(15)
    latents = rng.normal((300, 3))
    factors = np.stack([3.0 * latents[:, 2] + 0.5, latents[:, 0] + latents[:, 1]], axis=1)
    probe = linear_probe(latents, factors)
    np.testing.assert_allclose(probe.r2, [1.0, 1.0])
    np.testing.assert_allclose(probe.coefficients[0], [0.0, 0.0, 3.0], atol=1e-10)
    np.testing.assert_allclose(probe.participation, [1.0, np.sqrt(2.0)])
