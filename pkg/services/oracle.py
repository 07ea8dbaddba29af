"""
Oracle Module - A closed-form linear-Gaussian world

Data x0 ~ N(m, S), observations z = A x0 + N(0, noise_var I). Under the
variance-preserving forward process every marginal and conditional stays
Gaussian, so scores, MMSE denoisers and guided-sampling targets are exact.
Symmetric solves go through a Cholesky factorization.
"""

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import multivariate_normal

from services.diffusion import NoiseSchedule
from services.guidance import RunLog, guided_ancestral_loop
from services.networks import GaussianPosterior
from services.numerics import Tensor, as_tensor, matmul, reshape
from services.rng import RngStream

logger = logging.getLogger(__name__)


class OracleError(ValueError):
    """Raised for singular or non-symmetric covariances and mismatched dimensions."""


class Gaussian(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray


def _factor(matrix: np.ndarray, what: str):
    try:
        return cho_factor(matrix, lower=True)
    except LinAlgError:
        raise OracleError(f"{what} is singular or not positive definite") from None


@dataclass(frozen=True, eq=False)
class GaussianWorld:
    mean: np.ndarray
    cov: np.ndarray
    obs: np.ndarray
    noise_var: float

    def __post_init__(self):
        D = self.mean.shape[0]
        if self.cov.shape != (D, D) or self.obs.ndim != 2 or self.obs.shape[1] != D:
            raise OracleError(f"inconsistent world shapes: mean {self.mean.shape}, cov {self.cov.shape}, "
                              f"obs {self.obs.shape}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise OracleError("covariance is not symmetric")
        _factor(self.cov, "data covariance")
        if self.noise_var < 0:
            raise OracleError("latent noise variance must be non-negative")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.obs.shape[0]


def random_world(rng: RngStream, dim: int = 4, latent_dim: int = 2, noise_var: float = 0.25,
                 eigen_range: Tuple[float, float] = (0.5, 2.0)) -> GaussianWorld:
    """Random world with covariance eigenvalues drawn uniformly from eigen_range."""
    q, _ = np.linalg.qr(rng.normal((dim, dim)))
    eig = rng.uniform(eigen_range[0], eigen_range[1], (dim,))
    cov = (q * eig) @ q.T
    cov = 0.5 * (cov + cov.T)
    mean = 0.5 * rng.normal((dim,))
    obs = rng.normal((latent_dim, dim)) / np.sqrt(dim)
    return GaussianWorld(mean, cov, obs, float(noise_var))


# ---------- noisy marginal ----------
def _alpha_bar(sched: NoiseSchedule, t: int) -> float:
    sched.check_level(t)
    return float(sched.alpha_bar[t])


def _noisy_cov(world: GaussianWorld, ab: float) -> np.ndarray:
    return ab * world.cov + (1.0 - ab) * np.eye(world.dim)


def _per_level(t, x: np.ndarray, fn: Callable[[int, np.ndarray], np.ndarray]) -> np.ndarray:
    """Apply fn(level, rows) for a scalar level or row-wise for one level per row."""
    levels = np.asarray(t)
    if levels.ndim == 0:
        return fn(int(levels), x)
    out = np.empty_like(x)
    for level in np.unique(levels):
        rows = levels == level
        out[rows] = fn(int(level), x[rows])
    return out


def marginal_score(world: GaussianWorld, sched: NoiseSchedule, t, x_t) -> np.ndarray:
    """grad log p(x_t) = -(ab S + (1 - ab) I)^-1 (x_t - sqrt(ab) m); x_t is [D] or [n, D]."""
    x_t = np.asarray(x_t, dtype=np.float64)

    def score(level, x):
        ab = _alpha_bar(sched, level)
        factor = _factor(_noisy_cov(world, ab), f"noisy covariance at level {level}")
        return -cho_solve(factor, (x - np.sqrt(ab) * world.mean).T).T

    return _per_level(t, x_t, score)


def marginal_log_density(world: GaussianWorld, sched: NoiseSchedule, t: int, x_t) -> np.ndarray:
    ab = _alpha_bar(sched, t)
    return multivariate_normal(mean=np.sqrt(ab) * world.mean, cov=_noisy_cov(world, ab)).logpdf(x_t)


def posterior_mean_x0(world: GaussianWorld, sched: NoiseSchedule, t, x_t) -> np.ndarray:
    """E[x0 | x_t] = m + sqrt(ab) S (ab S + (1 - ab) I)^-1 (x_t - sqrt(ab) m); x_t is [D] or [n, D]."""
    x_t = np.asarray(x_t, dtype=np.float64)

    def mean(level, x):
        ab = _alpha_bar(sched, level)
        factor = _factor(_noisy_cov(world, ab), f"noisy covariance at level {level}")
        return world.mean + np.sqrt(ab) * (world.cov @ cho_solve(factor, (x - np.sqrt(ab) * world.mean).T)).T

    return _per_level(t, x_t, mean)


def analytic_denoiser(world: GaussianWorld, sched: NoiseSchedule, t, x_t) -> np.ndarray:
    """MMSE noise estimate -sqrt(1 - ab_t) grad log p(x_t)."""
    x_t = np.asarray(x_t, dtype=np.float64)

    def estimate(level, x):
        return -float(sched.gamma(level)) * marginal_score(world, sched, level, x)

    return _per_level(t, x_t, estimate)


def denoiser_callable(world: GaussianWorld, sched: NoiseSchedule) -> Callable:
    """(x_t, t) -> analytic noise estimate, usable wherever a trained denoiser is."""
    return lambda x_t, t: analytic_denoiser(world, sched, t, x_t)


# ---------- conditioning on z ----------
def conditional_posterior(world: GaussianWorld, z) -> Gaussian:
    """
    p(x0 | z) for z = A x0 + N(0, noise_var I).

    Returns:
        Gaussian(mean = m + S A^T K^-1 (z - A m), cov = S - S A^T K^-1 A S), K = A S A^T + noise_var I
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (world.latent_dim,):
        raise OracleError(f"latent has shape {z.shape}, world expects ({world.latent_dim},)")
    A, S = world.obs, world.cov
    innovation = A @ S @ A.T + world.noise_var * np.eye(world.latent_dim)
    factor = _factor(innovation, "innovation matrix")
    gain = cho_solve(factor, A @ S).T
    mean = world.mean + gain @ (z - A @ world.mean)
    cov = S - gain @ A @ S
    return Gaussian(mean, 0.5 * (cov + cov.T))


def likelihood_score(world: GaussianWorld, sched: NoiseSchedule, t: int, x_t, z) -> np.ndarray:
    """
    Exact grad_{x_t} log p(z | x_t).

    x0 | x_t is Gaussian with mean linear in x_t, so z | x_t is Gaussian with
    mean A m0(x_t) and a covariance that does not depend on x_t.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    ab = _alpha_bar(sched, t)
    A, S = world.obs, world.cov
    noisy = _factor(_noisy_cov(world, ab), f"noisy covariance at level {t}")
    m0 = posterior_mean_x0(world, sched, t, x_t)
    c0 = S - ab * S @ cho_solve(noisy, S)
    spread = _factor(A @ c0 @ A.T + world.noise_var * np.eye(world.latent_dim), "likelihood covariance")
    residual = z - m0 @ A.T
    return np.sqrt(ab) * cho_solve(noisy, S @ A.T @ cho_solve(spread, residual.T)).T


def conditional_score(world: GaussianWorld, sched: NoiseSchedule, t: int, x_t, z) -> np.ndarray:
    """grad log p(x_t | z), from the noisy marginal of the conditional posterior."""
    post = conditional_posterior(world, z)
    conditioned = GaussianWorld(post.mean, post.cov, world.obs, world.noise_var)
    return marginal_score(conditioned, sched, t, x_t)


def linear_encoder(world: GaussianWorld, variance=None) -> Callable[[Tensor], GaussianPosterior]:
    """Analytic encoder x -> N(A x, diag(variance)); variance defaults to noise_var on every axis."""
    var = np.broadcast_to(np.asarray(world.noise_var if variance is None else variance, dtype=np.float64),
                          (world.latent_dim,))

    def encode(x) -> GaussianPosterior:
        x = as_tensor(x)
        mu = matmul(reshape(x, (-1, world.dim)), world.obs.T)
        if x.ndim == 1:
            mu = reshape(mu, (world.latent_dim,))
        return GaussianPosterior(mu, Tensor(np.broadcast_to(var, mu.shape)))

    return encode


# ---------- guided sampling in the oracle world ----------
def sample_guided(world: GaussianWorld, sched: NoiseSchedule, z, rng: RngStream, n: int,
                  coefficient_rule: str = "derived") -> Tuple[np.ndarray, RunLog]:
    """Guided ancestral sampling with the analytic denoiser and the exact likelihood score."""
    z = np.asarray(z, dtype=np.float64)
    samples, run_log = guided_ancestral_loop(
        lambda x, t: analytic_denoiser(world, sched, t, x),
        lambda x, t: likelihood_score(world, sched, t, x, z),
        sched, rng, n, (world.dim,), coefficient_rule)
    logger.info("oracle guided sampling: %d chains over %d levels", n, sched.levels)
    return samples, run_log
