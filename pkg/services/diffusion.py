"""
Diffusion Module - Variance-preserving forward process and DDPM reverse process

Level indexing: t runs over [0, T). Level 0 is the least noisy level
(alpha_bar[0] = 1 - beta[0]); a reverse transition goes from level t to t-1,
so transitions exist for t >= 1 and ancestral sampling ends at level 0.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Tuple, Union

import numpy as np
from tqdm import tqdm

from services.numerics import Tensor, as_tensor, mean, mul, square, sub, sum_
from services.rng import RngStream

logger = logging.getLogger(__name__)

Levels = Union[int, np.ndarray]
NoiseEstimator = Callable[[np.ndarray, Levels], Tensor]


class ScheduleError(ValueError):
    """Raised for invalid schedule parameters or noise levels."""


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    levels: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    params: Tuple[Tuple[str, float], ...] = ()

    @property
    def T(self) -> int:
        return self.levels

    def check_level(self, t: Levels) -> None:
        t = np.asarray(t)
        if t.size and (np.any(t < 0) or np.any(t >= self.levels)):
            raise ScheduleError(f"noise level {t.tolist()} outside [0, {self.levels})")

    def gamma(self, t: Levels) -> np.ndarray:
        """Noise scale sqrt(1 - alpha_bar[t])."""
        self.check_level(t)
        return np.sqrt(1.0 - self.alpha_bar[np.asarray(t)])

    def describe(self) -> Dict[str, float]:
        return dict(self.params)


def build_schedule(kind: str, T: int, beta_min: float = 1e-4, beta_max: float = 0.02,
                   cosine_offset: float = 0.008) -> NoiseSchedule:
    """
    Build a noise schedule.

    Args:
        kind: "linear" (beta evenly spaced over [beta_min, beta_max]) or
            "cosine" (alpha_bar from a squared-cosine ramp with offset s)
        T: number of levels, at least 2

    Returns:
        NoiseSchedule with beta, alpha = 1 - beta, alpha_bar = cumprod(alpha)
    """
    if T < 2:
        raise ScheduleError(f"a schedule needs at least 2 levels, got {T}")
    if kind == "linear":
        if not (0 < beta_min <= beta_max < 1):
            raise ScheduleError(f"beta bounds must satisfy 0 < {beta_min} <= {beta_max} < 1")
        beta = np.linspace(beta_min, beta_max, T, dtype=np.float64)
        params = (("beta_min", float(beta_min)), ("beta_max", float(beta_max)))
    elif kind == "cosine":
        if cosine_offset <= 0:
            raise ScheduleError("cosine offset must be positive")

        def ramp(u):
            return np.cos((u + cosine_offset) / (1 + cosine_offset) * np.pi / 2) ** 2

        # level t sits at continuous time (t + 1) / T
        target = ramp(np.arange(1, T + 1, dtype=np.float64) / T) / ramp(0.0)
        previous = np.concatenate([[1.0], target[:-1]])
        beta = np.clip(1.0 - target / previous, 1e-12, 0.999)
        params = (("cosine_offset", float(cosine_offset)),)
    else:
        raise ScheduleError(f"unknown schedule kind '{kind}'")

    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    logger.debug("%s schedule: T=%d alpha_bar[0]=%.6f alpha_bar[-1]=%.3e", kind, T, alpha_bar[0], alpha_bar[-1])
    return NoiseSchedule(kind, T, beta, alpha, alpha_bar, params)


def schedule_from_config(cfg) -> NoiseSchedule:
    """cfg is a config.ScheduleConfig."""
    return build_schedule(cfg.kind, cfg.levels, cfg.beta_min, cfg.beta_max, cfg.cosine_offset)


def _per_sample(values: np.ndarray, t: Levels, ndim: int) -> np.ndarray:
    """Index a per-level table at t and shape it to broadcast over a batch of rank ndim."""
    picked = values[np.asarray(t)]
    if np.ndim(picked) == 0:
        return picked
    return picked.reshape((-1,) + (1,) * (ndim - 1))


# ---------- forward process ----------
def forward_noise(x0: np.ndarray, t: Levels, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ScheduleError(f"forward_noise: x0 {x0.shape} and eps {eps.shape} differ")
    sched.check_level(t)
    a = _per_sample(sched.alpha_bar, t, x0.ndim)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def ddpm_transition_mean(x_t: np.ndarray, t: Levels, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Unconditional reverse mean (x_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t)."""
    sched.check_level(t)
    if np.any(np.asarray(t) < 1):
        raise ScheduleError("no reverse transition below level 0")
    x_t, eps_hat = np.asarray(x_t, dtype=np.float64), np.asarray(eps_hat, dtype=np.float64)
    alpha = _per_sample(sched.alpha, t, x_t.ndim)
    alpha_bar = _per_sample(sched.alpha_bar, t, x_t.ndim)
    return (x_t - (1.0 - alpha) / np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha)


def transition_std(t: int, sched: NoiseSchedule) -> float:
    """Std of the noise added on the transition out of level t (none on the last step)."""
    return float(np.sqrt(1.0 - sched.alpha[t])) if t > 1 else 0.0


# ---------- timestep draws and weighting ----------
def sample_levels(distribution: str, sched: NoiseSchedule, n: int, rng: RngStream) -> np.ndarray:
    """
    Draw n training levels.

    uniform: every level equally likely
    increasing: P(t) proportional to t + 1 (the 1-based level number)
    zero: always level 0 (clean-input ablation)
    """
    if distribution == "uniform":
        return rng.integers(0, sched.levels, (n,))
    if distribution == "increasing":
        weights = np.arange(1, sched.levels + 1, dtype=np.float64)
        return rng.choice(sched.levels, n, p=weights / weights.sum())
    if distribution == "zero":
        return np.zeros(n, dtype=np.int64)
    raise ScheduleError(f"unknown timestep distribution '{distribution}'")


def loss_weights(weighting: str, t: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """lambda_t: 'simple' is 1; 'noise-level' grows linearly with t and averages 1 over levels."""
    if weighting == "simple":
        return np.ones(len(t))
    if weighting == "noise-level":
        return 2.0 * (np.asarray(t, dtype=np.float64) + 1.0) / (sched.levels + 1.0)
    raise ScheduleError(f"unknown loss weighting '{weighting}'")


def draw_noising(x0: np.ndarray, sched: NoiseSchedule, rng: RngStream,
                 t_distribution: str = "uniform") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw levels then noise (in that order) and noise the batch: returns (t, eps, x_t)."""
    x0 = np.asarray(x0, dtype=np.float64)
    t = sample_levels(t_distribution, sched, x0.shape[0], rng)
    eps = rng.normal(x0.shape)
    return t, eps, forward_noise(x0, t, eps, sched)


def weighted_squared_error(residual: Tensor, weights: np.ndarray) -> Tensor:
    """Batch mean of lambda_t * ||residual||^2 (sum over all non-batch axes)."""
    residual = as_tensor(residual)
    per_example = sum_(square(residual), axis=tuple(range(1, residual.ndim)))
    return mean(mul(per_example, weights))


def ddpm_loss(denoiser: NoiseEstimator, x0: np.ndarray, sched: NoiseSchedule, rng: RngStream,
              t_distribution: str = "uniform", weighting: str = "simple") -> Tensor:
    """
    Denoising loss: batch mean of lambda_t ||eps - eps_theta(x_t, t)||^2.

    Args:
        denoiser: callable (x_t [B, C, H, W], t [B]) -> Tensor noise estimate
        x0: clean batch [B, C, H, W]
    """
    t, eps, x_t = draw_noising(x0, sched, rng, t_distribution)
    eps_hat = denoiser(x_t, t)
    return weighted_squared_error(sub(eps, eps_hat), loss_weights(weighting, t, sched))


# ---------- ancestral sampling ----------
def sample_unconditional(denoiser: NoiseEstimator, sched: NoiseSchedule, rng: RngStream, n: int,
                         shape: Tuple[int, ...], progress: bool = False) -> np.ndarray:
    """
    Ancestral sampling from x_{T-1} ~ N(0, I) down to level 0.

    Args:
        denoiser: callable (x_t, t) -> noise estimate
        shape: per-sample shape, e.g. (1, 32, 32)

    Returns:
        array [n, *shape]
    """
    noise = rng.split("noise")
    x = noise.normal((n,) + tuple(shape))
    for t in tqdm(range(sched.levels - 1, 0, -1), desc="sampling", disable=not progress, leave=False):
        eps_hat = np.asarray(as_tensor(denoiser(x, t)).data)
        x = ddpm_transition_mean(x, t, eps_hat, sched)
        std = transition_std(t, sched)
        if std > 0:
            x = x + std * noise.normal(x.shape)
    return x
