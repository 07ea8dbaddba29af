"""
Analysis Module - Diagnostics of the learned representation

All functions are pure over their inputs. Encoders are passed as callables
x -> GaussianPosterior; encoder evaluations that need no gradient run under
no_grad in chunks of images.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
from scipy import stats as scipy_stats

from services.diffusion import NoiseSchedule, forward_noise
from services.networks import GaussianPosterior
from services.numerics import Tensor, grad, mul, no_grad, slice_tensor, sum_
from services.rng import RngStream

logger = logging.getLogger(__name__)

Encoder = Callable[[Tensor], GaussianPosterior]

CHUNK = 256


class MetricError(ValueError):
    """Raised when a metric's inputs are too few or degenerate."""


def encode_arrays(encoder: Encoder, images: np.ndarray, chunk: int = CHUNK) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior means and variances [N, d] for a batch of images, without a tape."""
    means, variances = [], []
    with no_grad():
        for start in range(0, len(images), chunk):
            post = encoder(images[start:start + chunk])
            means.append(post.mean.data)
            variances.append(post.variance.data)
    return np.concatenate(means), np.concatenate(variances)


# ---------- sample statistics ----------
def variability(samples) -> float:
    """Mean squared distance of samples from their mean, per pixel: (1/N) sum ||x_i - x_bar||^2 / D."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] < 2:
        raise MetricError("variability needs at least 2 samples")
    flat = samples.reshape(samples.shape[0], -1)
    centered = flat - flat.mean(axis=0)
    return float(np.mean(np.sum(centered * centered, axis=1)) / flat.shape[1])


def reconstruction_gain(target: np.ndarray, conditional: np.ndarray, unconditional: np.ndarray) -> float:
    """1 - mse(conditional samples, target) / mse(unconditional samples, target)."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    mse_cond = float(np.mean((np.asarray(conditional).reshape(len(conditional), -1) - target) ** 2))
    mse_uncond = float(np.mean((np.asarray(unconditional).reshape(len(unconditional), -1) - target) ** 2))
    if mse_uncond == 0:
        raise MetricError("unconditional samples reproduce the target exactly; gain undefined")
    return 1.0 - mse_cond / mse_uncond


def latent_traverse(z_a, z_b, steps: int) -> List[np.ndarray]:
    """Evenly spaced points from z_a to z_b, endpoints included."""
    if steps < 2:
        raise MetricError("a traversal needs at least 2 steps")
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    points = [z_a + (k / (steps - 1)) * (z_b - z_a) for k in range(steps - 1)]
    points.append(z_b.copy())
    return points


# ---------- posterior variance ----------
def posterior_variance_profile(encoder: Encoder, x0: np.ndarray, sched: NoiseSchedule, levels: Sequence[int],
                               rng: RngStream, draws: int = 8) -> np.ndarray:
    """
    Mean posterior variance per latent axis at each level, averaged over images
    and noise draws. Level 0 is evaluated on the clean images (no draw).

    Returns:
        array [len(levels), d]
    """
    levels = [int(t) for t in levels]
    if levels != sorted(levels):
        raise MetricError("levels must be sorted ascending")
    x0 = np.asarray(x0, dtype=np.float64)
    rows = []
    for t in levels:
        if t == 0:
            rows.append(encode_arrays(encoder, x0)[1].mean(axis=0))
            continue
        acc = None
        for _ in range(draws):
            x_t = forward_noise(x0, t, rng.normal(x0.shape), sched)
            var = encode_arrays(encoder, x_t)[1].mean(axis=0)
            acc = var if acc is None else acc + var
        rows.append(acc / draws)
    return np.stack(rows)


def variance_monotonicity(profile: np.ndarray, levels: Sequence[int]) -> Tuple[float, np.ndarray]:
    """
    Spearman rank correlation of each axis's variance with the noise level.

    Returns:
        (mean rho over axes, per-axis rho); a constant axis scores 0
    """
    profile = np.asarray(profile, dtype=np.float64)
    rhos = []
    for axis in range(profile.shape[1]):
        column = profile[:, axis]
        if np.all(column == column[0]):
            logger.warning("variance profile of axis %d is constant", axis)
            rhos.append(0.0)
            continue
        rho, _ = scipy_stats.spearmanr(levels, column)
        rhos.append(float(rho))
    rhos = np.array(rhos)
    return float(rhos.mean()), rhos


# ---------- global axes ----------
@dataclass
class AxisReport:
    population_var: np.ndarray
    noisy_var: np.ndarray
    sensitivity: np.ndarray
    coherence: np.ndarray

    def ranking(self) -> np.ndarray:
        """Axes ordered by decreasing coherence."""
        return np.argsort(-self.coherence, kind="stable")

    def rows(self) -> List[Dict[str, float]]:
        return [
            {"axis": i, "population_var": float(self.population_var[i]), "noisy_var": float(self.noisy_var[i]),
             "sensitivity": float(self.sensitivity[i]), "coherence": float(self.coherence[i])}
            for i in range(len(self.coherence))
        ]


def variance_sensitivity(encoder: Encoder, x_t: np.ndarray, chunk: int = CHUNK) -> np.ndarray:
    """Mean over images of ||d var_i / d x_t|| for each axis i: [d]."""
    totals = None
    for start in range(0, len(x_t), chunk):
        leaf = Tensor(x_t[start:start + chunk], requires_grad=True)
        variance = encoder(leaf).variance
        norms = []
        for axis in range(variance.shape[-1]):
            (g,) = grad(sum_(slice_tensor(variance, (slice(None), axis))), [leaf])
            flat = g.data.reshape(g.shape[0], -1)
            norms.append(np.sqrt(np.sum(flat * flat, axis=1)).sum())
        totals = np.array(norms) if totals is None else totals + np.array(norms)
    return totals / len(x_t)


def global_coherence(encoder: Encoder, images: np.ndarray, t_ref: int, sched: NoiseSchedule, rng: RngStream,
                     eps: float = 1e-8) -> AxisReport:
    """
    Per axis: (a) population variance of clean posterior means, (b) mean noisy
    posterior variance at t_ref, (c) mean input-sensitivity of the variance;
    coherence = b / ((a + eps)(c + eps)).
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] < 50:
        raise MetricError(f"global coherence needs at least 50 images, got {images.shape[0]}")
    means, _ = encode_arrays(encoder, images)
    population = means.var(axis=0)
    x_t = forward_noise(images, t_ref, rng.normal(images.shape), sched)
    noisy = encode_arrays(encoder, x_t)[1].mean(axis=0)
    sensitivity = variance_sensitivity(encoder, x_t)
    coherence = noisy / ((population + eps) * (sensitivity + eps))
    return AxisReport(population, noisy, sensitivity, coherence)


# ---------- sparsity and geometry ----------
def participation_ratio(w) -> float:
    """sqrt((sum w^2)^2 / sum w^4): 1 for one-hot, sqrt(d) for uniform weights."""
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if not np.any(w):
        raise MetricError("participation ratio of a zero vector is undefined")
    w = w / np.max(np.abs(w))
    sq = w * w
    return float(np.sqrt(sq.sum() ** 2 / np.sum(sq * sq)))


def straightness(points) -> Tuple[np.ndarray, float]:
    """
    Cosine similarity between consecutive displacement vectors.

    Returns:
        (per-step cosines [n - 2], their mean)
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 3:
        raise MetricError("straightness needs at least 3 points")
    diffs = np.diff(points.reshape(points.shape[0], -1), axis=0)
    norms = np.sqrt(np.sum(diffs * diffs, axis=1))
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise MetricError(f"frames {zero[0]} and {zero[0] + 1} coincide; direction undefined")
    cosines = np.sum(diffs[:-1] * diffs[1:], axis=1) / (norms[:-1] * norms[1:])
    cosines = np.clip(cosines, -1.0, 1.0)
    return cosines, float(cosines.mean())


def latent_vs_pixel_straightness(encoder: Encoder, sequences) -> Dict[str, float]:
    """Mean straightness of posterior-mean trajectories versus raw frames, over sequences."""
    latent, pixel = [], []
    for seq in sequences:
        means, _ = encode_arrays(encoder, seq.frames)
        latent.append(straightness(means)[1])
        pixel.append(straightness(seq.frames)[1])
    latent_mean, pixel_mean = float(np.mean(latent)), float(np.mean(pixel))
    return {"latent": latent_mean, "pixel": pixel_mean, "gain": latent_mean - pixel_mean}


# ---------- score magnitudes ----------
@dataclass
class ScoreProfile:
    step: np.ndarray
    t: np.ndarray
    norm_eps: np.ndarray
    norm_guidance: np.ndarray

    @property
    def difference(self) -> np.ndarray:
        return self.norm_eps - self.norm_guidance

    @property
    def ratio(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.norm_eps > 0, self.norm_guidance / self.norm_eps, 0.0)

    def rows(self) -> List[Dict[str, float]]:
        return [
            {"step": int(self.step[i]), "t": float(self.t[i]), "norm_eps": float(self.norm_eps[i]),
             "norm_guidance": float(self.norm_guidance[i]), "difference": float(self.difference[i]),
             "ratio": float(self.ratio[i])}
            for i in range(len(self.step))
        ]


def score_magnitude_profile(run_log) -> ScoreProfile:
    """Per-step noise-estimate and guidance norms from a sampling RunLog."""
    if len(run_log) == 0:
        raise MetricError("score profile of an empty log")
    return ScoreProfile(run_log.column("step"), run_log.column("t"), run_log.column("norm_eps"),
                        run_log.column("norm_guidance"))


# ---------- smoothness ----------
def smoothness_probe(encoder: Encoder, images: np.ndarray, n_probes: int, rng: RngStream) -> Tuple[float, float]:
    """
    Hutchinson estimates of the encoder-mean Jacobian and Hessian energies.

    For a Rademacher v in latent space, g = grad_x (v . mu(x)) = J^T v and
    E ||g||^2 = ||J||_F^2. For a second probe u in image space,
    grad_x (g . u) = H_v u and E ||H_v u||^2 = ||H_v||_F^2 (double backward).
    Both are averaged over images and probes.
    """
    if n_probes < 1:
        raise MetricError("need at least one probe")
    images = np.asarray(images, dtype=np.float64)
    jac, hess = 0.0, 0.0
    for _ in range(n_probes):
        leaf = Tensor(images, requires_grad=True)
        mu = encoder(leaf).mean
        v = rng.rademacher(mu.shape)
        u = rng.rademacher(images.shape)
        (g,) = grad(sum_(mul(mu, v)), [leaf], create_graph=True)
        (h,) = grad(sum_(mul(g, u)), [leaf])
        g_flat = g.data.reshape(len(images), -1)
        h_flat = h.data.reshape(len(images), -1)
        jac += float(np.mean(np.sum(g_flat * g_flat, axis=1)))
        hess += float(np.mean(np.sum(h_flat * h_flat, axis=1)))
    return jac / n_probes, hess / n_probes


# ---------- factor alignment ----------
@dataclass
class AlignmentReport:
    r2: np.ndarray
    best_axis: np.ndarray
    best_r2: np.ndarray

    @property
    def distinct(self) -> bool:
        return len(set(self.best_axis.tolist())) == len(self.best_axis)

    def rows(self, names: Sequence[str]) -> List[Dict[str, float]]:
        rows = []
        for k, name in enumerate(names):
            row = {"factor": name, "best_axis": int(self.best_axis[k]), "best_r2": float(self.best_r2[k])}
            row.update({f"r2_axis{i}": float(v) for i, v in enumerate(self.r2[k])})
            rows.append(row)
        return rows


def factor_alignment(latents: np.ndarray, factors: np.ndarray) -> AlignmentReport:
    """
    Univariate least-squares R^2 of every factor on every single latent axis.

    Constant latent axes (or constant factors) get R^2 = 0.

    Returns:
        AlignmentReport with r2 [k, d], per-factor best axis and best R^2
    """
    latents = np.asarray(latents, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    if latents.shape[0] < 100:
        raise MetricError(f"factor alignment needs at least 100 points, got {latents.shape[0]}")
    lc = latents - latents.mean(axis=0)
    fc = factors - factors.mean(axis=0)
    l_ss = np.sum(lc * lc, axis=0)
    f_ss = np.sum(fc * fc, axis=0)
    for axis in np.flatnonzero(l_ss == 0):
        logger.warning("latent axis %d is constant; its R^2 is recorded as 0", axis)
    cross = fc.T @ lc
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(np.outer(f_ss, l_ss) > 0, cross * cross / np.outer(f_ss, l_ss), 0.0)
    r2 = np.clip(r2, 0.0, 1.0)
    return AlignmentReport(r2, np.argmax(r2, axis=1), np.max(r2, axis=1))


@dataclass
class ProbeReport:
    coefficients: np.ndarray
    r2: np.ndarray
    participation: np.ndarray


def linear_probe(latents: np.ndarray, factors: np.ndarray) -> ProbeReport:
    """Least-squares probe (with intercept) from latents to each factor, and the PR of its weights."""
    latents = np.asarray(latents, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64)
    design = np.hstack([latents, np.ones((latents.shape[0], 1))])
    solution, *_ = np.linalg.lstsq(design, factors, rcond=None)
    coefficients = solution[:-1].T
    residual = factors - design @ solution
    total = np.sum((factors - factors.mean(axis=0)) ** 2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = np.where(total > 0, 1.0 - np.sum(residual ** 2, axis=0) / total, 0.0)
    participation = np.array([participation_ratio(w) if np.any(w) else float("nan") for w in coefficients])
    return ProbeReport(coefficients, np.clip(r2, 0.0, 1.0), participation)
