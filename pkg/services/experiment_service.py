"""
Experiment Service Module - Workflow Functions
Contains the validated workflows behind every command: dataset generation,
training, sampling, encoding, traversal, analysis and the oracle check.

Every workflow returns (success, message, outputs) where outputs maps an
artifact role to the path written. Core exceptions never escape; they are
turned into failure messages.
"""

import logging
import os
from functools import wraps
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import RunConfig, reference_level, with_overrides
from services import analysis, disks, guidance, oracle
from services.diffusion import build_schedule
from services.rng import RngStream
from storage import (
    load_checkpoint, load_dataset, read_latent, read_pgm, save_checkpoint, save_dataset, write_csv,
    write_image_grid, write_run_log,
)

logger = logging.getLogger(__name__)

Result = Tuple[bool, str, Dict[str, str]]

METRICS = ("variability", "variance-profile", "coherence", "straightness", "pr", "score-profile",
           "smoothness", "alignment")

# Acceptance thresholds of the oracle check
MIYASAWA_TOL = 1e-10
BAYES_TOL = 1e-10
SAMPLING_TOL = 0.05


def workflow(fn):
    """Convert expected failures of a workflow into (False, message, {})."""
    @wraps(fn)
    def wrapper(*args, **kwargs) -> Result:
        try:
            return fn(*args, **kwargs)
        except (ValueError, RuntimeError, OSError) as exc:
            logger.debug("workflow %s failed", fn.__name__, exc_info=True)
            return False, f"{fn.__name__.replace('_', ' ')} failed: {exc}", {}
    return wrapper


def _sidecar(out: str, suffix: str) -> str:
    root, _ = os.path.splitext(out)
    return f"{root}{suffix}"


def _grid_shape(n: int) -> Tuple[int, int]:
    cols = int(np.ceil(np.sqrt(n)))
    return int(np.ceil(n / cols)), cols


# ---------- data ----------
@workflow
def generate_data(config: RunConfig, seed: int, out: str, split: str = "train") -> Result:
    """
    Generate a disks dataset file.

    Args:
        split: "train" (data.train_size images) or "test" (data.test_size images);
            each split has its own random substream
    """
    if not out:
        return False, "An output path is required.", {}
    if split not in ("train", "test"):
        return False, "Split must be 'train' or 'test'.", {}
    n = config.data.train_size if split == "train" else config.data.test_size
    cfg = disks.DiskConfig.from_config(config)
    images, factors = disks.generate_dataset(n, RngStream(seed).split(f"data/{split}"), cfg)
    save_dataset(images, factors, out)
    return True, f"Generated {n} {split} images into {out}.", {"dataset": out}


# ---------- training ----------
@workflow
def train_model(config: RunConfig, seed: int, data_path: str, out: str, init_path: Optional[str] = None,
                progress: bool = False) -> Result:
    """
    Train a model on a dataset file and write the checkpoint and its training log.

    In frozen-denoiser mode init_path must name a checkpoint whose denoiser is kept.
    """
    if not data_path or not os.path.exists(data_path):
        return False, f"Dataset '{data_path}' does not exist.", {}
    if config.training.mode == "frozen-denoiser" and not init_path:
        return False, "Frozen-denoiser training needs a pretrained checkpoint (--init).", {}
    images, _ = load_dataset(data_path)
    if images.shape[-1] != config.model.image_size:
        return False, f"Dataset images are {images.shape[-1]}px but the model expects {config.model.image_size}px.", {}
    bundle = None
    if init_path:
        pretrained = load_checkpoint(init_path)
        bundle = guidance.ModelBundle(pretrained.denoiser, pretrained.encoder, pretrained.schedule, config)
    trained, run_log = guidance.train(config, images, RngStream(seed), bundle=bundle, progress=progress)
    if not run_log.records:
        return False, "Training ran no steps; epochs must be positive.", {}
    save_checkpoint(trained, out)
    log_path = _sidecar(out, ".train.csv")
    write_run_log(run_log, log_path)
    first, last = run_log.records[0].recon, run_log.records[-1].recon
    return True, f"Trained {len(run_log)} steps (recon {first:.4f} -> {last:.4f}).", \
        {"checkpoint": out, "log": log_path}


@workflow
def kl_threshold_search(config: RunConfig, seed: int, data_path: str, out: str, low: float = 1e-8,
                        high: float = 1e-2, steps: int = 4, gain_floor: float = 0.3, samples: int = 8) -> Result:
    """
    Bisect the KL weight on a log scale for the largest value whose trained
    model still keeps a reconstruction gain above gain_floor.
    """
    if not 0 < low < high:
        return False, "KL search bounds must satisfy 0 < low < high.", {}
    images, _ = load_dataset(data_path)
    target = images[0]
    rows = []

    def gain_at(weight: float) -> float:
        trial = with_overrides(config, "training", kl_weight=weight)
        bundle, _ = guidance.train(trial, images, RngStream(seed))
        rng = RngStream(seed).split("kl-search")
        cond, _ = guidance.sample_conditional(bundle, rng, samples, image=target)
        uncond = guidance.sample_unguided(bundle, rng, samples)
        gain = analysis.reconstruction_gain(target, cond, uncond)
        rows.append({"kl_weight": weight, "gain": gain})
        logger.info("KL weight %.3e: reconstruction gain %.3f", weight, gain)
        return gain

    log_low, log_high = np.log10(low), np.log10(high)
    if gain_at(low) < gain_floor:
        write_csv(rows, out)
        return False, f"Even KL weight {low:g} stays below the gain floor {gain_floor}.", {"report": out}
    for _ in range(steps):
        middle = 0.5 * (log_low + log_high)
        if gain_at(10.0 ** middle) >= gain_floor:
            log_low = middle
        else:
            log_high = middle
    write_csv(rows, out)
    return True, f"Largest KL weight above the gain floor: {10.0 ** log_low:.3e}.", {"report": out}


# ---------- sampling ----------
def _load_condition(path: str, bundle) -> Dict[str, np.ndarray]:
    if path.lower().endswith(".pgm"):
        image = read_pgm(path)
        size = bundle.denoiser.image_size
        if image.shape != (size, size):
            raise ValueError(f"condition image is {image.shape[1]}x{image.shape[0]}, model expects {size}x{size}")
        return {"image": image[None, None]}
    return {"latent": read_latent(path)}


@workflow
def sample_images(checkpoint: str, seed: int, out: str, n: int = 16, condition: Optional[str] = None,
                  mask: str = "all", coefficient_rule: str = "derived", progress: bool = False) -> Result:
    """
    Draw n samples (guided by an image .pgm or a latent file when condition is set)
    and write them as one PGM grid; guided runs also write the per-step log.
    """
    if n < 1:
        return False, "Sample count must be positive.", {}
    if coefficient_rule not in guidance.COEFFICIENT_RULES:
        return False, f"Unknown coefficient rule '{coefficient_rule}'.", {}
    bundle = load_checkpoint(checkpoint)
    rng = RngStream(seed)
    outputs = {"grid": out}
    if condition:
        guide = guidance.GuidanceMask.parse(mask, bundle.encoder.latent_dim)
        samples, run_log = guidance.sample_conditional(bundle, rng, n, mask=guide, coefficient_rule=coefficient_rule,
                                                       progress=progress, **_load_condition(condition, bundle))
        outputs["log"] = _sidecar(out, ".steps.csv")
        write_run_log(run_log, outputs["log"])
    else:
        samples = guidance.sample_unguided(bundle, rng, n, progress)
    write_image_grid(samples, *_grid_shape(n), out)
    return True, f"Wrote {n} samples to {out}.", outputs


@workflow
def encode_images(checkpoint: str, data_path: str, out: str) -> Result:
    """Write posterior means and variances of every dataset image, with its factors, as CSV."""
    bundle = load_checkpoint(checkpoint)
    images, factors = load_dataset(data_path)
    means, variances = analysis.encode_arrays(bundle.encoder_fn(trainable=False), images)
    rows = []
    for i in range(len(images)):
        row = {name: float(factors[i, k]) for k, name in enumerate(disks.FACTOR_NAMES)}
        row.update({f"mean{j}": float(means[i, j]) for j in range(means.shape[1])})
        row.update({f"var{j}": float(variances[i, j]) for j in range(variances.shape[1])})
        rows.append(row)
    write_csv(rows, out)
    return True, f"Encoded {len(images)} images into {out}.", {"latents": out}


@workflow
def traverse_latents(checkpoint: str, seed: int, data_path: str, out: str, start: int = 0, end: int = 1,
                     steps: int = 8, coefficient_rule: str = "derived") -> Result:
    """Generate one guided sample per point on the line between two images' posterior means."""
    bundle = load_checkpoint(checkpoint)
    images, _ = load_dataset(data_path)
    if not (0 <= start < len(images) and 0 <= end < len(images)):
        return False, f"Image indices must lie in [0, {len(images)}).", {}
    means, _ = analysis.encode_arrays(bundle.encoder_fn(trainable=False), images[[start, end]])
    path = np.stack(analysis.latent_traverse(means[0], means[1], steps))
    samples, _ = guidance.sample_from_latents(bundle, RngStream(seed), path, coefficient_rule=coefficient_rule)
    write_image_grid(samples, 1, steps, out)
    return True, f"Wrote a {steps}-step traversal to {out}.", {"grid": out}


# ---------- analysis ----------
def _levels(config: RunConfig) -> List[int]:
    levels = np.linspace(0, config.schedule.levels - 1, config.analysis.variance_buckets)
    return sorted(set(int(round(t)) for t in levels))


def _metric_variability(bundle, config, images, factors, rng) -> List[Dict]:
    target = images[0]
    n = config.analysis.samples
    cond, _ = guidance.sample_conditional(bundle, rng.split("conditional"), n, image=target)
    uncond = guidance.sample_unguided(bundle, rng.split("unconditional"), n)
    v_cond, v_uncond = analysis.variability(cond), analysis.variability(uncond)
    return [{"conditional": v_cond, "unconditional": v_uncond, "ratio": v_cond / v_uncond,
             "reconstruction_gain": analysis.reconstruction_gain(target, cond, uncond)}]


def _metric_variance_profile(bundle, config, images, factors, rng) -> List[Dict]:
    levels = _levels(config)
    profile = analysis.posterior_variance_profile(bundle.encoder_fn(trainable=False), images, bundle.schedule,
                                                  levels, rng, config.analysis.variance_draws)
    rho, per_axis = analysis.variance_monotonicity(profile, levels)
    logger.info("variance profile Spearman rho: mean %.3f, per axis %s", rho, np.round(per_axis, 3).tolist())
    return [{"t": t, **{f"var{j}": float(profile[i, j]) for j in range(profile.shape[1])}}
            for i, t in enumerate(levels)]


def _metric_coherence(bundle, config, images, factors, rng) -> List[Dict]:
    report = analysis.global_coherence(bundle.encoder_fn(trainable=False), images, reference_level(config),
                                       bundle.schedule, rng, config.analysis.coherence_eps)
    return report.rows()


def _metric_straightness(bundle, config, images, factors, rng) -> List[Dict]:
    cfg = disks.DiskConfig.from_config(bundle.config)
    streams = rng.spawn(config.analysis.sequence_count, "sequence")
    sequences = [disks.generate_sequence("linear-drift", config.analysis.sequence_length, s, cfg, background=0.0)
                 for s in streams]
    return [analysis.latent_vs_pixel_straightness(bundle.encoder_fn(trainable=False), sequences)]


def _metric_pr(bundle, config, images, factors, rng) -> List[Dict]:
    means, _ = analysis.encode_arrays(bundle.encoder_fn(trainable=False), images)
    probe = analysis.linear_probe(means, factors)
    return [{"factor": name, "r2": float(probe.r2[k]), "participation_ratio": float(probe.participation[k])}
            for k, name in enumerate(disks.FACTOR_NAMES)]


def _metric_score_profile(bundle, config, images, factors, rng) -> List[Dict]:
    _, run_log = guidance.sample_conditional(bundle, rng, config.analysis.samples, image=images[0])
    return analysis.score_magnitude_profile(run_log).rows()


def _metric_smoothness(bundle, config, images, factors, rng) -> List[Dict]:
    jac, hess = analysis.smoothness_probe(bundle.encoder_fn(trainable=False), images[:100],
                                          config.analysis.probes, rng)
    return [{"jacobian_energy": jac, "hessian_energy": hess}]


def _metric_alignment(bundle, config, images, factors, rng) -> List[Dict]:
    cfg = disks.DiskConfig.from_config(bundle.config)
    rows = []
    for background in (0.0, 1.0):
        grid = disks.grid_centers(cfg, 10, background)
        means, _ = analysis.encode_arrays(bundle.encoder_fn(trainable=False), disks.render_batch(grid, cfg))
        report = analysis.factor_alignment(means, grid[:, :2])
        for row in report.rows(disks.FACTOR_NAMES[:2]):
            rows.append({"i_bg": background, **row, "distinct": report.distinct})
    return rows


_METRIC_FUNCTIONS = {
    "variability": _metric_variability,
    "variance-profile": _metric_variance_profile,
    "coherence": _metric_coherence,
    "straightness": _metric_straightness,
    "pr": _metric_pr,
    "score-profile": _metric_score_profile,
    "smoothness": _metric_smoothness,
    "alignment": _metric_alignment,
}


@workflow
def analyze(metric: str, checkpoint: str, data_path: str, seed: int, out: str,
            config: Optional[RunConfig] = None) -> Result:
    """
    Compute one representation metric and write it as CSV.

    The analysis section of config (if given) overrides the checkpoint's.
    """
    if metric not in _METRIC_FUNCTIONS:
        return False, f"Unknown metric '{metric}'. Choose one of: {', '.join(METRICS)}.", {}
    bundle = load_checkpoint(checkpoint)
    settings = bundle.config if config is None else with_overrides(bundle.config, "analysis",
                                                                    **vars(config.analysis))
    images, factors = load_dataset(data_path)
    rows = _METRIC_FUNCTIONS[metric](bundle, settings, images, factors, RngStream(seed).split(metric))
    write_csv(rows, out)
    return True, f"Metric '{metric}' written to {out} ({len(rows)} rows).", {"report": out}


# ---------- oracle ----------
@workflow
def oracle_check(config: RunConfig, seed: int, out: str, chains: int = 10000) -> Result:
    """
    Verify the score identities and guided sampling in a random 4-D linear-Gaussian world.

    Checks: the score-based denoiser against the noise implied by E[x0 | x_t], the Bayes decomposition
    of the conditional score, and guided-sample moments against the exact posterior.
    """
    rng = RngStream(seed)
    s = config.schedule
    sched = build_schedule(s.kind, s.levels, s.beta_min, s.beta_max, s.cosine_offset)
    world = oracle.random_world(rng.split("world"))
    z = rng.split("latent").normal((world.latent_dim,))
    points = rng.split("points").normal((32, world.dim))

    miyasawa, bayes = 0.0, 0.0
    for t in (1, sched.levels // 2, sched.levels - 1):
        ab = float(sched.alpha_bar[t])
        # noise implied by the posterior mean of x0, against the score-based denoiser
        from_mean = (points - np.sqrt(ab) * oracle.posterior_mean_x0(world, sched, t, points)) / np.sqrt(1.0 - ab)
        eps_hat = oracle.analytic_denoiser(world, sched, t, points)
        miyasawa = max(miyasawa, float(np.max(np.abs(eps_hat - from_mean))))
        split = oracle.marginal_score(world, sched, t, points) + oracle.likelihood_score(world, sched, t, points, z)
        bayes = max(bayes, float(np.max(np.abs(oracle.conditional_score(world, sched, t, points, z) - split))))

    target = oracle.conditional_posterior(world, z)
    samples, _ = oracle.sample_guided(world, sched, z, rng.split("sampling"), chains)
    # relative to the mean norm, or the per-axis posterior spread when the mean is near 0
    scale = max(float(np.linalg.norm(target.mean)), float(np.sqrt(np.trace(target.cov) / world.dim)))
    mean_err = float(np.linalg.norm(samples.mean(axis=0) - target.mean) / scale)
    cov_err = float(np.linalg.norm(np.cov(samples.T) - target.cov) / np.linalg.norm(target.cov))

    rows = [
        {"check": "miyasawa", "error": miyasawa, "tolerance": MIYASAWA_TOL, "passed": miyasawa <= MIYASAWA_TOL},
        {"check": "bayes", "error": bayes, "tolerance": BAYES_TOL, "passed": bayes <= BAYES_TOL},
        {"check": "sample_mean", "error": mean_err, "tolerance": SAMPLING_TOL, "passed": mean_err <= SAMPLING_TOL},
        {"check": "sample_cov", "error": cov_err, "tolerance": SAMPLING_TOL, "passed": cov_err <= SAMPLING_TOL},
    ]
    write_csv(rows, out)
    failed = [row["check"] for row in rows if not row["passed"]]
    if failed:
        return False, f"Oracle check failed: {', '.join(failed)} (see {out}).", {"report": out}
    return True, f"Oracle check passed ({len(rows)} checks).", {"report": out}
