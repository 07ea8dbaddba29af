"""
Guidance Module - Posterior-score guidance, the beta-weighted training loss,
the training loop and guided ancestral sampling

Contains:
- log_posterior / guidance_score: g = grad_{x_t} log q_phi(z | x_t)
- conditional_noise_estimate: eps_cond = eps_hat - gamma_t * g
- sami_loss / train: Adam training of denoiser and encoder (or encoder only)
- sample_conditional: ancestral sampling steered by g
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from services.diffusion import (
    NoiseSchedule, ddpm_transition_mean, draw_noising, loss_weights, sample_unconditional, schedule_from_config,
    transition_std, weighted_squared_error,
)
from services.networks import (
    DenoiserParams, EncoderParams, GaussianPosterior, denoiser_fn, encoder_fn, frozen, init_models,
)
from services.numerics import (
    Tensor, add, as_tensor, div, enable_grad, grad, log, mean, mul, no_grad, square, sub, sum_,
)
from services.rng import RngStream

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
COEFFICIENT_RULES = ("derived", "algorithm")

Encoder = Callable[[Tensor], GaussianPosterior]


class MaskError(ValueError):
    """Raised for an empty or mis-sized guidance mask."""


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite; carries the offending record."""

    def __init__(self, message: str, record: "RunRecord"):
        super().__init__(message)
        self.record = record


# ---------- mask ----------
@dataclass(frozen=True)
class GuidanceMask:
    """Which latent axes take part in the guidance likelihood."""
    active: Tuple[bool, ...]

    def __post_init__(self):
        if not any(self.active):
            raise MaskError("guidance mask must keep at least one latent axis")

    @classmethod
    def full(cls, d: int) -> "GuidanceMask":
        return cls((True,) * d)

    @classmethod
    def from_indices(cls, d: int, indices: Sequence[int]) -> "GuidanceMask":
        indices = list(indices)
        bad = [i for i in indices if not 0 <= i < d]
        if bad:
            raise MaskError(f"mask indices {bad} outside [0, {d})")
        return cls(tuple(i in indices for i in range(d)))

    @classmethod
    def parse(cls, text: str, d: int) -> "GuidanceMask":
        """'all' or a comma list of axis indices, e.g. '0,2'."""
        text = text.strip()
        if text in ("", "all"):
            return cls.full(d)
        try:
            indices = [int(part) for part in text.split(",") if part.strip()]
        except ValueError:
            raise MaskError(f"cannot parse mask '{text}'") from None
        return cls.from_indices(d, indices)

    @property
    def dim(self) -> int:
        return len(self.active)

    @property
    def count(self) -> int:
        return sum(self.active)

    @property
    def is_full(self) -> bool:
        return all(self.active)

    def weights(self) -> np.ndarray:
        return np.array(self.active, dtype=np.float64)


# ---------- run log ----------
@dataclass
class RunRecord:
    step: int
    t: float
    loss: float = float("nan")
    recon: float = float("nan")
    kl: float = float("nan")
    norm_eps: float = float("nan")
    norm_guidance: float = float("nan")


@dataclass
class RunLog:
    """One record per training step or sampling step."""
    records: List[RunRecord] = field(default_factory=list)

    COLUMNS = ("step", "t", "loss", "recon", "kl", "norm_eps", "norm_guidance")

    def append(self, record: RunRecord) -> None:
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        if name not in self.COLUMNS:
            raise KeyError(name)
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def rows(self) -> List[Dict[str, float]]:
        return [asdict(r) for r in self.records]


# ---------- posterior terms ----------
def log_posterior(post: GaussianPosterior, z, mask: GuidanceMask) -> Tensor:
    """
    Gaussian log-density of z under the posterior, over the active axes only:
    -1/2 [sum_active ((z_i - mu_i)^2 / var_i + log var_i) + |active| log 2 pi]

    Returns:
        scalar for an unbatched posterior, [B] for a batched one
    """
    if mask.dim != post.latent_dim:
        raise MaskError(f"mask has {mask.dim} axes but the posterior has {post.latent_dim}")
    terms = add(div(square(sub(z, post.mean)), post.variance), log(post.variance))
    if not mask.is_full:
        terms = mul(terms, mask.weights())
    total = sum_(terms, axis=-1)
    return mul(add(total, mask.count * LOG_2PI), -0.5)


def kl_to_standard_normal(post: GaussianPosterior) -> Tensor:
    """KL(N(mu, diag var) || N(0, I)) = 1/2 sum (mu^2 + var - 1 - log var); scalar or [B]."""
    terms = sub(add(square(post.mean), post.variance), add(log(post.variance), 1.0))
    return mul(sum_(terms, axis=-1), 0.5)


def guidance_score(encoder: Encoder, x_t, z, mask: GuidanceMask, create_graph: bool = False) -> Tensor:
    """
    g = grad_{x_t} log q(z | x_t) with q the encoder posterior at the noisy input.

    Args:
        encoder: x -> GaussianPosterior
        x_t: noisy batch (array or Tensor; it is treated as a fresh input leaf)
        z: latent(s) broadcastable against the posterior mean
        create_graph: keep the reverse pass on the tape so g can be differentiated
            with respect to the encoder parameters (and z)

    Returns:
        Tensor shaped like x_t
    """
    leaf = Tensor(as_tensor(x_t).data, requires_grad=True)
    with enable_grad():
        total = sum_(log_posterior(encoder(leaf), z, mask))
        (g,) = grad(total, [leaf], create_graph=create_graph)
    return g


def _gamma(t, sched: NoiseSchedule, ndim: int):
    gamma = sched.gamma(t)
    if np.ndim(gamma) == 0:
        return float(gamma)
    return gamma.reshape((-1,) + (1,) * (ndim - 1))


def conditional_noise_estimate(eps_hat, g, t, sched: NoiseSchedule, sign: float = 1.0) -> Tensor:
    """eps_cond = eps_hat - sign * gamma_t * g, gamma_t = sqrt(1 - alpha_bar_t)."""
    eps_hat, g = as_tensor(eps_hat), as_tensor(g)
    return sub(eps_hat, mul(g, sign * _gamma(t, sched, g.ndim)))


def _mean_norm(values: np.ndarray) -> float:
    flat = np.asarray(values).reshape(len(values), -1)
    return float(np.mean(np.sqrt(np.sum(flat * flat, axis=1))))


# ---------- loss ----------
def sami_loss(denoiser: Callable, encoder: Encoder, x0: np.ndarray, sched: NoiseSchedule, train_cfg,
              rng: RngStream, kl_weight: Optional[float] = None, mask: Optional[GuidanceMask] = None,
              guided: bool = True) -> Tuple[Tensor, RunRecord]:
    """
    lambda_t ||eps - eps_theta(x_t, t) + gamma_t g||^2 (batch mean) + beta KL(q(z | x0) || N(0, I)).

    Draw order: levels, forward noise, then one reparameterization draw per
    guidance sample. With guided=False the guidance term is skipped, so with
    beta = 0 the value equals ddpm_loss on the same stream.

    Args:
        denoiser: (x_t, t) -> Tensor
        encoder: x -> GaussianPosterior
        train_cfg: config.TrainConfig
        kl_weight: beta for this step (defaults to train_cfg.kl_weight)

    Returns:
        (scalar loss Tensor, RunRecord with step=0)
    """
    beta = train_cfg.kl_weight if kl_weight is None else kl_weight
    sign = 1.0 if train_cfg.guidance_sign == "positive" else -1.0
    t, eps, x_t = draw_noising(x0, sched, rng, train_cfg.t_distribution)
    eps_hat = denoiser(x_t, t)
    weights = loss_weights(train_cfg.loss_weighting, t, sched)

    post0 = encoder(x0)
    kl = mean(kl_to_standard_normal(post0))
    norm_guidance = 0.0
    if guided:
        mask = mask or GuidanceMask.full(post0.latent_dim)
        samples = train_cfg.guidance_samples
        score = None
        for _ in range(samples):
            z = add(post0.mean, mul(post0.std(), rng.normal(post0.mean.shape)))
            g = guidance_score(encoder, x_t, z, mask, create_graph=True)
            score = g if score is None else add(score, g)
        if samples > 1:
            score = mul(score, 1.0 / samples)
        eps_cond = conditional_noise_estimate(eps_hat, score, t, sched, sign)
        residual = sub(eps, eps_cond)
        norm_guidance = _mean_norm(score.data * _gamma(t, sched, score.ndim))
    else:
        residual = sub(eps, eps_hat)

    recon = weighted_squared_error(residual, weights)
    loss = add(recon, mul(kl, beta))
    record = RunRecord(step=0, t=float(np.mean(t)), loss=loss.item(), recon=recon.item(), kl=kl.item(),
                       norm_eps=_mean_norm(eps_hat.data), norm_guidance=norm_guidance)
    return loss, record


# ---------- optimizer ----------
class Adam:
    """Adam without weight decay; updates parameter tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, grads: Sequence[Tensor]) -> None:
        self.steps += 1
        b1_corr = 1.0 - self.beta1 ** self.steps
        b2_corr = 1.0 - self.beta2 ** self.steps
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g.data
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            m_hat = self.m[i] / b1_corr
            v_hat = self.v[i] / b2_corr
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def kl_weight_at(train_cfg, epoch: int) -> float:
    """
    Exponential warm-up from kl_weight * kl_start_factor at epoch 0 to kl_weight
    at epoch kl_anneal_epochs - 1 and after.
    """
    final = train_cfg.kl_weight
    if train_cfg.kl_anneal == "constant" or train_cfg.kl_anneal_epochs <= 1:
        return final
    progress = min(epoch / (train_cfg.kl_anneal_epochs - 1), 1.0)
    return final * train_cfg.kl_start_factor ** (1.0 - progress)


# ---------- bundle and training ----------
@dataclass
class ModelBundle:
    denoiser: DenoiserParams
    encoder: EncoderParams
    schedule: NoiseSchedule
    config: object

    def denoiser_fn(self) -> Callable:
        return denoiser_fn(self.denoiser)

    def encoder_fn(self, trainable: bool = True) -> Encoder:
        return encoder_fn(self.encoder if trainable else frozen(self.encoder))


def train(config, images: np.ndarray, rng: RngStream, bundle: Optional[ModelBundle] = None,
          progress: bool = False) -> Tuple[ModelBundle, RunLog]:
    """
    Train on a dataset of clean images [N, 1, H, W].

    In "joint" mode denoiser and encoder are updated together. In
    "frozen-denoiser" mode the denoiser of the given bundle is kept fixed
    and only the encoder is trained.

    Raises:
        ValueError: empty dataset
        TrainingDivergedError: the loss became non-finite
    """
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("cannot train on an empty dataset")
    train_cfg = config.training
    sched = schedule_from_config(config.schedule)
    if bundle is None:
        if train_cfg.mode == "frozen-denoiser":
            logger.warning("frozen-denoiser mode without a pretrained denoiser: using a random one")
        denoiser, encoder = init_models(config, rng.split("init"))
    else:
        denoiser, encoder = bundle.denoiser, bundle.encoder

    if train_cfg.mode == "frozen-denoiser":
        denoiser = frozen(denoiser)
        params = encoder.parameters()
    else:
        params = denoiser.parameters() + encoder.parameters()
    optimizer = Adam(params, train_cfg.learning_rate, train_cfg.adam_beta1, train_cfg.adam_beta2,
                     train_cfg.adam_eps)
    eps_fn, enc_fn = denoiser_fn(denoiser), encoder_fn(encoder)

    shuffle, noise = rng.split("shuffle"), rng.split("noise")
    run_log = RunLog()
    n, batch = images.shape[0], min(train_cfg.batch_size, images.shape[0])
    step = 0
    for epoch in tqdm(range(train_cfg.epochs), desc="training", disable=not progress):
        beta = kl_weight_at(train_cfg, epoch)
        order = shuffle.permutation(n)
        for start in range(0, n, batch):
            x0 = images[order[start:start + batch]]
            loss, record = sami_loss(eps_fn, enc_fn, x0, sched, train_cfg, noise, kl_weight=beta)
            record.step = step
            if not np.isfinite(record.loss):
                logger.warning("training diverged at step %d (t=%.1f, recon=%s, kl=%s)",
                               step, record.t, record.recon, record.kl)
                raise TrainingDivergedError(f"non-finite loss at step {step}", record)
            optimizer.step(grad(loss, params))
            run_log.append(record)
            logger.debug("step %d loss %.5f", step, record.loss)
            step += 1
        epoch_records = run_log.records[-math.ceil(n / batch):]
        logger.info("epoch %d: loss %.5f recon %.5f kl %.4f beta %.3e", epoch,
                    np.mean([r.loss for r in epoch_records]), np.mean([r.recon for r in epoch_records]),
                    np.mean([r.kl for r in epoch_records]), beta)

    return ModelBundle(denoiser, encoder, sched, config), run_log


# ---------- guided sampling ----------
def guided_coefficient(rule: str, t: int, sched: NoiseSchedule) -> float:
    """Scale on g added to the reverse mean: (1 - alpha_t)/sqrt(alpha_t) ('derived') or sqrt(1 - alpha_t) ('algorithm')."""
    alpha = float(sched.alpha[t])
    if rule == "derived":
        return (1.0 - alpha) / math.sqrt(alpha)
    if rule == "algorithm":
        return math.sqrt(1.0 - alpha)
    raise ValueError(f"unknown coefficient rule '{rule}'; expected one of {', '.join(COEFFICIENT_RULES)}")


def guided_ancestral_loop(eps_fn: Callable, score_fn: Callable, sched: NoiseSchedule, rng: RngStream, n: int,
                          shape: Tuple[int, ...], coefficient_rule: str = "derived",
                          progress: bool = False) -> Tuple[np.ndarray, RunLog]:
    """
    Ancestral sampling with the guided mean mu_theta + c_t g.

    Args:
        eps_fn: (x_t, t) -> noise estimate array
        score_fn: (x_t, t) -> guidance score array shaped like x_t
        shape: per-sample shape

    Uses the same "noise" substream and draw order as sample_unconditional,
    so a zero score reproduces its samples exactly.
    """
    guided_coefficient(coefficient_rule, 1, sched)
    noise = rng.split("noise")
    x = noise.normal((n,) + tuple(shape))
    run_log = RunLog()
    for step, t in enumerate(tqdm(range(sched.levels - 1, 0, -1), desc="guided sampling",
                                  disable=not progress, leave=False)):
        eps_hat = np.asarray(eps_fn(x, t))
        g = np.asarray(score_fn(x, t))
        x = ddpm_transition_mean(x, t, eps_hat, sched) + guided_coefficient(coefficient_rule, t, sched) * g
        std = transition_std(t, sched)
        if std > 0:
            x = x + std * noise.normal(x.shape)
        record = RunRecord(step=step, t=float(t), norm_eps=_mean_norm(eps_hat),
                           norm_guidance=_mean_norm(float(sched.gamma(t)) * g))
        run_log.append(record)
        logger.debug("t=%d |eps|=%.4f |gamma g|=%.4f", t, record.norm_eps, record.norm_guidance)
    return x, run_log


def draw_latents(bundle: ModelBundle, rng: RngStream, n: int, image=None, latent=None) -> np.ndarray:
    """One z per chain: z ~ q(z | image) by reparameterization, or the given latent repeated."""
    d = bundle.encoder.latent_dim
    if (image is None) == (latent is None):
        raise ValueError("condition on exactly one of an image or a latent")
    if latent is not None:
        latent = np.asarray(latent, dtype=np.float64).reshape(-1)
        if latent.shape != (d,):
            raise MaskError(f"latent has {latent.shape[0]} entries, the model uses {d}")
        return np.tile(latent, (n, 1))
    with no_grad():
        post = bundle.encoder_fn(trainable=False)(np.asarray(image, dtype=np.float64))
    mu = post.mean.data.reshape(d)
    std = np.sqrt(post.variance.data.reshape(d))
    return mu + std * rng.split("latents").normal((n, d))


def sample_conditional(bundle: ModelBundle, rng: RngStream, n: int, image=None, latent=None,
                       mask: Optional[GuidanceMask] = None, coefficient_rule: str = "derived",
                       progress: bool = False) -> Tuple[np.ndarray, RunLog]:
    """
    Generate n images guided by a clean image (z drawn once per chain) or by a latent.

    Returns:
        (array [n, 1, H, W], RunLog with one record per reverse step)
    """
    guided_coefficient(coefficient_rule, 1, bundle.schedule)
    z = draw_latents(bundle, rng, n, image=image, latent=latent)
    return sample_from_latents(bundle, rng, z, mask, coefficient_rule, progress)


def sample_from_latents(bundle: ModelBundle, rng: RngStream, latents: np.ndarray,
                        mask: Optional[GuidanceMask] = None, coefficient_rule: str = "derived",
                        progress: bool = False) -> Tuple[np.ndarray, RunLog]:
    """One guided chain per row of latents [n, d]."""
    z = np.asarray(latents, dtype=np.float64)
    mask = mask or GuidanceMask.full(bundle.encoder.latent_dim)
    if not mask.is_full:
        logger.info("guidance restricted to latent axes %s", [i for i, a in enumerate(mask.active) if a])
    eps_net = denoiser_fn(frozen(bundle.denoiser))
    enc_net = bundle.encoder_fn(trainable=False)

    def eps_fn(x, t):
        with no_grad():
            return eps_net(x, t).data

    def score_fn(x, t):
        return guidance_score(enc_net, x, z, mask).data

    size = bundle.denoiser.image_size
    return guided_ancestral_loop(eps_fn, score_fn, bundle.schedule, rng, z.shape[0], (1, size, size),
                                 coefficient_rule, progress)


def sample_unguided(bundle: ModelBundle, rng: RngStream, n: int, progress: bool = False) -> np.ndarray:
    """Unconditional samples from the bundle's denoiser."""
    eps_net = denoiser_fn(frozen(bundle.denoiser))

    def eps_fn(x, t):
        with no_grad():
            return eps_net(x, t)

    size = bundle.denoiser.image_size
    return sample_unconditional(eps_fn, bundle.schedule, rng, n, (1, size, size), progress)
