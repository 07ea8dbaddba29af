"""
Networks Module - The unconditional denoiser eps_theta(x_t, t) and the Gaussian
inference network q_phi(z | x)

Parameters are stored as ordered name -> Tensor tables; the layout functions
below give the expected shapes for a configuration, so checkpoints can be
validated against a config without building a model.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from services.numerics import (
    Tensor, add, as_tensor, concat, conv2d, linear, mean, relu, reshape, silu,
    softplus, square, sqrt, upsample_nearest,
)
from services.rng import RngStream

logger = logging.getLogger(__name__)

IMAGE_CHANNELS = 1
KERNEL = 3
VARIANCE_FLOOR = 1e-8

Shape = Tuple[int, ...]


class ArchitectureError(ValueError):
    """Raised when a network configuration cannot be realized."""


@dataclass
class GaussianPosterior:
    """Diagonal Gaussian q(z | x): mean and variance, each [B, d] (or [d] unbatched)."""
    mean: Tensor
    variance: Tensor

    @property
    def latent_dim(self) -> int:
        return self.mean.shape[-1]

    def std(self) -> Tensor:
        return sqrt(self.variance)


@dataclass
class DenoiserParams:
    tensors: Dict[str, Tensor]
    image_size: int
    base_channels: int
    multipliers: Tuple[int, ...]
    nonlinearity: str
    levels: int

    @property
    def embedding_dim(self) -> int:
        return self.image_size

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


@dataclass
class EncoderParams:
    tensors: Dict[str, Tensor]
    image_size: int
    arch: str
    base_channels: int
    multipliers: Tuple[int, ...]
    nonlinearity: str
    bias: bool
    latent_dim: int

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


# ---------- layouts ----------
def _check_depth(image_size: int, downsamplings: int, who: str) -> None:
    if image_size < 1 or image_size & (image_size - 1):
        raise ArchitectureError(f"{who}: image size {image_size} must be a power of two")
    if downsamplings > int(math.log2(image_size)):
        raise ArchitectureError(
            f"{who}: {downsamplings} downsamplings exceed log2 of image size {image_size}")


def denoiser_layout(image_size: int, base_channels: int, multipliers) -> Dict[str, Shape]:
    """Parameter shapes of the UNet denoiser (no attention, no normalization)."""
    multipliers = list(multipliers)
    _check_depth(image_size, len(multipliers) - 1, "denoiser")
    channels = [base_channels * m for m in multipliers]
    layout: Dict[str, Shape] = {}

    def conv(name, c_in, c_out):
        layout[f"{name}.weight"] = (c_out, c_in, KERNEL, KERNEL)
        layout[f"{name}.bias"] = (c_out,)

    conv("in", IMAGE_CHANNELS + 1, channels[0])
    current = channels[0]
    for i, ch in enumerate(channels):
        conv(f"down{i}.conv", current, ch)
        current = ch
        if i < len(channels) - 1:
            conv(f"down{i}.pool", ch, ch)
    conv("mid.conv1", current, current)
    conv("mid.conv2", current, current)
    for i in reversed(range(len(channels))):
        conv(f"up{i}.conv", current + channels[i], channels[i])
        current = channels[i]
    conv("out", current, IMAGE_CHANNELS)
    return layout


def encoder_layout(image_size: int, arch: str, base_channels: int, multipliers,
                   bias: bool, latent_dim: int) -> Dict[str, Shape]:
    """Parameter shapes of the inference network (ConvNet or half-UNet) plus its two heads."""
    multipliers = list(multipliers)
    channels = [base_channels * m for m in multipliers]
    layout: Dict[str, Shape] = {}

    def conv(name, c_in, c_out):
        layout[f"{name}.weight"] = (c_out, c_in, KERNEL, KERNEL)
        if bias:
            layout[f"{name}.bias"] = (c_out,)

    if arch == "convnet":
        _check_depth(image_size, len(channels), "encoder")
        current = IMAGE_CHANNELS
        for i, ch in enumerate(channels):
            conv(f"conv{i}", current, ch)
            current = ch
        side = image_size >> len(channels)
        features = current * side * side
    elif arch == "half-unet":
        _check_depth(image_size, len(channels) - 1, "encoder")
        conv("in", IMAGE_CHANNELS, channels[0])
        current = channels[0]
        for i, ch in enumerate(channels):
            conv(f"down{i}.conv", current, ch)
            current = ch
            if i < len(channels) - 1:
                conv(f"down{i}.pool", ch, ch)
        conv("mid.conv1", current, current)
        conv("mid.conv2", current, current)
        features = current
    else:
        raise ArchitectureError(f"unknown encoder architecture '{arch}'")

    layout["mean.weight"] = (features, latent_dim)
    layout["mean.bias"] = (latent_dim,)
    layout["var.weight"] = (features, latent_dim)
    layout["var.bias"] = (latent_dim,)
    return layout


def _fan_in(name: str, shape: Shape, layout: Dict[str, Shape]) -> int:
    if name.endswith(".bias"):
        weight = layout[name[:-len(".bias")] + ".weight"]
        shape = weight
        if len(weight) == 2:
            return weight[0]
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


def _init_tensors(layout: Dict[str, Shape], rng: RngStream) -> Dict[str, Tensor]:
    """Fan-in scaled uniform U(-1/sqrt(fan_in), 1/sqrt(fan_in)), drawn in layout order."""
    tensors = {}
    for name, shape in layout.items():
        bound = 1.0 / math.sqrt(_fan_in(name, shape, layout))
        tensors[name] = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
    return tensors


def build_denoiser(model_cfg, levels: int, rng: RngStream) -> DenoiserParams:
    layout = denoiser_layout(model_cfg.image_size, model_cfg.denoiser_base_channels,
                             model_cfg.denoiser_multipliers)
    params = DenoiserParams(_init_tensors(layout, rng), model_cfg.image_size,
                            model_cfg.denoiser_base_channels, tuple(model_cfg.denoiser_multipliers),
                            model_cfg.denoiser_nonlinearity, levels)
    logger.info("denoiser: %d tensors, %d parameters", len(layout), params.count())
    for name, shape in layout.items():
        logger.debug("  %s %s", name, shape)
    return params


def build_encoder(model_cfg, rng: RngStream) -> EncoderParams:
    layout = encoder_layout(model_cfg.image_size, model_cfg.encoder_arch, model_cfg.encoder_base_channels,
                            model_cfg.encoder_multipliers, model_cfg.encoder_bias, model_cfg.latent_dim)
    params = EncoderParams(_init_tensors(layout, rng), model_cfg.image_size, model_cfg.encoder_arch,
                           model_cfg.encoder_base_channels, tuple(model_cfg.encoder_multipliers),
                           model_cfg.encoder_nonlinearity, model_cfg.encoder_bias, model_cfg.latent_dim)
    logger.info("encoder (%s): %d tensors, %d parameters", params.arch, len(layout), params.count())
    return params


def init_models(config, rng: RngStream) -> Tuple[DenoiserParams, EncoderParams]:
    """
    Initialize both networks from a RunConfig.

    Raises:
        ArchitectureError: the multiplier lists do not fit the image size
    """
    denoiser = build_denoiser(config.model, config.schedule.levels, rng.split("denoiser"))
    encoder = build_encoder(config.model, rng.split("encoder"))
    return denoiser, encoder


# ---------- forward passes ----------
def _activation(name: str) -> Callable[[Tensor], Tensor]:
    if name == "relu":
        return relu
    if name == "silu":
        return silu
    raise ArchitectureError(f"unknown nonlinearity '{name}'")


def _as_batch(x) -> Tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return reshape(x, (1, IMAGE_CHANNELS) + x.shape), True
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ArchitectureError(f"expected an image or a batch of images, got shape {x.shape}")


def timestep_channel(t, batch: int, image_size: int) -> np.ndarray:
    """
    Sinusoidal embedding of the level, one value per image column, tiled over rows.

    Returns:
        array [B, 1, H, W]
    """
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    half = image_size // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    angles = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)
    if emb.shape[1] < image_size:
        emb = np.pad(emb, ((0, 0), (0, image_size - emb.shape[1])))
    return np.broadcast_to(emb[:, None, None, :], (batch, 1, image_size, image_size)).copy()


def denoise(params: DenoiserParams, x_t, t) -> Tensor:
    """
    Noise estimate eps_theta(x_t, t).

    Args:
        x_t: [B, 1, H, W] batch (or one [H, W] / [1, H, W] image)
        t: level index in [0, levels), scalar or one per batch element

    Returns:
        Tensor with the shape of x_t
    """
    x, unbatched = _as_batch(x_t)
    levels = np.asarray(t)
    if np.any(levels < 0) or np.any(levels >= params.levels):
        raise ValueError(f"denoise: level {levels.tolist()} outside [0, {params.levels})")
    if x.shape[2] != params.image_size or x.shape[3] != params.image_size:
        raise ArchitectureError(f"denoise: expected {params.image_size}px images, got {x.shape}")
    act = _activation(params.nonlinearity)
    p = params.tensors

    def conv(name, h, stride=1):
        return conv2d(h, p[f"{name}.weight"], stride=stride, pad=1, bias=p[f"{name}.bias"])

    h = concat([x, timestep_channel(levels, x.shape[0], params.image_size)], axis=1)
    h = act(conv("in", h))
    depth = len(params.multipliers)
    skips = []
    for i in range(depth):
        h = act(conv(f"down{i}.conv", h))
        skips.append(h)
        if i < depth - 1:
            h = act(conv(f"down{i}.pool", h, stride=2))
    h = act(conv("mid.conv1", h))
    h = act(conv("mid.conv2", h))
    for i in reversed(range(depth)):
        if i < depth - 1:
            h = upsample_nearest(h, 2)
        h = act(conv(f"up{i}.conv", concat([h, skips[i]], axis=1)))
    out = conv("out", h)
    if unbatched:
        out = reshape(out, as_tensor(x_t).shape)
    return out


def encode(params: EncoderParams, x) -> GaussianPosterior:
    """
    Posterior q_phi(z | x) = N(mean, diag(variance)). Takes no noise level.

    Args:
        x: [B, 1, H, W] batch (or a single image)

    Returns:
        GaussianPosterior with mean/variance [B, d] ([d] for a single image);
        variance = softplus(raw)^2 + VARIANCE_FLOOR
    """
    h, unbatched = _as_batch(x)
    if h.shape[2] != params.image_size or h.shape[3] != params.image_size:
        raise ArchitectureError(f"encode: expected {params.image_size}px images, got {h.shape}")
    act = _activation(params.nonlinearity)
    p = params.tensors

    def conv(name, value, stride=1):
        return conv2d(value, p[f"{name}.weight"], stride=stride, pad=1, bias=p.get(f"{name}.bias"))

    if params.arch == "convnet":
        for i in range(len(params.multipliers)):
            h = act(conv(f"conv{i}", h, stride=2))
        features = reshape(h, (h.shape[0], -1))
    else:
        h = act(conv("in", h))
        depth = len(params.multipliers)
        for i in range(depth):
            h = act(conv(f"down{i}.conv", h))
            if i < depth - 1:
                h = act(conv(f"down{i}.pool", h, stride=2))
        h = act(conv("mid.conv1", h))
        h = act(conv("mid.conv2", h))
        features = mean(h, axis=(2, 3))

    mu = linear(features, p["mean.weight"], p["mean.bias"])
    variance = add(square(softplus(linear(features, p["var.weight"], p["var.bias"]))), VARIANCE_FLOOR)
    if unbatched:
        mu = reshape(mu, (params.latent_dim,))
        variance = reshape(variance, (params.latent_dim,))
    return GaussianPosterior(mu, variance)


def denoiser_fn(params: DenoiserParams) -> Callable:
    """Bind parameters: returns (x_t, t) -> Tensor."""
    return partial(denoise, params)


def encoder_fn(params: EncoderParams) -> Callable[[Tensor], GaussianPosterior]:
    """Bind parameters: returns x -> GaussianPosterior."""
    return partial(encode, params)


def frozen(params: Union[DenoiserParams, EncoderParams]):
    """Copy whose tensors do not require gradients (same values)."""
    tensors = {name: t.detach() for name, t in params.tensors.items()}
    return type(params)(**{**params.__dict__, "tensors": tensors})
