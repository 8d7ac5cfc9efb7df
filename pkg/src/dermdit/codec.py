"""Latent-space boundary: encode images to latents, decode latents back.

The desk default is the identity codec (diffusion runs in pixel space).
Conv mode gives the full encode/compress/decode pipeline shape: a small
strided convolutional encoder with a nearest-upsample decoder, trained
on pixel MSE. No KL term; the codec is deterministic so round trips are
testable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import ConfigurationError, ParamStore, Tensor

__all__ = ["Codec", "identity_codec", "init_conv_codec", "encode", "decode",
           "encode_batch", "decode_batch", "train_autoencoder"]


@dataclass
class Codec:
    """Encoder/decoder pair; ``mode`` is "identity" or "conv"."""

    mode: str
    downsample_factor: int = 1
    latent_channels: int = 3
    image_channels: int = 3
    params: ParamStore | None = None

    def latent_shape(self, image_shape: tuple) -> tuple:
        c, h, w = image_shape
        if self.mode == "identity":
            return (c, h, w)
        f = self.downsample_factor
        if h % f or w % f:
            raise ConfigurationError(f"image {h}x{w} not divisible by factor {f}")
        return (self.latent_channels, h // f, w // f)


def identity_codec(channels: int = 3) -> Codec:
    return Codec(mode="identity", downsample_factor=1,
                 latent_channels=channels, image_channels=channels,
                 params=ParamStore())


_WIDTHS = (32, 64)


def init_conv_codec(
    image_channels: int = 3,
    latent_channels: int = 4,
    downsample_factor: int = 4,
    seed: int = 0,
) -> Codec:
    """Two-stage strided conv encoder and mirrored upsampling decoder."""
    if downsample_factor != 4:
        raise ConfigurationError("conv codec supports downsample_factor=4")
    rng = np.random.default_rng(seed)
    ps = ParamStore()

    def conv(name, c_in, c_out, k):
        fan_in = c_in * k * k
        ps.add(f"{name}.w", rng.standard_normal((c_out, c_in, k, k)) / np.sqrt(fan_in))
        ps.add(f"{name}.b", np.zeros(c_out))

    w1, w2 = _WIDTHS
    conv("enc1", image_channels, w1, 3)
    conv("enc2", w1, w2, 3)
    conv("enc3", w2, latent_channels, 1)
    conv("dec1", latent_channels, w2, 1)
    conv("dec2", w2, w1, 3)
    conv("dec3", w1, image_channels, 3)
    return Codec(mode="conv", downsample_factor=downsample_factor,
                 latent_channels=latent_channels, image_channels=image_channels,
                 params=ps)


def _encoder(codec: Codec, x: Tensor) -> Tensor:
    ps = codec.params
    h = nn.relu(nn.conv2d(x, ps["enc1.w"], ps["enc1.b"], stride=2, padding=1))
    h = nn.relu(nn.conv2d(h, ps["enc2.w"], ps["enc2.b"], stride=2, padding=1))
    return nn.conv2d(h, ps["enc3.w"], ps["enc3.b"])


def _decoder(codec: Codec, z: Tensor) -> Tensor:
    ps = codec.params
    h = nn.relu(nn.conv2d(z, ps["dec1.w"], ps["dec1.b"]))
    h = nn.relu(nn.conv2d(nn.upsample_nearest2(h), ps["dec2.w"], ps["dec2.b"], padding=1))
    return nn.conv2d(nn.upsample_nearest2(h), ps["dec3.w"], ps["dec3.b"], padding=1)


def encode_batch(codec: Codec, images) -> np.ndarray:
    """Deterministic latents for a [B, C, H, W] image batch."""
    arr = images.data if isinstance(images, Tensor) else np.asarray(images)
    if arr.ndim != 4:
        raise ConfigurationError(f"expected [B,C,H,W], got {arr.shape}")
    codec.latent_shape(arr.shape[1:])  # validates divisibility
    if codec.mode == "identity":
        return arr
    out = _encoder(codec, Tensor(arr) if not isinstance(images, Tensor) else images)
    return out.data if not isinstance(images, Tensor) else out


def decode_batch(codec: Codec, latents) -> np.ndarray:
    """Images for a [B, c, h, w] latent batch, clamped to [-1, 1]."""
    arr = latents.data if isinstance(latents, Tensor) else np.asarray(latents)
    if arr.ndim != 4:
        raise ConfigurationError(f"expected [B,c,h,w], got {arr.shape}")
    if codec.mode == "identity":
        return np.clip(arr, -1.0, 1.0)
    if arr.shape[1] != codec.latent_channels:
        raise ConfigurationError(
            f"latent has {arr.shape[1]} channels, codec expects {codec.latent_channels}"
        )
    out = _decoder(codec, Tensor(arr))
    return np.clip(out.data, -1.0, 1.0)


def encode(codec: Codec, image: np.ndarray) -> np.ndarray:
    """Encode one [C, H, W] image in [-1, 1] to its latent."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ConfigurationError(f"expected [C,H,W], got {image.shape}")
    if codec.mode == "identity":
        codec.latent_shape(image.shape)
        return image
    return encode_batch(codec, image[None])[0]


def decode(codec: Codec, latent: np.ndarray) -> np.ndarray:
    """Decode one latent back to an image, values clamped to [-1, 1].

    Identity-mode round trips are bit-exact for in-range images (the
    clamp is the identity there).
    """
    latent = np.asarray(latent)
    if latent.ndim != 3:
        raise ConfigurationError(f"expected [c,h,w], got {latent.shape}")
    return decode_batch(codec, latent[None])[0]


def train_autoencoder(
    images: np.ndarray,
    mode: str = "conv",
    latent_channels: int = 4,
    downsample_factor: int = 4,
    steps: int = 2000,
    batch_size: int = 16,
    lr: float = 2e-3,
    seed: int = 0,
    log_path: str | Path | None = None,
) -> Codec:
    """Fit the conv codec on pixel MSE reconstruction.

    ``images`` is [N, C, H, W] in [-1, 1]. An identity-mode request
    returns the identity codec without training. The loss is computed on
    the raw decoder output; :func:`decode` clamps only on the way out.
    """
    images = np.asarray(images, dtype=np.float32)
    if mode == "identity":
        return identity_codec(channels=images.shape[1] if images.ndim == 4 else 3)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("training set must be a nonempty [N,C,H,W] array")

    codec = init_conv_codec(
        image_channels=images.shape[1],
        latent_channels=latent_channels,
        downsample_factor=downsample_factor,
        seed=seed,
    )
    n = images.shape[0]
    log_rows: list[tuple[int, float]] = []
    for step in range(1, steps + 1):
        rng = np.random.default_rng(np.random.SeedSequence((seed, step)))
        idx = rng.integers(0, n, size=min(batch_size, n))
        batch = Tensor(images[idx])
        with nn.GradTape() as tape:
            z = _encoder(codec, batch)
            recon = _decoder(codec, z)
            loss = nn.mse_loss(recon, batch)
            grads = nn.grad(loss, tape)
        nn.adam_step(codec.params, grads, lr)
        log_rows.append((step, float(loss.data)))

    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(log_rows)
    return codec
