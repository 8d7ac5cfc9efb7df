"""The conditioned denoiser: patchify, DiT blocks, and the noise head.

Each block applies pre-norm residual self-attention over the patch
tokens, pre-norm residual cross-attention over the condition sequence
(timestep token followed by projected text tokens), and a pre-norm
residual GELU feedforward. A final norm and a zero-initialized linear
head map tokens back to patches, so a fresh model predicts zero noise.

Text reaches the output only through cross-attention. The condition
block is padded to a fixed width (``max_tokens`` text slots, absent
slots carrying the projected zero token), which keeps the conditioning
path's arithmetic independent of prompt length when the text projection
is zeroed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .conditioning import TextEmbedding
from .nn import (
    ConfigurationError,
    ParamStore,
    Tensor,
    add,
    concat,
    gelu,
    gelu_mlp,
    layer_norm,
    linear,
    multi_head_attention,
    reshape,
    slice_axis,
    transpose,
    trunc_normal,
)

__all__ = [
    "DermDiTConfig",
    "DermDiTModel",
    "init_model",
    "patchify",
    "unpatchify",
    "sinusoidal_features",
    "timestep_embedding",
    "forward",
    "forward_batch",
]


@dataclass(frozen=True)
class DermDiTConfig:
    """Architecture hyperparameters for the denoiser."""

    latent_shape: tuple[int, int, int] = (3, 32, 32)
    patch_size: int = 4
    d_model: int = 128
    depth: int = 4
    heads: int = 4
    hidden_mult: int = 4
    learn_variance: bool = False
    d_text: int = 64
    max_tokens: int = 16

    def __post_init__(self):
        c, h, w = self.latent_shape
        if h % self.patch_size or w % self.patch_size:
            raise ConfigurationError(
                f"latent {h}x{w} not divisible by patch size {self.patch_size}"
            )
        if self.d_model % self.heads:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )
        if self.d_model % 4:
            raise ConfigurationError("d_model must be divisible by 4")
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")

    @property
    def n_patches(self) -> int:
        _, h, w = self.latent_shape
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def patch_dim(self) -> int:
        c, _, _ = self.latent_shape
        return c * self.patch_size * self.patch_size

    def as_dict(self) -> dict:
        return {
            "latent_shape": list(self.latent_shape),
            "patch_size": self.patch_size,
            "d_model": self.d_model,
            "depth": self.depth,
            "heads": self.heads,
            "hidden_mult": self.hidden_mult,
            "learn_variance": self.learn_variance,
            "d_text": self.d_text,
            "max_tokens": self.max_tokens,
        }

    @staticmethod
    def from_dict(d: dict) -> "DermDiTConfig":
        d = dict(d)
        d["latent_shape"] = tuple(d["latent_shape"])
        return DermDiTConfig(**d)


@dataclass
class DermDiTModel:
    config: DermDiTConfig
    params: ParamStore
    pos_embed: np.ndarray = field(repr=False)  # fixed [n_patches, d_model]


# ---------------------------------------------------------------------------
# patch <-> token maps
# ---------------------------------------------------------------------------

def patchify(latent: np.ndarray, p: int) -> np.ndarray:
    """Raster-order non-overlapping p x p patches, flattened channel-major."""
    latent = np.asarray(latent)
    if latent.ndim != 3:
        raise ConfigurationError(f"latent must be [c,h,w], got {latent.shape}")
    c, h, w = latent.shape
    if h % p or w % p:
        raise ConfigurationError(f"latent {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    return (
        latent.reshape(c, gh, p, gw, p)
        .transpose(1, 3, 0, 2, 4)
        .reshape(gh * gw, c * p * p)
    )


def unpatchify(tokens: np.ndarray, p: int, latent_shape: tuple) -> np.ndarray:
    """Exact inverse of :func:`patchify`."""
    tokens = np.asarray(tokens)
    c, h, w = latent_shape
    gh, gw = h // p, w // p
    if h % p or w % p:
        raise ConfigurationError(f"latent {h}x{w} not divisible by patch {p}")
    if tokens.shape != (gh * gw, c * p * p):
        raise ConfigurationError(
            f"tokens shape {tokens.shape} inconsistent with "
            f"latent {latent_shape} and patch {p}"
        )
    return (
        tokens.reshape(gh, gw, c, p, p)
        .transpose(2, 0, 3, 1, 4)
        .reshape(c, h, w)
    )


def _patchify_t(x: Tensor, p: int, shape: tuple) -> Tensor:
    B = x.shape[0]
    c, h, w = shape
    gh, gw = h // p, w // p
    x = reshape(x, (B, c, gh, p, gw, p))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (B, gh * gw, c * p * p))


def _unpatchify_t(tokens: Tensor, p: int, shape: tuple) -> Tensor:
    B = tokens.shape[0]
    c, h, w = shape
    gh, gw = h // p, w // p
    x = reshape(tokens, (B, gh, gw, c, p, p))
    x = transpose(x, (0, 3, 1, 4, 2, 5))
    return reshape(x, (B, c, h, w))


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def sinusoidal_features(t, d: int, max_period: float = 10000.0) -> np.ndarray:
    """Raw timestep features: half sines, half cosines over geometric freqs.

    ``t`` may be a scalar (returns [d]) or a vector (returns [len(t), d]).
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = d // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t_arr[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    feats = feats.astype(nn.default_dtype())
    return feats[0] if np.isscalar(t) or np.ndim(t) == 0 else feats


def timestep_embedding(t, d_model: int, params: ParamStore) -> Tensor:
    """Sinusoidal features pushed through the model's 2-layer MLP."""
    feats = sinusoidal_features(t, d_model)
    x = Tensor(feats)
    h = gelu(linear(x, params["w1"], params["b1"]))
    return linear(h, params["w2"], params["b2"])


def _pos_embed_2d(gh: int, gw: int, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal position table for the patch grid."""
    quarter = d // 4
    freqs = np.exp(-math.log(10000.0) * np.arange(quarter) / quarter)

    def axis_embed(n):
        args = np.arange(n)[:, None] * freqs[None, :]
        return np.concatenate([np.sin(args), np.cos(args)], axis=-1)  # [n, d/2]

    ys = axis_embed(gh)  # [gh, d/2]
    xs = axis_embed(gw)  # [gw, d/2]
    out = np.zeros((gh, gw, d))
    out[:, :, : d // 2] = ys[:, None, :]
    out[:, :, d // 2 :] = xs[None, :, :]
    return out.reshape(gh * gw, d)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def init_model(config: DermDiTConfig, seed: int = 0) -> DermDiTModel:
    """Build a DermDiT with truncated-normal projections and a zero head."""
    rng = np.random.default_rng(seed)
    ps = ParamStore()
    d = config.d_model

    def linear(view, name: str, n_in: int, n_out: int, zero: bool = False):
        if zero:
            view.add(f"{name}.w", np.zeros((n_in, n_out)))
        else:
            view.add(f"{name}.w", trunc_normal(rng, (n_in, n_out), std=0.02))
        view.add(f"{name}.b", np.zeros(n_out))

    def attn_params(view):
        for key in ("wq", "wk", "wv", "wo"):
            view.add(key, trunc_normal(rng, (d, d), std=0.02))
        for key in ("bq", "bv", "bo"):
            view.add(key, np.zeros(d))

    def norm_params(view):
        view.add("gain", np.ones(d))
        view.add("bias", np.zeros(d))

    linear(ps, "patch_embed", config.patch_dim, d)
    for key, n_in, n_out in (("w1", d, d), ("w2", d, d)):
        ps.add(f"time_mlp.{key}", trunc_normal(rng, (n_in, n_out), std=0.02))
    ps.add("time_mlp.b1", np.zeros(d))
    ps.add("time_mlp.b2", np.zeros(d))
    linear(ps, "text_proj", config.d_text, d)

    for i in range(config.depth):
        block = ps.view(f"blocks.{i}")
        norm_params(block.view("norm1"))
        attn_params(block.view("self_attn"))
        norm_params(block.view("norm2"))
        attn_params(block.view("cross_attn"))
        norm_params(block.view("norm3"))
        block.add("mlp.w1", trunc_normal(rng, (d, config.hidden_mult * d), std=0.02))
        block.add("mlp.b1", np.zeros(config.hidden_mult * d))
        block.add("mlp.w2", trunc_normal(rng, (config.hidden_mult * d, d), std=0.02))
        block.add("mlp.b2", np.zeros(d))

    norm_params(ps.view("norm_out"))
    out_dim = config.patch_dim * (2 if config.learn_variance else 1)
    linear(ps, "head", d, out_dim, zero=True)

    _, h, w = config.latent_shape
    pos = _pos_embed_2d(h // config.patch_size, w // config.patch_size, d)
    return DermDiTModel(
        config=config, params=ps, pos_embed=pos.astype(nn.default_dtype())
    )


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _condition_block(model: DermDiTModel, t_array: np.ndarray, texts) -> Tensor:
    """Stack fixed-width condition sequences for a batch.

    Row 0 carries the timestep embedding; rows 1..max_tokens carry the
    projected text tokens, right-padded with the projected zero token.
    ``texts`` may be None (unconditional: all text slots are the zero
    token) or a list of TextEmbedding, one per batch item.
    """
    cfg = model.config
    B = len(t_array)
    t_emb = timestep_embedding(t_array, cfg.d_model, model.params.view("time_mlp"))
    t_emb = reshape(t_emb, (B, 1, cfg.d_model))

    padded = np.zeros((B, cfg.max_tokens, cfg.d_text), dtype=nn.default_dtype())
    if texts is not None:
        for i, text in enumerate(texts):
            if text is None:
                continue
            L = text.length
            if L > cfg.max_tokens:
                raise ConfigurationError(
                    f"prompt has {L} tokens, model budget is {cfg.max_tokens}"
                )
            if text.dim != cfg.d_text:
                raise ConfigurationError(
                    f"text dim {text.dim} != configured d_text {cfg.d_text}"
                )
            padded[i, :L] = text.tokens
    proj = model.params.view("text_proj")
    text_rows = linear(Tensor(padded), proj["w"], proj["b"])
    return concat([t_emb, text_rows], axis=1)


def forward_batch(model: DermDiTModel, z_batch, t_array, texts):
    """Denoiser forward over a batch.

    ``z_batch`` is [B, c, h, w] (Tensor or ndarray), ``t_array`` one
    timestep per item, ``texts`` a list of TextEmbedding or None for
    unconditional evaluation. Returns (eps_hat, var_raw) where var_raw
    is None unless the model learns variance.
    """
    cfg = model.config
    zd = z_batch.data if isinstance(z_batch, Tensor) else np.asarray(z_batch)
    if zd.ndim != 4 or tuple(zd.shape[1:]) != cfg.latent_shape:
        raise ConfigurationError(
            f"input shape {zd.shape} does not match latent {cfg.latent_shape}"
        )
    B = zd.shape[0]
    t_array = np.atleast_1d(np.asarray(t_array))
    if len(t_array) != B:
        raise ConfigurationError(f"{len(t_array)} timesteps for batch of {B}")
    if texts is not None and len(texts) != B:
        raise ConfigurationError(f"{len(texts)} prompts for batch of {B}")

    ps = model.params
    x = _patchify_t(
        z_batch if isinstance(z_batch, Tensor) else Tensor(zd), cfg.patch_size, cfg.latent_shape
    )
    x = linear(x, ps["patch_embed.w"], ps["patch_embed.b"])
    x = add(x, model.pos_embed[None, :, :])

    cond = _condition_block(model, t_array, texts)

    for i in range(cfg.depth):
        block = ps.view(f"blocks.{i}")
        n1 = block.view("norm1")
        h = layer_norm(x, n1["gain"], n1["bias"])
        x = add(x, multi_head_attention(h, h, cfg.heads, block.view("self_attn")))
        n2 = block.view("norm2")
        h = layer_norm(x, n2["gain"], n2["bias"])
        x = add(x, multi_head_attention(h, cond, cfg.heads, block.view("cross_attn")))
        n3 = block.view("norm3")
        h = layer_norm(x, n3["gain"], n3["bias"])
        x = add(x, gelu_mlp(h, cfg.hidden_mult, block.view("mlp")))

    no = ps.view("norm_out")
    x = layer_norm(x, no["gain"], no["bias"])
    x = linear(x, ps["head.w"], ps["head.b"])

    if cfg.learn_variance:
        eps_tokens = slice_axis(x, 2, 0, cfg.patch_dim)
        var_tokens = slice_axis(x, 2, cfg.patch_dim, 2 * cfg.patch_dim)
        eps_hat = _unpatchify_t(eps_tokens, cfg.patch_size, cfg.latent_shape)
        var_raw = _unpatchify_t(var_tokens, cfg.patch_size, cfg.latent_shape)
        return eps_hat, var_raw
    eps_hat = _unpatchify_t(x, cfg.patch_size, cfg.latent_shape)
    return eps_hat, None


def forward(model: DermDiTModel, z_t, t: int, text: TextEmbedding | None):
    """Single-sample denoiser forward: [c,h,w] in, (eps_hat, var_raw) out."""
    zd = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t)
    if zd.ndim != 3:
        raise ConfigurationError(f"z_t must be [c,h,w], got {zd.shape}")
    batch = zd[None, ...]
    texts = None if text is None else [text]
    eps_hat, var_raw = forward_batch(model, batch, [t], texts)
    eps1 = reshape(eps_hat, zd.shape)
    if var_raw is None:
        return eps1, None
    return eps1, reshape(var_raw, zd.shape)
