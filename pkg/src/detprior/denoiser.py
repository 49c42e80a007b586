"""Prediction networks and the latent codec seam.

The desk-scale setup runs in pixel space at 32 x 32 through the identity
codec; an external pretrained autoencoder can be plugged in through
``external_codec`` (the artifact itself is not shipped, only the seam).
"""

from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Protocol, Union, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bridge import Parameterization
from .schedule import AlphaBarSchedule

CACHE_ENV_VAR = "DETPRIOR_CACHE"
LATENT_DOWNSAMPLE = 8


@runtime_checkable
class Denoiser(Protocol):
    """Anything that maps (state, timestep) to a same-shape prediction."""

    def __call__(self, state, t): ...


class SinusoidalTimeEmbedding(nn.Module):
    """Sinusoidal features of the normalized timestep t / T."""

    def __init__(self, dim: int, num_timesteps: int):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("time embedding dim must be even")
        self.num_timesteps = num_timesteps
        half = dim // 2
        freqs = torch.exp(torch.linspace(0.0, math.log(2000.0), half))
        self.register_buffer("freqs", freqs, persistent=False)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        tau = t.to(self.freqs.dtype) / self.num_timesteps
        ang = tau[:, None] * self.freqs[None, :]
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    """Multi-head self-attention over flattened spatial positions."""

    def __init__(self, channels: int, num_heads: int = 4):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError("channels must divide into heads")
        self.num_heads = num_heads
        self.norm = _norm(channels)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q, k, v = self.to_q(tokens), self.to_k(tokens), self.to_v(tokens)
        hd = c // self.num_heads
        q = q.reshape(b, -1, self.num_heads, hd).transpose(1, 2)
        k = k.reshape(b, -1, self.num_heads, hd).transpose(1, 2)
        v = v.reshape(b, -1, self.num_heads, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        out = self.to_out(out).transpose(1, 2).reshape(b, c, h, w)
        return x + out


class ToyUNet(nn.Module):
    """Small encoder-decoder with skip connections and timestep conditioning.

    Output shape equals input shape; evaluation-mode forward passes are
    deterministic (no dropout, no random ops).
    """

    def __init__(
        self,
        channels: tuple[int, ...] = (24, 48, 96),
        time_embed_dim: int = 64,
        attention_levels: tuple[int, ...] = (2,),
        in_channels: int = 3,
        out_channels: int = 3,
        num_timesteps: int = 1000,
    ):
        super().__init__()
        if len(channels) < 1 or any(c < 8 for c in channels):
            raise ValueError(f"invalid channel progression {channels}")
        levels = set(attention_levels)
        if not levels:
            raise ValueError("need at least one attention level so adapters have targets")
        if not levels <= set(range(len(channels))):
            raise ValueError(f"attention levels {sorted(levels)} outside 0..{len(channels) - 1}")
        self.config = {
            "channels": tuple(channels),
            "time_embed_dim": time_embed_dim,
            "attention_levels": tuple(sorted(levels)),
            "in_channels": in_channels,
            "out_channels": out_channels,
            "num_timesteps": num_timesteps,
        }
        self.num_timesteps = num_timesteps
        time_dim = time_embed_dim * 2
        self.time_embed = nn.Sequential(
            SinusoidalTimeEmbedding(time_embed_dim, num_timesteps),
            nn.Linear(time_embed_dim, time_dim),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim),
        )
        self.stem = nn.Conv2d(in_channels, channels[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleDict()
        self.downsamples = nn.ModuleList()
        c_prev = channels[0]
        for i, c in enumerate(channels):
            if i > 0:
                self.downsamples.append(nn.Conv2d(c_prev, c_prev, 3, stride=2, padding=1))
            self.down_blocks.append(ResBlock(c_prev, c, time_dim))
            if i in levels:
                self.down_attn[str(i)] = SelfAttention2d(c)
            c_prev = c

        c_mid = channels[-1]
        self.mid_block1 = ResBlock(c_mid, c_mid, time_dim)
        self.mid_attn = SelfAttention2d(c_mid) if (len(channels) - 1) in levels else None
        self.mid_block2 = ResBlock(c_mid, c_mid, time_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleDict()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(channels))):
            self.up_blocks.append(ResBlock(2 * channels[i], channels[i], time_dim))
            if i in levels:
                self.up_attn[str(i)] = SelfAttention2d(channels[i])
            if i > 0:
                self.upsamples.append(nn.Conv2d(channels[i], channels[i - 1], 3, padding=1))

        self.out_norm = _norm(channels[0])
        self.out_conv = nn.Conv2d(channels[0], out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t) -> torch.Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        factor = 2 ** (len(self.config["channels"]) - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"spatial dims {x.shape[-2:]} must be divisible by {factor}")
        if not torch.is_tensor(t):
            t = torch.tensor([int(t)] * x.shape[0], device=x.device)
        elif t.ndim == 0:
            t = t[None].expand(x.shape[0])
        temb = self.time_embed(t)

        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.down_blocks):
            if i > 0:
                h = self.downsamples[i - 1](h)
            h = block(h, temb)
            if str(i) in self.down_attn:
                h = self.down_attn[str(i)](h)
            skips.append(h)

        h = self.mid_block1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid_block2(h, temb)

        n_levels = len(self.config["channels"])
        for j, block in enumerate(self.up_blocks):
            i = n_levels - 1 - j
            h = block(torch.cat([h, skips[i]], dim=1), temb)
            if str(i) in self.up_attn:
                h = self.up_attn[str(i)](h)
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[j](h)

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out[0] if squeeze else out


def make_toy_unet(
    channels: tuple[int, ...] = (24, 48, 96),
    time_embed_dim: int = 64,
    attention_levels: tuple[int, ...] = (2,),
    *,
    in_channels: int = 3,
    out_channels: int = 3,
    num_timesteps: int = 1000,
) -> ToyUNet:
    return ToyUNet(
        channels=tuple(channels),
        time_embed_dim=time_embed_dim,
        attention_levels=tuple(attention_levels),
        in_channels=in_channels,
        out_channels=out_channels,
        num_timesteps=num_timesteps,
    )


def as_denoise_fn(model: nn.Module):
    """Wrap a torch model as a pure (state, t) -> prediction callable.

    Accepts numpy arrays or tensors, batched or single-image, and runs the
    model in evaluation mode without gradients.
    """

    def denoise_fn(state, t):
        was_numpy = isinstance(state, np.ndarray)
        x = torch.as_tensor(np.ascontiguousarray(state)) if was_numpy else state
        training = model.training
        model.eval()
        with torch.no_grad():
            out = model(x.float(), t)
        model.train(training)
        return out.numpy().astype(state.dtype) if was_numpy else out

    return denoise_fn


class AnalyticIdentityModel(nn.Module):
    """Closed-form exact denoiser for the identity task (target equals input).

    With y = x the bridge state is y_t = (sqrt(ab) + sqrt(1-ab)) * x, except at
    t = T where the reverse chain starts from the raw input, so the exact
    prediction is a t-dependent scalar multiple of the state. Useful as a
    weight-free end-to-end pipeline check.
    """

    def __init__(self, schedule: AlphaBarSchedule, param: Parameterization):
        super().__init__()
        self.schedule = schedule
        self.param = param

    def forward(self, state, t):
        t = int(t)
        ab = self.schedule.alpha_bar(t)
        sa, sb = ab**0.5, (1.0 - ab) ** 0.5
        if t == self.schedule.num_steps:
            # chain start: state is the raw input, not the forward blend
            if self.param is Parameterization.PREDICT_V:
                scale = (sa - 1.0) / sb
            elif self.param is Parameterization.PREDICT_X:
                scale = (1.0 - sa) / sb
            else:
                scale = 1.0
        elif self.param is Parameterization.PREDICT_V:
            scale = (sa - sb) / (sa + sb)
        else:  # both the input and the output equal state / (sa + sb)
            scale = 1.0 / (sa + sb)
        return scale * state


# ---------------------------------------------------------------------------
# latent codecs
# ---------------------------------------------------------------------------

ArrayOrTensor = Union[np.ndarray, torch.Tensor]


class IdentityCodec:
    """Pixel-space passthrough: channels-last image <-> channels-first latent."""

    downsample = 1

    def encode(self, image: ArrayOrTensor) -> ArrayOrTensor:
        if isinstance(image, torch.Tensor):
            return image.permute(2, 0, 1) if image.ndim == 3 else image.permute(0, 3, 1, 2)
        return np.moveaxis(image, -1, -3)

    def decode(self, latent: ArrayOrTensor) -> ArrayOrTensor:
        if isinstance(latent, torch.Tensor):
            return latent.permute(1, 2, 0) if latent.ndim == 3 else latent.permute(0, 2, 3, 1)
        return np.moveaxis(latent, -3, -1)


def identity_codec() -> IdentityCodec:
    return IdentityCodec()


class ExternalCodec:
    """Wraps a TorchScript autoencoder exposing encode/decode methods."""

    downsample = LATENT_DOWNSAMPLE

    def __init__(self, module: torch.jit.ScriptModule, locator: str):
        self.module = module
        self.locator = locator

    def encode(self, image: ArrayOrTensor) -> ArrayOrTensor:
        was_numpy = isinstance(image, np.ndarray)
        x = torch.as_tensor(image) if was_numpy else image
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        h, w = x.shape[1], x.shape[2]
        with torch.no_grad():
            z = self.module.encode(x.permute(0, 3, 1, 2).float())
        expect = (h // self.downsample, w // self.downsample)
        if tuple(z.shape[-2:]) != expect:
            raise ValueError(
                f"autoencoder at {self.locator} produced latent {tuple(z.shape[-2:])}, "
                f"expected {expect} (H/{self.downsample}, W/{self.downsample})"
            )
        z = z[0] if squeeze else z
        return z.numpy() if was_numpy else z

    def decode(self, latent: ArrayOrTensor) -> ArrayOrTensor:
        was_numpy = isinstance(latent, np.ndarray)
        z = torch.as_tensor(latent) if was_numpy else latent
        squeeze = z.ndim == 3
        if squeeze:
            z = z[None]
        with torch.no_grad():
            x = self.module.decode(z.float()).permute(0, 2, 3, 1)
        x = x[0] if squeeze else x
        return x.numpy() if was_numpy else x

    def reconstruction_error(self, image: ArrayOrTensor) -> float:
        """Diagnostic round-trip error; reported, never asserted."""
        recon = self.decode(self.encode(image))
        if isinstance(recon, torch.Tensor):
            return float((recon - torch.as_tensor(image)).abs().mean())
        return float(np.mean(np.abs(recon - np.asarray(image))))


def external_codec(locator: str | Path) -> ExternalCodec:
    """Load a pretrained autoencoder artifact from a path, or the artifact cache.

    The cache directory is taken from the environment variable named by
    ``CACHE_ENV_VAR`` and consulted when the locator itself does not exist.
    """
    candidates = [Path(locator)]
    cache = os.environ.get(CACHE_ENV_VAR)
    if cache:
        candidates.append(Path(cache) / Path(locator).name)
    for path in candidates:
        if path.is_file():
            try:
                module = torch.jit.load(str(path), map_location="cpu")
            except Exception as exc:
                raise ValueError(f"incompatible autoencoder artifact at {path}: {exc}") from exc
            if not hasattr(module, "encode") or not hasattr(module, "decode"):
                raise ValueError(f"artifact at {path} lacks encode/decode methods")
            return ExternalCodec(module, str(path))
    raise FileNotFoundError(
        f"no autoencoder artifact at {locator}"
        + (f" (also checked cache {cache})" if cache else "")
    )
