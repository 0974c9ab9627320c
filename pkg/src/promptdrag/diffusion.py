"""Denoiser abstraction, variance-preserving schedule and deterministic DDIM.

The inversion latent that the whole editor optimizes lives here, together
with a small convolutional toy denoiser used for desk-scale runs and tests.
A pretrained latent-diffusion stack can be plugged in behind the same
interface; nothing in the package assumes the toy implementation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
from torch import nn

from .geometry import FeatureMap


class BackendError(RuntimeError):
    """A denoiser produced non-finite output or an invalid schedule was used."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Signal/noise coefficient tables for a variance-preserving process.

    ``alphas[t]`` scales the clean latent and ``sigmas[t]`` the injected
    noise at step ``t``; alphas are monotonically decreasing and
    ``alphas**2 + sigmas**2 == 1`` everywhere. Arrays have ``num_steps + 1``
    entries so index 0 is the (almost) clean end and ``num_steps`` the
    noisiest.
    """

    alphas: torch.Tensor
    sigmas: torch.Tensor
    num_steps: int

    def __post_init__(self):
        if self.alphas.shape != (self.num_steps + 1,) or self.sigmas.shape != (self.num_steps + 1,):
            raise BackendError("schedule arrays must have num_steps + 1 entries")
        if not torch.all((self.alphas > 0) & (self.alphas <= 1)):
            raise BackendError("alphas must lie in (0, 1]")
        if not torch.all((self.sigmas > 0) & (self.sigmas <= 1)):
            raise BackendError("sigmas must lie in (0, 1]")
        if not torch.all(self.alphas[1:] <= self.alphas[:-1]):
            raise BackendError("alphas must decrease monotonically")
        if not torch.all((self.alphas**2 + self.sigmas**2 - 1.0).abs() < 1e-6):
            raise BackendError("schedule is not variance preserving")


def cosine_schedule(num_steps: int = 50, offset: float = 0.008) -> NoiseSchedule:
    """Cosine-shaped schedule; the offset keeps both endpoints inside (0, 1)."""
    t = torch.arange(num_steps + 1, dtype=torch.float64) / num_steps
    angle = (t + offset) / (1.0 + 2.0 * offset) * (math.pi / 2.0)
    return NoiseSchedule(alphas=torch.cos(angle), sigmas=torch.sin(angle), num_steps=num_steps)


@dataclass(frozen=True)
class LatentState:
    """The optimized latent grid at one timestep of the schedule."""

    z: torch.Tensor
    timestep_index: int
    iteration: int = 0
    conditioning: torch.Tensor | None = None

    def with_z(self, z: torch.Tensor, iteration: int | None = None) -> "LatentState":
        return replace(self, z=z, iteration=self.iteration if iteration is None else iteration)


class DenoiserInterface(nn.Module):
    """Capability contract every diffusion backend provides.

    Implementations must be deterministic given (z, t, conditioning, weights)
    and differentiable with respect to ``z``. ``extract_features`` returns a
    spatial grid at the latent resolution taken from the last decoder layer.
    """

    def predict_noise(self, z: torch.Tensor, t: int, conditioning: torch.Tensor | None) -> torch.Tensor:
        raise NotImplementedError

    def extract_features(self, z: torch.Tensor, t: int, conditioning: torch.Tensor | None) -> FeatureMap:
        raise NotImplementedError

    def embed_prompt(self, prompt: str) -> torch.Tensor:
        raise NotImplementedError

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Image -> latent. Identity for pixel-space backends."""
        return image

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latent -> image. Identity for pixel-space backends."""
        return z


def _check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise BackendError(f"{what} contains non-finite values")
    return x


def ddim_invert_step(
    state: LatentState,
    model: DenoiserInterface,
    schedule: NoiseSchedule,
    eps: torch.Tensor | None = None,
) -> LatentState:
    """One deterministic inversion step, t -> t + 1.

    ``eps`` overrides the model's noise prediction, which makes the step the
    exact algebraic inverse of :func:`ddim_denoise_step` on a shared value.
    """
    t = state.timestep_index
    if t + 1 > schedule.num_steps:
        raise BackendError(f"cannot invert past the end of the schedule (t={t})")
    if eps is None:
        eps = model.predict_noise(state.z, t, state.conditioning)
        _check_finite(eps, "noise prediction")
    a_t, s_t = schedule.alphas[t], schedule.sigmas[t]
    a_n, s_n = schedule.alphas[t + 1], schedule.sigmas[t + 1]
    x0 = (state.z - s_t * eps) / a_t
    z_next = a_n * x0 + s_n * eps
    return replace(state, z=z_next, timestep_index=t + 1)


def ddim_denoise_step(
    state: LatentState,
    model: DenoiserInterface,
    schedule: NoiseSchedule,
    eps: torch.Tensor | None = None,
) -> LatentState:
    """One deterministic sampling step, t -> t - 1."""
    t = state.timestep_index
    if t < 1:
        raise BackendError("cannot denoise below timestep 0")
    if eps is None:
        eps = model.predict_noise(state.z, t, state.conditioning)
        _check_finite(eps, "noise prediction")
    a_t, s_t = schedule.alphas[t], schedule.sigmas[t]
    a_p, s_p = schedule.alphas[t - 1], schedule.sigmas[t - 1]
    x0 = (state.z - s_t * eps) / a_t
    z_prev = a_p * x0 + s_p * eps
    return replace(state, z=z_prev, timestep_index=t - 1)


def steps_for_strength(strength: float, num_steps: int) -> int:
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must be in (0, 1], got {strength}")
    return math.ceil(strength * num_steps - 1e-12)


def invert_to_strength(
    z0: torch.Tensor,
    strength: float,
    model: DenoiserInterface,
    schedule: NoiseSchedule,
    conditioning: torch.Tensor | None = None,
) -> LatentState:
    """Run inversion for ceil(strength * num_steps) steps and keep the index."""
    steps = steps_for_strength(strength, schedule.num_steps)
    state = LatentState(z=z0, timestep_index=0, conditioning=conditioning)
    with torch.no_grad():
        for _ in range(steps):
            state = ddim_invert_step(state, model, schedule)
    return state


def ddim_denoise(state: LatentState, model: DenoiserInterface, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministically sample from the state's timestep back to a clean latent."""
    with torch.no_grad():
        while state.timestep_index > 0:
            state = ddim_denoise_step(state, model, schedule)
    return _check_finite(state.z, "denoised latent")


class _SelfAttention2d(nn.Module):
    """Single-head attention over spatial positions, residual with small gain."""

    def __init__(self, channels: int):
        super().__init__()
        self.q_proj = nn.Linear(channels, channels)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)
        self.scale = channels**-0.5

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        tokens = x.reshape(b, c, h * w).transpose(1, 2)
        q, k, v = self.q_proj(tokens), self.k_proj(tokens), self.v_proj(tokens)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        y = self.out_proj(attn @ v)
        return x + 0.1 * y.transpose(1, 2).reshape(b, c, h, w)


def _timestep_embedding(t: float, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=torch.float64) * (-math.log(1000.0) / max(half - 1, 1)))
    ang = t * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)])


def _prompt_vector(prompt: str, dim: int, salt: int) -> torch.Tensor:
    """Deterministic bag-of-tokens prompt embedding (hash-seeded, no weights)."""
    tokens = prompt.lower().split()
    if not tokens:
        return torch.zeros(dim, dtype=torch.float64)
    acc = np.zeros(dim, dtype=np.float64)
    for tok in tokens:
        digest = hashlib.md5(f"{salt}:{tok}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        acc += rng.standard_normal(dim)
    acc /= len(tokens)
    norm = np.linalg.norm(acc)
    if norm > 0:
        acc /= norm
    return torch.from_numpy(acc)


class ToyDenoiser(DenoiserInterface):
    """Two-level convolutional denoiser with one bottleneck attention block.

    Weights are drawn deterministically from ``seed``; the same seed gives
    bit-identical models. The feature grid handed to motion supervision and
    tracking is the activation of the final decoder convolution, whose input
    concatenates the raw latent so features stay locally tied to content.
    """

    def __init__(
        self,
        seed: int,
        dims: tuple[int, int] = (64, 64),
        channels: int = 3,
        hidden: int = 12,
        cond_dim: int = 32,
        num_steps: int = 50,
    ):
        super().__init__()
        self.seed = seed
        self.dims = tuple(dims)
        self.channels = channels
        self.hidden = hidden
        self.cond_dim = cond_dim
        self.num_steps = num_steps

        self.time_mlp = nn.Sequential(nn.Linear(16, 2 * hidden), nn.SiLU(), nn.Linear(2 * hidden, 2 * hidden))
        self.cond_proj = nn.Linear(cond_dim, 2 * hidden)
        self.enc = nn.Conv2d(channels, hidden, 3, padding=1)
        self.down = nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1)
        self.mid = nn.Conv2d(2 * hidden, 2 * hidden, 3, padding=1)
        self.mid_attn = _SelfAttention2d(2 * hidden)
        self.up = nn.Conv2d(2 * hidden, hidden, 3, padding=1)
        self.dec = nn.Conv2d(2 * hidden + channels, hidden, 3, padding=1)
        self.out = nn.Conv2d(hidden, channels, 3, padding=1)

        self.double()
        self._init_weights(seed)
        self.eval()

    @property
    def feature_channels(self) -> int:
        return self.hidden

    def _init_weights(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if p.dim() > 1:
                fan_in = p[0].numel()
                p.data = torch.randn(p.shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
            else:
                p.data = torch.zeros(p.shape, dtype=torch.float64)
        # keep noise predictions gentle so long inversion chains stay stable
        self.out.weight.data *= 0.25
        # weights are immutable after construction; adapters opt back in
        for p in self.parameters():
            p.requires_grad_(False)

    def _forward(self, z: torch.Tensor, t: int, conditioning: torch.Tensor | None):
        if z.dim() != 3:
            raise ValueError(f"latent must be (channels, height, width), got {tuple(z.shape)}")
        x = z.unsqueeze(0)
        temb = self.time_mlp(_timestep_embedding(t / self.num_steps, 16))
        if conditioning is not None:
            temb = temb + self.cond_proj(conditioning.to(torch.float64))
        temb = temb.reshape(1, -1, 1, 1)

        h1 = torch.nn.functional.silu(self.enc(x))
        h2 = torch.nn.functional.silu(self.down(h1) + temb)
        h2 = torch.nn.functional.silu(self.mid(h2))
        h2 = self.mid_attn(h2)
        h3 = torch.nn.functional.silu(self.up(torch.nn.functional.interpolate(h2, size=x.shape[-2:], mode="nearest")))
        feats = torch.nn.functional.silu(self.dec(torch.cat([h1, h3, x], dim=1)))
        eps = self.out(feats)
        return eps.squeeze(0), feats.squeeze(0)

    def predict_noise(self, z: torch.Tensor, t: int, conditioning: torch.Tensor | None) -> torch.Tensor:
        return self._forward(z, t, conditioning)[0]

    def extract_features(self, z: torch.Tensor, t: int, conditioning: torch.Tensor | None) -> FeatureMap:
        feats = self._forward(z, t, conditioning)[1]
        if feats.shape[-2:] != z.shape[-2:]:
            feats = torch.nn.functional.interpolate(
                feats.unsqueeze(0), size=z.shape[-2:], mode="bilinear", align_corners=False
            ).squeeze(0)
        return FeatureMap(feats)

    def embed_prompt(self, prompt: str) -> torch.Tensor:
        return _prompt_vector(prompt, self.cond_dim, salt=self.seed)


def make_toy_backend(
    seed: int,
    dims: tuple[int, int] = (64, 64),
    channels: int = 3,
    num_steps: int = 50,
    hidden: int = 12,
) -> tuple[ToyDenoiser, NoiseSchedule]:
    # A larger offset keeps the terminal signal coefficient away from zero;
    # the 1/alpha factor in the clean-sample estimate would otherwise blow up
    # discretization error over full-strength inversion chains.
    schedule = cosine_schedule(num_steps, offset=0.06)
    model = ToyDenoiser(seed=seed, dims=dims, channels=channels, hidden=hidden, num_steps=num_steps)
    return model, schedule


def save_backend(path, model: ToyDenoiser, schedule: NoiseSchedule) -> None:
    """Persist the toy backend as one self-describing archive."""
    torch.save(
        {
            "kind": "toy-denoiser",
            "seed": model.seed,
            "dims": model.dims,
            "channels": model.channels,
            "hidden": model.hidden,
            "cond_dim": model.cond_dim,
            "num_steps": model.num_steps,
            "alphas": schedule.alphas,
            "sigmas": schedule.sigmas,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_backend(path) -> tuple[ToyDenoiser, NoiseSchedule]:
    blob = torch.load(path, weights_only=True)
    if blob.get("kind") != "toy-denoiser":
        raise BackendError(f"not a toy backend checkpoint: {path}")
    model = ToyDenoiser(
        seed=blob["seed"],
        dims=tuple(blob["dims"]),
        channels=blob["channels"],
        hidden=blob["hidden"],
        cond_dim=blob["cond_dim"],
        num_steps=blob["num_steps"],
    )
    model.load_state_dict(blob["state_dict"])
    schedule = NoiseSchedule(alphas=blob["alphas"], sigmas=blob["sigmas"], num_steps=blob["num_steps"])
    return model, schedule
