"""Low-rank adapter finetuning for identity preservation.

Before any drag editing starts, the denoiser is briefly finetuned on the
single input image so reconstructions keep the subject's identity.  Only
small rank-r adapter matrices attached to selected linear layers are
trained; the base weights stay frozen and bitwise intact.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .diffusion import DenoiserInterface, NoiseSchedule


class AdapterError(RuntimeError):
    """Raised when adapter injection or finetuning cannot proceed."""


def _match_attention(name: str, module: nn.Module) -> bool:
    if not isinstance(module, nn.Linear):
        return False
    leaf = name.rsplit(".", 1)[-1]
    return leaf in ("q_proj", "k_proj", "v_proj", "out_proj")


def _match_linear(name: str, module: nn.Module) -> bool:
    return isinstance(module, nn.Linear)


# Named selectors decide which layers receive adapters.  "attention" covers
# the projection layers of self-attention blocks; "linear" covers every
# linear layer in the network.
SELECTORS = {
    "attention": _match_attention,
    "linear": _match_linear,
}


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 16
    learning_rate: float = 5e-4
    steps: int = 80
    target_layer_selector: str = "attention"

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.target_layer_selector not in SELECTORS:
            raise ValueError(
                f"unknown selector {self.target_layer_selector!r}; "
                f"choose from {sorted(SELECTORS)}"
            )


class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable rank-r additive path.

    Output is base(x) + B(A(x)).  B starts at zero, so the wrapped layer is
    exactly equivalent to the base layer until an optimizer step moves it.
    """

    def __init__(self, base: nn.Linear, rank: int, generator: torch.Generator) -> None:
        super().__init__()
        self.base = base
        self.rank = rank
        for p in self.base.parameters():
            p.requires_grad_(False)
        d_in = base.in_features
        d_out = base.out_features
        dtype = base.weight.dtype
        a = torch.randn(rank, d_in, generator=generator, dtype=torch.float64)
        a = (a / d_in**0.5).to(dtype)
        self.lora_a = nn.Parameter(a)
        self.lora_b = nn.Parameter(torch.zeros(d_out, rank, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.lora_a.T) @ self.lora_b.T

    def adapter_delta(self) -> torch.Tensor:
        """The effective weight update B @ A contributed by the adapter."""
        return self.lora_b @ self.lora_a


def inject_adapters(
    model: DenoiserInterface, cfg: LoRAConfig, seed: int = 0
) -> DenoiserInterface:
    """Return a copy of the model with adapters on all selected layers.

    The copy's base weights are frozen; only adapter parameters require
    grad.  The original model is left untouched.
    """
    matcher = SELECTORS[cfg.target_layer_selector]
    adapted = copy.deepcopy(model)
    matches = [(name, mod) for name, mod in adapted.named_modules() if matcher(name, mod)]
    if not matches:
        raise AdapterError(
            f"selector {cfg.target_layer_selector!r} matched no layers"
        )
    for p in adapted.parameters():
        p.requires_grad_(False)
    generator = torch.Generator().manual_seed(seed)
    for name, mod in matches:
        wrapped = LoRALinear(mod, cfg.rank, generator)
        parent = adapted
        *path, leaf = name.split(".")
        for part in path:
            parent = getattr(parent, part)
        setattr(parent, leaf, wrapped)
    return adapted


def adapter_parameter_count(model: nn.Module) -> int:
    total = 0
    for mod in model.modules():
        if isinstance(mod, LoRALinear):
            total += mod.lora_a.numel() + mod.lora_b.numel()
    return total


def base_weight_checksum(model: nn.Module) -> bytes:
    """Order-stable digest of every non-adapter parameter, for freeze checks."""
    import hashlib

    digest = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if "lora_a" in name or "lora_b" in name:
            continue
        # wrapped layers rename w.weight to w.base.weight; fold that back so
        # adapted and pristine models hash identically when weights agree
        digest.update(name.replace(".base.", ".").encode())
        digest.update(p.detach().cpu().numpy().tobytes())
    return digest.digest()


@dataclass
class FinetuneResult:
    model: DenoiserInterface
    losses: list = field(default_factory=list)
    probe_losses: list = field(default_factory=list)


def _noising_pairs(shape, schedule: NoiseSchedule, count: int, generator: torch.Generator):
    pairs = []
    for _ in range(count):
        t = int(torch.randint(1, schedule.num_steps + 1, (1,), generator=generator).item())
        eps = torch.randn(shape, generator=generator, dtype=torch.float64)
        pairs.append((t, eps))
    return pairs


def _probe_loss(model, z, schedule, pairs, conditioning) -> float:
    total = 0.0
    with torch.no_grad():
        for t, eps in pairs:
            noised = schedule.alphas[t] * z + schedule.sigmas[t] * eps
            predicted = model.predict_noise(noised, t, conditioning)
            total += torch.mean((eps - predicted) ** 2).item()
    return total / len(pairs)


def finetune_identity(
    model: DenoiserInterface,
    image: torch.Tensor,
    prompt: str,
    cfg: LoRAConfig,
    schedule: NoiseSchedule,
    seed: int = 0,
    probe_size: int = 32,
) -> FinetuneResult:
    """Finetune adapter weights to reconstruct the input image's noise.

    Each step draws a uniform timestep index t in [1, num_steps] and a
    Gaussian noise sample, forms the noised latent alpha_t * z + sigma_t * eps,
    and minimizes the mean squared error between the model's prediction and
    the drawn noise.  Only parameters with requires_grad participate, which
    after inject_adapters means the adapter matrices alone.

    Two traces come back.  ``losses`` holds the per-step training loss,
    whose fresh (t, eps) draws make it far noisier than the adapter's
    actual progress.  ``probe_losses`` re-evaluates the objective on one
    frozen batch of (t, eps) pairs after every step; holding the samples
    fixed smooths the sampling noise away, so this trace shows real
    movement of the expected loss.
    """
    adapted = inject_adapters(model, cfg, seed=seed)
    if cfg.steps == 0:
        return FinetuneResult(model=adapted)
    z = model.encode(image).detach()
    conditioning = adapted.embed_prompt(prompt)
    trainable = [p for p in adapted.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(trainable, lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    generator = torch.Generator().manual_seed(seed)
    probe = (
        _noising_pairs(z.shape, schedule, probe_size, torch.Generator().manual_seed(seed + 0x5EED))
        if probe_size > 0
        else []
    )
    num_steps = schedule.num_steps
    losses = []
    probe_losses = []
    if probe:
        probe_losses.append(_probe_loss(adapted, z, schedule, probe, conditioning))
    for step in range(cfg.steps):
        t = int(torch.randint(1, num_steps + 1, (1,), generator=generator).item())
        eps = torch.randn(z.shape, generator=generator, dtype=z.dtype)
        noised = schedule.alphas[t] * z + schedule.sigmas[t] * eps
        predicted = adapted.predict_noise(noised, t, conditioning)
        loss = torch.mean((eps - predicted) ** 2)
        if not torch.isfinite(loss):
            raise AdapterError(
                f"non-finite loss {loss.item()} at finetune step {step}; "
                f"last finite losses: {losses[-5:]}"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.item()))
        if probe:
            probe_losses.append(_probe_loss(adapted, z, schedule, probe, conditioning))
    return FinetuneResult(model=adapted, losses=losses, probe_losses=probe_losses)


def save_adapters(path, model: nn.Module) -> None:
    """Persist adapter matrices only; base weights are never written."""
    weights = {}
    rank = None
    for name, mod in model.named_modules():
        if isinstance(mod, LoRALinear):
            weights[name] = {
                "lora_a": mod.lora_a.detach().clone(),
                "lora_b": mod.lora_b.detach().clone(),
            }
            rank = mod.rank
    if not weights:
        raise AdapterError("model has no adapters to save")
    torch.save({"kind": "lora-adapters", "rank": rank, "weights": weights}, path)


def load_adapters(path, model: nn.Module) -> nn.Module:
    """Load adapter matrices into a model already carrying adapters."""
    payload = torch.load(path, weights_only=True)
    if payload.get("kind") != "lora-adapters":
        raise AdapterError(f"not an adapter checkpoint: {path}")
    modules = {
        name: mod for name, mod in model.named_modules() if isinstance(mod, LoRALinear)
    }
    saved = payload["weights"]
    if set(saved) != set(modules):
        raise AdapterError(
            f"adapter layout mismatch: checkpoint has {sorted(saved)}, "
            f"model has {sorted(modules)}"
        )
    with torch.no_grad():
        for name, tensors in saved.items():
            modules[name].lora_a.copy_(tensors["lora_a"])
            modules[name].lora_b.copy_(tensors["lora_b"])
    return model
