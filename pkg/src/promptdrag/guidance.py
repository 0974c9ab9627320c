"""Losses and latent gradients that steer a drag edit.

Two signals drive the optimization.  The local signal pulls feature
patches around each handle toward its target, one unit step at a time.
The global signal scores a one-step clean decode of the latent against an
edit prompt in the dual-encoder embedding space.  Both reduce to plain
scalar losses, and both gradients are taken with respect to the same
latent grid so they can be fused downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .diffusion import DenoiserInterface, LatentState, NoiseSchedule
from .encoders import DualEncoderInterface
from .geometry import (
    DragPair,
    FeatureMap,
    PixelPoint,
    bilinear_sample,
    patch_points,
    unit_direction,
)

SOURCE_TAGS = ("global", "local", "fused")

REFERENCE_MODES = ("original", "current")


class GuidanceError(RuntimeError):
    """Raised when a loss or gradient is undefined for the given inputs."""


@dataclass
class GradientField:
    """A latent-shaped gradient grid tagged with where it came from.

    ``loss_value`` carries the scalar the gradient was taken of; purely
    diagnostic, trajectory logging reads it.
    """

    values: torch.Tensor
    source_tag: str
    loss_value: float | None = None

    def __post_init__(self) -> None:
        if self.source_tag not in SOURCE_TAGS:
            raise ValueError(f"source_tag must be one of {SOURCE_TAGS}, got {self.source_tag!r}")
        if not torch.isfinite(self.values).all():
            raise ValueError(f"{self.source_tag} gradient contains non-finite values")

    @property
    def norm(self) -> float:
        return float(self.values.norm().item())


def estimate_clean_image(
    state: LatentState, model: DenoiserInterface, schedule: NoiseSchedule
) -> torch.Tensor:
    """One-step clean estimate of the latent, decoded to image space.

    Divides out the signal coefficient after removing the predicted noise,
    which is exact when the noise prediction is, and cheap always: one
    model call, fully differentiable w.r.t. the latent.
    """
    t = state.timestep_index
    alpha = schedule.alphas[t]
    sigma = schedule.sigmas[t]
    if float(abs(alpha)) < 1e-8:
        raise GuidanceError(
            f"signal coefficient ~0 at timestep {t}; one-step clean estimate undefined"
        )
    eps = model.predict_noise(state.z, t, state.conditioning)
    x0 = (state.z - sigma * eps) / alpha
    return model.decode(x0)


def _cosine(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    na = a.norm()
    nb = b.norm()
    if float(na.detach()) < 1e-12 or float(nb.detach()) < 1e-12:
        raise GuidanceError(f"zero-norm {what}; cosine undefined")
    return (a * b).sum() / (na * nb)


def clip_global_loss(
    image: torch.Tensor, edit_prompt: str, encoder: DualEncoderInterface
) -> torch.Tensor:
    """1 - cosine between the image embedding and the edit prompt embedding."""
    e_image = encoder.encode_image(image)
    e_text = encoder.encode_text(edit_prompt)
    return 1.0 - _cosine(e_image, e_text, "embedding")


def clip_directional_loss(
    image_src: torch.Tensor,
    image_edit: torch.Tensor,
    prompt_src: str,
    prompt_edit: str,
    encoder: DualEncoderInterface,
) -> torch.Tensor:
    """1 - cosine between the image-space change and the text-space change.

    Implemented for completeness and ablation; the default pipeline steers
    with the global loss instead.
    """
    delta_image = encoder.encode_image(image_edit) - encoder.encode_image(image_src)
    delta_text = encoder.encode_text(prompt_edit) - encoder.encode_text(prompt_src)
    if float(delta_text.norm().detach()) < 1e-12:
        raise GuidanceError("prompts embed identically; edit direction degenerate")
    if float(delta_image.norm().detach()) < 1e-12:
        raise GuidanceError("images embed identically; edit direction degenerate")
    return 1.0 - _cosine(delta_image, delta_text, "direction")


def _state_features(state: LatentState, model: DenoiserInterface) -> FeatureMap:
    return model.extract_features(state.z, state.timestep_index, state.conditioning)


def motion_supervision_loss(
    state_k: LatentState,
    state_0: LatentState,
    pairs: list[DragPair],
    r1: int,
    model: DenoiserInterface,
    reference_mode: str = "original",
    reference_features: FeatureMap | None = None,
) -> torch.Tensor:
    """Sum of feature mismatches one unit step ahead of every handle patch.

    For each active pair, every integer point q in the radius-r1 patch
    around the current handle is nudged by the unit handle-to-target
    direction; the bilinearly sampled features there are compared (L1)
    against frozen reference features at q.  Only the nudged branch is
    differentiated, so the loss pulls content toward the target rather
    than dragging the reference along.

    ``reference_mode`` picks where the frozen side comes from: "original"
    reads the unedited latent (the default), "current" reads this
    iteration's latent, which compounds motion across iterations the way
    earlier drag frameworks did.  ``reference_features`` short-circuits
    the reference computation with a precomputed map (callers cache it:
    under "original" mode it never changes).
    """
    if reference_mode not in REFERENCE_MODES:
        raise GuidanceError(f"reference_mode must be one of {REFERENCE_MODES}")
    if state_k.timestep_index != state_0.timestep_index:
        raise GuidanceError(
            f"latents sit at different timesteps ({state_k.timestep_index} vs "
            f"{state_0.timestep_index}); features are not comparable"
        )
    if r1 < 0:
        raise GuidanceError("patch radius must be >= 0")
    for pair in pairs:
        if not pair.active:
            raise GuidanceError("inactive pair passed to motion supervision")

    current = _state_features(state_k, model)
    if reference_features is not None:
        reference = reference_features
    else:
        ref_state = state_0 if reference_mode == "original" else state_k
        with torch.no_grad():
            reference = _state_features(ref_state, model)
    if reference.values.shape != current.values.shape:
        raise GuidanceError("reference and current feature maps differ in shape")

    bounds = (current.height, current.width)
    loss = current.values.sum() * 0.0
    for pair in pairs:
        d = unit_direction(pair.handle, pair.target)
        dx, dy = float(d[0]), float(d[1])
        for q in patch_points(pair.handle, r1, bounds):
            frozen = reference.values[:, int(q.y), int(q.x)].detach()
            moved = bilinear_sample(current, PixelPoint(q.x + dx, q.y + dy))
            loss = loss + (moved - frozen).abs().sum()
    return loss


def _grad_or_zeros(loss: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    # a loss already at a constant (e.g. exact minimum) may carry no graph
    if not loss.requires_grad:
        return torch.zeros_like(z)
    (grad,) = torch.autograd.grad(loss, z, allow_unused=True)
    if grad is None:
        return torch.zeros_like(z)
    return grad.detach()


def local_gradient(
    state_k: LatentState,
    state_0: LatentState,
    pairs: list[DragPair],
    r1: int,
    model: DenoiserInterface,
    reference_mode: str = "original",
    reference_features: FeatureMap | None = None,
) -> GradientField:
    """Gradient of the motion supervision loss w.r.t. this iteration's latent."""
    z = state_k.z.detach().clone().requires_grad_(True)
    live = state_k.with_z(z)
    loss = motion_supervision_loss(
        live, state_0, pairs, r1, model, reference_mode, reference_features
    )
    grad = _grad_or_zeros(loss, z)
    return GradientField(values=grad, source_tag="local", loss_value=float(loss.detach()))


def global_gradient(
    state_k: LatentState,
    edit_prompt: str,
    model: DenoiserInterface,
    encoder: DualEncoderInterface,
    schedule: NoiseSchedule,
) -> GradientField:
    """Gradient of the prompt-alignment loss w.r.t. this iteration's latent."""
    z = state_k.z.detach().clone().requires_grad_(True)
    live = state_k.with_z(z)
    image = estimate_clean_image(live, model, schedule)
    loss = clip_global_loss(image, edit_prompt, encoder)
    grad = _grad_or_zeros(loss, z)
    return GradientField(values=grad, source_tag="global", loss_value=float(loss.detach()))
