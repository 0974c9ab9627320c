"""End-to-end drag editing: finetune, invert, optimize, track, denoise.

One edit job is a sequential loop over a single noised latent.  Each
iteration takes one fused gradient step (drag pull plus prompt pull),
then relocates every handle onto the content it was pinned to.  The loop
stops when every handle sits within the convergence threshold of its
target, or at the iteration cap.  Everything downstream of the seed is
deterministic, so identical jobs produce byte-identical results.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field, replace

import torch

from .diffusion import (
    BackendError,
    DenoiserInterface,
    LatentState,
    NoiseSchedule,
    ddim_denoise,
    invert_to_strength,
)
from .encoders import DualEncoderInterface, EncoderError
from .fusion import FusionError, VARIANTS, apply_update, fuse_gradients
from .geometry import DragPair, FeatureMap, PixelPoint, to_feature_coords
from .guidance import (
    GradientField,
    GuidanceError,
    REFERENCE_MODES,
    estimate_clean_image,
    global_gradient,
    local_gradient,
)
from .lora import AdapterError, LoRAConfig, finetune_identity
from .tracking import STRATEGIES, TrackingStep, update_handles

log = logging.getLogger(__name__)

STATUSES = ("done", "cancelled", "failed")

EDITABLE_THRESHOLD = 127  # mask values above this mark editable pixels


class JobError(RuntimeError):
    """Raised when a job specification cannot be executed."""


@dataclass(frozen=True)
class Hyperparams:
    """Knobs of one edit run; defaults follow the reference configuration."""

    patch_radius: int = 4  # r1: supervision patch half-width
    search_radius: int = 12  # r2: tracking window half-width
    fusion_weight: float = 0.7
    max_iterations: int = 2000
    inversion_strength: float = 0.7
    denoise_steps: int = 50
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    latent_lr: float = 0.01
    seed: int = 0
    tracking_strategy: str = "FPT"
    fusion_variant: str = "angular"
    reference_mode: str = "original"
    convergence_threshold: float = 1.0
    clip_grad_stride: int = 1
    motion_steps: int = 1  # gradient steps per iteration before re-tracking
    mask_weight: float = 0.1
    preview_stride: int = 10  # 0 disables preview thumbnails

    def __post_init__(self) -> None:
        if self.patch_radius < 0 or self.search_radius < 0:
            raise ValueError("radii must be >= 0")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not 0.0 < self.inversion_strength <= 1.0:
            raise ValueError("inversion_strength must be in (0, 1]")
        if self.latent_lr < 0:
            raise ValueError("latent_lr must be >= 0")
        if self.tracking_strategy not in STRATEGIES:
            raise ValueError(f"tracking_strategy must be one of {STRATEGIES}")
        if self.fusion_variant not in VARIANTS:
            raise ValueError(f"fusion_variant must be one of {VARIANTS}")
        if self.reference_mode not in REFERENCE_MODES:
            raise ValueError(f"reference_mode must be one of {REFERENCE_MODES}")
        if self.convergence_threshold < 0:
            raise ValueError("convergence_threshold must be >= 0")
        if self.clip_grad_stride < 1:
            raise ValueError("clip_grad_stride must be >= 1")
        if self.motion_steps < 1:
            raise ValueError("motion_steps must be >= 1")
        if self.mask_weight < 0:
            raise ValueError("mask_weight must be >= 0")
        if self.preview_stride < 0:
            raise ValueError("preview_stride must be >= 0")


@dataclass(frozen=True)
class JobSpec:
    """Everything needed to run one edit.

    ``image`` is a (channels, H, W) float tensor in [0, 1].  ``mask`` is
    an optional (H, W) tensor where values above 127 mark editable
    pixels; everything else is pinned toward its original content.
    """

    image: torch.Tensor
    prompt_original: str
    prompt_edit: str
    pairs: tuple[DragPair, ...]
    mask: torch.Tensor | None = None
    hyperparams: Hyperparams = field(default_factory=Hyperparams)

    def __post_init__(self) -> None:
        if self.image.dim() != 3:
            raise JobError(f"image must be (channels, H, W), got {tuple(self.image.shape)}")
        if len(self.pairs) < 1:
            raise JobError("a job needs at least one drag pair")
        object.__setattr__(self, "pairs", tuple(self.pairs))
        h, w = self.image.shape[-2:]
        for pair in self.pairs:
            for p in (pair.handle, pair.target):
                if not (0 <= p.x <= w - 1 and 0 <= p.y <= h - 1):
                    raise JobError(f"point ({p.x}, {p.y}) outside image bounds {h}x{w}")
        if self.mask is not None and tuple(self.mask.shape) != (h, w):
            raise JobError(
                f"mask shape {tuple(self.mask.shape)} does not match image {h}x{w}"
            )


@dataclass(frozen=True)
class TrajectoryRecord:
    """One optimization iteration's worth of diagnostics."""

    iteration: int
    handles: tuple[tuple[float, float], ...]
    loss_motion: float
    loss_global: float | None
    fusion_cos: float
    fusion_branch: str
    tracking: tuple[TrackingStep, ...]
    preview: torch.Tensor | None = None


@dataclass
class EditResult:
    """Output bundle of one edit run.

    ``final_features`` and ``reference_features`` expose the feature maps
    evaluation re-tracks on; ``status`` distinguishes clean completion
    from cancellation and failure, and ``error`` carries the reason for
    the latter.
    """

    edited_image: torch.Tensor | None
    final_pairs: tuple[DragPair, ...]
    iterations_used: int
    converged: bool
    trajectory: tuple[TrajectoryRecord, ...]
    status: str = "done"
    error: str | None = None
    metrics: dict | None = None
    final_features: FeatureMap | None = None
    reference_features: FeatureMap | None = None

    def fingerprint(self) -> str:
        """SHA-256 over every numerical artifact, for determinism checks."""
        digest = hashlib.sha256()
        digest.update(self.status.encode())
        digest.update(struct.pack("<q?", self.iterations_used, self.converged))
        if self.edited_image is not None:
            digest.update(self.edited_image.detach().numpy().tobytes())
        for pair in self.final_pairs:
            digest.update(
                struct.pack(
                    "<4d?",
                    pair.handle.x,
                    pair.handle.y,
                    pair.target.x,
                    pair.target.y,
                    pair.active,
                )
            )
        for rec in self.trajectory:
            digest.update(struct.pack("<q", rec.iteration))
            for hx, hy in rec.handles:
                digest.update(struct.pack("<2d", hx, hy))
            digest.update(struct.pack("<d", rec.loss_motion))
            digest.update(struct.pack("<d", rec.loss_global if rec.loss_global is not None else -1.0))
            digest.update(struct.pack("<d", rec.fusion_cos))
            digest.update(rec.fusion_branch.encode())
            for step in rec.tracking:
                digest.update(
                    struct.pack(
                        "<2d2dqd",
                        step.old_handle.x,
                        step.old_handle.y,
                        step.new_handle.x,
                        step.new_handle.y,
                        step.candidate_count,
                        step.feature_distance,
                    )
                )
        return digest.hexdigest()


def check_convergence(pairs, threshold: float = 1.0) -> bool:
    """True when every pair's handle is within ``threshold`` of its target.

    A zero threshold demands exact coincidence.
    """
    for pair in pairs:
        d = pair.distance_to_target()
        if threshold == 0.0:
            if d != 0.0:
                return False
        elif d >= threshold:
            return False
    return True


def mask_to_latent(mask: torch.Tensor, latent_dims: tuple[int, int]) -> torch.Tensor:
    """Image-space mask -> float latent-space mask (1 = editable)."""
    editable = (mask.to(torch.float64) > EDITABLE_THRESHOLD).to(torch.float64)
    if tuple(editable.shape) == tuple(latent_dims):
        return editable
    resized = torch.nn.functional.interpolate(
        editable.unsqueeze(0).unsqueeze(0), size=latent_dims, mode="nearest"
    )
    return resized.squeeze(0).squeeze(0)


def mask_regularize(
    state_k: LatentState, state_0: LatentState, latent_mask: torch.Tensor, weight: float
) -> torch.Tensor:
    """Gradient of weight * ||(z_k - z_0) * (1 - M)||^2 w.r.t. z_k.

    M marks editable latent cells with 1; the penalty pins everything
    else toward the original latent.
    """
    if tuple(latent_mask.shape) != tuple(state_k.z.shape[-2:]):
        raise JobError(
            f"latent mask shape {tuple(latent_mask.shape)} does not match latent "
            f"{tuple(state_k.z.shape[-2:])}"
        )
    keep = 1.0 - latent_mask
    return 2.0 * weight * (state_k.z - state_0.z) * keep


@dataclass
class EditContext:
    """Immutable-per-job inputs the iteration loop reads every step."""

    job: JobSpec
    model: DenoiserInterface
    encoder: DualEncoderInterface
    schedule: NoiseSchedule
    state_0: LatentState
    reference_features: FeatureMap | None
    latent_mask: torch.Tensor | None
    use_global: bool
    last_global: GradientField | None = None


def glms_iteration(
    state: LatentState, ctx: EditContext, pairs: list[DragPair]
) -> tuple[LatentState, dict]:
    """One fused global+local gradient step on the latent.

    The prompt-alignment gradient is recomputed every ``clip_grad_stride``
    iterations and reused in between; the drag gradient is always fresh.
    ``motion_steps`` > 1 takes several descent steps before the caller
    re-tracks handles, letting content keep pace with handle relocation.
    """
    hp = ctx.job.hyperparams
    if not any(p.active for p in pairs):
        raise JobError("glms_iteration needs at least one active pair")
    # a pair sitting exactly on its target has no drag direction to supervise
    active = [p for p in pairs if p.active and p.distance_to_target() > 0.0]
    if not active:
        raise JobError("every active pair already coincides with its target")

    if ctx.use_global and state.iteration % hp.clip_grad_stride == 0:
        ctx.last_global = global_gradient(
            state, ctx.job.prompt_edit, ctx.model, ctx.encoder, ctx.schedule
        )
    g_global = (
        ctx.last_global
        if (ctx.use_global and ctx.last_global is not None)
        else GradientField(values=torch.zeros_like(state.z), source_tag="global", loss_value=None)
    )

    loss_motion = 0.0
    fused_diag = None
    for _ in range(hp.motion_steps):
        g_local = local_gradient(
            state,
            ctx.state_0,
            active,
            hp.patch_radius,
            ctx.model,
            hp.reference_mode,
            ctx.reference_features,
        )
        loss_motion = g_local.loss_value
        fused, fused_diag = fuse_gradients(
            g_global, g_local, hp.fusion_weight, hp.fusion_variant
        )
        if ctx.latent_mask is not None:
            penalty = mask_regularize(state, ctx.state_0, ctx.latent_mask, hp.mask_weight)
            fused = GradientField(values=fused.values + penalty, source_tag="fused")
        state = apply_update(state, fused, hp.latent_lr)

    return state, {
        "loss_motion": float(loss_motion),
        "loss_global": g_global.loss_value,
        "fusion_cos": fused_diag.cos_angle,
        "fusion_branch": fused_diag.branch,
    }


def _map_pairs_to_latent(job: JobSpec, latent_dims: tuple[int, int]) -> list[DragPair]:
    image_dims = tuple(job.image.shape[-2:])
    if image_dims == latent_dims:
        return list(job.pairs)
    mapped = []
    for pair in job.pairs:
        mapped.append(
            DragPair(
                handle=to_feature_coords(pair.handle, image_dims, latent_dims),
                target=to_feature_coords(pair.target, image_dims, latent_dims),
                active=pair.active,
            )
        )
    return mapped


def run_edit(
    job: JobSpec,
    backend: DenoiserInterface,
    schedule: NoiseSchedule,
    encoder: DualEncoderInterface,
    progress=None,
    should_cancel=None,
    on_record=None,
) -> EditResult:
    """Execute one edit job start to finish.

    ``progress(phase, step, total)`` is called on phase changes and once
    per optimization iteration; ``should_cancel()`` is polled between
    iterations, and a True return stops the job with its partial
    trajectory preserved under status "cancelled".  ``on_record`` receives
    each TrajectoryRecord as it is produced, so callers can stream
    progress while the loop runs.  Recoverable editing failures
    (non-finite latents, backend errors) come back as a partial result
    with status "failed" rather than an exception.
    """

    def notify(phase, step=0, total=0):
        if progress is not None:
            progress(phase, step, total)

    def cancelled():
        return should_cancel is not None and should_cancel()

    hp = job.hyperparams
    torch.manual_seed(hp.seed)
    trajectory: list[TrajectoryRecord] = []
    pairs: list[DragPair] = list(job.pairs)

    use_global = bool(job.prompt_edit.split())
    if not use_global:
        log.warning("empty edit prompt: global guidance disabled for this job")

    try:
        notify("finetuning")
        model = backend
        if hp.lora.steps > 0:
            model = finetune_identity(
                backend, job.image, job.prompt_original, hp.lora, schedule, seed=hp.seed
            ).model
        if cancelled():
            return _partial(job.pairs, trajectory, "cancelled", None)

        notify("inverting")
        conditioning = model.embed_prompt(job.prompt_original)
        z_clean = model.encode(job.image)
        state_0 = invert_to_strength(
            z_clean, hp.inversion_strength, model, schedule, conditioning
        )
        state = state_0
        latent_dims = tuple(state_0.z.shape[-2:])
        pairs = _map_pairs_to_latent(job, latent_dims)

        reference_features = None
        with torch.no_grad():
            reference_features = model.extract_features(
                state_0.z, state_0.timestep_index, conditioning
            )
            reference_features = FeatureMap(reference_features.values.detach())

        latent_mask = (
            mask_to_latent(job.mask, latent_dims) if job.mask is not None else None
        )
        ctx = EditContext(
            job=job,
            model=model,
            encoder=encoder,
            schedule=schedule,
            state_0=state_0,
            reference_features=(
                reference_features if hp.reference_mode == "original" else None
            ),
            latent_mask=latent_mask,
            use_global=use_global,
        )
        if cancelled():
            return _partial(pairs, trajectory, "cancelled", None)

        notify("optimizing", 0, hp.max_iterations)
        iterations_used = 0
        for k in range(hp.max_iterations):
            if check_convergence(pairs, hp.convergence_threshold):
                break
            if cancelled():
                return _partial(pairs, trajectory, "cancelled", None)

            state, info = glms_iteration(state, ctx, pairs)
            with torch.no_grad():
                features_k1 = model.extract_features(
                    state.z, state.timestep_index, conditioning
                )
                features_k1 = FeatureMap(features_k1.values.detach())
            pairs, steps = update_handles(
                pairs,
                features_k1,
                reference_features,
                hp.search_radius,
                hp.tracking_strategy,
                deactivate_below=hp.convergence_threshold,
            )
            preview = None
            if hp.preview_stride and (k % hp.preview_stride == 0):
                with torch.no_grad():
                    preview = estimate_clean_image(state, model, schedule).detach()
            record = TrajectoryRecord(
                iteration=k,
                handles=tuple((p.handle.x, p.handle.y) for p in pairs),
                loss_motion=info["loss_motion"],
                loss_global=info["loss_global"],
                fusion_cos=info["fusion_cos"],
                fusion_branch=info["fusion_branch"],
                tracking=tuple(steps),
                preview=preview,
            )
            trajectory.append(record)
            if on_record is not None:
                on_record(record)
            iterations_used = k + 1
            notify("optimizing", iterations_used, hp.max_iterations)

        # pairs that satisfied convergence before the loop ever tracked
        # them still count as arrived
        if check_convergence(pairs, hp.convergence_threshold):
            pairs = [
                p if not p.active else p.moved(p.handle, active=False) for p in pairs
            ]

        notify("denoising")
        with torch.no_grad():
            final_features = model.extract_features(
                state.z, state.timestep_index, conditioning
            )
            final_features = FeatureMap(final_features.values.detach())
            denoised = ddim_denoise(state, model, schedule)
            edited_image = model.decode(denoised).detach()

        return EditResult(
            edited_image=edited_image,
            final_pairs=tuple(pairs),
            iterations_used=iterations_used,
            converged=all(not p.active for p in pairs),
            trajectory=tuple(trajectory),
            status="done",
            final_features=final_features,
            reference_features=reference_features,
        )
    except (BackendError, FusionError, GuidanceError, AdapterError, EncoderError, JobError) as exc:
        log.warning("edit job failed: %s", exc)
        return _partial(pairs, trajectory, "failed", str(exc))


def _partial(pairs, trajectory, status: str, error: str | None) -> EditResult:
    return EditResult(
        edited_image=None,
        final_pairs=tuple(pairs),
        iterations_used=len(trajectory),
        converged=False,
        trajectory=tuple(trajectory),
        status=status,
        error=error,
    )
