"""Fusing the prompt-alignment gradient into the drag gradient.

The local (drag) gradient sets the edit direction; the global (prompt)
gradient joins it at a strength that depends on the angle between them.
When the two agree, the global signal enters scaled by the sine of the
angle, vanishing when it is redundant with the local one.  When they
conflict, the global signal is flipped and scaled by the cosine, so
head-on opposition contributes proportionally to how opposed it is.

Alternative combination rules used for ablations live behind the
``variant`` flag; see ``fuse_gradients``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .diffusion import LatentState
from .guidance import GradientField

BRANCHES = ("consistent", "contradictory", "degenerate")

# angular: sine/cosine-weighted combination (the default rule above).
# projection: splits the global gradient into components parallel and
#   perpendicular to the local one; agreement keeps the perpendicular
#   (structure-preserving) part, conflict keeps the parallel part.
# prograd: always keeps only the parallel component.
# add: plain weighted addition.
VARIANTS = ("angular", "projection", "prograd", "add")

DEGENERATE_NORM = 1e-12

# cosines this close to +/-1 snap exactly, so a global gradient that is a
# positive multiple of the local one contributes exactly nothing
PARALLEL_SNAP = 1e-12


class FusionError(RuntimeError):
    """Raised when gradients cannot be combined or applied."""


@dataclass(frozen=True)
class FusionDiagnostics:
    """Per-iteration record of how the two gradients were combined.

    For the degenerate branch the angle is undefined; it is recorded with
    the placeholder cos=0, sin=1.
    """

    cos_angle: float
    sin_angle: float
    branch: str
    norm_global: float
    norm_local: float
    fusion_weight: float
    variant: str = "angular"

    def __post_init__(self) -> None:
        if self.branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {self.branch!r}")
        if abs(self.cos_angle**2 + self.sin_angle**2 - 1.0) > 1e-6:
            raise ValueError("cos/sin pair does not describe an angle")


def cosine_between(g_global: GradientField, g_local: GradientField) -> float:
    """Cosine of the angle between two flattened gradient fields."""
    if g_global.values.shape != g_local.values.shape:
        raise FusionError(
            f"gradient shapes differ: {tuple(g_global.values.shape)} vs "
            f"{tuple(g_local.values.shape)}"
        )
    ng = float(g_global.values.norm())
    nl = float(g_local.values.norm())
    if ng < DEGENERATE_NORM or nl < DEGENERATE_NORM:
        raise FusionError("degenerate signal: a gradient has (near-)zero norm")
    dot = float((g_global.values * g_local.values).sum())
    return max(-1.0, min(1.0, dot / (ng * nl)))


def _split_parallel(g_global: torch.Tensor, g_local: torch.Tensor):
    unit = g_local / g_local.norm()
    parallel = (g_global * unit).sum() * unit
    return parallel, g_global - parallel


def fuse_gradients(
    g_global: GradientField,
    g_local: GradientField,
    fusion_weight: float = 0.7,
    variant: str = "angular",
) -> tuple[GradientField, FusionDiagnostics]:
    """Combine the global gradient into the local one.

    Either gradient (near-)vanishing short-circuits to plain weighted
    addition, which reduces to whichever signal is present.
    """
    if variant not in VARIANTS:
        raise FusionError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if g_global.values.shape != g_local.values.shape:
        raise FusionError(
            f"gradient shapes differ: {tuple(g_global.values.shape)} vs "
            f"{tuple(g_local.values.shape)}"
        )
    gg = g_global.values
    gl = g_local.values
    ng = float(gg.norm())
    nl = float(gl.norm())
    lam = float(fusion_weight)

    if ng < DEGENERATE_NORM or nl < DEGENERATE_NORM:
        fused = gl + lam * gg
        diag = FusionDiagnostics(
            cos_angle=0.0,
            sin_angle=1.0,
            branch="degenerate",
            norm_global=ng,
            norm_local=nl,
            fusion_weight=lam,
            variant=variant,
        )
        return GradientField(values=fused, source_tag="fused"), diag

    cos = cosine_between(g_global, g_local)
    if cos >= 1.0 - PARALLEL_SNAP:
        cos = 1.0
    elif cos <= -1.0 + PARALLEL_SNAP:
        cos = -1.0
    sin = math.sqrt(max(0.0, 1.0 - cos * cos))
    branch = "consistent" if cos >= 0.0 else "contradictory"

    if variant == "angular":
        fused = gl + lam * sin * gg if cos >= 0.0 else gl - lam * cos * gg
    elif variant == "projection":
        parallel, perpendicular = _split_parallel(gg, gl)
        fused = gl + lam * (perpendicular if cos >= 0.0 else parallel)
    elif variant == "prograd":
        parallel, _ = _split_parallel(gg, gl)
        fused = gl + lam * parallel
    else:  # add
        fused = gl + lam * gg

    diag = FusionDiagnostics(
        cos_angle=cos,
        sin_angle=sin,
        branch=branch,
        norm_global=ng,
        norm_local=nl,
        fusion_weight=lam,
        variant=variant,
    )
    return GradientField(values=fused, source_tag="fused"), diag


def apply_update(state: LatentState, g_final: GradientField, lr: float) -> LatentState:
    """One plain gradient-descent step on the latent; bumps the iteration.

    Mask regularization enters as a penalty already folded into
    ``g_final`` by the caller; the penalty needs the original latent,
    which this step deliberately does not know about.
    """
    if lr < 0:
        raise FusionError(f"learning rate must be >= 0, got {lr}")
    if g_final.values.shape != state.z.shape:
        raise FusionError(
            f"gradient shape {tuple(g_final.values.shape)} does not match "
            f"latent shape {tuple(state.z.shape)}"
        )
    z_new = state.z - lr * g_final.values
    if not torch.isfinite(z_new).all():
        raise FusionError("latent update produced non-finite values; aborting job")
    return state.with_z(z_new, iteration=state.iteration + 1)
