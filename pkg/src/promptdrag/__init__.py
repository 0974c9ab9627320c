"""Drag-based image editing on diffusion latents with text-prompt guidance.

The pipeline takes an image, a pair of prompts, and a set of handle/target
point pairs, then nudges the inverted latent until the content under each
handle arrives at its target while a prompt-alignment gradient keeps the
edit on message.  Everything runs on small deterministic stand-in models,
so results are exactly reproducible and fast enough for tests.

Typical entry points:

- :func:`run_edit` executes one :class:`JobSpec` and returns an
  :class:`EditResult` with the edited image and full trajectory.
- :func:`create_app` wraps the pipeline in an HTTP job service.
- :func:`run_benchmark` sweeps iteration budgets over a suite of jobs.
- ``python -m promptdrag.cli`` exposes edit/serve/eval/finetune commands.
"""

from .diffusion import (
    BackendError,
    DenoiserInterface,
    LatentState,
    NoiseSchedule,
    cosine_schedule,
    ddim_denoise,
    invert_to_strength,
    load_backend,
    make_toy_backend,
    save_backend,
)
from .encoders import DualEncoderInterface, EncoderError, ToyDualEncoder, load_encoder, save_encoder
from .evaluation import (
    BenchmarkReport,
    BenchmarkRow,
    EvaluationError,
    PatchCosineMetric,
    PerceptualMetricInterface,
    blob_image,
    demo_suite,
    image_fidelity,
    mean_distance,
    retrack_unrestricted,
    run_benchmark,
    synthetic_blob_job,
)
from .fusion import FusionDiagnostics, FusionError, apply_update, fuse_gradients
from .geometry import DegeneratePairError, DragPair, FeatureMap, PixelPoint
from .guidance import GradientField, GuidanceError, global_gradient, local_gradient
from .jobfile import JobFileError, load_image, load_job, load_jobs_dir, save_image, save_job
from .lora import AdapterError, LoRAConfig, finetune_identity, load_adapters, save_adapters
from .pipeline import (
    EditResult,
    Hyperparams,
    JobError,
    JobSpec,
    TrajectoryRecord,
    run_edit,
)
from .service import ServiceError, create_app
from .tracking import TrackingError, TrackingStep, update_handles

__version__ = "0.1.0"

__all__ = [
    "AdapterError",
    "BackendError",
    "BenchmarkReport",
    "BenchmarkRow",
    "DegeneratePairError",
    "DenoiserInterface",
    "DragPair",
    "DualEncoderInterface",
    "EditResult",
    "EncoderError",
    "EvaluationError",
    "FeatureMap",
    "FusionDiagnostics",
    "FusionError",
    "GradientField",
    "GuidanceError",
    "Hyperparams",
    "JobError",
    "JobFileError",
    "JobSpec",
    "LatentState",
    "LoRAConfig",
    "NoiseSchedule",
    "PatchCosineMetric",
    "PerceptualMetricInterface",
    "PixelPoint",
    "ServiceError",
    "ToyDualEncoder",
    "TrackingError",
    "TrackingStep",
    "TrajectoryRecord",
    "apply_update",
    "blob_image",
    "cosine_schedule",
    "create_app",
    "ddim_denoise",
    "demo_suite",
    "finetune_identity",
    "fuse_gradients",
    "global_gradient",
    "image_fidelity",
    "invert_to_strength",
    "load_adapters",
    "load_backend",
    "load_encoder",
    "load_image",
    "load_job",
    "load_jobs_dir",
    "local_gradient",
    "make_toy_backend",
    "mean_distance",
    "retrack_unrestricted",
    "run_benchmark",
    "run_edit",
    "save_adapters",
    "save_backend",
    "save_encoder",
    "save_image",
    "save_job",
    "synthetic_blob_job",
    "update_handles",
]
