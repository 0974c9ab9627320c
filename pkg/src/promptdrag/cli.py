"""Command-line entry points: edit, serve, eval, finetune.

Exit codes: 0 success, 1 runtime failure, 2 unusable input, 130 when an
edit run was interrupted (the partial bundle is still written).
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
import threading
from dataclasses import replace
from pathlib import Path

from .diffusion import make_toy_backend
from .encoders import ToyDualEncoder
from .evaluation import (
    EvaluationError,
    PatchCosineMetric,
    image_fidelity,
    mean_distance,
    run_benchmark,
)
from .jobfile import (
    JobFileError,
    load_image,
    load_job,
    png_bytes_from_image,
    save_image,
)
from .lora import finetune_identity, save_adapters, LoRAConfig
from .pipeline import run_edit
from .service import create_app

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_INPUT = 2
EXIT_INTERRUPTED = 130

DEFAULT_BACKEND_SEED = 3
DEFAULT_ENCODER_SEED = 5


def _toy_stack(num_steps: int = 50):
    model, schedule = make_toy_backend(seed=DEFAULT_BACKEND_SEED, num_steps=num_steps)
    encoder = ToyDualEncoder(seed=DEFAULT_ENCODER_SEED)
    return model, schedule, encoder


def _write_bundle(out_dir: Path, job, result) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {
        "status": result.status,
        "error": result.error,
        "iterations_used": result.iterations_used,
        "converged": result.converged,
        "final_pairs": [
            {
                "handle": [p.handle.x, p.handle.y],
                "target": [p.target.x, p.target.y],
                "active": p.active,
            }
            for p in result.final_pairs
        ],
    }
    if result.edited_image is not None:
        save_image(out_dir / "edited.png", result.edited_image)
        summary["fingerprint"] = result.fingerprint()
    if result.metrics:
        summary["metrics"] = result.metrics
    (out_dir / "result.json").write_text(json.dumps(summary, indent=2))
    with (out_dir / "trajectory.jsonl").open("w") as fh:
        for rec in result.trajectory:
            fh.write(
                json.dumps(
                    {
                        "iteration": rec.iteration,
                        "handles": [[hx, hy] for hx, hy in rec.handles],
                        "loss_motion": rec.loss_motion,
                        "loss_global": rec.loss_global,
                        "fusion_cos": rec.fusion_cos,
                        "fusion_branch": rec.fusion_branch,
                    }
                )
                + "\n"
            )
    previews = [r for r in result.trajectory if r.preview is not None]
    if previews:
        pdir = out_dir / "previews"
        pdir.mkdir(exist_ok=True)
        for rec in previews:
            (pdir / f"{rec.iteration}.png").write_bytes(
                png_bytes_from_image(rec.preview)
            )


def cli_edit(args) -> int:
    try:
        job = load_job(args.config)
    except JobFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    if args.seed is not None:
        job = replace(job, hyperparams=replace(job.hyperparams, seed=args.seed))

    cancel = threading.Event()
    previous = signal.signal(signal.SIGINT, lambda signum, frame: cancel.set())
    try:
        model, schedule, encoder = _toy_stack()
        result = run_edit(
            job, model, schedule, encoder, should_cancel=cancel.is_set
        )
    finally:
        signal.signal(signal.SIGINT, previous)

    if result.status == "done":
        metric = PatchCosineMetric(encoder)
        result.metrics = {
            "mean_distance": mean_distance(result),
            "image_fidelity": image_fidelity(job.image, result.edited_image, metric),
        }
    _write_bundle(Path(args.out), job, result)

    if result.status == "done":
        print(
            f"done: {result.iterations_used} iterations, converged={result.converged}, "
            f"MD={result.metrics['mean_distance']:.3f}, "
            f"IF={result.metrics['image_fidelity']:.3f}"
        )
        return EXIT_OK
    if result.status == "cancelled":
        print("cancelled: partial bundle written", file=sys.stderr)
        return EXIT_INTERRUPTED
    print(f"failed: {result.error}", file=sys.stderr)
    return EXIT_FAILURE


def cli_serve(args) -> int:
    import uvicorn

    app = create_app(workers=args.workers, data_dir=args.data_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def cli_eval(args) -> int:
    try:
        sweep = [int(v) for v in str(args.sweep).split(",") if v.strip()]
    except ValueError:
        print(f"error: bad sweep list: {args.sweep!r}", file=sys.stderr)
        return EXIT_BAD_INPUT
    model, schedule, encoder = _toy_stack()
    try:
        report = run_benchmark(args.jobs, sweep, model, schedule, encoder)
    except (EvaluationError, JobFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = report.to_table()
    (out_dir / "report.txt").write_text(table + "\n")
    report.save_svg(out_dir / "report.svg")
    print(table)
    return EXIT_OK


def cli_finetune(args) -> int:
    try:
        image = load_image(args.image)
    except JobFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    if image.shape[0] == 1:
        image = image.repeat(3, 1, 1)
    if not args.prompt.split():
        print("error: prompt must be non-empty", file=sys.stderr)
        return EXIT_BAD_INPUT
    model, schedule, _ = _toy_stack()
    cfg = LoRAConfig(steps=args.steps) if args.steps is not None else LoRAConfig()
    outcome = finetune_identity(model, image, args.prompt, cfg, schedule, seed=args.seed)
    save_adapters(args.out, outcome.model)
    print(
        f"finetuned {cfg.steps} steps: first loss {outcome.losses[0]:.6f}, "
        f"last loss {outcome.losses[-1]:.6f}, adapters -> {args.out}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptdrag",
        description="Drag-based latent image editing with text-prompt guidance",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    edit = sub.add_parser("edit", help="run one edit job from a YAML config")
    edit.add_argument("--config", required=True, help="job file path")
    edit.add_argument("--out", required=True, help="output bundle directory")
    edit.add_argument("--seed", type=int, default=None, help="override the job seed")
    edit.set_defaults(func=cli_edit)

    serve = sub.add_parser("serve", help="start the HTTP job service")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--workers", type=int, default=2)
    serve.add_argument("--data-dir", default=None, help="job persistence directory")
    serve.set_defaults(func=cli_serve)

    ev = sub.add_parser("eval", help="benchmark a directory of jobs over iteration caps")
    ev.add_argument("--jobs", required=True, help="directory of YAML job files")
    ev.add_argument("--sweep", default="10,20,40,80,160", help="comma-separated caps")
    ev.add_argument("--out", default=".", help="report output directory")
    ev.set_defaults(func=cli_eval)

    ft = sub.add_parser("finetune", help="fit identity adapters for one image")
    ft.add_argument("--image", required=True, help="source image PNG")
    ft.add_argument("--prompt", required=True, help="image description")
    ft.add_argument("--out", required=True, help="adapter checkpoint path")
    ft.add_argument("--steps", type=int, default=None, help="override adapter steps")
    ft.add_argument("--seed", type=int, default=0)
    ft.set_defaults(func=cli_finetune)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
