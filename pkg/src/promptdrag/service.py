"""HTTP job service: submit drag edits, poll progress, fetch results.

One process owns one toy backend and a bounded thread pool.  Each job
lives in memory as a JobEnvelope and mirrors itself to a per-job
directory (spec, previews, trajectory, result) so runs are inspectable
without any database.  All read endpoints serve lock-light snapshots and
never block a running optimization loop.

Error responses always carry ``{"error": {"code": ..., "message": ...}}``
with a stable code.
"""

from __future__ import annotations

import base64
import binascii
import io
import json
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from dataclasses import dataclass, field
from pathlib import Path

import torch
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response
from PIL import Image
from pydantic import BaseModel

from .diffusion import make_toy_backend
from .encoders import ToyDualEncoder
from .geometry import DragPair, PixelPoint, euclidean_distance
from .jobfile import (
    JobFileError,
    hyperparams_from_dict,
    image_from_png_bytes,
    png_bytes_from_image,
    save_job,
)
from .pipeline import EditResult, JobError, JobSpec, TrajectoryRecord, run_edit

RUNNING_STATUSES = ("queued", "finetuning", "inverting", "optimizing", "denoising")
TERMINAL_STATUSES = ("done", "failed", "cancelled")
_STATUS_ORDER = {name: i for i, name in enumerate(RUNNING_STATUSES)}


class ServiceError(Exception):
    """Carries a stable error code and the HTTP status to report it with."""

    def __init__(self, http_status: int, code: str, message: str):
        super().__init__(message)
        self.http_status = http_status
        self.code = code
        self.message = message


@dataclass
class JobEnvelope:
    job_id: str
    spec: JobSpec
    status: str = "queued"
    progress: int = 0
    created_at: float = field(default_factory=time.time)
    started_at: float | None = None
    finished_at: float | None = None
    error: str | None = None
    result: EditResult | None = None
    records: list[TrajectoryRecord] = field(default_factory=list)
    previews: dict[int, bytes] = field(default_factory=dict)
    cancel_event: threading.Event = field(default_factory=threading.Event)

    def advance(self, status: str) -> None:
        """Move to ``status``; running statuses only ever move forward."""
        if self.status in TERMINAL_STATUSES:
            return
        if status in TERMINAL_STATUSES:
            self.status = status
            return
        if _STATUS_ORDER[status] >= _STATUS_ORDER[self.status]:
            self.status = status


class JobStore:
    def __init__(self):
        self._lock = threading.Lock()
        self._jobs: dict[str, JobEnvelope] = {}

    @property
    def lock(self) -> threading.Lock:
        return self._lock

    def add(self, env: JobEnvelope) -> None:
        with self._lock:
            self._jobs[env.job_id] = env

    def get(self, job_id: str) -> JobEnvelope:
        with self._lock:
            env = self._jobs.get(job_id)
        if env is None:
            raise ServiceError(404, "not-found", f"unknown job id: {job_id}")
        return env

    def all(self) -> list[JobEnvelope]:
        with self._lock:
            return sorted(self._jobs.values(), key=lambda e: e.created_at)


class SubmitRequest(BaseModel):
    image_png: str
    prompt_original: str
    prompt_edit: str = ""
    pairs: list[list[float]]
    mask_png: str | None = None
    hyperparams: dict = {}


def _decode_b64_png(data: str, what: str) -> bytes:
    try:
        return base64.b64decode(data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ServiceError(400, "invalid-job", f"{what} is not valid base64: {exc}") from exc


def _mask_from_png_bytes(data: bytes) -> torch.Tensor:
    try:
        pil = Image.open(io.BytesIO(data))
        pil.load()
    except Exception as exc:
        raise ServiceError(400, "invalid-job", f"mask is not a decodable PNG: {exc}") from exc
    pil = pil.convert("L")
    arr = torch.frombuffer(bytearray(pil.tobytes()), dtype=torch.uint8)
    return arr.reshape(pil.height, pil.width).to(torch.float64)


def _mask_to_png_bytes(mask: torch.Tensor) -> bytes:
    arr = mask.detach().clamp(0, 255).round().to(torch.uint8).numpy()
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def _spec_from_request(body: SubmitRequest) -> JobSpec:
    image = image_from_png_bytes(_decode_b64_png(body.image_png, "image_png"))
    if image.shape[0] == 1:
        image = image.repeat(3, 1, 1)
    mask = None
    if body.mask_png:
        mask = _mask_from_png_bytes(_decode_b64_png(body.mask_png, "mask_png"))
    pairs = []
    for i, quad in enumerate(body.pairs):
        if len(quad) != 4:
            raise ServiceError(
                400, "invalid-job", f"pair {i} must be [hx, hy, tx, ty], got {quad!r}"
            )
        hx, hy, tx, ty = quad
        pairs.append(DragPair(handle=PixelPoint(hx, hy), target=PixelPoint(tx, ty)))
    # an empty edit prompt falls back to the original description
    prompt_edit = body.prompt_edit if body.prompt_edit.split() else body.prompt_original
    try:
        hp = hyperparams_from_dict(body.hyperparams or {})
        return JobSpec(
            image=image,
            prompt_original=body.prompt_original,
            prompt_edit=prompt_edit,
            pairs=tuple(pairs),
            mask=mask,
            hyperparams=hp,
        )
    except (JobError, JobFileError) as exc:
        raise ServiceError(400, "invalid-job", str(exc)) from exc


def _record_json(record: TrajectoryRecord, spec: JobSpec) -> dict:
    targets = [p.target for p in spec.pairs]
    dists = [
        euclidean_distance(PixelPoint(hx, hy), t)
        for (hx, hy), t in zip(record.handles, targets)
    ]
    return {
        "iteration": record.iteration,
        "handles": [[hx, hy] for hx, hy in record.handles],
        "loss_motion": record.loss_motion,
        "loss_global": record.loss_global,
        "fusion_cos": record.fusion_cos,
        "fusion_branch": record.fusion_branch,
        "mean_target_distance": sum(dists) / len(dists),
        "has_preview": record.preview is not None,
    }


def _envelope_json(env: JobEnvelope) -> dict:
    out = {
        "job_id": env.job_id,
        "status": env.status,
        "progress": env.progress,
        "created_at": env.created_at,
        "started_at": env.started_at,
        "finished_at": env.finished_at,
        "error": env.error,
        "pairs": [
            {
                "handle": [p.handle.x, p.handle.y],
                "target": [p.target.x, p.target.y],
            }
            for p in env.spec.pairs
        ],
        "preview_iterations": sorted(env.previews.keys()),
    }
    if env.result is not None:
        out["iterations_used"] = env.result.iterations_used
        out["converged"] = env.result.converged
    return out


def _result_json(env: JobEnvelope) -> dict:
    result = env.result
    out = {
        "job_id": env.job_id,
        "status": env.status,
        "error": env.error,
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
        out["image_png"] = base64.b64encode(
            png_bytes_from_image(result.edited_image)
        ).decode()
        out["fingerprint"] = result.fingerprint()
    return out


def _persist_submission(job_dir: Path, env: JobEnvelope) -> None:
    job_dir.mkdir(parents=True, exist_ok=True)
    save_job(job_dir / "job.yaml", env.spec)


def _persist_completion(job_dir: Path, env: JobEnvelope) -> None:
    (job_dir / "status.json").write_text(
        json.dumps(
            {
                "job_id": env.job_id,
                "status": env.status,
                "progress": env.progress,
                "error": env.error,
                "iterations_used": env.result.iterations_used if env.result else 0,
                "converged": bool(env.result.converged) if env.result else False,
            },
            indent=2,
        )
    )
    with (job_dir / "trajectory.jsonl").open("w") as fh:
        for record in env.records:
            fh.write(json.dumps(_record_json(record, env.spec)) + "\n")
    if env.result is not None and env.result.edited_image is not None:
        (job_dir / "result.png").write_bytes(
            png_bytes_from_image(env.result.edited_image)
        )


def create_app(
    workers: int = 2,
    data_dir=None,
    backend_seed: int = 3,
    encoder_seed: int = 5,
    num_steps: int = 50,
) -> FastAPI:
    """Build the service with its own backend, encoder, and worker pool."""
    model, schedule = make_toy_backend(seed=backend_seed, num_steps=num_steps)
    encoder = ToyDualEncoder(seed=encoder_seed)
    store = JobStore()
    pool = ThreadPoolExecutor(max_workers=max(1, workers))
    root = Path(data_dir) if data_dir is not None else Path("promptdrag_jobs")

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        pool.shutdown(wait=False, cancel_futures=True)

    app = FastAPI(title="promptdrag service", lifespan=lifespan)
    # the browser client is served separately; open CORS keeps it usable
    # from any origin (the service is desk-scale and unauthenticated anyway)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.store = store

    @app.exception_handler(ServiceError)
    async def service_error_handler(request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.http_status,
            content={"error": {"code": exc.code, "message": exc.message}},
        )

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(
            status_code=400,
            content={"error": {"code": "bad-request", "message": str(exc.errors())}},
        )

    def execute(job_id: str) -> None:
        env = store.get(job_id)
        job_dir = root / job_id
        with store.lock:
            if env.cancel_event.is_set():
                env.advance("cancelled")
                return
            env.started_at = time.time()

        def progress(phase, step, total):
            with store.lock:
                env.advance(phase)
                env.progress = max(env.progress, step)

        def on_record(record):
            with store.lock:
                env.records.append(record)
            if record.preview is not None:
                png = png_bytes_from_image(record.preview)
                with store.lock:
                    env.previews[record.iteration] = png
                previews_dir = job_dir / "previews"
                previews_dir.mkdir(exist_ok=True)
                (previews_dir / f"{record.iteration}.png").write_bytes(png)

        result = run_edit(
            env.spec,
            model,
            schedule,
            encoder,
            progress=progress,
            should_cancel=env.cancel_event.is_set,
            on_record=on_record,
        )
        with store.lock:
            env.result = result
            env.error = result.error
            env.finished_at = time.time()
            env.advance(result.status)
        _persist_completion(job_dir, env)

    @app.post("/jobs")
    def submit_job(body: SubmitRequest):
        spec = _spec_from_request(body)
        env = JobEnvelope(job_id=uuid.uuid4().hex, spec=spec)
        store.add(env)
        _persist_submission(root / env.job_id, env)
        pool.submit(execute, env.job_id)
        return {"job_id": env.job_id, "status": env.status}

    @app.get("/jobs")
    def list_jobs():
        return {"jobs": [_envelope_json(env) for env in store.all()]}

    @app.get("/jobs/{job_id}")
    def job_status(job_id: str):
        env = store.get(job_id)
        with store.lock:
            return _envelope_json(env)

    @app.get("/jobs/{job_id}/trajectory")
    def job_trajectory(job_id: str, offset: int = 0, limit: int = 100):
        env = store.get(job_id)
        if offset < 0 or limit < 1:
            raise ServiceError(400, "bad-request", "offset must be >= 0 and limit >= 1")
        with store.lock:
            records = list(env.records)
        page = records[offset : offset + limit]
        return {
            "total": len(records),
            "offset": offset,
            "records": [_record_json(r, env.spec) for r in page],
        }

    @app.get("/jobs/{job_id}/preview/{iteration}")
    def job_preview(job_id: str, iteration: int):
        env = store.get(job_id)
        with store.lock:
            png = env.previews.get(iteration)
        if png is None:
            raise ServiceError(
                404, "no-preview", f"no preview stored for iteration {iteration}"
            )
        return Response(content=png, media_type="image/png")

    @app.get("/jobs/{job_id}/result")
    def job_result(job_id: str):
        env = store.get(job_id)
        with store.lock:
            if env.status not in TERMINAL_STATUSES or env.result is None:
                raise ServiceError(
                    409, "not-finished", f"job {job_id} is still {env.status}"
                )
            return _result_json(env)

    @app.get("/jobs/{job_id}/result/image")
    def job_result_image(job_id: str):
        env = store.get(job_id)
        with store.lock:
            if env.status not in TERMINAL_STATUSES:
                raise ServiceError(
                    409, "not-finished", f"job {job_id} is still {env.status}"
                )
            if env.result is None or env.result.edited_image is None:
                raise ServiceError(404, "no-image", "job finished without an image")
            png = png_bytes_from_image(env.result.edited_image)
        return Response(content=png, media_type="image/png")

    @app.get("/jobs/{job_id}/mask")
    def job_mask(job_id: str):
        env = store.get(job_id)
        if env.spec.mask is None:
            raise ServiceError(404, "no-mask", "job was submitted without a mask")
        return Response(content=_mask_to_png_bytes(env.spec.mask), media_type="image/png")

    @app.post("/jobs/{job_id}/cancel")
    def cancel_job(job_id: str):
        env = store.get(job_id)
        env.cancel_event.set()
        with store.lock:
            if env.status == "queued":
                env.advance("cancelled")
                env.finished_at = time.time()
            return {"job_id": env.job_id, "status": env.status}

    return app
