"""Job files on disk: YAML job descriptions plus PNG images and masks.

A job file names its image (and optional mask) by path relative to the
YAML file itself, lists drag pairs as [hx, hy, tx, ty] quadruples, and
may override any hyperparameter; omitted ones keep their defaults.
Masks are single-channel PNGs where values above 127 mark editable
pixels.
"""

from __future__ import annotations

import io
from dataclasses import asdict
from pathlib import Path

import torch
import yaml
from PIL import Image

from .geometry import DragPair, PixelPoint
from .lora import LoRAConfig
from .pipeline import Hyperparams, JobSpec


class JobFileError(RuntimeError):
    """Raised when a job file or image asset cannot be parsed."""


# ------------------------------------------------------------ PNG I/O


def png_bytes_from_image(image: torch.Tensor) -> bytes:
    """Float [0,1] (C,H,W) tensor -> PNG bytes; 1 or 3 channels."""
    if image.dim() != 3 or image.shape[0] not in (1, 3):
        raise JobFileError(f"expected (1|3, H, W) image, got {tuple(image.shape)}")
    arr = (image.detach().clamp(0.0, 1.0) * 255.0).round().to(torch.uint8).numpy()
    if arr.shape[0] == 1:
        pil = Image.fromarray(arr[0], mode="L")
    else:
        pil = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def image_from_png_bytes(data: bytes) -> torch.Tensor:
    """PNG bytes -> float64 [0,1] tensor, (3,H,W) for color, (1,H,W) for gray."""
    try:
        pil = Image.open(io.BytesIO(data))
        pil.load()
    except Exception as exc:
        raise JobFileError(f"cannot decode PNG: {exc}") from exc
    if pil.mode == "L":
        arr = torch.frombuffer(bytearray(pil.tobytes()), dtype=torch.uint8)
        arr = arr.reshape(1, pil.height, pil.width)
    else:
        pil = pil.convert("RGB")
        arr = torch.frombuffer(bytearray(pil.tobytes()), dtype=torch.uint8)
        arr = arr.reshape(pil.height, pil.width, 3).permute(2, 0, 1)
    return arr.to(torch.float64) / 255.0


def save_image(path, image: torch.Tensor) -> None:
    Path(path).write_bytes(png_bytes_from_image(image))


def load_image(path) -> torch.Tensor:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise JobFileError(f"cannot read image {path}: {exc}") from exc
    return image_from_png_bytes(data)


def save_mask(path, mask: torch.Tensor) -> None:
    """(H, W) tensor of 0..255 values -> single-channel PNG."""
    if mask.dim() != 2:
        raise JobFileError(f"mask must be (H, W), got {tuple(mask.shape)}")
    arr = mask.detach().clamp(0, 255).round().to(torch.uint8).numpy()
    Image.fromarray(arr, mode="L").save(Path(path), format="PNG")


def load_mask(path) -> torch.Tensor:
    """Single-channel PNG -> (H, W) float64 tensor of 0..255 values."""
    try:
        pil = Image.open(Path(path))
        pil.load()
    except Exception as exc:
        raise JobFileError(f"cannot read mask {path}: {exc}") from exc
    pil = pil.convert("L")
    arr = torch.frombuffer(bytearray(pil.tobytes()), dtype=torch.uint8)
    return arr.reshape(pil.height, pil.width).to(torch.float64)


# ----------------------------------------------------------- job files


def _hyperparams_to_dict(hp: Hyperparams) -> dict:
    data = asdict(hp)
    data["lora"] = asdict(hp.lora)
    return data


def hyperparams_from_dict(data: dict) -> Hyperparams:
    known = set(Hyperparams.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise JobFileError(f"unknown hyperparameter keys: {sorted(unknown)}")
    kwargs = dict(data)
    if "lora" in kwargs:
        lora = kwargs["lora"]
        if not isinstance(lora, dict):
            raise JobFileError("lora must be a mapping of adapter settings")
        lora_known = set(LoRAConfig.__dataclass_fields__)
        lora_unknown = set(lora) - lora_known
        if lora_unknown:
            raise JobFileError(f"unknown lora keys: {sorted(lora_unknown)}")
        kwargs["lora"] = LoRAConfig(**lora)
    try:
        return Hyperparams(**kwargs)
    except (TypeError, ValueError) as exc:
        raise JobFileError(f"bad hyperparameters: {exc}") from exc


def _pairs_from_lists(raw) -> tuple[DragPair, ...]:
    if not isinstance(raw, list) or not raw:
        raise JobFileError("pairs must be a non-empty list of [hx, hy, tx, ty]")
    pairs = []
    for i, quad in enumerate(raw):
        if not isinstance(quad, list) or len(quad) != 4:
            raise JobFileError(f"pair {i} must be [hx, hy, tx, ty], got {quad!r}")
        try:
            hx, hy, tx, ty = (float(v) for v in quad)
        except (TypeError, ValueError) as exc:
            raise JobFileError(f"pair {i} holds a non-number: {quad!r}") from exc
        pairs.append(DragPair(handle=PixelPoint(hx, hy), target=PixelPoint(tx, ty)))
    return tuple(pairs)


def save_job(path, job: JobSpec, image_name: str | None = None, mask_name: str | None = None) -> None:
    """Write the YAML job file plus its PNG assets next to it."""
    path = Path(path)
    image_name = image_name or f"{path.stem}.png"
    save_image(path.parent / image_name, job.image)
    doc = {
        "image": image_name,
        "prompt_original": job.prompt_original,
        "prompt_edit": job.prompt_edit,
        "pairs": [
            [pair.handle.x, pair.handle.y, pair.target.x, pair.target.y]
            for pair in job.pairs
        ],
        "hyperparams": _hyperparams_to_dict(job.hyperparams),
    }
    if job.mask is not None:
        mask_name = mask_name or f"{path.stem}_mask.png"
        save_mask(path.parent / mask_name, job.mask)
        doc["mask"] = mask_name
    path.write_text(yaml.safe_dump(doc, sort_keys=False))


def load_job(path) -> JobSpec:
    """Read one YAML job file; asset paths resolve against its directory."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise JobFileError(f"cannot parse job file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise JobFileError(f"job file {path} is not a mapping")
    missing = {"image", "prompt_original", "pairs"} - set(doc)
    if missing:
        raise JobFileError(f"job file {path} is missing keys: {sorted(missing)}")

    image_tensor = load_image(path.parent / doc["image"])
    if image_tensor.shape[0] == 1:
        image_tensor = image_tensor.repeat(3, 1, 1)
    mask = None
    if doc.get("mask"):
        mask = load_mask(path.parent / doc["mask"])
    hp = hyperparams_from_dict(doc.get("hyperparams") or {})
    try:
        return JobSpec(
            image=image_tensor,
            prompt_original=str(doc["prompt_original"]),
            prompt_edit=str(doc.get("prompt_edit") or ""),
            pairs=_pairs_from_lists(doc["pairs"]),
            mask=mask,
            hyperparams=hp,
        )
    except Exception as exc:
        raise JobFileError(f"invalid job in {path}: {exc}") from exc


def load_jobs_dir(directory) -> list[tuple[str, JobSpec]]:
    """All *.yaml / *.yml job files in a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise JobFileError(f"not a directory: {directory}")
    out = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() in (".yaml", ".yml"):
            out.append((path.stem, load_job(path)))
    return out
