"""Job file round-trips: YAML description plus PNG image and mask assets."""

import pytest
import torch
import yaml

from promptdrag.evaluation import synthetic_blob_job
from promptdrag.jobfile import (
    JobFileError,
    image_from_png_bytes,
    load_image,
    load_job,
    load_jobs_dir,
    load_mask,
    png_bytes_from_image,
    save_image,
    save_job,
    save_mask,
)
from promptdrag.lora import LoRAConfig
from promptdrag.pipeline import Hyperparams


def quantized(image):
    return (image.clamp(0, 1) * 255.0).round() / 255.0


# -------------------------------------------------------------- images


def test_png_roundtrip_color(tmp_path):
    g = torch.Generator().manual_seed(0)
    img = torch.rand((3, 9, 7), generator=g, dtype=torch.float64)
    p = tmp_path / "img.png"
    save_image(p, img)
    back = load_image(p)
    assert back.shape == (3, 9, 7)
    assert torch.equal(back, quantized(img))


def test_png_roundtrip_grayscale_bytes():
    g = torch.Generator().manual_seed(1)
    img = torch.rand((1, 5, 6), generator=g, dtype=torch.float64)
    back = image_from_png_bytes(png_bytes_from_image(img))
    assert back.shape == (1, 5, 6)
    assert torch.equal(back, quantized(img))


def test_png_rejects_bad_shapes_and_bytes():
    with pytest.raises(JobFileError):
        png_bytes_from_image(torch.zeros((2, 4, 4), dtype=torch.float64))
    with pytest.raises(JobFileError):
        image_from_png_bytes(b"not a png")


def test_mask_roundtrip_is_pixel_exact(tmp_path):
    g = torch.Generator().manual_seed(2)
    mask = torch.randint(0, 256, (11, 8), generator=g).to(torch.float64)
    p = tmp_path / "mask.png"
    save_mask(p, mask)
    back = load_mask(p)
    assert torch.equal(back, mask)


def test_mask_rejects_wrong_rank(tmp_path):
    with pytest.raises(JobFileError):
        save_mask(tmp_path / "m.png", torch.zeros((1, 4, 4), dtype=torch.float64))


def test_load_image_missing_file(tmp_path):
    with pytest.raises(JobFileError):
        load_image(tmp_path / "nope.png")


# ------------------------------------------------------------ job files


def test_job_roundtrip_preserves_everything(tmp_path):
    job = synthetic_blob_job(seed=4, latent_lr=0.07, motion_steps=2)
    mask = torch.zeros((16, 16), dtype=torch.float64)
    mask[4:12, 4:12] = 255.0
    job = type(job)(
        image=job.image,
        prompt_original=job.prompt_original,
        prompt_edit=job.prompt_edit,
        pairs=job.pairs,
        mask=mask,
        hyperparams=job.hyperparams,
    )
    path = tmp_path / "drag.yaml"
    save_job(path, job)
    back = load_job(path)
    assert back.prompt_original == job.prompt_original
    assert back.prompt_edit == job.prompt_edit
    assert back.hyperparams == job.hyperparams
    assert torch.equal(back.mask, job.mask)
    assert torch.equal(back.image, quantized(job.image))
    assert [
        (p.handle.x, p.handle.y, p.target.x, p.target.y) for p in back.pairs
    ] == [(p.handle.x, p.handle.y, p.target.x, p.target.y) for p in job.pairs]


def test_job_defaults_when_hyperparams_omitted(tmp_path):
    job = synthetic_blob_job(seed=0)
    path = tmp_path / "j.yaml"
    save_job(path, job)
    doc = yaml.safe_load(path.read_text())
    del doc["hyperparams"]
    path.write_text(yaml.safe_dump(doc))
    back = load_job(path)
    assert back.hyperparams == Hyperparams()
    assert back.hyperparams.lora == LoRAConfig()


def test_job_rejects_unknown_keys(tmp_path):
    job = synthetic_blob_job(seed=0)
    path = tmp_path / "j.yaml"
    save_job(path, job)
    doc = yaml.safe_load(path.read_text())
    doc["hyperparams"]["warp_speed"] = 9
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(JobFileError, match="warp_speed"):
        load_job(path)
    doc = yaml.safe_load((tmp_path / "j.yaml").read_text())
    doc["hyperparams"] = {"lora": {"dropout": 0.5}}
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(JobFileError, match="dropout"):
        load_job(path)


def test_job_rejects_missing_and_malformed_fields(tmp_path):
    job = synthetic_blob_job(seed=0)
    path = tmp_path / "j.yaml"
    save_job(path, job)
    doc = yaml.safe_load(path.read_text())
    del doc["pairs"]
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(JobFileError, match="pairs"):
        load_job(path)

    save_job(path, job)
    doc = yaml.safe_load(path.read_text())
    doc["pairs"] = [[1, 2, 3]]
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(JobFileError):
        load_job(path)

    doc["pairs"] = [[1, 2, "x", 4]]
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(JobFileError):
        load_job(path)

    path.write_text("- just\n- a list\n")
    with pytest.raises(JobFileError, match="mapping"):
        load_job(path)


def test_job_out_of_bounds_pair_surfaces_as_jobfile_error(tmp_path):
    job = synthetic_blob_job(seed=0)
    path = tmp_path / "j.yaml"
    save_job(path, job)
    doc = yaml.safe_load(path.read_text())
    doc["pairs"] = [[5, 8, 500, 8]]
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(JobFileError, match="invalid job"):
        load_job(path)


def test_grayscale_job_image_expands_to_three_channels(tmp_path):
    job = synthetic_blob_job(seed=0)
    path = tmp_path / "j.yaml"
    save_job(path, job)
    gray = job.image.mean(dim=0, keepdim=True)
    save_image(tmp_path / "j.png", gray)
    back = load_job(path)
    assert back.image.shape == (3, 16, 16)
    assert torch.equal(back.image[0], back.image[1])


def test_load_jobs_dir_sorted_and_validated(tmp_path):
    save_job(tmp_path / "b.yaml", synthetic_blob_job(seed=1))
    save_job(tmp_path / "a.yaml", synthetic_blob_job(seed=0))
    (tmp_path / "notes.txt").write_text("ignored")
    jobs = load_jobs_dir(tmp_path)
    assert [name for name, _ in jobs] == ["a", "b"]
    with pytest.raises(JobFileError):
        load_jobs_dir(tmp_path / "missing")
