import math

import pytest
import torch

from promptdrag.diffusion import (
    BackendError,
    LatentState,
    NoiseSchedule,
    cosine_schedule,
    ddim_denoise,
    ddim_denoise_step,
    ddim_invert_step,
    invert_to_strength,
    load_backend,
    make_toy_backend,
    save_backend,
    steps_for_strength,
)


class _ZeroModel:
    def predict_noise(self, z, t, conditioning):
        return torch.zeros_like(z)


def _flat_schedule(value=0.8, num_steps=4):
    a = torch.full((num_steps + 1,), value, dtype=torch.float64)
    s = torch.sqrt(1.0 - a**2)
    return NoiseSchedule(alphas=a, sigmas=s, num_steps=num_steps)


def test_schedule_invariants_hold_for_cosine():
    sched = cosine_schedule(50)
    assert sched.alphas.shape == (51,)
    assert torch.all(sched.alphas > 0) and torch.all(sched.alphas <= 1)
    assert torch.all(sched.sigmas > 0) and torch.all(sched.sigmas <= 1)
    assert torch.all(sched.alphas[1:] < sched.alphas[:-1])
    assert torch.all((sched.alphas**2 + sched.sigmas**2 - 1).abs() < 1e-6)


def test_schedule_rejects_increasing_alphas():
    a = torch.tensor([0.5, 0.9], dtype=torch.float64)
    s = torch.sqrt(1 - a**2)
    with pytest.raises(BackendError):
        NoiseSchedule(alphas=a, sigmas=s, num_steps=1)


def test_invert_step_flat_schedule_is_identity():
    sched = _flat_schedule()
    gen = torch.Generator().manual_seed(0)
    z = torch.randn(2, 5, 5, dtype=torch.float64, generator=gen)
    state = LatentState(z=z, timestep_index=1)
    eps = torch.randn(2, 5, 5, dtype=torch.float64, generator=gen)
    out = ddim_invert_step(state, model=None, schedule=sched, eps=eps)
    assert torch.allclose(out.z, z, atol=1e-12)
    assert out.timestep_index == 2


def test_invert_step_zero_noise_rescales():
    sched = cosine_schedule(10)
    z = torch.ones(1, 4, 4, dtype=torch.float64)
    state = LatentState(z=z, timestep_index=3)
    out = ddim_invert_step(state, _ZeroModel(), sched)
    expected = (sched.alphas[4] / sched.alphas[3]) * z
    assert torch.allclose(out.z, expected, atol=1e-12)


def test_denoise_step_zero_noise_rescales():
    sched = cosine_schedule(10)
    z = torch.ones(1, 4, 4, dtype=torch.float64)
    state = LatentState(z=z, timestep_index=3)
    out = ddim_denoise_step(state, _ZeroModel(), sched)
    expected = (sched.alphas[2] / sched.alphas[3]) * z
    assert torch.allclose(out.z, expected, atol=1e-12)


def test_frozen_eps_single_step_roundtrip_exact():
    sched = cosine_schedule(20)
    gen = torch.Generator().manual_seed(7)
    z = torch.randn(3, 6, 6, dtype=torch.float64, generator=gen)
    eps = torch.randn(3, 6, 6, dtype=torch.float64, generator=gen)
    state = LatentState(z=z, timestep_index=5)
    up = ddim_invert_step(state, None, sched, eps=eps)
    back = ddim_denoise_step(up, None, sched, eps=eps)
    assert back.timestep_index == 5
    assert torch.allclose(back.z, z, atol=1e-6)


def test_two_pass_roundtrip_reconstructs_toy_latent():
    model, sched = make_toy_backend(seed=3, dims=(16, 16), channels=2)
    gen = torch.Generator().manual_seed(11)
    z0 = torch.randn(2, 16, 16, dtype=torch.float64, generator=gen) * 0.5
    state = invert_to_strength(z0, 1.0, model, sched)
    assert state.timestep_index == sched.num_steps
    recon = ddim_denoise(state, model, sched)
    rel = (recon - z0).norm() / z0.norm()
    assert rel < 5e-2


def test_strength_step_counts():
    assert steps_for_strength(0.7, 50) == 35
    assert steps_for_strength(1.0, 50) == 50
    assert steps_for_strength(0.7, 10) == 7
    model, sched = make_toy_backend(seed=1, dims=(8, 8), channels=1, num_steps=50)
    z0 = torch.zeros(1, 8, 8, dtype=torch.float64)
    state = invert_to_strength(z0, 0.7, model, sched)
    assert state.timestep_index == 35


def test_invert_to_strength_tiny_strength_is_near_identity():
    model, sched = make_toy_backend(seed=5, dims=(8, 8), channels=1, num_steps=50)
    gen = torch.Generator().manual_seed(2)
    z0 = torch.randn(1, 8, 8, dtype=torch.float64, generator=gen)
    state = invert_to_strength(z0, 0.02, model, sched)
    assert state.timestep_index == 1
    assert (state.z - z0).norm() / z0.norm() < 0.15


def test_toy_backend_deterministic_construction():
    m1, _ = make_toy_backend(seed=42, dims=(12, 12), channels=2)
    m2, _ = make_toy_backend(seed=42, dims=(12, 12), channels=2)
    gen = torch.Generator().manual_seed(0)
    z = torch.randn(2, 12, 12, dtype=torch.float64, generator=gen)
    e1 = m1.predict_noise(z, 3, None)
    e2 = m2.predict_noise(z, 3, None)
    assert torch.equal(e1, e2)
    m3, _ = make_toy_backend(seed=43, dims=(12, 12), channels=2)
    assert not torch.equal(e1, m3.predict_noise(z, 3, None))


def test_toy_feature_map_shape_contract():
    model, _ = make_toy_backend(seed=0, dims=(16, 16), channels=3)
    z = torch.zeros(3, 16, 16, dtype=torch.float64)
    fm = model.extract_features(z, 4, None)
    assert (fm.channels, fm.height, fm.width) == (model.feature_channels, 16, 16)
    assert torch.isfinite(fm.values).all()


def test_feature_gradient_matches_finite_differences():
    model, _ = make_toy_backend(seed=9, dims=(10, 10), channels=1, hidden=8)
    gen = torch.Generator().manual_seed(4)
    z = torch.randn(1, 10, 10, dtype=torch.float64, generator=gen)
    weights = torch.randn(model.feature_channels, 10, 10, dtype=torch.float64, generator=gen)

    def functional(latent):
        return (model.extract_features(latent, 3, None).values * weights).sum()

    z_req = z.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(functional(z_req), z_req)
    eps = 1e-6
    for iy, ix in [(2, 3), (5, 5), (7, 1), (0, 9)]:
        zp, zm = z.clone(), z.clone()
        zp[0, iy, ix] += eps
        zm[0, iy, ix] -= eps
        fd = (functional(zp) - functional(zm)) / (2 * eps)
        rel = abs(fd.item() - analytic[0, iy, ix].item()) / max(abs(fd.item()), 1e-9)
        assert rel < 1e-3


def test_conditioning_changes_prediction_deterministically():
    model, _ = make_toy_backend(seed=2, dims=(8, 8), channels=1)
    z = torch.ones(1, 8, 8, dtype=torch.float64)
    c = model.embed_prompt("a red square")
    assert c.shape == (model.cond_dim,)
    assert torch.equal(c, model.embed_prompt("a red square"))
    uncond = model.predict_noise(z, 2, None)
    cond = model.predict_noise(z, 2, c)
    assert not torch.equal(uncond, cond)
    assert torch.equal(model.embed_prompt(""), torch.zeros(model.cond_dim, dtype=torch.float64))


def test_backend_checkpoint_roundtrip(tmp_path):
    model, sched = make_toy_backend(seed=17, dims=(8, 8), channels=2)
    path = tmp_path / "backend.pt"
    save_backend(path, model, sched)
    loaded, sched2 = load_backend(path)
    gen = torch.Generator().manual_seed(1)
    z = torch.randn(2, 8, 8, dtype=torch.float64, generator=gen)
    assert torch.equal(model.predict_noise(z, 5, None), loaded.predict_noise(z, 5, None))
    assert torch.equal(sched.alphas, sched2.alphas)


def test_invert_past_schedule_end_fails():
    sched = cosine_schedule(3)
    state = LatentState(z=torch.zeros(1, 4, 4, dtype=torch.float64), timestep_index=3)
    with pytest.raises(BackendError):
        ddim_invert_step(state, _ZeroModel(), sched)


def test_non_finite_prediction_fails_loudly():
    class BadModel:
        def predict_noise(self, z, t, conditioning):
            return torch.full_like(z, math.nan)

    sched = cosine_schedule(5)
    state = LatentState(z=torch.zeros(1, 4, 4, dtype=torch.float64), timestep_index=1)
    with pytest.raises(BackendError):
        ddim_invert_step(state, BadModel(), sched)
