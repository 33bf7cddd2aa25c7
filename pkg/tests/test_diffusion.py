import numpy as np
import pytest

from conftest import TINY, perturb
from ecoprune.denoiser import denoiser_forward, init_denoiser
from ecoprune.diffusion import (SamplerMode, SyntheticLatents, base_train_step, denoise_step,
                                forward_diffuse, full_sample, make_schedule,
                                noise_prediction_loss, stream_checksum, trajectory_etas)
from ecoprune.optim import Adam


def test_schedule_single_step():
    s = make_schedule(1)
    assert s.alpha_bars[0] == s.alphas[0] == 1.0 - 1e-4
    assert s.sigmas[0] == 0.0


def test_schedule_invariants_and_direct_product():
    s = make_schedule(8)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    betas = [1e-4 + (0.02 - 1e-4) * i / 7 for i in range(8)]
    prod = 1.0
    for b in betas:
        prod *= 1.0 - b
    assert s.alpha_bars[-1] == pytest.approx(prod, rel=1e-14)
    assert s.sigmas[0] == 0.0
    assert np.allclose(s.sigmas[1:], np.sqrt(betas[1:]))


def test_schedule_rejects_zero_steps():
    with pytest.raises(ValueError):
        make_schedule(0)


def test_forward_diffuse_examples():
    s = make_schedule(8)
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((4, 16))
    assert np.array_equal(forward_diffuse(z0, 5, np.zeros_like(z0), s), np.sqrt(s.alpha_bars[4]) * z0)
    with pytest.raises(ValueError):
        forward_diffuse(z0, 9, z0, s)
    with pytest.raises(ValueError):
        forward_diffuse(z0, 0, z0, s)


def test_forward_diffuse_t1_close_to_z0():
    s = make_schedule(8)
    rng = np.random.default_rng(5)
    z0 = rng.standard_normal(1000)
    eps = rng.standard_normal(1000)
    # sqrt(1 - abar_1) = 0.01 and |eps| ~ |z0|
    assert np.linalg.norm(forward_diffuse(z0, 1, eps, s) - z0) <= 1e-2 * np.linalg.norm(z0) * 1.2


@pytest.mark.parametrize("t", [1, 4, 8])
def test_forward_diffuse_monte_carlo_variance(t):
    s = make_schedule(8)
    rng = np.random.default_rng(t)
    z0 = np.full(10_000, 0.7)
    zt = forward_diffuse(z0, t, rng.standard_normal(10_000), s)
    var = np.var(zt - np.sqrt(s.alpha_bars[t - 1]) * z0)
    assert abs(var - (1 - s.alpha_bars[t - 1])) <= 0.05 * (1 - s.alpha_bars[t - 1])


def test_round_trip_at_t1(monkeypatch, tiny_model):
    s = make_schedule(TINY.T)
    rng = np.random.default_rng(1)
    for _ in range(10):
        z0 = rng.standard_normal((TINY.seq_len, TINY.d_model))
        eps = rng.standard_normal(z0.shape)
        zt = forward_diffuse(z0, 1, eps, s)
        monkeypatch.setattr("ecoprune.diffusion.denoiser_forward", lambda *a, **k: eps)
        out = denoise_step(zt, 1, 0, tiny_model, s)
        assert np.allclose(out, z0, rtol=0, atol=1e-12)


def test_zero_prediction_step(monkeypatch, tiny_model):
    s = make_schedule(TINY.T)
    z = np.random.default_rng(2).standard_normal((TINY.seq_len, TINY.d_model))
    monkeypatch.setattr("ecoprune.diffusion.denoiser_forward", lambda *a, **k: np.zeros_like(z))
    assert np.allclose(denoise_step(z, 3, 0, tiny_model, s), z / np.sqrt(s.alphas[2]), rtol=1e-15, atol=0)


@pytest.mark.parametrize("t", [1, 2, 4])
def test_denoise_step_matches_formula(tiny_model, t):
    m = perturb(tiny_model, t)
    s = make_schedule(TINY.T)
    rng = np.random.default_rng(t)
    z = rng.standard_normal((TINY.seq_len, TINY.d_model))
    eta = rng.standard_normal(z.shape)
    eps = denoiser_forward(m, z, t, 1)
    a, ab, sg = 1 - (1e-4 + (0.02 - 1e-4) * (t - 1) / (TINY.T - 1)), s.alpha_bars[t - 1], s.sigmas[t - 1]
    oracle = (z - (1 - a) / np.sqrt(1 - ab) * eps) / np.sqrt(a) + sg * eta
    assert np.abs(denoise_step(z, t, 1, m, s, eta=eta) - oracle).max() <= 1e-12


def test_denoise_step_rejects_bad_t(tiny_model):
    s = make_schedule(TINY.T)
    with pytest.raises(ValueError):
        denoise_step(np.zeros((TINY.seq_len, TINY.d_model)), TINY.T + 1, 0, tiny_model, s)


def test_full_sample_examples(tiny_model):
    rng = np.random.default_rng(3)
    z = rng.standard_normal((TINY.seq_len, TINY.d_model))
    s1 = make_schedule(1)
    assert np.array_equal(full_sample(z, 1, tiny_model, s1), denoise_step(z, 1, 1, tiny_model, s1))
    s3 = make_schedule(3)
    a = full_sample(z, 2, tiny_model, s3)
    assert a.tobytes() == full_sample(z, 2, tiny_model, s3).tobytes()
    manual = denoise_step(denoise_step(denoise_step(z, 3, 2, tiny_model, s3), 2, 2, tiny_model, s3),
                          1, 2, tiny_model, s3)
    assert np.abs(a - manual).max() <= 1e-12


def test_full_sample_rejects_schedule_longer_than_model(tiny_model):
    with pytest.raises(ValueError):
        full_sample(np.zeros((TINY.seq_len, TINY.d_model)), 0, tiny_model, make_schedule(TINY.T + 1))


def test_stochastic_stream_is_shared_and_reproducible(tiny_model):
    s = make_schedule(TINY.T)
    mode = SamplerMode("stochastic_shared", seed=11)
    shape = (2, TINY.seq_len, TINY.d_model)
    seen = {"base": [], "masked": []}
    z = np.random.default_rng(4).standard_normal(shape)
    gates = [(np.array([1.0, 0.0]), np.ones(TINY.d_ff))] * TINY.n_blocks
    import ecoprune.diffusion as D
    orig = SamplerMode.eta

    def spy(key):
        def eta(self, t, shp):
            e = orig(self, t, shp)
            seen[key].append(e)
            return e
        return eta

    for key, g in (("base", None), ("masked", gates)):
        SamplerMode.eta = spy(key)
        try:
            D.full_sample(z, np.array([0, 1]), tiny_model, s, g, mode)
        finally:
            SamplerMode.eta = orig
    assert stream_checksum(seen["base"]) == stream_checksum(seen["masked"])
    assert stream_checksum(seen["base"]) == stream_checksum(trajectory_etas(mode, s, shape))
    other = SamplerMode("stochastic_shared", seed=12)
    assert stream_checksum(trajectory_etas(other, s, shape)) != stream_checksum(seen["base"])
    a = full_sample(z, np.array([0, 1]), tiny_model, s, None, mode)
    b = full_sample(z, np.array([0, 1]), tiny_model, s, None, mode)
    assert a.tobytes() == b.tobytes()
    assert not np.allclose(a, full_sample(z, np.array([0, 1]), tiny_model, s))


def test_sampler_mode_validation():
    with pytest.raises(ValueError):
        SamplerMode("ancestral")


def test_noise_prediction_loss_nonnegative_and_zero_for_oracle(monkeypatch, tiny_model):
    s = make_schedule(TINY.T)
    rng = np.random.default_rng(6)
    z0 = rng.standard_normal((5, TINY.seq_len, TINY.d_model))
    y = rng.integers(0, TINY.n_conditions, size=5)
    t = rng.integers(1, TINY.T + 1, size=5)
    eps = rng.standard_normal(z0.shape)
    assert noise_prediction_loss(tiny_model, z0, y, t, eps, s) >= 0
    monkeypatch.setattr("ecoprune.diffusion.denoiser_forward", lambda *a, **k: eps)
    assert noise_prediction_loss(tiny_model, z0, y, t, eps, s) == 0.0


def test_base_train_step_updates_and_rejects_empty():
    m = init_denoiser(TINY, 0)
    before = {k: v.copy() for k, v in m.params.items()}
    s = make_schedule(TINY.T)
    data = SyntheticLatents(TINY.n_conditions, TINY.seq_len, TINY.d_model)
    rng = np.random.default_rng(0)
    z0, y = data.sample(4, rng)
    loss = base_train_step(z0, y, m, s, Adam(1e-3), rng)
    assert loss >= 0
    assert any(not np.array_equal(before[k], m.params[k]) for k in before)
    with pytest.raises(ValueError):
        base_train_step(z0[:0], y[:0], m, s, Adam(1e-3), rng)


def test_synthetic_latents_shapes_and_means():
    data = SyntheticLatents(8, 4, 16, mean_scale=0.5, spread=0.1, seed=0)
    assert data.means.shape == (8, 4, 16)
    z0, y = data.sample(4000, np.random.default_rng(0), conditions=[3])
    assert np.all(y == 3)
    assert np.abs(z0.mean(axis=0) - data.means[3]).max() < 0.01
    assert np.array_equal(data.means, SyntheticLatents(8, 4, 16, seed=0).means)


@pytest.mark.slow
def test_base_training_halves_loss(trained_bases):
    """Loss after 2000 steps is below half its initial value (median of 5 seeds).

    Initial = mean of the first 10 step losses, final = mean of the last 100,
    to damp minibatch noise.
    """
    ratios = []
    for model, rows in trained_bases.values():
        losses = np.array([r["loss"] for r in rows])
        assert len(losses) == 2000
        ratios.append(losses[-100:].mean() / losses[:10].mean())
    print("final/initial loss ratios:", np.round(ratios, 4))
    assert np.median(ratios) < 0.5
