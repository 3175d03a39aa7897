import os

import numpy as np
import pytest
import torch
from scipy.stats import ks_2samp

from core.exceptions import ConfigurationError, MissingArtifactError, NumericalError, ValidationError
from models.experiment import DDPMConfig, DenoiserConfig
from models.records import Label, Modality, Provenance
from nets.denoiser import Denoiser
from services.diffusion import (
    build_schedule,
    forward_step,
    load_checkpoint,
    q_sample,
    sample,
    save_checkpoint,
    schedule_from_config,
    train_step,
    write_samples,
)

TINY_DENOISER = DenoiserConfig(block_channels=(32, 32), layers_per_block=1, norm_num_groups=8)


def _oracle_for(x0: torch.Tensor, schedule):
    """Noise predictor that knows the clean image, so it returns the exact epsilon"""
    def predict(x_t, t, labels):
        ab = schedule.gather(schedule.alpha_bars, t, x_t)
        return (x_t - ab.sqrt() * x0[: x_t.shape[0]]) / (1.0 - ab).sqrt()
    return predict


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------

def test_schedule_endpoints_are_exact():
    schedule = build_schedule(1000, 1e-4, 0.02)
    assert schedule.betas[0] == 1e-4
    assert schedule.betas[-1] == 0.02
    assert np.all(np.diff(schedule.betas) >= 0)
    assert np.all(np.diff(schedule.alpha_bars) < 0)


def test_constant_two_step_schedule():
    schedule = build_schedule(2, 0.25, 0.25)
    np.testing.assert_allclose(schedule.betas, [0.25, 0.25])
    np.testing.assert_allclose(schedule.alpha_bars, [0.75, 0.5625])


def test_default_schedule_ends_near_pure_noise():
    schedule = schedule_from_config(DDPMConfig())
    np.testing.assert_allclose(schedule.alpha_bars[-1], np.prod(1.0 - schedule.betas))
    assert schedule.alpha_bars[-1] < 2e-4
    assert schedule.final_snr < 1e-3


@pytest.mark.parametrize("T, start, end", [(1, 1e-4, 0.02), (10, 0.02, 1e-4), (10, 1e-4, 1.0), (10, 0.0, 0.02)])
def test_invalid_schedules_are_rejected(T, start, end):
    with pytest.raises(ValidationError):
        build_schedule(T, start, end)


def test_short_schedule_fails_the_final_snr_check():
    with pytest.raises(ConfigurationError):
        schedule_from_config(DDPMConfig(num_train_timesteps=10))


# ---------------------------------------------------------------------------
# Forward process
# ---------------------------------------------------------------------------

def test_q_sample_without_noise_scales_the_image():
    schedule = build_schedule(100, 1e-4, 0.02)
    x0 = torch.rand(4, 1, 8, 8)
    out = q_sample(x0, 40, torch.zeros_like(x0), schedule)
    torch.testing.assert_close(out, float(np.sqrt(schedule.alpha_bars[40])) * x0)


def test_q_sample_of_black_image_is_scaled_noise():
    schedule = build_schedule(100, 1e-4, 0.02)
    eps = torch.randn(4, 1, 8, 8, generator=torch.Generator().manual_seed(0))
    out = q_sample(torch.zeros_like(eps), 70, eps, schedule)
    torch.testing.assert_close(out, float(np.sqrt(1.0 - schedule.alpha_bars[70])) * eps)


@pytest.mark.parametrize("t", [-1, 100])
def test_timestep_outside_schedule_is_rejected(t):
    schedule = build_schedule(100, 1e-4, 0.02)
    x0 = torch.zeros(2, 1, 4, 4)
    with pytest.raises(ValidationError):
        q_sample(x0, t, torch.zeros_like(x0), schedule)


def test_q_sample_moments_match_closed_form():
    schedule = build_schedule(100, 1e-4, 0.02)
    n, t, value = 20000, 60, 0.3
    x0 = torch.full((n, 1), value, dtype=torch.float64)
    eps = torch.randn(n, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    x_t = q_sample(x0, t, eps, schedule).squeeze(1).numpy()
    ab = schedule.alpha_bars[t]
    var = 1.0 - ab
    assert abs(x_t.mean() - np.sqrt(ab) * value) < 3 * np.sqrt(var / n)
    assert abs(x_t.var(ddof=1) - var) < 3 * var * np.sqrt(2.0 / (n - 1))


def test_iterated_forward_steps_match_closed_form():
    schedule = build_schedule(50, 1e-3, 0.05)
    n, k = 5000, 30
    gen = torch.Generator().manual_seed(2)
    x = torch.full((n, 1), 0.5, dtype=torch.float64)
    for t in range(k):
        x = forward_step(x, t, torch.randn(n, 1, dtype=torch.float64, generator=gen), schedule)
    direct = q_sample(torch.full((n, 1), 0.5, dtype=torch.float64), k - 1,
                      torch.randn(n, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(3)), schedule)
    assert ks_2samp(x.squeeze(1).numpy(), direct.squeeze(1).numpy()).pvalue > 0.01


# ---------------------------------------------------------------------------
# Training objective
# ---------------------------------------------------------------------------

def test_oracle_predictor_has_zero_loss():
    schedule = build_schedule(100, 1e-4, 0.02)
    x0 = torch.rand(8, 1, 8, 8, dtype=torch.float64)
    loss = train_step(_oracle_for(x0, schedule), x0, torch.zeros(8, dtype=torch.long), schedule,
                      torch.Generator().manual_seed(0))
    assert loss < 1e-12


def test_zero_predictor_loss_is_noise_variance():
    schedule = build_schedule(100, 1e-4, 0.02)
    x0 = torch.rand(64, 1, 16, 16)
    loss = train_step(lambda x, t, y: torch.zeros_like(x), x0, torch.zeros(64, dtype=torch.long), schedule,
                      torch.Generator().manual_seed(0))
    assert abs(loss - 1.0) < 0.06


def test_non_finite_loss_raises_numerical_error():
    schedule = build_schedule(100, 1e-4, 0.02)
    x0 = torch.rand(2, 1, 4, 4)
    with pytest.raises(NumericalError) as exc:
        train_step(lambda x, t, y: torch.full_like(x, float("nan")), x0, torch.zeros(2, dtype=torch.long),
                   schedule, torch.Generator().manual_seed(0))
    assert exc.value.exit_code == 4


def test_train_step_updates_parameters():
    schedule = build_schedule(20, 1e-3, 0.2)
    torch.manual_seed(0)
    model = Denoiser(TINY_DENOISER, 16)
    before = [p.detach().clone() for p in model.parameters()]
    optimizer = torch.optim.Adam(model.parameters(), lr=1e-3)
    train_step(model, torch.rand(4, 1, 16, 16), torch.tensor([0, 1, 0, 1]), schedule,
               torch.Generator().manual_seed(0), optimizer)
    assert any(not torch.equal(a, b) for a, b in zip(before, model.parameters()))


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _label_shift_model(x, t, labels):
    return 0.1 * x + 0.2 * labels.view(-1, 1, 1, 1).to(x.dtype)


def test_zero_samples_is_empty():
    schedule = build_schedule(10, 1e-3, 0.2)
    out = sample(_label_shift_model, schedule, 1, 0, torch.Generator().manual_seed(0), (1, 8, 8))
    assert out.shape == (0, 1, 8, 8)


def test_sampling_is_seeded_and_unit_range():
    schedule = build_schedule(10, 1e-3, 0.2)
    a = sample(_label_shift_model, schedule, 1, 5, torch.Generator().manual_seed(4), (1, 8, 8), batch_size=2)
    b = sample(_label_shift_model, schedule, 1, 5, torch.Generator().manual_seed(4), (1, 8, 8), batch_size=2)
    assert a.shape == (5, 1, 8, 8)
    torch.testing.assert_close(a, b, rtol=0, atol=0)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0


def test_class_label_changes_samples():
    schedule = build_schedule(10, 1e-3, 0.2)
    torch.manual_seed(0)
    model = Denoiser(TINY_DENOISER, 16).eval()
    pos = sample(model, schedule, Label.POS.class_index, 2, torch.Generator().manual_seed(9), (1, 16, 16))
    neg = sample(model, schedule, Label.NEG.class_index, 2, torch.Generator().manual_seed(9), (1, 16, 16))
    assert not torch.equal(pos, neg)


def test_exact_noise_predictor_recovers_the_training_image():
    schedule = build_schedule(100, 1e-4, 0.02)
    target = torch.rand(1, 1, 8, 8).clamp(0.05, 0.95)
    out = sample(_oracle_for(target, schedule), schedule, 0, 1, torch.Generator().manual_seed(5), (1, 8, 8))
    torch.testing.assert_close(out, target, rtol=0, atol=1e-3)


def test_denoiser_adds_label_embedding_to_time_embedding():
    torch.manual_seed(0)
    model = Denoiser(TINY_DENOISER, 16)
    labels = torch.tensor([0, 1])
    emb = model.condition_embedding(torch.tensor(5), labels)
    assert emb.timestep.shape == emb.label.shape == (2, TINY_DENOISER.embedding_width)
    assert not torch.equal(emb.label[0], emb.label[1])
    x = torch.randn(1, 1, 16, 16)
    t = torch.tensor([5])
    with torch.no_grad():
        assert not torch.equal(model(x, t, torch.tensor([0])), model(x, t, torch.tensor([1])))


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_keeps_predictions(tmp_path):
    config = DDPMConfig(denoiser=TINY_DENOISER, num_train_timesteps=20, max_final_snr=10.0)
    schedule = schedule_from_config(config)
    torch.manual_seed(0)
    model = Denoiser(config.denoiser, 16).eval()
    path = save_checkpoint(str(tmp_path / "ddpm" / "FAF.pt"), model, config, schedule, 16, modality="FAF")
    loaded, loaded_schedule, loaded_config = load_checkpoint(path)
    np.testing.assert_array_equal(loaded_schedule.betas, schedule.betas)
    assert loaded_config == config
    x, t, y = torch.randn(2, 1, 16, 16), torch.tensor([3, 7]), torch.tensor([0, 1])
    with torch.no_grad():
        torch.testing.assert_close(loaded(x, t, y), model(x, t, y))


def test_missing_checkpoint_is_reported(tmp_path):
    with pytest.raises(MissingArtifactError) as exc:
        load_checkpoint(str(tmp_path / "nope.pt"))
    assert exc.value.exit_code == 3


def test_written_samples_are_synthetic_entries(tmp_path):
    out_dir = tmp_path / "synthetic" / "FAF"
    entries = write_samples(torch.rand(3, 1, 8, 8), Modality.FAF, Label.POS, str(out_dir), str(tmp_path), start_index=2)
    assert [e.path for e in entries] == [
        os.path.join("synthetic", "FAF", f"FAF_POS_{i:05d}_pending.png") for i in (2, 3, 4)
    ]
    assert all(e.provenance == Provenance.SYNTHETIC and e.label == Label.POS for e in entries)
    assert len({e.eye_id for e in entries}) == 3
    assert all((tmp_path / e.path).exists() for e in entries)


@pytest.mark.slow
def test_training_reduces_denoising_loss():
    from services.phantom import phantom_batch

    labels = [Label.POS, Label.NEG] * 16
    images = torch.from_numpy(np.stack(phantom_batch(Modality.OCTA_SMAC, labels, 16, 1.0, seed=0)))[:, None]
    y = torch.tensor([lb.class_index for lb in labels])
    schedule = build_schedule(100, 1e-4, 0.02)
    torch.manual_seed(0)
    model = Denoiser(TINY_DENOISER, 16)
    optimizer = torch.optim.Adam(model.parameters(), lr=2e-3)
    gen = torch.Generator().manual_seed(0)
    losses = [train_step(model, images, y, schedule, gen, optimizer) for _ in range(300)]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])
