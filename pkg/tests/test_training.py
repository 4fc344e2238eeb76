# tests/test_training.py
import math

import numpy as np
import pandas as pd
import pytest
import torch

from src.config import DataConfig, ModelConfig, TrainConfig
from src.data import synth_advection_dataset
from src.derivative_ops import exact_kernel_bank
from src.errors import ArityError, DimensionError, EmptyDatasetError, TrainingDivergedError
from src.phydnet import PhyDNet, PredictionBundle, forecast
from src.training import dataset_loss, icloss, sample_loss, set_seed, threshold_truth, train


def _windows(frames, width):
    return np.stack([frames[i:i + width] for i in range(len(frames) - width + 1)]).astype(np.float32)


@pytest.fixture
def samples(tiny_model_config):
    frames = synth_advection_dataset(DataConfig(grid=32, steps=8, seed=1)).frames
    return _windows(frames, tiny_model_config.tau_in + tiny_model_config.tau_out)


def test_threshold_truth():
    frame = torch.tensor([[0.75, 0.5], [0.0, 0.6]])
    assert threshold_truth(frame, 40.0).tolist() == [[1.0, 0.0], [0.0, 0.0]]
    assert threshold_truth(torch.zeros(3, 3), 8.0).sum() == 0


def test_icloss_saturated_correct_prediction():
    truth = torch.zeros(1, 4, 4)
    truth[0, :2] = 1.0
    logits = torch.stack([(1 - truth) * 20 - truth * 20, truth * 20 - (1 - truth) * 20], dim=1).double()
    assert float(icloss(logits, truth)) < 1e-6


@pytest.mark.parametrize("value, expected", [(0.0, math.log(2)), (1.0, 5 * math.log(2))])
def test_icloss_uniform_logits(value, expected):
    logits = torch.zeros(2, 2, 3, 3, dtype=torch.float64)
    truth = torch.full((2, 3, 3), value, dtype=torch.float64)
    assert float(icloss(logits, truth, 5.0)) == pytest.approx(expected, abs=1e-9)


def test_icloss_scales_with_class_weight():
    logits = torch.zeros(1, 2, 3, 3, dtype=torch.float64)
    truth = torch.ones(1, 1, 3, 3, dtype=torch.float64)
    assert float(icloss(logits, truth, 15.0)) == pytest.approx(3 * float(icloss(logits, truth, 5.0)), rel=1e-12)


def test_icloss_shape_mismatch():
    with pytest.raises(DimensionError):
        icloss(torch.zeros(1, 2, 3, 3), torch.zeros(1, 4, 4))


def _exact_model(**overrides):
    cfg = ModelConfig(variant="baseline", k=3, latent_channels=2, encoder_width=2, convlstm_widths=(2,),
                      tau_in=1, tau_out=2, **overrides)
    model = PhyDNet(cfg).double()
    with torch.no_grad():
        model.phycell.bank.kernels.copy_(exact_kernel_bank(3, dtype=torch.float64).kernels)
    return model


def test_perfect_prediction_has_zero_loss():
    model = _exact_model()
    truths = torch.rand(2, 2, 8, 8, dtype=torch.float64)
    preds = [PredictionBundle(intensity=truths[:, i:i + 1]) for i in range(2)]
    breakdown = sample_loss(preds, truths, model)
    assert float(breakdown.image_loss) == 0.0
    assert float(breakdown.icl_loss) == 0.0
    assert float(breakdown.total) == pytest.approx(0.0, abs=1e-10)


def test_constant_offset_image_loss():
    model = _exact_model()
    truths = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
    preds = [PredictionBundle(intensity=torch.full((1, 1, 8, 8), 0.5, dtype=torch.float64)) for _ in range(2)]
    assert float(sample_loss(preds, truths, model).image_loss) == 0.25


def test_total_is_exactly_additive():
    model = _exact_model(icloss_enabled=True)
    with torch.no_grad():
        model.phycell.bank.kernels.add_(0.01)
    inputs = torch.rand(2, 1, 16, 16, dtype=torch.float64)
    truths = torch.rand(2, 2, 16, 16, dtype=torch.float64)
    b = sample_loss(forecast(inputs, model), truths, model, lambda_moment=0.3)
    assert float(b.icl_loss) > 0 and float(b.moment_loss) > 0
    assert torch.equal(b.total, b.image_loss + b.icl_loss + 0.3 * b.moment_loss)


def test_sample_loss_length_mismatch():
    model = _exact_model()
    with pytest.raises(ArityError):
        sample_loss([PredictionBundle(intensity=torch.zeros(1, 1, 8, 8))], torch.zeros(1, 2, 8, 8), model)


def test_dataset_loss_is_mean_of_sample_losses(tiny_model_config, samples):
    model = PhyDNet(tiny_model_config)
    per_sample = [dataset_loss(model, samples[i:i + 1]) for i in range(len(samples))]
    pooled = dataset_loss(model, samples, batch_size=2)
    for key in ("image_loss", "total"):
        assert pooled[key] == pytest.approx(np.mean([p[key] for p in per_sample]), rel=1e-5)
    with pytest.raises(EmptyDatasetError):
        dataset_loss(model, samples[:0])


def test_gradients_are_finite(tiny_model_config, samples):
    cfg = ModelConfig(**{**tiny_model_config.__dict__, "icloss_enabled": True})
    model = PhyDNet(cfg)
    batch = torch.as_tensor(samples[:2])
    loss = sample_loss(forecast(batch[:, :cfg.tau_in], model), batch[:, cfg.tau_in:], model).total
    loss.backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name


def _run(cfg, samples, tmp_path=None):
    train_cfg = TrainConfig(epochs=1, batch_size=2, seed=3)
    set_seed(train_cfg.seed)
    model = PhyDNet(cfg)
    return train(model, samples[:2], samples[2:3], train_cfg, str(tmp_path) if tmp_path else None)


def test_training_is_deterministic(tiny_model_config, samples):
    first = _run(tiny_model_config, samples)
    second = _run(tiny_model_config, samples)
    pd.testing.assert_frame_equal(first.history, second.history)
    assert first.final == second.final
    assert list(first.history["split"]) == ["train", "validation"]


def test_training_writes_checkpoint_and_history(tiny_model_config, samples, tmp_path):
    result = _run(tiny_model_config, samples, tmp_path)
    assert result.checkpoint_path == str(tmp_path / "model.npz")
    history = pd.read_csv(tmp_path / "history.csv")
    assert list(history.columns) == ["epoch", "split", "image_loss", "icl_loss", "moment_loss", "total"]


def test_empty_training_set(tiny_model_config, samples):
    with pytest.raises(EmptyDatasetError):
        train(PhyDNet(tiny_model_config), samples[:0], None, TrainConfig(epochs=1))


def test_divergence_is_reported(tiny_model_config, samples):
    bad = samples[:2].copy()
    bad[:, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        train(PhyDNet(tiny_model_config), bad, None, TrainConfig(epochs=1, batch_size=2))
