import csv

import numpy as np
import pytest
import torch

from fbgan.errors import ConfigurationError, DivergenceError, ValidationError
from fbgan.losses import LossBreakdown
from fbgan.phantom import ArtifactParams, generate_pairs
from fbgan.train import (
    TrainConfig,
    _raise_on_divergence,
    discriminator_update,
    epoch_batches,
    generator_input,
    generator_update,
    init_state,
    load_checkpoint,
    load_training_slices,
    save_checkpoint,
    train,
    train_step,
)


def tiny_cfg(data_dir="", **kwargs):
    defaults = dict(
        mode="feedback",
        batch_size=2,
        epochs=1,
        data_dir=str(data_dir),
        image_size=16,
        gen_widths=(4, 8),
        disc_widths=(4, 8),
        checkpoint_every=100,
        seed=3,
    )
    defaults.update(kwargs)
    return TrainConfig(**defaults)


@pytest.fixture
def data_dir(tmp_path):
    generate_pairs(tmp_path / "data", 3, (2, 16, 16), 0, ArtifactParams(), texture_sd=8.0)
    return tmp_path / "data"


@pytest.fixture
def batch(data_dir):
    cfg = tiny_cfg(data_dir)
    x, y = load_training_slices(cfg)
    return next(iter(epoch_batches(x, y, cfg, 0)))


def test_step_deterministic(data_dir, batch):
    cfg = tiny_cfg(data_dir)
    a = train_step(init_state(cfg), *batch)
    b = train_step(init_state(cfg), *batch)
    assert a == b


@pytest.mark.parametrize(
    "mode,channels", [("feedback", 2), ("unetgan", 1), ("cyclegan", 1)]
)
def test_generator_channel_count_per_mode(mode, channels):
    state = init_state(tiny_cfg(mode=mode))
    assert state.models.g_y.config.in_channels == channels
    assert state.models.g_x.config.in_channels == channels


def test_feedback_input_is_two_channels(batch):
    state = init_state(tiny_cfg())
    x, _ = batch
    gen_in = generator_input(x, state.models.d_y, True)
    assert gen_in.shape[1] == 2
    prob = gen_in[:, 1]
    assert prob.min() >= 0.0 and prob.max() <= 1.0


def test_cyclegan_mode_has_no_local_head():
    state = init_state(tiny_cfg(mode="cyclegan"))
    assert state.models.d_y.decoder is None
    assert state.models.d_x.decoder is None


def test_unetgan_mode_keeps_both_heads():
    state = init_state(tiny_cfg(mode="unetgan"))
    assert state.models.d_y.decoder is not None
    assert state.models.g_y.config.in_channels == 1


def snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def changed(before, module):
    return any(not torch.equal(a, b) for a, b in zip(before, module.parameters()))


def test_update_partitioning(data_dir, batch):
    state = init_state(tiny_cfg(data_dir))
    x, y = batch

    g_before = snapshot(state.models.g_y) + snapshot(state.models.g_x)
    discriminator_update(state, x, y)
    both_g = list(state.models.g_y.parameters()) + list(state.models.g_x.parameters())
    assert all(torch.equal(a, b) for a, b in zip(g_before, both_g))

    d_before = snapshot(state.models.d_y) + snapshot(state.models.d_x)
    generator_update(state, x, y)
    both_d = list(state.models.d_y.parameters()) + list(state.models.d_x.parameters())
    assert all(torch.equal(a, b) for a, b in zip(d_before, both_d))


def test_discriminator_update_changes_discriminator(batch):
    state = init_state(tiny_cfg())
    x, y = batch
    before = snapshot(state.models.d_y)
    discriminator_update(state, x, y)
    assert changed(before, state.models.d_y)


def test_generator_update_changes_generator(batch):
    state = init_state(tiny_cfg())
    x, y = batch
    before = snapshot(state.models.g_y)
    generator_update(state, x, y)
    assert changed(before, state.models.g_y)


def test_no_discriminator_grads_during_generator_update(batch):
    state = init_state(tiny_cfg())
    x, y = batch
    for p in list(state.models.d_y.parameters()) + list(state.models.d_x.parameters()):
        p.grad = None
    generator_update(state, x, y)
    for p in list(state.models.d_y.parameters()) + list(state.models.d_x.parameters()):
        assert p.grad is None or torch.all(p.grad == 0)


def test_discriminator_objective_trends_down_on_frozen_batch(batch):
    state = init_state(tiny_cfg())
    x, y = batch
    totals = []
    for _ in range(50):
        parts = discriminator_update(state, x, y)
        totals.append(parts["d_total_y"] + parts["d_total_x"])
    assert np.mean(totals[-10:]) < np.mean(totals[:10])


def test_mode_degeneracy_matches_cyclegan(data_dir, batch):
    feedback_off = tiny_cfg(data_dir, mode="feedback", feedback=False, local_weight=0.0)
    plain = tiny_cfg(data_dir, mode="cyclegan")
    a = train_step(init_state(feedback_off), *batch)
    b = train_step(init_state(plain), *batch)
    for name in LossBreakdown.field_names():
        assert abs(getattr(a, name) - getattr(b, name)) < 1e-6


def test_divergence_error_names_term_and_step():
    bad = LossBreakdown(d_global_y=float("nan"))
    with pytest.raises(DivergenceError, match=r"d_global_y.*step 7"):
        _raise_on_divergence(bad, 7)


def test_smoke_train_writes_checkpoint_and_metrics(tmp_path):
    generate_pairs(tmp_path / "d", 4, (2, 64, 64), 1, ArtifactParams(), texture_sd=8.0)
    cfg = TrainConfig(
        mode="feedback",
        batch_size=2,
        epochs=2,
        data_dir=str(tmp_path / "d"),
        out_dir=str(tmp_path / "run"),
        image_size=64,
        gen_widths=(4, 8),
        disc_widths=(4, 8),
        checkpoint_every=1,
        seed=0,
        steps_per_epoch=2,
    )
    result = train(cfg)
    assert (tmp_path / "run" / "ckpt_final.pt").exists()
    assert (tmp_path / "run" / "ckpt_ep0001.pt").exists()
    with open(result["metrics_csv"]) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch"] + LossBreakdown.field_names()
    assert len(rows) == 3


def test_resume_reproduces_uninterrupted_run(tmp_path, data_dir):
    base = dict(data_dir=data_dir, epochs=3, checkpoint_every=1)
    full_cfg = tiny_cfg(out_dir=str(tmp_path / "full"), **base)
    train(full_cfg)

    part_cfg = tiny_cfg(out_dir=str(tmp_path / "part"), **dict(base, epochs=2))
    train(part_cfg)
    resumed_cfg = tiny_cfg(out_dir=str(tmp_path / "resumed"), **base)
    train(resumed_cfg, resume=tmp_path / "part" / "ckpt_final.pt")

    def last_row(path):
        with open(path / "metrics.csv") as f:
            return list(csv.reader(f))[-1]

    assert last_row(tmp_path / "resumed") == last_row(tmp_path / "full")


def test_resume_with_incompatible_config_rejected(tmp_path, data_dir):
    cfg = tiny_cfg(data_dir, out_dir=str(tmp_path / "a"), epochs=1)
    train(cfg)
    other = tiny_cfg(data_dir, out_dir=str(tmp_path / "b"), mode="cyclegan", epochs=2)
    with pytest.raises(ConfigurationError):
        train(other, resume=tmp_path / "a" / "ckpt_final.pt")


def test_checkpoint_round_trip_preserves_step(tmp_path, data_dir, batch):
    state = init_state(tiny_cfg(data_dir))
    train_step(state, *batch)
    save_checkpoint(state, tmp_path / "ck.pt")
    loaded = load_checkpoint(tmp_path / "ck.pt")
    assert loaded.step == state.step
    a = train_step(loaded, *batch)
    b = train_step(state, *batch)
    assert a == b


def test_empty_dataset_rejected(tmp_path):
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValidationError):
        train(tiny_cfg(tmp_path / "empty", out_dir=str(tmp_path / "out")))


def test_unknown_config_field_rejected():
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"mode": "feedback", "bogus": 1})


def test_image_size_must_match_depth():
    with pytest.raises(ConfigurationError):
        tiny_cfg(image_size=18)
