import math
import os

import numpy as np
import pytest

from thermalgan import tensor as T
from thermalgan.checkpoint import CheckpointError, checkpoint_bytes, load_checkpoint, save_checkpoint
from thermalgan.dataio import PairedData, read_png
from thermalgan.models import ConfigError
from thermalgan.tensor import Tensor
from thermalgan.train import (
    LossWeights,
    SnapshotSchedule,
    TrainConfig,
    TrainingDivergedError,
    make_trainer,
    pix2pix_step,
    train,
)

SMALL = dict(image_side=16, base_width=4, levels=2, d_width=4, d_layers=2, resnet_width=4, n_blocks=1)


def small(**kw):
    return TrainConfig(**{**SMALL, **kw})


def random_pairs(n=8, side=16, seed=0):
    rng = np.random.default_rng(seed)
    conds = rng.uniform(-1, 1, (n, 3, side, side)).astype(np.float32)
    tgts = rng.uniform(-1, 1, (n, 1, side, side)).astype(np.float32)
    return PairedData(conds, tgts, np.zeros(n, np.int64), np.arange(n, dtype=np.int64) * 167)


def snapshot_params(module):
    return {n: p.data.copy() for n, p in module.named_parameters()}


def grads_of(module):
    return {n: None if p.grad is None else p.grad.copy() for n, p in module.named_parameters()}


def same(a, b):
    return a.keys() == b.keys() and all(
        (x is None and y is None) or (x is not None and y is not None and np.array_equal(x, y))
        for x, y in ((a[k], b[k]) for k in a)
    )


# ---------------------------------------------------------------- config


def test_config_defaults_match_optimizer_settings():
    c = TrainConfig()
    assert (c.lr, c.beta1, c.beta2, c.eps) == (2e-4, 0.5, 0.999, 1e-8)
    assert c.weights.lambda_l1 == 100 and c.weights.lambda_cycle == 10
    assert c.adversarial() == "bce"
    assert TrainConfig(arch="cyclegan").adversarial() == "lsgan"


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrainConfig(arch="unet")
    with pytest.raises(ConfigError):
        TrainConfig(style="sideways")
    with pytest.raises(ConfigError):
        LossWeights(lambda_l1=-1)


def test_config_json_round_trip():
    c = small(arch="cyclegan", style="FourViewStacked", seed=3)
    assert c.style == "stacked"
    assert TrainConfig.from_json(c.to_json()) == c


# ---------------------------------------------------------------- pix2pix step


def test_discriminator_frozen_during_generator_update():
    st = make_trainer(small())
    data = random_pairs()
    cond, tgt = Tensor(data.conditions[:1]), Tensor(data.targets[:1])
    fake = st.G(cond)
    st.update_discriminator(cond, tgt, fake)
    d_params, d_grads = snapshot_params(st.D), grads_of(st.D)
    g_before = snapshot_params(st.G)
    st.update_generator(cond, tgt, fake)
    assert same(snapshot_params(st.D), d_params)
    assert same(grads_of(st.D), d_grads)
    assert not same(snapshot_params(st.G), g_before)
    assert all(p.requires_grad for p in st.D.parameters())


def test_generator_untouched_by_discriminator_update():
    st = make_trainer(small())
    data = random_pairs()
    cond, tgt = Tensor(data.conditions[:1]), Tensor(data.targets[:1])
    fake = st.G(cond)
    st.G.zero_grad()
    g_before = snapshot_params(st.G)
    st.update_discriminator(cond, tgt, fake)
    assert same(snapshot_params(st.G), g_before)
    assert all(p.grad is None for p in st.G.parameters())


def test_l1_loss_is_zero_when_fake_equals_target():
    st = make_trainer(small())
    data = random_pairs()
    cond = Tensor(data.conditions[:1])
    with T.no_grad():
        fake = st.G(cond)
    _, _, g_l1 = st.generator_losses(cond, Tensor(fake.data), Tensor(fake.data))
    assert g_l1.item() == 0.0


def test_zero_l1_weight_removes_target_from_generator_gradient():
    st = make_trainer(small(weights=LossWeights(lambda_l1=0.0)))
    data = random_pairs()
    cond = Tensor(data.conditions[:1])

    def grad_for(target):
        for p in st.G.parameters():
            p.grad = None
        total, _, _ = st.generator_losses(cond, Tensor(target))
        T.backward(total)
        return {n: p.grad.copy() for n, p in st.G.named_parameters()}

    a = grad_for(data.targets[:1])
    b = grad_for(-data.targets[:1])
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_initial_discriminator_loss_near_two_log_two():
    st = make_trainer(small())
    data = random_pairs()
    rec = st.step(data.conditions[:2], data.targets[:2])
    assert abs(rec["d_loss"] - 2 * math.log(2)) < 0.3
    assert set(rec) == {"d_loss", "g_adv", "g_l1"}


def test_step_rejects_mismatched_batch():
    st = make_trainer(small())
    data = random_pairs()
    with pytest.raises(T.ContractError):
        st.step(data.conditions[:2], data.targets[:1])


def test_step_function_checks_weights():
    st = make_trainer(small())
    data = random_pairs()
    pix2pix_step(data.conditions[:1], data.targets[:1], st, LossWeights())
    with pytest.raises(ConfigError):
        pix2pix_step(data.conditions[:1], data.targets[:1], st, LossWeights(lambda_l1=5))


def test_pix2pix_learns_constant_mapping():
    data = random_pairs(n=4)
    data.targets[:] = 0.5
    st = make_trainer(small(lr=1e-3))
    with T.no_grad():
        before = float(np.mean(np.abs(st.generate(data.conditions) - 0.5)))
    train(st, data, 200)
    after = float(np.mean(np.abs(st.generate(data.conditions) - 0.5)))
    assert after < 0.05 < before


def test_nonfinite_loss_aborts_with_iteration():
    st = make_trainer(small())
    data = random_pairs()
    train(st, data, 2)
    bad = data.targets.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError, match="iteration 3"):
        st.step(data.conditions[:1], bad[:1])


def test_training_is_reproducible_for_a_seed():
    data = random_pairs()
    a, b = make_trainer(small(seed=5)), make_trainer(small(seed=5))
    ha, hb = train(a, data, 5), train(b, data, 5)
    assert ha == hb
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    c = make_trainer(small(seed=6))
    assert train(c, data, 5) != ha


# ---------------------------------------------------------------- CycleGAN


def test_cyclegan_reports_six_finite_terms_and_cycle_loss_falls():
    st = make_trainer(small(arch="cyclegan", lr=1e-3))
    data = random_pairs(n=4)
    hist = train(st, data, 200)
    assert set(hist[0]) == {"g_ab_adv", "g_ba_adv", "cycle_a", "cycle_b", "d_a", "d_b"}
    assert all(math.isfinite(v) for rec in hist for v in rec.values())

    def cycle(recs):
        return np.mean([r["cycle_a"] + r["cycle_b"] for r in recs])

    assert cycle(hist[-20:]) < 0.7 * cycle(hist[:20])


def test_cyclegan_reverse_generator_emits_three_channels():
    st = make_trainer(small(arch="cyclegan"))
    with T.no_grad():
        out = st.G_BA(Tensor(np.zeros((1, 1, 16, 16), np.float32)))
    assert out.shape == (1, 3, 16, 16)


# ---------------------------------------------------------------- snapshots


def test_default_schedule_points():
    s = SnapshotSchedule()
    assert s.iterations(20000) == [0, 10, 20, 30, 40, 50, 60, 20000]
    assert s.iterations(30) == [0, 10, 20, 30]
    assert SnapshotSchedule.parse("every=5,until=10,at=7+100").iterations(50) == [0, 5, 7, 10, 50]
    assert SnapshotSchedule.parse("none").iterations(100) == []
    with pytest.raises(ConfigError):
        SnapshotSchedule.parse("often=3")


def test_snapshots_written_on_schedule_and_reproducible(tmp_path):
    data = random_pairs()
    for run in ("a", "b"):
        st = make_trainer(small(seed=2))
        train(st, data, 20, SnapshotSchedule(every=10, until=20, at=()), str(tmp_path / run))
    names = sorted(os.listdir(tmp_path / "a"))
    assert names == [f"snapshot_it{i:06d}.png" for i in (0, 10, 20)]
    first = read_png(str(tmp_path / "a" / names[0]))
    assert first.min() != first.max()
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


# ---------------------------------------------------------------- checkpoints


@pytest.mark.parametrize("arch", ["pix2pix", "cyclegan"])
def test_checkpoint_round_trip_and_resume(arch, tmp_path):
    data = random_pairs()
    cfg = small(arch=arch, seed=1)
    ref = make_trainer(cfg)
    train(ref, data, 6)

    st = make_trainer(cfg)
    train(st, data, 3)
    path = save_checkpoint(st, str(tmp_path / "c.tgck"))
    back = load_checkpoint(path)
    assert back.iteration == 3
    assert np.array_equal(back.generate(data.conditions), st.generate(data.conditions))
    train(back, data, 3)
    assert checkpoint_bytes(back) == checkpoint_bytes(ref)


def test_checkpoint_rejects_damage(tmp_path):
    st = make_trainer(small())
    path = save_checkpoint(st, str(tmp_path / "c.tgck"))
    blob = open(path, "rb").read()
    cases = {
        "truncated": blob[:-10],
        "magic": b"XXXX" + blob[4:],
        "version": blob[:4] + (99).to_bytes(4, "little") + blob[8:],
        "trailing": blob + b"\0",
    }
    for name, bad in cases.items():
        p = tmp_path / f"{name}.tgck"
        p.write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(p))
