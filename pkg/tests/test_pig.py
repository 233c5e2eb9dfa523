import numpy as np
import pytest

from pairdiff.data import SyntheticSpec, generate_arrays, read_manifest
from pairdiff.denoiser import Denoiser, DenoiserConfig, load_checkpoint
from pairdiff.errors import ConfigError, ContractError, NumericError
from pairdiff.pig import (TrainConfig, _model_inputs, held_out_loss, learning_rate, paired_trajectory, sample_paired, sample_unconditional,
                          train_conditional, train_guider, train_model, train_unconditional, write_samples)
from pairdiff.rng import Rng
from pairdiff.sampler import SamplerConfig
from pairdiff.schedule import q_sample

SMALL = DenoiserConfig(image_size=8, base_channels=16, channel_mult=(1, 2), res_blocks=1, time_dim=16)


@pytest.fixture(scope="module")
def data8():
    batch, _ = generate_arrays(SyntheticSpec(image_size=8, n_samples=64, radius_max=2.2))
    return batch


@pytest.fixture(scope="module")
def data16():
    batch, _ = generate_arrays(SyntheticSpec(n_samples=2048))
    return batch


@pytest.fixture(scope="module")
def random_pair():
    """Untrained but non-trivial models (output layer not zeroed)."""
    return (Denoiser(SMALL, seed=1, zero_init_out=False), Denoiser(SMALL, seed=2, zero_init_out=False))


def fast_sampler(**kw):
    return SamplerConfig.make(n_steps=16, **kw)


# -- training ------------------------------------------------------------

@pytest.mark.parametrize("kw", [dict(steps=0), dict(batch_size=0), dict(model="both"), dict(lr=0.0),
                                dict(checkpoint_every=-1), dict(lr_schedule="step")])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


def test_learning_rate_schedules():
    const = TrainConfig(lr=2e-3, steps=10, lr_schedule="constant")
    assert [learning_rate(const, k) for k in (1, 10)] == [2e-3, 2e-3]
    cos = TrainConfig(lr=2e-3, steps=10, lr_schedule="cosine")
    assert learning_rate(cos, 1) == 2e-3
    assert learning_rate(cos, 6) == pytest.approx(1e-3)
    lrs = [learning_rate(cos, k) for k in range(1, 11)]
    assert all(a > b for a, b in zip(lrs, lrs[1:])) and lrs[-1] > 0


def test_model_inputs_roles():
    x0, y0, xt, yt = (np.full((1, 1, 2, 2), v) for v in (1.0, 2.0, 3.0, 4.0))
    assert [a[0, 0, 0, 0] for a in _model_inputs("guider", x0, y0, xt, yt)] == [3.0, 4.0]
    assert [a[0, 0, 0, 0] for a in _model_inputs("cond", x0, y0, xt, yt)] == [4.0, 1.0]
    assert [a[0, 0, 0, 0] for a in _model_inputs("uncond", x0, y0, xt, yt)] == [4.0, 0.0]


@pytest.mark.parametrize("train", [train_guider, train_conditional, train_unconditional])
def test_first_loss_is_unit_variance(data16, train):
    res = train(data16, TrainConfig(steps=1, batch_size=16))
    # zero-initialised output: the loss is mean(eps^2) over 16*256 draws
    assert abs(res.losses[0] - 1.0) < 4 * np.sqrt(2 / (16 * 256))


def test_two_noise_draws_per_step(data8):
    res = train_model(data8, TrainConfig(steps=3, batch_size=4), SMALL)
    assert res.normal_draws == 2 * 3


def test_training_is_deterministic(data8, tmp_path):
    cfg = TrainConfig(steps=4, batch_size=4, checkpoint_every=2, seed=3)
    a = train_model(data8, cfg, SMALL, out_dir=tmp_path / "a")
    b = train_model(data8, cfg, SMALL, out_dir=tmp_path / "b")
    assert a.losses == b.losses
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["model.pdck", "step000002.pdck", "step000004.pdck"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    c = train_model(data8, TrainConfig(steps=4, batch_size=4, seed=4), SMALL)
    assert c.losses != a.losses


def test_checkpoint_meta(data8, tmp_path):
    train_model(data8, TrainConfig(model="cond", steps=1, batch_size=2), SMALL, out_dir=tmp_path, meta={"k": 1})
    net, info = load_checkpoint(tmp_path / "model.pdck")
    assert info["step"] == 1 and info["meta"]["role"] == "cond" and info["meta"]["k"] == 1
    assert info["meta"]["train"]["T"] == 1024


def test_short_training_descends(data16):
    res = train_guider(data16, TrainConfig(steps=200, batch_size=16, lr=1e-3))
    losses = np.array(res.losses)
    assert losses[190:].mean() < losses[10:30].mean()


def test_held_out_loss(data8, random_pair):
    zero = Denoiser(SMALL)
    assert abs(held_out_loss(zero, data8, "cond") - 1.0) < 4 * np.sqrt(2 / data8.masks.size)
    net = random_pair[1]
    a = held_out_loss(net, data8, "cond", seed=3, batch_size=7)
    assert a == held_out_loss(net, data8, "cond", seed=3, batch_size=7)
    assert a == held_out_loss(net, data8, "cond", seed=3, batch_size=7, guide_order=np.arange(64))
    assert a != held_out_loss(net, data8, "cond", seed=3, batch_size=7, guide_order=np.arange(64)[::-1])
    with pytest.raises(ConfigError):
        held_out_loss(net, data8, "both")


def test_nan_loss_aborts_with_diagnostic(data8, tmp_path):
    bad = type(data8)(data8.masks.copy(), data8.images.copy())
    bad.images[:] = np.nan
    with pytest.raises(NumericError):
        train_model(bad, TrainConfig(model="cond", steps=3, batch_size=2), SMALL, out_dir=tmp_path)
    assert (tmp_path / "diagnostic.pdck").exists()


def test_mis_shaped_data(data8):
    with pytest.raises(ContractError):
        train_model(data8, TrainConfig(steps=1), DenoiserConfig(image_size=16))


# -- sampling ------------------------------------------------------------

def test_sampling_deterministic_and_seeded(random_pair):
    mx, my = random_pair
    cfg = fast_sampler(seed=7)
    a = sample_paired(mx, my, cfg, n=1)[0]
    b = sample_paired(mx, my, cfg, n=1)[0]
    assert a.seed == 7
    assert a.mask.tobytes() == b.mask.tobytes() and a.image.tobytes() == b.image.tobytes()
    c = sample_paired(mx, my, fast_sampler(seed=8), n=1)[0]
    assert not np.array_equal(a.raw_image, c.raw_image)


@pytest.mark.parametrize("stochastic", [False, True])
def test_batch_equals_single_pair_runs(random_pair, stochastic):
    mx, my = random_pair
    cfg = fast_sampler(seed=11, stochastic=stochastic)
    batched = sample_paired(mx, my, cfg, n=5, batch_size=4)
    singles = [sample_paired(mx, my, cfg, seeds=[11 + i])[0] for i in range(5)]
    for b, s in zip(batched, singles):
        assert b.seed == s.seed
        assert b.raw_mask.tobytes() == s.raw_mask.tobytes()
        assert b.raw_image.tobytes() == s.raw_image.tobytes()


def test_outputs_clamped(random_pair):
    mx, my = random_pair
    for rec in sample_paired(mx, my, fast_sampler(), n=3):
        assert rec.mask.min() >= -1 and rec.mask.max() <= 1
        assert rec.image.min() >= -1 and rec.image.max() <= 1
        np.testing.assert_array_equal(rec.mask, np.clip(rec.raw_mask, -1, 1))
        assert set(np.unique(rec.binary_mask())) <= {-1.0, 1.0}


def test_trace_follows_step_sequence(random_pair):
    mx, my = random_pair
    cfg = fast_sampler()
    rec = sample_paired(mx, my, cfg, n=1, trace=True)[0]
    assert [(s.t, s.t_prev) for s in rec.trace] == list(cfg.steps)
    for a, b in zip(rec.trace, rec.trace[1:]):
        np.testing.assert_array_equal(a.x_prev, b.x_t)
        np.testing.assert_array_equal(a.y_prev, b.y_t)


@pytest.mark.parametrize("clamp", [False, True])
def test_guide_is_rearranged_mask_step(random_pair, clamp):
    mx, my = random_pair
    cfg = fast_sampler(clamp=clamp)
    for rec in sample_paired(mx, my, cfg, n=2, trace=True):
        for s in rec.trace:
            ab = cfg.schedule.alpha_bar(s.t_prev)
            implied = (s.x_prev - np.sqrt(1 - ab) * s.eps_x) / np.sqrt(ab)
            want = np.clip(implied, -1, 1) if clamp else implied
            assert np.max(np.abs(s.guide - want)) < 1e-6


def test_image_model_sees_guide_not_mask_noise():
    seen = []

    def eps_x(x, y, t):
        return np.zeros_like(x)

    def eps_y(y, guide, t):
        seen.append(guide.copy())
        return np.zeros_like(y)

    cfg = fast_sampler(clamp=False)
    x_T = np.full((1, 1, 2, 2), 0.5)
    paired_trajectory(eps_x, eps_y, x_T, np.zeros_like(x_T), cfg)
    t0 = cfg.steps.timesteps[0]
    np.testing.assert_allclose(seen[0], x_T / np.sqrt(cfg.schedule.alpha_bar(t0)))


def test_perfect_oracles_recover_the_pair():
    cfg = SamplerConfig()
    sched = cfg.schedule
    batch, _ = generate_arrays(SyntheticSpec(image_size=8, n_samples=3, radius_max=2.2))
    x0, y0 = batch.masks.astype(np.float64), batch.images.astype(np.float64)
    r = Rng(0)
    e1, e2 = r.normal(x0.shape, np.float64), r.normal(y0.shape, np.float64)

    def oracle(clean):
        return lambda z, _g, t: (z - np.sqrt(sched.alpha_bar(t)) * clean) / np.sqrt(1 - sched.alpha_bar(t))

    recs = paired_trajectory(oracle(x0), oracle(y0), q_sample(x0, 1024, e1, sched), q_sample(y0, 1024, e2, sched), cfg)
    for i, rec in enumerate(recs):
        assert np.max(np.abs(rec.raw_mask - x0[i, 0])) < 1e-9
        assert np.max(np.abs(rec.raw_image - y0[i, 0])) < 1e-9


def test_model_mismatch_is_config_error():
    a = Denoiser(SMALL)
    with pytest.raises(ConfigError):
        sample_paired(a, Denoiser(DenoiserConfig(image_size=16, base_channels=8)), fast_sampler(), n=1)
    with pytest.raises(ConfigError):
        sample_paired(a, Denoiser(SMALL, T=512), fast_sampler(), n=1)


def test_needs_count_or_seeds(random_pair):
    with pytest.raises(ContractError):
        sample_paired(*random_pair, fast_sampler())


def test_unconditional_sampling(random_pair):
    net = random_pair[1]
    a = sample_unconditional(net, fast_sampler(seed=3), n=3, batch_size=2)
    b = sample_unconditional(net, fast_sampler(seed=3), seeds=[4])
    assert a.shape == (3, 8, 8)
    np.testing.assert_array_equal(a[1], b[0])


def test_write_samples(random_pair, tmp_path):
    recs = sample_paired(*random_pair, fast_sampler(seed=5), n=3)
    write_samples(recs, tmp_path, config_hash="h1")
    man = read_manifest(tmp_path)
    assert man.header == {"config_hash": "h1", "kind": "samples"}
    assert [e[2] for e in man.entries] == ["5", "6", "7"]
    assert (tmp_path / "images" / "00002.pgm").exists()
