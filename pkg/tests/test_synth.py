import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dprgnet.priors import build_priors
from dprgnet.synth import (
    SPEEDS_MPS,
    StepParams,
    SynthConfig,
    foot_outline,
    generate_raw_trial,
    generate_stances,
    lag_frames,
    vertical_force,
)
from dprgnet.types import SubjectMeta


def test_same_seed_same_data():
    cfg = SynthConfig(num_subjects=2, steps_per_subject=3, grid=(16, 8), stance_len=10, noise=0.05, seed=9)
    a, b = generate_stances(cfg), generate_stances(cfg)
    for x, y in zip(a.samples, b.samples):
        np.testing.assert_array_equal(x.pressure, y.pressure)
        np.testing.assert_array_equal(x.targets, y.targets)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), speed=st.sampled_from(SPEEDS_MPS))
def test_vertical_force_shape(seed, speed):
    p = StepParams.sample(np.random.default_rng(seed), speed)
    s = np.linspace(0, 1, 201)
    v = vertical_force(s, p)
    assert 0.9 <= v.max() <= 1.3
    assert v[0] == pytest.approx(0.0, abs=1e-6) and v[-1] == pytest.approx(0.0, abs=1e-6)
    assert np.all(v >= 0)


def test_pressure_tracks_load_and_outline():
    data = generate_stances(SynthConfig(num_subjects=1, steps_per_subject=4, grid=(32, 16), stance_len=21, seed=1))
    outline = foot_outline((32, 16))
    for smp in data.samples:
        assert np.all(smp.pressure[:, ~outline] == 0)
        total = smp.pressure.sum(axis=(1, 2))
        assert np.corrcoef(total, smp.targets[:, 2])[0, 1] > 0.95


def test_load_moves_heel_to_toe():
    data = generate_stances(SynthConfig(num_subjects=2, steps_per_subject=20, grid=(32, 16), stance_len=21, seed=2))
    art = build_priors(data.samples)
    band = np.argmax(art.prior.P, axis=1) // 2
    # bands: 0 forefoot, 1 midfoot, 2 hindfoot
    assert band[1] == 2 and band[-2] == 0
    assert np.all(np.diff(band[1:-1]) <= 0)


def test_lag_frames():
    step = np.ones((30, 2, 2))
    out = lag_frames(step, 2.0)
    assert np.all(np.diff(out[:, 0, 0]) > 0) and out[-1, 0, 0] == pytest.approx(1.0, abs=1e-6)
    assert lag_frames(step, 0.0) is step


def test_raw_trial_events_and_lag():
    subj = SubjectMeta("S1", 1700.0, 72.0, 40.0)
    trial = generate_raw_trial(subj, n_steps=5, speed=1.0, grid=(16, 8), seed=3)
    assert len(trial.events.heel_strikes) == 5
    assert trial.offset_frames == 14
    assert trial.plate.shape[1] == 6


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(noise=-1)
    with pytest.raises(ValueError):
        SynthConfig(grid=(2, 8))
