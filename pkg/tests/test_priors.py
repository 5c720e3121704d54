import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dprgnet.errors import ContractError, DegenerateHistogramError
from dprgnet.priors import (
    BACKGROUND,
    PartitionMap,
    build_partition_map,
    build_priors,
    compute_mean_pressure_map,
    compute_temporal_prior,
    downsample_labels,
    normalize_activation,
    otsu_threshold,
)
from dprgnet.synth import SynthConfig, generate_stances
from dprgnet.types import StanceSample


def sample(pressure):
    pressure = np.asarray(pressure, dtype=float)
    return StanceSample(pressure, np.zeros((pressure.shape[0], 6)), 1.0, "s")


@pytest.fixture(scope="module")
def synth_samples():
    return generate_stances(SynthConfig(num_subjects=3, steps_per_subject=20, seed=7)).samples


def test_mean_map_trivial():
    np.testing.assert_array_equal(compute_mean_pressure_map([sample(np.full((4, 3, 2), 2.0))]), 2.0)
    m = compute_mean_pressure_map([sample(np.zeros((4, 3, 2))), sample(np.full((4, 3, 2), 4.0))])
    np.testing.assert_array_equal(m, 2.0)


def test_mean_map_streaming_oracle():
    rng = np.random.default_rng(0)
    samples = [sample(rng.uniform(0, 5, (10, 6, 4))) for _ in range(100)]
    total = np.zeros((6, 4))
    count = 0
    for s in samples:
        for frame in s.pressure:
            total += frame
            count += 1
    assert np.max(np.abs(compute_mean_pressure_map(samples) - total / count)) < 1e-12


def test_mean_map_errors():
    with pytest.raises(ContractError):
        compute_mean_pressure_map([])
    with pytest.raises(ContractError):
        compute_mean_pressure_map([sample(np.zeros((2, 3, 2))), sample(np.zeros((2, 4, 2)))])


def test_otsu_bimodal():
    m = np.zeros((8, 8))
    m[:, 4:] = 10.0
    thr, mask = otsu_threshold(m)
    assert 0 < thr < 10
    np.testing.assert_array_equal(mask, m == 10.0)


def exhaustive_otsu(values):
    """Best split over every distinct-value cut, by between-class variance."""
    v = np.sort(values.ravel())
    best, cut = -1.0, None
    for k in range(1, v.size):
        if v[k] == v[k - 1]:
            continue
        a, b = v[:k], v[k:]
        w0, w1 = a.size / v.size, b.size / v.size
        score = w0 * w1 * (a.mean() - b.mean()) ** 2
        if score > best:
            best, cut = score, (v[k - 1], v[k])
    return cut


def test_otsu_four_levels_against_scan():
    m = np.repeat([1.0, 2.0, 9.0, 10.0], 16).reshape(8, 8)
    lo, hi = exhaustive_otsu(m)
    thr, mask = otsu_threshold(m)
    assert (lo, hi) == (2.0, 9.0)
    assert lo <= thr < hi
    np.testing.assert_array_equal(mask, m >= 9.0)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0.1, 1000.0), b=st.floats(-100.0, 100.0), seed=st.integers(0, 1000))
def test_otsu_affine_invariant(a, b, seed):
    m = np.random.default_rng(seed).choice([0.0, 1.0, 3.0, 7.0], size=(10, 6))
    if np.ptp(m) == 0:
        return
    np.testing.assert_array_equal(otsu_threshold(m)[1], otsu_threshold(a * m + b)[1])


def test_otsu_constant_map():
    with pytest.raises(DegenerateHistogramError):
        otsu_threshold(np.full((5, 5), 3.0))
    with pytest.raises(ContractError):
        otsu_threshold(np.arange(4.0), bins=8)


def test_partition_full_rectangle():
    mask = np.ones((100, 40), dtype=bool)
    pm = build_partition_map(mask, np.ones((100, 40)))
    bands = pm.labels // 2
    assert set(bands[:54].ravel()) == {0}
    assert set(bands[54:71].ravel()) == {1}
    assert set(bands[71:].ravel()) == {2}
    np.testing.assert_allclose(pm.midline, 19.5)
    # right foot: medial (even labels) on low columns
    assert set((pm.labels[:, :20] % 2).ravel()) == {0}
    assert set((pm.labels[:, 20:] % 2).ravel()) == {1}
    assert len(set(pm.labels.ravel())) == 6


def test_partition_left_foot_mirrors():
    mask = np.ones((20, 10), dtype=bool)
    right = build_partition_map(mask, np.ones((20, 10)))
    left = build_partition_map(mask, np.ones((20, 10)), foot_side="left")
    np.testing.assert_array_equal(right.labels % 2, 1 - left.labels % 2)


def test_partition_single_row():
    mask = np.zeros((10, 8), dtype=bool)
    mask[4, 1:7] = True
    pm = build_partition_map(mask, np.ones((10, 8)))
    present = sorted(set(pm.labels[mask]))
    assert len(present) == 2
    assert len(pm.empty_regions) == 4


def test_partition_l_shape_centroid_oracle():
    rng = np.random.default_rng(3)
    mask = np.zeros((30, 12), dtype=bool)
    mask[:, 2:5] = True
    mask[22:, 2:11] = True
    mean_map = rng.uniform(0.1, 9.0, mask.shape)
    pm = build_partition_map(mask, mean_map)
    for r in range(30):
        cols = np.nonzero(mask[r])[0]
        w = mean_map[r, cols]
        assert abs(pm.midline[r] - (w * cols).sum() / w.sum()) < 1e-9
    assert np.all((pm.labels >= 0) == mask)


def test_partition_tie_goes_medial():
    mask = np.zeros((4, 5), dtype=bool)
    mask[:, 1:4] = True
    pm = build_partition_map(mask, np.ones((4, 5)))
    assert np.all(pm.labels[:, 2] % 2 == 0)


def test_partition_errors():
    with pytest.raises(ContractError):
        build_partition_map(np.zeros((4, 4), bool), np.ones((4, 4)))
    with pytest.raises(ContractError):
        build_partition_map(np.ones((4, 4), bool), np.ones((4, 4)), 0.7, 0.4)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0))
def test_partition_properties(seed, scale):
    rng = np.random.default_rng(seed)
    mask = rng.uniform(size=(20, 10)) < 0.6
    if not mask.any():
        return
    mean_map = rng.uniform(0.1, 5.0, mask.shape)
    pm = build_partition_map(mask, mean_map)
    assert set(pm.labels.ravel()) <= {-1, 0, 1, 2, 3, 4, 5}
    assert np.all((pm.labels != BACKGROUND) == mask)
    np.testing.assert_array_equal(pm.labels, build_partition_map(mask, scale * mean_map).labels)


def test_text_roundtrip():
    mask = np.ones((12, 6), dtype=bool)
    mask[0, 0] = False
    pm = build_partition_map(mask, np.ones((12, 6)))
    np.testing.assert_array_equal(PartitionMap.from_text(pm.to_text()).labels, pm.labels)


def region_frames(means, labels):
    """Frames whose region-k cells all hold ``means[t, k]``."""
    out = np.zeros((len(means),) + labels.shape)
    for k in range(6):
        out[:, labels == k] = np.asarray(means)[:, k:k + 1]
    return out


def test_temporal_prior_example():
    pm = build_partition_map(np.ones((10, 4), bool), np.ones((10, 4)))
    frames = region_frames([[2, 1, 1, 0, 0, 0]] * 3, pm.labels)
    prior = compute_temporal_prior([sample(frames)], pm, 1e-6)
    a = np.array([2, 1, 1, 0, 0, 0]) + 1e-6
    np.testing.assert_allclose(prior.P[0], a / a.sum(), rtol=1e-12)
    np.testing.assert_allclose(prior.P[0], [0.5, 0.25, 0.25, 2.5e-7, 2.5e-7, 2.5e-7], rtol=1e-5)


def test_temporal_prior_uniform():
    pm = build_partition_map(np.ones((10, 4), bool), np.ones((10, 4)))
    prior = compute_temporal_prior([sample(np.full((5, 10, 4), 3.0))], pm)
    np.testing.assert_allclose(prior.P, 1 / 6, atol=1e-12)


def test_temporal_prior_empty_region_and_errors():
    mask = np.zeros((10, 8), dtype=bool)
    mask[4, 1:7] = True
    pm = build_partition_map(mask, np.ones((10, 8)))
    prior = compute_temporal_prior([sample(np.ones((3, 10, 8)))], pm)
    assert np.all(prior.P > 0)
    empty = PartitionMap(np.full((10, 8), -1))
    with pytest.raises(ContractError):
        compute_temporal_prior([sample(np.ones((3, 10, 8)))], empty)
    with pytest.raises(ContractError):
        compute_temporal_prior([sample(np.ones((3, 10, 8))), sample(np.ones((4, 10, 8)))], pm)


def test_synthetic_prior_rows_and_band_order(synth_samples):
    art = build_priors(synth_samples)
    P = art.prior.P
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(P > 0)
    assert art.partition.empty_regions == []
    loaded = art.prior.activation.sum(axis=1) > 0
    bands = np.argmax(P, axis=1)[loaded] // 2
    assert bands[0] == 2 and bands[-1] == 0
    assert np.all(np.diff(bands) <= 0)


def test_normalize_activation_rows():
    a = normalize_activation(np.random.default_rng(0).uniform(size=(7, 6)), 1e-6)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_downsample_labels_majority_and_background():
    labels = np.full((8, 8), -1)
    labels[:4, :4] = 0
    labels[0, 0] = 3
    labels[4:, 4:] = -1
    labels[7, 7] = 5
    labels[:4, 4:6] = 1
    labels[:4, 6:8] = 2
    out = downsample_labels(labels, 4)
    assert out.tolist() == [[0, 1], [-1, 5]]
