import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bnode.dataset import (RrocsConfig, SamplingSpec, StandardizationStats, assign_splits,
                           generate_dataset, load_dataset, random_windows, sample_rrocs,
                           save_dataset, standardize, unstandardize, window_at, window_samples)
from bnode.odeint import TimeGrid
from bnode.physics import KoopmanAnalyticModel, ShfModel

SHF_BOUNDS = RrocsConfig((273.15, 273.15), (473.15, 473.15))


@pytest.fixture(scope="module")
def small_shf():
    spec = SamplingSpec(n_samples=20, t_start=0.0, t_stop=0.3, dt=0.002, drop_prefix=0.2,
                        controls=SHF_BOUNDS)
    return generate_dataset(ShfModel(), spec, seed=3)


def test_rrocs_constant_band():
    u = sample_rrocs(RrocsConfig((5.0,), (5.0,)), TimeGrid(0, 1, 0.01), 4)
    assert np.all(u == 5.0)


def test_rrocs_bounds_over_1000_samples():
    cfg = RrocsConfig((-1.0, 273.15), (2.0, 473.15), seed=11)
    u = sample_rrocs(cfg, TimeGrid(0, 1, 0.01), 1000)
    assert u.shape == (1000, 101, 2)
    for j in range(2):
        assert u[..., j].min() >= cfg.lower[j] and u[..., j].max() <= cfg.upper[j]


def test_rrocs_reaches_different_regions():
    u = sample_rrocs(RrocsConfig((273.15,), (473.15,), seed=2), TimeGrid(0, 1.2, 0.002), 1024)[..., 0]
    third = (473.15 - 273.15) / 3
    low = u.min(axis=1) < 273.15 + third
    high = u.max(axis=1) > 473.15 - third
    assert low.mean() >= 0.2 and high.mean() >= 0.2


def test_rrocs_smooth_between_clips():
    u = sample_rrocs(RrocsConfig((0.0,), (1.0,), f_min=2, f_max=5), TimeGrid(0, 1, 0.001), 20)[..., 0]
    d2 = np.diff(u, 2, axis=1) / 1e-6
    # spline second derivatives are bounded; clipping only ever flattens
    assert np.percentile(np.abs(d2), 99) < 1e4


def test_rrocs_invalid():
    with pytest.raises(ValueError):
        RrocsConfig((1.0,), (0.0,))
    with pytest.raises(ValueError):
        RrocsConfig((0.0,), (1.0,), f_min=3, f_max=2)


def test_shf_sequence_length():
    spec = SamplingSpec(n_samples=1, t_stop=1.2, dt=0.002, drop_prefix=0.2, controls=SHF_BOUNDS)
    ds = generate_dataset(ShfModel(), spec, seed=0)
    assert ds.states.shape == (1, 501, 16) and ds.outputs.shape == (1, 501, 48)
    assert ds.times[0] == pytest.approx(0.2)


def test_koopman_sequence_length():
    spec = SamplingSpec(n_samples=3, t_stop=10.0, dt=0.1, drop_prefix=0.2,
                        x0_lower=(-50.0, -50.0), x0_upper=(50.0, 50.0))
    ds = generate_dataset(KoopmanAnalyticModel(), spec, seed=0)
    assert ds.states.shape[1] == 99
    assert ds.controls.shape == (3, 99, 0)


def test_generation_is_deterministic(tmp_path, small_shf):
    spec = SamplingSpec(n_samples=20, t_start=0.0, t_stop=0.3, dt=0.002, drop_prefix=0.2,
                        controls=SHF_BOUNDS)
    again = generate_dataset(ShfModel(), spec, seed=3)
    for name in ("states", "outputs", "controls"):
        assert getattr(again, name).tobytes() == getattr(small_shf, name).tobytes()
    assert list(again.splits) == list(small_shf.splits)


def test_round_trip_bit_exact(tmp_path, small_shf):
    save_dataset(small_shf, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    for name in ("states", "outputs", "controls", "parameters", "times"):
        assert getattr(back, name).tobytes() == getattr(small_shf, name).tobytes()
    assert list(back.splits) == list(small_shf.splits)
    for g in small_shf.stats.mean:
        np.testing.assert_array_equal(back.stats.mean[g], small_shf.stats.mean[g])
        np.testing.assert_array_equal(back.stats.std[g], small_shf.stats.std[g])


def test_unsupported_format_version(tmp_path, small_shf):
    import json
    d = save_dataset(small_shf, tmp_path / "ds")
    m = json.loads((d / "manifest.json").read_text())
    m["format_version"] = 999
    (d / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ValueError, match="format_version"):
        load_dataset(d)


def test_train_split_standardized_moments(small_shf):
    arr = small_shf.standardized("train")
    for g in ("states", "outputs", "controls"):
        a = arr[g].reshape(-1, arr[g].shape[-1])
        assert np.abs(a.mean(0)).max() < 1e-6
        assert np.abs(a.var(0) - 1.0).max() < 1e-6


def test_standardize_round_trip_and_mean():
    rng = np.random.default_rng(0)
    x = rng.normal(3.0, 7.0, (10, 5, 4))
    stats = StandardizationStats.compute({"states": x})
    np.testing.assert_allclose(standardize(stats, "states", stats.mean["states"]), 0.0, atol=1e-15)
    assert np.abs(unstandardize(stats, "states", standardize(stats, "states", x)) - x).max() < 1e-12


def test_degenerate_channel_gets_unit_std():
    x = np.ones((4, 3, 2))
    x[..., 1] = np.arange(12).reshape(4, 3)
    stats = StandardizationStats.compute({"controls": x})
    assert stats.std["controls"][0] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(0, 1000))
def test_splits_partition(n, seed):
    labels = assign_splits(n, {"train": 0.76, "test": 0.12, "val": 0.12}, seed)
    assert labels.shape == (n,)
    counts = {s: int((labels == s).sum()) for s in ("train", "test", "val")}
    assert sum(counts.values()) == n
    assert abs(counts["train"] - 0.76 * n) <= 1 and abs(counts["test"] - 0.12 * n) <= 1


def _tiny_arrays(T, n=2):
    rng = np.random.default_rng(0)
    return {"states": rng.normal(size=(n, T + 1, 3)), "outputs": rng.normal(size=(n, T + 1, 2)),
            "controls": rng.normal(size=(n, T + 1, 1)), "parameters": np.zeros((n, 0))}


class _FakeDs:
    def __init__(self, T):
        self.arrays = _tiny_arrays(T)
        self.T = T

    def standardized(self, split):
        return self.arrays


def test_window_count_matches_t_minus_tau():
    ds = _FakeDs(500)
    assert sum(1 for _ in window_samples(ds, 50)) == 2 * 450
    assert sum(1 for _ in window_samples(ds, 499)) == 2 * 1


def test_window_prefix_identity():
    ds = _FakeDs(20)
    first = next(window_samples(ds, 5))
    np.testing.assert_array_equal(first.x, ds.arrays["states"][0, :6])
    np.testing.assert_array_equal(first.x0, ds.arrays["states"][0, 0])
    np.testing.assert_array_equal(first.u, ds.arrays["controls"][0, :6])
    assert first.tau == 5


def test_window_tau_rejected():
    ds = _FakeDs(20)
    with pytest.raises(ValueError):
        next(window_samples(ds, 20))
    with pytest.raises(ValueError):
        random_windows(ds.arrays, 0, 4, np.random.default_rng(0))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 19), st.integers(0, 100))
def test_random_windows_are_real_windows(tau, seed):
    arrays = _tiny_arrays(20)
    w = random_windows(arrays, tau, 8, np.random.default_rng(seed))
    assert w.x.shape == (8, tau + 1, 3) and w.u.shape == (8, tau + 1, 1)
    for b in range(8):
        hits = [(s, j) for s in range(2) for j in range(20 - tau)
                if np.array_equal(arrays["states"][s, j:j + tau + 1], w.x[b])]
        assert hits
        s, j = hits[0]
        np.testing.assert_array_equal(window_at(arrays, s, j, tau).y, w.y[b])
