import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from laserprog.datagen import (
    DataError,
    DatasetSpec,
    DeviceTrace,
    NormStats,
    OperatingConditions,
    WindowSet,
    batch_shift,
    build_dataset,
    mix64,
    normalize_apply,
    normalize_fit,
    simulate_all,
    simulate_device,
    windows,
)

OC = OperatingConditions(70.0, 10.0)
QUIET = DatasetSpec(noise_rel=0.0)


def trace_of(n, failure=None, interval=833.0):
    t = np.arange(n) * interval
    return DeviceTrace(3, 0, OC, t, np.linspace(2.0, 1.0, n), "gradual" if failure else "normal", 2.0, failure)


# ---------------------------------------------------------------------------
# simulate_device


def test_normal_without_noise_or_drift_is_constant():
    tr = simulate_device("normal", OC, QUIET, seed=1, p0=1.5, drift=0.0)
    assert np.array_equal(tr.power_mw, np.full(tr.times_h.size, 1.5))
    assert tr.label == "normal" and tr.failure_time_h is None


def test_gradual_failure_time_solves_decay_law():
    r = math.log(1.25) / 5000.0
    tr = simulate_device("gradual", OC, QUIET, seed=1, p0=2.0, rate=r)
    assert tr.failure_time_h == pytest.approx(5000.0, rel=1e-12)
    below = tr.times_h[tr.power_mw < 0.8 * tr.p0]
    # first sampled crossing is the first grid point after 5000 h
    assert below[0] == pytest.approx(5831.0) and np.all(tr.times_h[tr.power_mw >= 0.8 * tr.p0] < 5000.0)


def test_sudden_drop_at_failure_time():
    spec = DatasetSpec(noise_rel=0.01)
    tr = simulate_device("sudden", OC, spec, seed=4, p0=2.0, t_fail=6000.0, u=0.5, drift=0.0)
    assert tr.failure_time_h == 6000.0
    before = tr.power_mw[tr.times_h < 6000.0]
    after = tr.power_mw[tr.times_h >= 6000.0]
    assert np.all(np.abs(before - 2.0) <= 5 * 0.01 * 2.0)
    assert np.all(np.abs(after - 1.0) <= 5 * 0.01 * 2.0)


def test_simulate_rejects_bad_input():
    with pytest.raises(DataError):
        simulate_device("broken", OC, QUIET, seed=0)
    with pytest.raises(DataError):
        simulate_device("normal", OC, QUIET, seed=0, p0=-1.0)
    with pytest.raises(DataError):
        OperatingConditions(150.0, 10.0)


@given(st.sampled_from(["normal", "gradual", "sudden"]), st.integers(0, 2**32),
       st.sampled_from([(70.0, 10.0), (70.0, 15.0), (90.0, 10.0), (90.0, 15.0), (50.0, 20.0)]))
def test_failure_criterion_matches_kind(kind, seed, oc):
    spec = DatasetSpec(noise_rel=0.02)
    tr = simulate_device(kind, OperatingConditions(*oc), spec, seed)
    crosses = bool(np.any(tr.power_mw < 0.8 * tr.p0))
    assert crosses == (kind != "normal")
    assert (tr.failure_time_h is not None) == crosses
    assert np.all(tr.power_mw > 0) and np.all(np.diff(tr.times_h) > 0)


def test_simulation_is_seeded():
    a = simulate_device("gradual", OC, DatasetSpec(), seed=99)
    b = simulate_device("gradual", OC, DatasetSpec(), seed=99)
    assert np.array_equal(a.power_mw, b.power_mw)


def test_mix64_is_splitmix_finalizer():
    # state seed*gamma + index + 1 = gamma is the first SplitMix64 state from 0,
    # whose published output is 0xE220A8397B1DCDAF
    assert mix64(1, -1) == 0xE220A8397B1DCDAF
    assert len({mix64(42, i) for i in range(1000)}) == 1000


def test_acceleration_ratio_between_temperatures():
    spec = DatasetSpec()
    ratio = spec.acceleration(OperatingConditions(90.0, 10.0)) / spec.acceleration(OperatingConditions(70.0, 10.0))
    assert ratio == pytest.approx(3.0, rel=0.02)
    assert spec.acceleration(OperatingConditions(70.0, 20.0)) / spec.acceleration(OC) == pytest.approx(4.0)


# ---------------------------------------------------------------------------
# windows


def test_window_counts():
    assert len(windows(trace_of(12), 6, stride=6)) == 2
    assert len(windows(trace_of(6), 6, stride=1)) == 1
    assert len(windows(trace_of(19), 6)) == 14


def test_short_trace_rejected():
    with pytest.raises(DataError):
        windows(trace_of(5), 6)


def test_early_window_of_late_failure_is_degraded():
    ws = windows(trace_of(19, failure=9000.0), 6)
    first = ws[0]
    assert first.label == "degraded" and first.kind == "gradual"
    assert first.t_start_h == 0.0 and ws.power.shape[1] == 6


def test_stop_at_failure_drops_post_failure_starts():
    full = windows(trace_of(19, failure=6000.0), 6)
    cut = windows(trace_of(19, failure=6000.0), 6, stop_at_failure=True)
    assert len(full) == 14
    assert cut.t_start_h.max() <= 6000.0 and len(cut) == 8


@given(st.integers(6, 30), st.integers(1, 5))
def test_window_contents_follow_trace(n, stride):
    tr = trace_of(n)
    ws = windows(tr, 6, stride)
    assert len(ws) == len(range(0, n - 5, stride))
    for i in range(len(ws)):
        start = int(round(ws.t_start_h[i] / 833.0))
        assert np.array_equal(ws.power[i], tr.power_mw[start : start + 6])


# ---------------------------------------------------------------------------
# normalization


def _ws(power, T=(70.0, 90.0), I=(10.0, 15.0)):
    n = len(power)
    return WindowSet(np.asarray(power, float), list(T)[:n], list(I)[:n], ["normal"] * n,
                     ["normal"] * n, range(n), [0] * n, [0.0] * n)


def test_normalization_examples():
    stats = normalize_fit(_ws([[2.0, 3.0, 4.0], [2.5, 3.5, 3.0]]))
    assert (stats.p_min, stats.p_max) == (2.0, 4.0)
    assert stats.apply_power(np.array([3.0]))[0] == 0.5
    assert stats.apply_power(np.array([1.0]))[0] == 0.0
    assert stats.apply_power(np.array([9.0]))[0] == 1.0
    x = np.array([2.2, 3.9])
    np.testing.assert_allclose(stats.denormalize_power(stats.apply_power(x)), x, rtol=1e-15)


def test_normalize_apply_on_window():
    stats = NormStats(2.0, 4.0, 70.0, 90.0, 10.0, 15.0)
    x, oc = normalize_apply(stats, _ws([[2.0, 3.0, 4.0]], T=(90.0,), I=(10.0,))[0])
    assert np.array_equal(x, [0.0, 0.5, 1.0]) and np.array_equal(oc, [1.0, 0.0])


def test_degenerate_channel_rejected():
    with pytest.raises(DataError):
        normalize_fit(_ws([[1.0, 2.0], [1.5, 1.2]], T=(70.0, 70.0)))
    with pytest.raises(DataError):
        normalize_fit(WindowSet.empty(6))


# ---------------------------------------------------------------------------
# build_dataset


def test_default_dataset_composition(default_dataset):
    test = default_dataset.test
    n_deg = int(test.is_degraded.sum())
    n_norm = len(test) - n_deg
    assert abs(n_norm - n_deg / 3.0) <= 1.0
    calib = default_dataset.calib
    assert abs((len(calib) - calib.is_degraded.sum()) - calib.is_degraded.sum() / 3.0) <= 1.0
    assert default_dataset.manifest["train_fraction"] == pytest.approx(0.8, abs=1e-3)
    assert 2500 <= sum(len(p) for p in default_dataset.partitions().values()) <= 3500


def test_partitions_are_device_disjoint(default_dataset):
    ids = {name: set(ws.device_id.tolist()) for name, ws in default_dataset.partitions().items()}
    assert not ids["train"] & ids["calib"]
    assert not ids["train"] & ids["test"]
    assert not ids["calib"] & ids["test"]


def test_label_consistency(default_dataset):
    traces = {tr.device_id: tr for tr in simulate_all(default_dataset.spec)}
    for ws in default_dataset.partitions().values():
        for dev, label, kind in zip(ws.device_id, ws.label, ws.kind):
            tr = traces[int(dev)]
            assert (label == "degraded") == (tr.failure_time_h is not None)
            assert kind == tr.kind


def test_train_is_normal_and_test_failures_are_late(default_dataset):
    assert not default_dataset.train.is_degraded.any()
    traces = {tr.device_id: tr for tr in simulate_all(default_dataset.spec)}
    for ws in (default_dataset.calib, default_dataset.test):
        for dev in ws.device_id[ws.is_degraded]:
            assert traces[int(dev)].failure_time_h > 5000.0
    kinds = set(default_dataset.test.kind[default_dataset.test.is_degraded])
    assert kinds == {"gradual", "sudden"}


def test_build_is_deterministic():
    spec = DatasetSpec(seed=3)
    a, b = build_dataset(spec), build_dataset(spec)
    for name in ("train", "calib", "test"):
        pa, pb = getattr(a, name), getattr(b, name)
        assert pa.power.tobytes() == pb.power.tobytes()
        assert np.array_equal(pa.device_id, pb.device_id)


def test_no_degraded_devices_is_an_error():
    counts = {"normal": [60] * 4, "gradual": [0] * 4, "sudden": [0] * 4}
    with pytest.raises(DataError):
        build_dataset(DatasetSpec(counts=counts))


def test_csv_round_trip(tmp_path, default_dataset):
    path = tmp_path / "test.csv"
    default_dataset.test.to_csv(path)
    assert path.read_text().splitlines()[0] == "device_id,batch_id,kind,label,T_C,I_mA,t_start_h,x0,x1,x2,x3,x4,x5"
    back = WindowSet.from_csv(path)
    assert back.power.tobytes() == default_dataset.test.power.tobytes()
    assert list(back.kind) == list(default_dataset.test.kind)


def test_spec_json_round_trip(tmp_path):
    spec = DatasetSpec(seed=5, counts={"normal": [1, 2, 3, 4], "gradual": [1] * 4, "sudden": [0] * 4})
    path = tmp_path / "spec.json"
    path.write_text(spec.to_json())
    assert DatasetSpec.load(path) == spec
    with pytest.raises(DataError):
        DatasetSpec.from_dict({"bogus": 1})


# ---------------------------------------------------------------------------
# batch_shift


def test_identity_shift_returns_equal_spec():
    spec = DatasetSpec()
    assert batch_shift(spec) == spec


def test_extended_grid_is_superset():
    spec = DatasetSpec()
    shifted = batch_shift(spec, extra_temperatures=[50.0], extra_currents=[20.0])
    assert set(spec.oc_grid) < set(shifted.oc_grid)
    assert (50.0, 20.0) in shifted.oc_grid and len(shifted.oc_grid) == 9
    assert shifted.batch_id == 1 and shifted.seed != spec.seed


def test_new_grid_points_copy_nearest_counts():
    spec = DatasetSpec()
    shifted = batch_shift(spec, extra_temperatures=[50.0], extra_currents=[20.0])
    by_oc = dict(zip(shifted.oc_grid, shifted.counts["sudden"]))
    assert by_oc[(50.0, 10.0)] == 0 and by_oc[(50.0, 15.0)] == 3 and by_oc[(90.0, 20.0)] == 3


def test_shift_factor_bounds():
    with pytest.raises(DataError):
        batch_shift(DatasetSpec(), rate_factor=2.5)
    shifted = batch_shift(DatasetSpec(), p0_factor=1.2, noise_factor=0.5, rate_factor=0.5)
    assert shifted.p0_scale == 1.2 and shifted.noise_rel == pytest.approx(0.0015)
