"""Synthetic accelerated-aging data for VCSEL-like lasers.

Devices are simulated under constant (temperature, current) stress and
monitored for ``horizon_h`` hours at a fixed sampling interval. Three
behaviours are produced:

normal
    ``P(t) = P0 (1 + d t) + noise`` with a small, stress-dependent drift.
gradual
    ``P(t) = P0 exp(-r t) + noise`` where the rate follows an Arrhenius
    temperature law and a power law in current.
sudden
    a normal trace until ``t_f``, after which the output collapses to
    ``u P0`` with ``u`` drawn from ``[0.3, 0.7]``.

A device fails when its power falls below ``0.8 P0``. Traces are cut into
sliding windows that carry the device-level label, so the early windows of
a device that fails later are already labelled degraded.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

KINDS = ("normal", "gradual", "sudden")
LABELS = ("normal", "degraded")
FAILURE_FRACTION = 0.8
KELVIN = 273.15
T_RANGE = (20.0, 120.0)
I_RANGE = (5.0, 30.0)

_MASK64 = (1 << 64) - 1


def mix64(seed: int, index: int) -> int:
    """SplitMix64 finalizer applied to ``seed`` combined with ``index``.

    Used to derive independent per-device seeds from the dataset seed.
    """
    x = (seed * 0x9E3779B97F4A7C15 + index + 1) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


class DataError(ValueError):
    """Invalid or infeasible data request."""


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class OperatingConditions:
    T_C: float
    I_mA: float

    def __post_init__(self) -> None:
        if not T_RANGE[0] <= self.T_C <= T_RANGE[1]:
            raise DataError(f"temperature {self.T_C} °C outside {T_RANGE}")
        if not I_RANGE[0] <= self.I_mA <= I_RANGE[1]:
            raise DataError(f"current {self.I_mA} mA outside {I_RANGE}")

    def normalized(self, stats: "NormStats") -> tuple[float, float]:
        oc = stats.apply_oc(np.array([self.T_C]), np.array([self.I_mA]))
        return float(oc[0, 0]), float(oc[0, 1])


@dataclass
class DeviceTrace:
    device_id: int
    batch_id: int
    oc: OperatingConditions
    times_h: np.ndarray
    power_mw: np.ndarray
    kind: str
    p0: float
    failure_time_h: float | None = None

    @property
    def label(self) -> str:
        return "normal" if self.failure_time_h is None else "degraded"


@dataclass
class PowerWindow:
    """One fixed-length window of raw power samples (mW) with its context."""

    power_mw: np.ndarray
    oc: OperatingConditions
    label: str
    kind: str
    device_id: int
    batch_id: int
    t_start_h: float

    def normalized(self, stats: "NormStats") -> tuple[np.ndarray, np.ndarray]:
        x = stats.apply_power(self.power_mw[None, :])[0]
        oc = stats.apply_oc(np.array([self.oc.T_C]), np.array([self.oc.I_mA]))[0]
        return x, oc


@dataclass
class WindowSet:
    """Column-oriented collection of raw windows.

    ``power`` has shape ``(n, seq_len)``; all other columns have length ``n``.
    """

    power: np.ndarray
    T_C: np.ndarray
    I_mA: np.ndarray
    label: np.ndarray
    kind: np.ndarray
    device_id: np.ndarray
    batch_id: np.ndarray
    t_start_h: np.ndarray

    def __post_init__(self) -> None:
        power = np.asarray(self.power, dtype=np.float64)
        # an empty set keeps its column count so seq_len survives
        cols = power.shape[-1] if power.size == 0 and power.ndim == 2 else -1
        self.power = power.reshape(len(self.T_C), cols)
        self.T_C = np.asarray(self.T_C, dtype=np.float64)
        self.I_mA = np.asarray(self.I_mA, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=object)
        self.kind = np.asarray(self.kind, dtype=object)
        self.device_id = np.asarray(self.device_id, dtype=np.int64)
        self.batch_id = np.asarray(self.batch_id, dtype=np.int64)
        self.t_start_h = np.asarray(self.t_start_h, dtype=np.float64)
        n = len(self.T_C)
        for name in ("I_mA", "label", "kind", "device_id", "batch_id", "t_start_h"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has wrong length")
        bad = set(self.label) - set(LABELS)
        if bad:
            raise DataError(f"unknown labels {sorted(bad)}")
        bad = set(self.kind) - set(KINDS)
        if bad:
            raise DataError(f"unknown kinds {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.T_C)

    @property
    def seq_len(self) -> int:
        return self.power.shape[1]

    @property
    def is_degraded(self) -> np.ndarray:
        return self.label == "degraded"

    def __getitem__(self, i: int) -> PowerWindow:
        return PowerWindow(
            power_mw=self.power[i].copy(),
            oc=OperatingConditions(float(self.T_C[i]), float(self.I_mA[i])),
            label=str(self.label[i]),
            kind=str(self.kind[i]),
            device_id=int(self.device_id[i]),
            batch_id=int(self.batch_id[i]),
            t_start_h=float(self.t_start_h[i]),
        )

    def subset(self, idx: np.ndarray | Sequence[int]) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(
            self.power[idx], self.T_C[idx], self.I_mA[idx], self.label[idx], self.kind[idx],
            self.device_id[idx], self.batch_id[idx], self.t_start_h[idx],
        )

    def normalized(self, stats: "NormStats") -> tuple[np.ndarray, np.ndarray]:
        return stats.apply_power(self.power), stats.apply_oc(self.T_C, self.I_mA)

    @classmethod
    def empty(cls, seq_len: int) -> "WindowSet":
        return cls(np.zeros((0, seq_len)), [], [], [], [], [], [], [])

    @classmethod
    def concat(cls, sets: Sequence["WindowSet"]) -> "WindowSet":
        sets = list(sets)
        if not sets:
            raise DataError("nothing to concatenate")
        return cls(
            np.concatenate([s.power for s in sets]),
            np.concatenate([s.T_C for s in sets]),
            np.concatenate([s.I_mA for s in sets]),
            np.concatenate([s.label for s in sets]),
            np.concatenate([s.kind for s in sets]),
            np.concatenate([s.device_id for s in sets]),
            np.concatenate([s.batch_id for s in sets]),
            np.concatenate([s.t_start_h for s in sets]),
        )

    @classmethod
    def from_windows(cls, windows: Iterable[PowerWindow]) -> "WindowSet":
        ws = list(windows)
        if not ws:
            raise DataError("no windows")
        return cls(
            np.stack([w.power_mw for w in ws]),
            [w.oc.T_C for w in ws], [w.oc.I_mA for w in ws],
            [w.label for w in ws], [w.kind for w in ws],
            [w.device_id for w in ws], [w.batch_id for w in ws],
            [w.t_start_h for w in ws],
        )

    def sorted(self) -> "WindowSet":
        order = np.lexsort((self.t_start_h, self.device_id, self.batch_id))
        return self.subset(order)

    # -- CSV -------------------------------------------------------------

    def header(self) -> list[str]:
        return ["device_id", "batch_id", "kind", "label", "T_C", "I_mA", "t_start_h"] + [
            f"x{k}" for k in range(self.seq_len)
        ]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.header())
            for i in range(len(self)):
                writer.writerow(
                    [int(self.device_id[i]), int(self.batch_id[i]), self.kind[i], self.label[i],
                     repr(float(self.T_C[i])), repr(float(self.I_mA[i])),
                     repr(float(self.t_start_h[i]))]
                    + [repr(float(v)) for v in self.power[i]]
                )

    @classmethod
    def from_csv(cls, path: str | Path) -> "WindowSet":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            fixed = ["device_id", "batch_id", "kind", "label", "T_C", "I_mA", "t_start_h"]
            xs = header[len(fixed):]
            if header[: len(fixed)] != fixed or not xs or xs != [f"x{k}" for k in range(len(xs))]:
                raise DataError(f"{path}: unexpected header {header}")
            rows = list(reader)
        if not rows:
            return cls.empty(len(xs))
        try:
            cols = list(zip(*rows))
            if any(len(r) != len(header) for r in rows):
                raise DataError(f"{path}: ragged rows")
            power = np.array([[float(v) for v in r[len(fixed):]] for r in rows])
            return cls(
                power,
                [float(v) for v in cols[4]], [float(v) for v in cols[5]],
                list(cols[3]), list(cols[2]),
                [int(v) for v in cols[0]], [int(v) for v in cols[1]],
                [float(v) for v in cols[6]],
            )
        except (ValueError, IndexError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{path}: malformed row ({exc})") from exc


# ---------------------------------------------------------------------------
# Normalization


@dataclass(frozen=True)
class NormStats:
    p_min: float
    p_max: float
    t_min: float
    t_max: float
    i_min: float
    i_max: float

    def __post_init__(self) -> None:
        for ch in ("p", "t", "i"):
            lo, hi = getattr(self, f"{ch}_min"), getattr(self, f"{ch}_max")
            if not (np.isfinite(lo) and np.isfinite(hi)) or not lo < hi:
                raise DataError(f"degenerate normalization range for channel {ch!r}: [{lo}, {hi}]")

    def apply_power(self, p: np.ndarray) -> np.ndarray:
        return np.clip((np.asarray(p, dtype=np.float64) - self.p_min) / (self.p_max - self.p_min), 0.0, 1.0)

    def apply_oc(self, T_C: np.ndarray, I_mA: np.ndarray) -> np.ndarray:
        t = (np.asarray(T_C, dtype=np.float64) - self.t_min) / (self.t_max - self.t_min)
        i = (np.asarray(I_mA, dtype=np.float64) - self.i_min) / (self.i_max - self.i_min)
        return np.clip(np.stack([t, i], axis=-1), 0.0, 1.0)

    def denormalize_power(self, x: np.ndarray) -> np.ndarray:
        return self.p_min + np.asarray(x) * (self.p_max - self.p_min)

    def to_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        try:
            return cls(**{f.name: float(d[f.name]) for f in dataclasses.fields(cls)})
        except KeyError as exc:
            raise DataError(f"normalization stats missing {exc}") from None


def normalize_fit(train: WindowSet) -> NormStats:
    """Per-channel min/max of the training windows."""
    if len(train) == 0:
        raise DataError("cannot fit normalization on an empty set")
    return NormStats(
        float(train.power.min()), float(train.power.max()),
        float(train.T_C.min()), float(train.T_C.max()),
        float(train.I_mA.min()), float(train.I_mA.max()),
    )


def normalize_apply(stats: NormStats, window: PowerWindow) -> tuple[np.ndarray, np.ndarray]:
    return window.normalized(stats)


# ---------------------------------------------------------------------------
# Dataset specification


DEFAULT_OC_GRID = [(70.0, 10.0), (70.0, 15.0), (90.0, 10.0), (90.0, 15.0)]


@dataclass
class DatasetSpec:
    """Everything needed to regenerate a dataset bit for bit."""

    oc_grid: list[tuple[float, float]] = field(default_factory=lambda: list(DEFAULT_OC_GRID))
    # device counts per kind, aligned with oc_grid; abrupt failures are seeded
    # only at the high-current points
    counts: dict[str, list[int]] = field(
        default_factory=lambda: {"normal": [60, 60, 60, 60], "gradual": [9, 9, 9, 9], "sudden": [0, 3, 0, 3]}
    )
    seed: int = 42
    batch_id: int = 0
    horizon_h: float = 15000.0
    interval_h: float = 833.0
    seq_len: int = 6
    stride: int = 1

    # initial power: P0 = slope(T) * (I - I_th(T)) * (1 + p0_spread * N(0, 1))
    p0_slope_mw_per_ma: float = 0.15
    p0_slope_tc: float = 1.0 / 300.0
    i_th0_ma: float = 1.0
    t_char_c: float = 80.0
    p0_spread: float = 0.2
    p0_scale: float = 1.0
    noise_rel: float = 0.003

    # normal drift: relative change over the horizon
    drift_base: float = 0.04
    drift_per_10c: float = -0.025
    drift_per_5ma: float = -0.04
    drift_sd: float = 0.005
    drift_max: float = 0.05

    # gradual decay rate r = r0 * AF(T) * (I / i_ref)^gamma * m, m ~ logN(0, rate_spread)
    r0_per_h: float = 1.6e-5
    ea_over_k: float = 6845.0
    t_ref_c: float = 70.0
    i_ref_ma: float = 10.0
    gamma: float = 2.0
    rate_spread: float = 0.35
    gradual_tf_range_h: tuple[float, float] = (7000.0, 10500.0)

    # sudden failures
    sudden_tf_range_h: tuple[float, float] = (5100.0, 5800.0)
    sudden_u_range: tuple[float, float] = (0.3, 0.7)

    # partitioning
    train_fraction: float = 0.8
    calib_share: float = 0.5
    test_normal_fraction: float = 0.25
    early_cutoff_h: float = 5000.0
    # drop windows of failing devices that start after the recorded failure
    stop_at_failure: bool = True

    def __post_init__(self) -> None:
        self.oc_grid = [tuple(map(float, oc)) for oc in self.oc_grid]
        self.gradual_tf_range_h = tuple(map(float, self.gradual_tf_range_h))
        self.sudden_tf_range_h = tuple(map(float, self.sudden_tf_range_h))
        self.sudden_u_range = tuple(map(float, self.sudden_u_range))
        self.counts = {k: [int(n) for n in v] for k, v in self.counts.items()}
        self.validate()

    def validate(self) -> None:
        for oc in self.oc_grid:
            OperatingConditions(*oc)
        if set(self.counts) - set(KINDS):
            raise DataError(f"unknown kinds in counts: {sorted(set(self.counts) - set(KINDS))}")
        for kind, ns in self.counts.items():
            if len(ns) != len(self.oc_grid):
                raise DataError(f"counts[{kind!r}] must have one entry per oc grid point")
            if any(n < 0 for n in ns):
                raise DataError("device counts must be non-negative")
        for name in ("train_fraction", "calib_share", "test_normal_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise DataError(f"{name} must lie in (0, 1), got {v}")
        if self.seq_len < 2 or self.stride < 1:
            raise DataError("seq_len must be >= 2 and stride >= 1")
        if self.interval_h <= 0 or self.horizon_h <= self.interval_h:
            raise DataError("invalid sampling grid")
        if not 0.0 <= self.noise_rel <= 0.02:
            raise DataError("noise_rel must lie in [0, 0.02] so normal devices never cross the failure criterion")
        if not 0.0 <= self.drift_max <= 0.05:
            raise DataError("drift_max must lie in [0, 0.05]")
        lo, hi = self.sudden_u_range
        if not 0.0 < lo <= hi < FAILURE_FRACTION:
            raise DataError("sudden_u_range must lie inside (0, 0.8)")
        for name in ("gradual_tf_range_h", "sudden_tf_range_h"):
            lo, hi = getattr(self, name)
            if not 0.0 < lo <= hi <= self.horizon_h:
                raise DataError(f"{name} must lie inside (0, horizon]")
        if self.p0_scale <= 0:
            raise DataError("p0_scale must be positive")

    def n_samples(self) -> int:
        return int(np.floor(self.horizon_h / self.interval_h + 1e-9)) + 1

    def times(self) -> np.ndarray:
        return np.arange(self.n_samples()) * self.interval_h

    def nominal_p0(self, oc: OperatingConditions) -> float:
        slope = self.p0_slope_mw_per_ma * (1.0 - self.p0_slope_tc * (oc.T_C - 20.0))
        i_th = self.i_th0_ma * np.exp((oc.T_C - 20.0) / self.t_char_c)
        return float(self.p0_scale * slope * max(oc.I_mA - i_th, 0.1))

    def acceleration(self, oc: OperatingConditions) -> float:
        af = np.exp(-self.ea_over_k * (1.0 / (oc.T_C + KELVIN) - 1.0 / (self.t_ref_c + KELVIN)))
        return float(af * (oc.I_mA / self.i_ref_ma) ** self.gamma)

    def normal_drift(self, oc: OperatingConditions) -> float:
        """Mean relative power change of a normal device over the horizon."""
        return (
            self.drift_base
            + self.drift_per_10c * (oc.T_C - self.t_ref_c) / 10.0
            + self.drift_per_5ma * (oc.I_mA - self.i_ref_ma) / 5.0
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["oc_grid"] = [list(oc) for oc in self.oc_grid]
        for name in ("gradual_tf_range_h", "sudden_tf_range_h", "sudden_u_range"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown spec keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(str(exc)) from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetSpec":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise DataError(f"{path}: spec must be a JSON object")
        return cls.from_dict(d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Simulation


def _bounded_draw(rng: np.random.Generator, draw, lo: float, hi: float, tries: int = 1000) -> float:
    for _ in range(tries):
        v = draw()
        if lo <= v <= hi:
            return v
    # stress far outside the window: fall back to a uniform draw
    return float(rng.uniform(lo, hi))


def simulate_device(
    kind: str,
    oc: OperatingConditions,
    spec: DatasetSpec,
    seed: int,
    *,
    device_id: int = 0,
    p0: float | None = None,
    rate: float | None = None,
    t_fail: float | None = None,
    u: float | None = None,
    drift: float | None = None,
) -> DeviceTrace:
    """Simulate one device. Keyword overrides pin the random draws (for tests)."""
    if kind not in KINDS:
        raise DataError(f"unknown device kind {kind!r}")
    rng = np.random.default_rng(seed)
    t = spec.times()
    if p0 is None:
        p0 = spec.nominal_p0(oc) * max(1.0 + spec.p0_spread * rng.standard_normal(), 0.1)
    if not p0 > 0:
        raise DataError(f"initial power must be positive, got {p0}")
    noise = spec.noise_rel * p0 * rng.standard_normal(t.size)
    if drift is None:
        drift = float(np.clip(
            spec.normal_drift(oc) + spec.drift_sd * rng.standard_normal(), -spec.drift_max, spec.drift_max
        ))
    failure = None

    if kind == "normal":
        clean = p0 * (1.0 + drift * t / spec.horizon_h)
    elif kind == "gradual":
        if rate is None:
            base = spec.r0_per_h * spec.acceleration(oc)
            lo, hi = spec.gradual_tf_range_h
            tf = _bounded_draw(
                rng, lambda: np.log(1.25) / (base * np.exp(spec.rate_spread * rng.standard_normal())), lo, hi
            )
            rate = np.log(1.25) / tf
        clean = p0 * np.exp(-rate * t)
        failure = float(np.log(1.0 / FAILURE_FRACTION) / rate)
    else:
        if t_fail is None:
            t_fail = float(rng.uniform(*spec.sudden_tf_range_h))
        if u is None:
            u = float(rng.uniform(*spec.sudden_u_range))
        clean = p0 * (1.0 + drift * t / spec.horizon_h)
        clean = np.where(t >= t_fail, u * p0, clean)
        failure = float(t_fail)

    power = np.maximum(clean + noise, 1e-6)
    return DeviceTrace(device_id, spec.batch_id, oc, t, power, kind, float(p0), failure)


def windows(
    trace: DeviceTrace, seq_len: int, stride: int = 1, stop_at_failure: bool = False
) -> WindowSet:
    """Slice a trace into overlapping windows.

    With ``stop_at_failure`` a failing device contributes only windows whose
    first sample precedes or coincides with its failure time, as in a life
    test that stops logging a part once it has failed.
    """
    n = trace.power_mw.size
    if n < seq_len:
        raise DataError(f"trace has {n} samples, fewer than seq_len={seq_len}")
    if stride < 1:
        raise DataError("stride must be >= 1")
    starts = np.arange(0, n - seq_len + 1, stride)
    if stop_at_failure and trace.failure_time_h is not None:
        starts = starts[trace.times_h[starts] <= trace.failure_time_h]
    power = np.stack([trace.power_mw[s : s + seq_len] for s in starts])
    m = starts.size
    return WindowSet(
        power,
        np.full(m, trace.oc.T_C), np.full(m, trace.oc.I_mA),
        np.full(m, trace.label, dtype=object), np.full(m, trace.kind, dtype=object),
        np.full(m, trace.device_id), np.full(m, trace.batch_id),
        trace.times_h[starts],
    )


def simulate_all(spec: DatasetSpec) -> list[DeviceTrace]:
    """All devices of a spec, in a fixed order (kind, grid point, replicate)."""
    traces = []
    idx = 0
    for kind in KINDS:
        for g, (T, I) in enumerate(spec.oc_grid):
            for _ in range(spec.counts.get(kind, [0] * len(spec.oc_grid))[g]):
                oc = OperatingConditions(T, I)
                traces.append(simulate_device(kind, oc, spec, mix64(spec.seed, idx), device_id=idx))
                idx += 1
    return traces


# ---------------------------------------------------------------------------
# Partitioning


@dataclass
class Dataset:
    train: WindowSet
    calib: WindowSet
    test: WindowSet
    spec: DatasetSpec
    manifest: dict

    def partitions(self) -> dict[str, WindowSet]:
        return {"train": self.train, "calib": self.calib, "test": self.test}


def _with_normal_share(
    rng: np.random.Generator, degraded: WindowSet, normal_pool: WindowSet, share: float
) -> WindowSet:
    n_deg = len(degraded)
    n_norm = int(round(n_deg * share / (1.0 - share)))
    if n_norm > len(normal_pool):
        raise DataError(f"need {n_norm} normal windows, only {len(normal_pool)} available")
    pick = np.sort(rng.choice(len(normal_pool), size=n_norm, replace=False))
    return WindowSet.concat([degraded, normal_pool.subset(pick)]).sorted()


def build_dataset(spec: DatasetSpec) -> Dataset:
    """Simulate every device and split them into train / calib / test.

    Splitting is by device. Train holds normal devices only. Calibration and
    test hold failing devices whose failure comes after ``early_cutoff_h``
    plus enough normal windows to reach ``test_normal_fraction``; earlier
    failures are left out. Train is cut to ``train_fraction`` of the total.
    """
    traces = simulate_all(spec)
    rng = np.random.default_rng(mix64(spec.seed, 0xD5E7))
    normal = [tr for tr in traces if tr.failure_time_h is None]
    failing = [tr for tr in traces if tr.failure_time_h is not None]
    late = [tr for tr in failing if tr.failure_time_h > spec.early_cutoff_h]
    if not late:
        raise DataError("no devices failing after the early cutoff; cannot build mixed partitions")
    if not normal:
        raise DataError("no normal devices")

    # stratified by kind so both partitions see every failure mode present
    calib_dev, test_dev = [], []
    for kind in ("gradual", "sudden"):
        group = [tr for tr in late if tr.kind == kind]
        order = rng.permutation(len(group))
        n_calib = int(np.floor(len(group) * spec.calib_share))
        calib_dev += [group[i] for i in order[:n_calib]]
        test_dev += [group[i] for i in order[n_calib:]]
    if not calib_dev or not test_dev:
        raise DataError("need at least two late-failing devices to fill calibration and test")

    def cut(devs):
        if not devs:
            return WindowSet.empty(spec.seq_len)
        return WindowSet.concat(
            [windows(tr, spec.seq_len, spec.stride, spec.stop_at_failure) for tr in devs]
        )

    share = spec.test_normal_fraction
    per_device = len(range(0, spec.n_samples() - spec.seq_len + 1, spec.stride))
    calib_deg, test_deg = cut(calib_dev), cut(test_dev)

    normal_order = [normal[i] for i in rng.permutation(len(normal))]
    taken = 0
    parts_normal = []
    for deg in (calib_deg, test_deg):
        need = int(round(len(deg) * share / (1.0 - share)))
        k = int(np.ceil(need / per_device))
        if taken + k > len(normal_order):
            raise DataError("insufficient normal devices for the requested composition")
        parts_normal.append(normal_order[taken : taken + k])
        taken += k
    train_dev = normal_order[taken:]

    calib = _with_normal_share(rng, calib_deg, cut(parts_normal[0]), share)
    test = _with_normal_share(rng, test_deg, cut(parts_normal[1]), share)

    holdout = len(calib) + len(test)
    target = int(round(holdout * spec.train_fraction / (1.0 - spec.train_fraction)))
    train_pool = cut(train_dev)
    if len(train_pool) < target:
        raise DataError(f"need {target} training windows, only {len(train_pool)} available")
    keep = np.sort(rng.choice(len(train_pool), size=target, replace=False))
    train = train_pool.subset(keep).sorted()

    manifest = {
        "spec_digest": spec.digest(),
        "seed": spec.seed,
        "batch_id": spec.batch_id,
        "devices": {
            "total": len(traces),
            "normal": len(normal),
            "gradual": sum(tr.kind == "gradual" for tr in traces),
            "sudden": sum(tr.kind == "sudden" for tr in traces),
            "excluded_early_failures": len(failing) - len(late),
        },
        "windows": {"train": len(train), "calib": len(calib), "test": len(test)},
        "unused_train_windows": len(train_pool) - target,
        "train_fraction": len(train) / (len(train) + holdout),
        "test_degraded_fraction": float(test.is_degraded.mean()),
        "calib_degraded_fraction": float(calib.is_degraded.mean()),
    }
    return Dataset(train, calib, test, spec, manifest)


def batch_shift(
    spec: DatasetSpec,
    *,
    p0_factor: float = 1.0,
    noise_factor: float = 1.0,
    rate_factor: float = 1.0,
    extra_temperatures: Sequence[float] = (),
    extra_currents: Sequence[float] = (),
    batch_id: int | None = None,
    seed: int | None = None,
) -> DatasetSpec:
    """Derive the spec of another wafer batch.

    Factors scale the mean initial power, the noise level and the degradation
    rate constant; each must lie in ``[0.5, 2]``. Extra temperatures/currents
    extend the operating grid to the full cross product; a new grid point takes
    its device counts from the nearest original grid point.
    """
    for name, f in (("p0_factor", p0_factor), ("noise_factor", noise_factor), ("rate_factor", rate_factor)):
        if not 0.5 <= f <= 2.0:
            raise DataError(f"{name} must lie in [0.5, 2], got {f}")
    if (p0_factor, noise_factor, rate_factor) == (1.0, 1.0, 1.0) and not extra_temperatures \
            and not extra_currents and batch_id is None and seed is None:
        return dataclasses.replace(spec)

    temps = sorted({T for T, _ in spec.oc_grid} | set(map(float, extra_temperatures)))
    currents = sorted({I for _, I in spec.oc_grid} | set(map(float, extra_currents)))
    grid = [(T, I) for T in temps for I in currents]
    def nearest(oc):
        # scaled so one 10 degC step weighs like one 5 mA step; ties go to the earlier grid point
        return min(range(len(spec.oc_grid)),
                   key=lambda g: abs(spec.oc_grid[g][0] - oc[0]) / 10.0 + abs(spec.oc_grid[g][1] - oc[1]) / 5.0)

    counts = {kind: [ns[nearest(oc)] for oc in grid] for kind, ns in spec.counts.items()}
    noise = min(spec.noise_rel * noise_factor, 0.02)
    return dataclasses.replace(
        spec,
        oc_grid=grid,
        counts=counts,
        p0_scale=spec.p0_scale * p0_factor,
        noise_rel=noise,
        r0_per_h=spec.r0_per_h * rate_factor,
        batch_id=spec.batch_id + 1 if batch_id is None else batch_id,
        seed=mix64(spec.seed, 0xBA7C + (batch_id or spec.batch_id + 1)) if seed is None else seed,
    )
