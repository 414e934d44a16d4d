"""Traffic series ingestion, normalization, windowing, batching and synthetic cities."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed input data; the message carries the row/column location."""


class ConfigError(ValueError):
    pass


@dataclass
class TrafficSeries:
    values: np.ndarray  # (N, L)
    node_ids: list[str]
    samples_per_hour: int
    origin_index: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DataError(f"values must be N x L, got shape {self.values.shape}")
        if len(self.node_ids) != self.values.shape[0]:
            raise DataError(f"{len(self.node_ids)} node ids for {self.values.shape[0]} rows")
        if self.samples_per_hour < 1:
            raise DataError("samples_per_hour must be positive")

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int | None = None) -> "TrafficSeries":
        """Columns ``[start, stop)``; ``origin_index`` tracks the absolute position."""
        stop = self.length if stop is None else stop
        return TrafficSeries(
            self.values[:, start:stop].copy(), list(self.node_ids), self.samples_per_hour, self.origin_index + start
        )

    def digest(self) -> str:
        h = hashlib.sha256(self.values.tobytes())
        h.update(f"{self.origin_index}:{self.samples_per_hour}".encode())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    def apply(self, x):
        return (x - self.mean) / self.std

    def invert(self, z):
        return z * self.std + self.mean

    def apply_series(self, series: TrafficSeries) -> TrafficSeries:
        return TrafficSeries(self.apply(series.values), list(series.node_ids), series.samples_per_hour, series.origin_index)


def fit_normalizer(series: TrafficSeries | np.ndarray) -> Normalizer:
    """Z-score statistics over every value of the given (training) range."""
    vals = series.values if isinstance(series, TrafficSeries) else np.asarray(series, dtype=np.float64)
    mean = float(vals.mean())
    std = float(vals.std())
    if not std > 0:
        raise DataError("zero variance in normalization range")
    return Normalizer(mean, std)


@dataclass(frozen=True)
class WindowSample:
    x: np.ndarray  # (N, T)
    y: np.ndarray  # (N, T')
    t_start: int


def make_windows(series: TrafficSeries, T: int, T_out: int, stride: int = 1) -> list[WindowSample]:
    """Sliding windows ordered by start; ``t_start`` is absolute (includes ``origin_index``)."""
    if min(T, T_out, stride) < 1:
        raise ConfigError("T, T_out and stride must all be >= 1")
    L = series.length
    if L < T + T_out:
        raise DataError(f"series length {L} shorter than one window ({T}+{T_out})")
    vals = series.values
    out = []
    for s in range(0, L - T - T_out + 1, stride):
        out.append(WindowSample(vals[:, s : s + T], vals[:, s + T : s + T + T_out], series.origin_index + s))
    return out


def stack_windows(windows: list[WindowSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.stack([w.x for w in windows])
    y = np.stack([w.y for w in windows])
    t = np.array([w.t_start for w in windows], dtype=np.int64)
    return x, y, t


def check_batch_size(batch_size: int, n_parts: int = 3) -> None:
    if batch_size < 2 * n_parts or batch_size % (2 * n_parts):
        raise ConfigError(f"batch_size {batch_size} must be a positive multiple of {2 * n_parts}")


def sample_batch(windows: list[WindowSample], batch_size: int, rng: np.random.Generator, n_parts: int = 3) -> list[WindowSample]:
    """Uniform draw without replacement, returned in ascending ``t_start`` order."""
    check_batch_size(batch_size, n_parts)
    if batch_size > len(windows):
        raise ConfigError(f"batch_size {batch_size} exceeds {len(windows)} available windows")
    idx = np.sort(rng.choice(len(windows), size=batch_size, replace=False))
    return [windows[i] for i in idx]


def epoch_batches(windows: list[WindowSample], batch_size: int, rng: np.random.Generator, n_parts: int = 3):
    """One shuffled pass over ``windows`` in sorted batches; the ragged tail is dropped."""
    check_batch_size(batch_size, n_parts)
    perm = rng.permutation(len(windows))
    for i in range(len(windows) // batch_size):
        idx = np.sort(perm[i * batch_size : (i + 1) * batch_size])
        yield [windows[j] for j in idx]


# ------------------------------------------------------------------------ CSV


def _parse_time(cell: str):
    try:
        return int(cell)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(cell)
    except ValueError:
        return None


def load_csv(path: str | Path, samples_per_hour: int) -> TrafficSeries:
    """Read ``timestamp,<node_1>,...`` into an N x L series, forward-filling gaps."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    node_ids = header[1:]
    if len(node_ids) < 2:
        raise DataError(f"{path}: row 1: need at least 2 node columns, found {len(node_ids)}")
    body = rows[1:]
    if not body:
        raise DataError(f"{path}: no data rows")
    vals = np.full((len(body), len(node_ids)), np.nan)
    stamps = []
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r}: expected {len(header)} cells, found {len(row)}")
        stamps.append(_parse_time(row[0].strip()))
        for c, cell in enumerate(row[1:]):
            cell = cell.strip()
            if cell == "":
                continue
            try:
                vals[r - 2, c] = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {r}, column {node_ids[c]!r}: non-numeric cell {cell!r}") from None
    for c, name in enumerate(node_ids):
        col = vals[:, c]
        seen = np.flatnonzero(~np.isnan(col))
        if seen.size == 0:
            raise DataError(f"{path}: column {name!r}: no observed values")
        col[: seen[0]] = col[seen[0]]
        for i in range(seen[0] + 1, len(col)):
            if np.isnan(col[i]):
                col[i] = col[i - 1]
    if not np.all(np.isfinite(vals)):
        r, c = np.argwhere(~np.isfinite(vals))[0]
        raise DataError(f"{path}: row {r + 2}, column {node_ids[c]!r}: non-finite value")
    if all(isinstance(s, datetime) for s in stamps) and len(stamps) > 1:
        expected = 3600.0 / samples_per_hour
        deltas = np.diff([s.timestamp() for s in stamps])
        bad = np.flatnonzero(np.abs(deltas - expected) > 1e-6)
        if bad.size:
            raise DataError(
                f"{path}: row {bad[0] + 3}: timestamp step {deltas[bad[0]]:.0f}s, expected {expected:.0f}s"
            )
        origin = 0
    elif isinstance(stamps[0], int):
        origin = stamps[0]
    else:
        origin = 0
    return TrafficSeries(vals.T.copy(), node_ids, samples_per_hour, origin)


def save_csv(series: TrafficSeries, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *series.node_ids])
        for j in range(series.length):
            w.writerow([series.origin_index + j, *(repr(float(v)) for v in series.values[:, j])])


def few_shot_split(series: TrafficSeries, days: int = 7) -> tuple[TrafficSeries, TrafficSeries]:
    """First ``days`` days for fine-tuning, the rest for testing."""
    cut = days * 24 * series.samples_per_hour
    if cut >= series.length:
        raise DataError(f"series of length {series.length} has no test range after {days} days")
    return series.slice(0, cut), series.slice(cut)


# ------------------------------------------------------------------ synthetic


@dataclass(frozen=True)
class CityProfile:
    base_speed: tuple[float, float] = (55.0, 65.0)
    daily_amp: tuple[float, float] = (8.0, 14.0)
    weekly_amp: tuple[float, float] = (1.5, 4.0)
    phase_spread: float = 1.0  # radians, half-width of per-node phase offsets
    coupling: float = 0.5
    noise: float = 1.5
    noise_ar: float = 0.8  # AR(1) coefficient of the Gaussian noise
    chords: int = 3


PROFILES = {
    "source": CityProfile(),
    "target": CityProfile(
        base_speed=(30.0, 40.0),
        daily_amp=(5.0, 10.0),
        weekly_amp=(1.0, 3.0),
        phase_spread=1.4,
        coupling=0.4,
        noise=1.2,
        noise_ar=0.8,
        chords=2,
    ),
}


def latent_graph(n_nodes: int, chords: int, rng: np.random.Generator) -> np.ndarray:
    """Symmetric ring plus ``chords`` random extra edges per node (no self loops)."""
    adj = np.zeros((n_nodes, n_nodes), dtype=bool)
    for i in range(n_nodes):
        adj[i, (i + 1) % n_nodes] = adj[(i + 1) % n_nodes, i] = True
    for i in range(n_nodes):
        for j in rng.choice(n_nodes, size=min(chords, n_nodes - 1), replace=False):
            if j != i:
                adj[i, j] = adj[j, i] = True
    np.fill_diagonal(adj, False)
    return adj


def synth_city(
    n_nodes: int,
    length: int,
    samples_per_hour: int,
    seed: int,
    profile: str | CityProfile = "source",
    **overrides,
) -> TrafficSeries:
    """Sinusoidal daily + weekly speeds with graph coupling and AR(1) Gaussian noise."""
    if n_nodes < 2:
        raise DataError("synthetic city needs at least 2 nodes")
    prof = PROFILES[profile] if isinstance(profile, str) else profile
    if overrides:
        prof = CityProfile(**{**prof.__dict__, **overrides})
    rng = np.random.default_rng(seed)
    adj = latent_graph(n_nodes, prof.chords, rng)
    base = rng.uniform(*prof.base_speed, size=(n_nodes, 1))
    a_d = rng.uniform(*prof.daily_amp, size=(n_nodes, 1))
    a_w = rng.uniform(*prof.weekly_amp, size=(n_nodes, 1))
    phi = rng.uniform(-prof.phase_spread, prof.phase_spread, size=(n_nodes, 1))
    psi = rng.uniform(-np.pi, np.pi, size=(n_nodes, 1))
    pos = np.arange(length)[None, :]
    day = 24 * samples_per_hour
    periodic = a_d * np.sin(2 * np.pi * pos / day + phi) + a_w * np.sin(2 * np.pi * pos / (day * 7) + psi)
    deg = adj.sum(axis=1, keepdims=True)
    neigh = (adj @ periodic) / np.maximum(deg, 1)
    eps = rng.normal(0.0, prof.noise, size=(n_nodes, length))
    noise = np.empty_like(eps)
    if length:
        noise[:, 0] = eps[:, 0]
        for t in range(1, length):
            noise[:, t] = prof.noise_ar * noise[:, t - 1] + eps[:, t]
    values = base + periodic + prof.coupling * neigh + noise
    ids = [f"n{i:03d}" for i in range(n_nodes)]
    return TrafficSeries(values, ids, samples_per_hour, 0)


@dataclass
class CityPair:
    source: TrafficSeries
    target: TrafficSeries
    meta: dict = field(default_factory=dict)


def synth_pair(
    n_source: int = 20,
    n_target: int = 12,
    source_days: int = 30,
    target_days: int = 14,
    samples_per_hour: int = 6,
    seed: int = 0,
) -> CityPair:
    day = 24 * samples_per_hour
    src = synth_city(n_source, source_days * day, samples_per_hour, seed, "source")
    tgt = synth_city(n_target, target_days * day, samples_per_hour, seed + 10_007, "target")
    return CityPair(src, tgt, {"seed": seed, "source_days": source_days, "target_days": target_days})
