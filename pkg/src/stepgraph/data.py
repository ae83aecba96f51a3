"""Datasets, the STSF container, z-score normalization, windowing and synthetic data."""
from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from datetime import datetime

import numpy as np

MAGIC = b"STSF"
VERSION = 1
REQUIRED_KEYS = ("T", "N", "C", "steps_per_day", "name", "channel_names")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)

    def apply(self, values):
        return (values - self.mean) / self.std

    def inverse(self, values):
        return values * self.std + self.mean


@dataclass
class RawDataset:
    values: np.ndarray  # (T, N, C)
    steps_per_day: int
    name: str = "dataset"
    channel_names: list = field(default_factory=lambda: ["value"])
    missing: np.ndarray | None = None
    norm_stats: NormStats | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise DataError(f"values must be a non-empty (T, N, C) array, got {self.values.shape}")
        if self.missing is None:
            self.missing = np.zeros(self.values.shape, dtype=bool)
        if self.missing.shape != self.values.shape:
            raise DataError("missing mask shape differs from values")
        if len(self.channel_names) != self.C:
            raise DataError(f"{len(self.channel_names)} channel names for {self.C} channels")

    @property
    def T(self):
        return self.values.shape[0]

    @property
    def N(self):
        return self.values.shape[1]

    @property
    def C(self):
        return self.values.shape[2]


@dataclass(frozen=True)
class SplitSpec:
    train: tuple
    val: tuple
    test: tuple
    fractions: tuple = (0.7, 0.1, 0.2)

    def __getitem__(self, name):
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def resolve_split(T, fractions=(0.7, 0.1, 0.2)):
    """Contiguous chronological train/val/test ranges covering [0, T)."""
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    a = int(round(T * fractions[0]))
    b = int(round(T * (fractions[0] + fractions[1])))
    return SplitSpec((0, a), (a, b), (b, T), tuple(float(f) for f in fractions))


# -- STSF container ------------------------------------------------------------
def save_dataset(ds, path):
    values = ds.values.astype("<f4")
    header = {
        "T": ds.T, "N": ds.N, "C": ds.C,
        "steps_per_day": int(ds.steps_per_day),
        "name": ds.name,
        "channel_names": list(ds.channel_names),
    }
    if ds.missing.any():
        values = values.copy()
        values[ds.missing] = np.nan
        header["missing"] = "nan"
    if ds.norm_stats is not None:
        header["norm_stats"] = {"mean": ds.norm_stats.mean.tolist(), "std": ds.norm_stats.std.tolist()}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = MAGIC + bytes([VERSION]) + struct.pack("<I", len(blob)) + blob + values.tobytes(order="C")
    atomic_write(path, payload)


def load_dataset(path):
    """Read an STSF file, or a CSV in long form (timestamp,node,channel,value)."""
    if str(path).lower().endswith(".csv"):
        return load_csv(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise DataError(f"{path}: bad magic at byte 0 (expected b'STSF', got {raw[:4]!r})")
    if len(raw) < 9:
        raise DataError(f"{path}: truncated header at byte {len(raw)}")
    if raw[4] != VERSION:
        raise DataError(f"{path}: unsupported version {raw[4]} at byte 4")
    (hlen,) = struct.unpack("<I", raw[5:9])
    if len(raw) < 9 + hlen:
        raise DataError(f"{path}: header truncated at byte {len(raw)} (needs {9 + hlen})")
    try:
        header = json.loads(raw[9:9 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed JSON header at byte 9: {exc}") from None
    missing_keys = [k for k in REQUIRED_KEYS if k not in header]
    if missing_keys:
        raise DataError(f"{path}: header missing keys {missing_keys}")
    T, N, C = int(header["T"]), int(header["N"]), int(header["C"])
    start = 9 + hlen
    need = T * N * C * 4
    if len(raw) - start < need:
        raise DataError(f"{path}: payload truncated at byte {len(raw)} (expected {start + need})")
    if len(raw) - start > need:
        raise DataError(f"{path}: {len(raw) - start - need} trailing bytes after byte {start + need}")
    values = np.frombuffer(raw, dtype="<f4", count=T * N * C, offset=start).astype(np.float64)
    bad = ~np.isfinite(values)
    if bad.any() and header.get("missing") != "nan":
        first = int(np.flatnonzero(bad)[0])
        raise DataError(f"{path}: non-finite value at byte {start + 4 * first} without missing flag")
    values = values.reshape(T, N, C)
    missing = bad.reshape(T, N, C)
    values[missing] = 0.0
    stats = header.get("norm_stats")
    return RawDataset(
        values=values,
        steps_per_day=int(header["steps_per_day"]),
        name=str(header["name"]),
        channel_names=list(header["channel_names"]),
        missing=missing,
        norm_stats=NormStats(np.array(stats["mean"]), np.array(stats["std"])) if stats else None,
    )


def _parse_time(text):
    try:
        return float(text)
    except ValueError:
        return datetime.fromisoformat(text).timestamp()


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_csv(path, steps_per_day=None, name=None):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        if not {"timestamp", "node", "channel", "value"} <= cols:
            raise DataError(f"{path}: CSV needs columns timestamp,node,channel,value; got {sorted(cols)}")
        for row in reader:
            rows.append((row["timestamp"], row["node"], row["channel"], row["value"]))
    if not rows:
        raise DataError(f"{path}: empty CSV")
    times = sorted({r[0] for r in rows}, key=_parse_time)
    nodes = sorted({r[1] for r in rows}, key=lambda s: (len(s), s))
    channels = sorted({r[2] for r in rows})
    ti = {t: i for i, t in enumerate(times)}
    ni = {n: i for i, n in enumerate(nodes)}
    ci = {c: i for i, c in enumerate(channels)}
    values = np.zeros((len(times), len(nodes), len(channels)))
    missing = np.ones(values.shape, dtype=bool)
    for t, n, c, v in rows:
        x = float(v) if v.strip() else math.nan
        if math.isfinite(x):
            values[ti[t], ni[n], ci[c]] = x
            missing[ti[t], ni[n], ci[c]] = False
    if steps_per_day is None:
        steps_per_day = 288
        if len(times) > 1 and not _is_number(times[0]):
            stamps = np.array([_parse_time(t) for t in times])
            steps_per_day = int(round(86400.0 / float(np.median(np.diff(stamps)))))
    return RawDataset(values, int(steps_per_day), name or os.path.splitext(os.path.basename(path))[0],
                      channels, missing)


def atomic_write(path, payload):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# -- normalization ---------------------------------------------------------------
def fit_apply_zscore(ds, split):
    """Per-channel z-score with statistics fitted on the training range only."""
    a, b = split.train
    vals = ds.values[a:b]
    keep = ~ds.missing[a:b]
    mean = np.zeros(ds.C)
    std = np.zeros(ds.C)
    for c in range(ds.C):
        x = vals[..., c][keep[..., c]]
        if x.size == 0:
            raise DataError(f"channel {ds.channel_names[c]!r} has no observed training values")
        mean[c] = x.mean()
        std[c] = x.std()
        if std[c] == 0:
            raise DataError(f"channel {ds.channel_names[c]!r} is constant over the training range")
    stats = NormStats(mean, std)
    normed = np.where(ds.missing, 0.0, stats.apply(ds.values))
    return replace(ds, values=normed, norm_stats=stats)


def inverse_zscore(values, stats):
    return stats.inverse(values) if stats is not None else values


# -- windows -----------------------------------------------------------------------
@dataclass
class PatchWindow:
    node: int
    start: int
    patches: np.ndarray  # (P, L*C)
    mask: object = None


@dataclass
class ForecastSample:
    start: int  # first step of the P*L long history
    history: np.ndarray  # (N, L, C): the final patch per node
    target: np.ndarray  # (T_f, N, C)
    history_len: int  # P*L

    @property
    def target_start(self):
        return self.start + self.history_len


def window_starts(split_range, span, stride=1, lookback=False):
    """Starts t0 with [t0, t0+span) inside the range.

    With ``lookback`` the window only needs to *end* inside the range and
    may reach back before it (never before step 0).
    """
    lo, hi = split_range
    if stride < 1:
        raise DataError("stride must be >= 1")
    if lookback:
        first = max(0, lo - span + 1)
        starts = np.arange(first, hi - span + 1, stride)
        return starts[starts + span > lo]
    if hi - lo < span:
        raise DataError(f"window of {span} steps longer than split range [{lo}, {hi})")
    return np.arange(lo, hi - span + 1, stride)


def patchify(values, starts, P, L):
    """(T, N, C) values -> (S, N, P, L*C) patches for the given window starts."""
    T, N, C = values.shape
    starts = np.asarray(starts, dtype=np.intp)
    idx = starts[:, None] + np.arange(P * L)[None, :]
    w = values[idx]  # (S, P*L, N, C)
    w = w.reshape(len(starts), P, L, N, C).transpose(0, 3, 1, 2, 4)
    return np.ascontiguousarray(w.reshape(len(starts), N, P, L * C))


def make_pretrain_windows(ds, split_range, P, L, stride=None, lookback=False):
    """One PatchWindow per (node, start); count = N * (floor((range - P*L) / stride) + 1)."""
    stride = L if stride is None else stride
    starts = window_starts(split_range, P * L, stride, lookback)
    patches = patchify(ds.values, starts, P, L)
    return [PatchWindow(node=i, start=int(t0), patches=patches[s, i])
            for s, t0 in enumerate(starts) for i in range(ds.N)]


def forecast_starts(split_range, P, L, T_f, lookback=False):
    """Stride-1 starts of P*L history followed by a T_f target inside the range."""
    lo, hi = split_range
    span = P * L + T_f
    if lookback:
        # the target must lie inside the range; history may precede it
        first = max(0, lo - P * L)
        return np.arange(first, hi - span + 1)
    if hi - lo < span:
        raise DataError(f"history + horizon of {span} steps longer than split range [{lo}, {hi})")
    return np.arange(lo, hi - span + 1)


def make_forecast_samples(ds, split_range, P, L, T_f=12, lookback=False):
    starts = forecast_starts(split_range, P, L, T_f, lookback)
    out = []
    for t0 in starts:
        t0 = int(t0)
        end = t0 + P * L
        hist = ds.values[end - L:end].transpose(1, 0, 2)
        out.append(ForecastSample(t0, hist.copy(), ds.values[end:end + T_f].copy(), P * L))
    return out


# -- synthetic data --------------------------------------------------------------------
def ring_graph(order, k):
    """Directed k-regular graph linking each node to its k nearest positions on a ring."""
    n = len(order)
    pos = np.empty(n, dtype=int)
    pos[order] = np.arange(n)
    offsets = []
    step = 1
    while len(offsets) < k:
        offsets.append(step)
        if len(offsets) < k:
            offsets.append(-step)
        step += 1
    adj = np.zeros((n, n))
    for i in range(n):
        for off in offsets:
            adj[i, order[(pos[i] + off) % n]] = 1.0
    return adj


def generate_synthetic(seed, N=12, days=28, steps_per_day=48, k_planted=2, noise_sd=0.1,
                       coupling=0.3, weekend_factor=0.6, level=10.0, phase_jitter=0.1):
    """Periodic multivariate series with a planted dependency graph.

    Nodes are placed on a ring in random order; each node's planted
    neighbours are its nearest ring positions and its daily phase is set by
    its ring position, so planted neighbours have close phases. Each series
    is a daily sinusoid, scaled down on weekend days, plus ``coupling``
    times the mean deviation of its planted neighbours at the previous step,
    plus Gaussian noise.
    """
    if N < 2 or days < 14 or steps_per_day < 2 or not 1 <= k_planted < N or noise_sd < 0:
        raise DataError(f"invalid synthetic spec: N={N}, days={days}, steps_per_day={steps_per_day}, "
                        f"k_planted={k_planted}, noise_sd={noise_sd}")
    if not 0 <= coupling < 1:
        raise DataError("coupling must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(N)
    adj = ring_graph(order, k_planted)
    pos = np.empty(N, dtype=int)
    pos[order] = np.arange(N)
    phase = 2 * math.pi * pos / N + rng.normal(0.0, phase_jitter, N)
    amp = rng.uniform(0.8, 1.2, N)
    base = level + rng.uniform(-1.0, 1.0, N)

    T = days * steps_per_day
    t = np.arange(T)
    weekly = np.where((t // steps_per_day) % 7 < 5, 1.0, weekend_factor)
    signal = amp[None, :] * weekly[:, None] * np.sin(2 * math.pi * (t % steps_per_day)[:, None] / steps_per_day + phase[None, :])
    noise = rng.normal(0.0, noise_sd, (T, N)) if noise_sd > 0 else np.zeros((T, N))
    mix = adj / adj.sum(axis=1, keepdims=True)
    dev = np.zeros((T, N))
    prev = np.zeros(N)
    for step in range(T):
        prev = signal[step] + coupling * (mix @ prev) + noise[step]
        dev[step] = prev
    values = (base[None, :] + dev).astype(np.float32).astype(np.float64)[:, :, None]
    ds = RawDataset(values, steps_per_day, name=f"synthetic-{seed}", channel_names=["value"])
    return ds, adj
