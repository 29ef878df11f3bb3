"""Dataset loading, chronological splits, z-scoring and sliding windows."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError, ProtocolError

log = logging.getLogger(__name__)

PROTOCOLS = ("ett_hourly", "ett_quarter", "ratio712")
SPLITS = ("train", "val", "test")
STD_FLOOR = 1e-8

# 30-day months, 12/4/4 split
_ETT_STEPS_PER_DAY = {"ett_hourly": 24, "ett_quarter": 96}


@dataclass(frozen=True)
class Dataset:
    name: str
    values: np.ndarray  # T x N, time-major
    columns: tuple[str, ...] = ()
    split_bounds: tuple[int, int] | None = None
    train_mean: np.ndarray | None = None
    train_std: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def normalized(self) -> bool:
        return self.train_mean is not None

    def split_range(self, split: str) -> tuple[int, int]:
        if self.split_bounds is None:
            raise ProtocolError("dataset has not been split")
        a, b = self.split_bounds
        ranges = {"train": (0, a), "val": (a, b), "test": (b, self.T)}
        if split not in ranges:
            raise ProtocolError(f"unknown split {split!r}; expected one of {SPLITS}")
        return ranges[split]

    def split_values(self, split: str) -> np.ndarray:
        lo, hi = self.split_range(split)
        return self.values[lo:hi]


def load_csv(path: str | Path) -> Dataset:
    """Read a ``date,ch1,...,chN`` file. The date column is kept out of the values."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"dataset file not found: {path}")
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(header) < 2:
            raise ParseError(f"{path}, line 1: need a timestamp column and at least one channel")
        width = len(header)
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                raise ParseError(f"{path}, line {line}: blank line")
            if len(row) != width:
                raise ParseError(f"{path}, line {line}: expected {width} fields, found {len(row)}")
            vals = []
            for col, cell in enumerate(row[1:], start=2):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}, line {line}, column {col}: non-numeric value {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    if not np.isfinite(values).all():
        raise ParseError(f"{path}: non-finite values")
    return Dataset(name=path.stem, values=values, columns=tuple(header[1:]))


def write_csv(ds: Dataset, path: str | Path, start: str = "2020-01-01 00:00:00", freq: str = "h") -> None:
    """Write the TSLib layout; timestamps are synthetic and evenly spaced."""
    import datetime as dt

    step = {"h": dt.timedelta(hours=1), "15min": dt.timedelta(minutes=15)}[freq]
    t0 = dt.datetime.fromisoformat(start)
    cols = ds.columns or tuple(f"ch{i + 1}" for i in range(ds.N))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("date",) + tuple(cols))
        for t, row in enumerate(ds.values):
            w.writerow([(t0 + t * step).strftime("%Y-%m-%d %H:%M:%S")] + [repr(float(v)) for v in row])


def split_bounds(T: int, protocol: str) -> tuple[int, int]:
    if protocol in _ETT_STEPS_PER_DAY:
        month = 30 * _ETT_STEPS_PER_DAY[protocol]
        train_end, val_end, test_end = 12 * month, 16 * month, 20 * month
        if T < test_end:
            raise ProtocolError(f"{protocol} needs at least {test_end} steps, dataset has {T}")
        return train_end, val_end
    if protocol == "ratio712":
        train_end = int(np.floor(0.7 * T))
        val_end = train_end + int(np.floor(0.1 * T))
        if not 0 < train_end < val_end < T:
            raise ProtocolError(f"ratio712 cannot split a series of length {T}")
        return train_end, val_end
    raise ProtocolError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")


def split(ds: Dataset, protocol: str) -> Dataset:
    """Attach chronological train/val/test bounds.

    The ETT protocols use only the first 20 (30-day) months; anything past
    that is dropped, matching the usual benchmark files.
    """
    a, b = split_bounds(ds.T, protocol)
    values = ds.values
    if protocol in _ETT_STEPS_PER_DAY:
        values = values[: 20 * 30 * _ETT_STEPS_PER_DAY[protocol]]
    return replace(ds, values=values, split_bounds=(a, b), meta={**ds.meta, "protocol": protocol})


def normalize(ds: Dataset) -> Dataset:
    """Z-score every split with statistics from the train slice only."""
    if ds.split_bounds is None:
        raise ProtocolError("normalize() requires split() first")
    train = ds.split_values("train")
    mean = train.mean(axis=0)
    std = np.maximum(train.std(axis=0), STD_FLOOR)
    return replace(ds, values=(ds.values - mean) / std, train_mean=mean, train_std=std)


@dataclass
class WindowBatch:
    inputs: np.ndarray  # B x N x L
    targets: np.ndarray  # B x N x H
    starts: np.ndarray  # absolute index of each input window's first step

    def __len__(self) -> int:
        return len(self.starts)


def window_starts(ds: Dataset, split_name: str, L: int, H: int) -> np.ndarray:
    lo, hi = ds.split_range(split_name)
    count = (hi - lo) - (L + H) + 1
    return lo + np.arange(max(count, 0))


def windows(
    ds: Dataset,
    split_name: str,
    L: int,
    H: int,
    batch_size: int = 32,
    shuffle_seed: int | None = None,
) -> list[WindowBatch]:
    """Cut a split into (input, target) windows that never cross a split boundary.

    Train windows are shuffled with ``shuffle_seed``; other splits stay in
    chronological order.
    """
    starts = window_starts(ds, split_name, L, H)
    if starts.size == 0:
        lo, hi = ds.split_range(split_name)
        warnings.warn(
            f"{split_name} split has {hi - lo} steps, fewer than L+H={L + H}; no windows",
            stacklevel=2,
        )
        return []
    if split_name == "train" and shuffle_seed is not None:
        starts = np.random.default_rng(shuffle_seed).permutation(starts)
    series = ds.values.T  # N x T
    batches = []
    for i in range(0, starts.size, batch_size):
        s = starts[i : i + batch_size]
        idx = s[:, None] + np.arange(L + H)[None, :]
        block = series[:, idx].transpose(1, 0, 2)  # B x N x (L+H)
        batches.append(WindowBatch(block[..., :L].copy(), block[..., L:].copy(), s))
    return batches


def synth_grouped(
    N: int,
    T: int,
    G: int,
    noise: float = 0.1,
    seed: int = 0,
    period: int = 24,
) -> tuple[Dataset, np.ndarray]:
    """Channels in G groups, each group a different stable linear filter of one driver.

    The shared driver is white innovations plus a weak seasonal term of
    ``period``. Group g passes it through a damped AR(2) resonator. Groups are
    paired on a common resonance frequency, one slowly decaying (predictable
    far ahead) and one quickly decaying, so the groups overlap in frequency
    yet need different forecasters; a single shared linear map cannot serve
    both. Channel i = mixing[i] * group_signal[g(i)] + noise * eps, with
    groups assigned round-robin; labels are returned alongside.
    """
    if not 1 <= G <= N:
        raise ProtocolError(f"group count G={G} must lie in [1, N={N}]")
    rng = np.random.default_rng(seed)
    labels = np.arange(N) % G
    burn = 500
    t = np.arange(T + burn)
    driver = rng.standard_normal(t.size) + 0.2 * np.sin(2 * np.pi * t / period)

    group_signal = np.zeros((G, t.size))
    freqs = rng.uniform(0.01, 0.03, (G + 1) // 2)
    for g in range(G):
        rho = rng.uniform(0.995, 0.999) if g % 2 == 0 else rng.uniform(0.8, 0.9)
        f = freqs[g // 2]
        a1, a2 = 2 * rho * np.cos(2 * np.pi * f), -rho * rho
        x = np.zeros(t.size)
        for k in range(2, t.size):
            x[k] = a1 * x[k - 1] + a2 * x[k - 2] + driver[k]
        group_signal[g] = x / x[burn:].std()
    mixing = rng.uniform(0.5, 1.5, N) * rng.choice([-1.0, 1.0], N)
    values = mixing[:, None] * group_signal[labels] + noise * rng.standard_normal((N, t.size))
    ds = Dataset(
        name="synth_grouped",
        values=values[:, burn:].T.copy(),
        columns=tuple(f"ch{i + 1}" for i in range(N)),
        meta={"G": G, "noise": noise, "seed": seed},
    )
    return ds, labels


def write_labels(labels: np.ndarray, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"groups": [int(g) for g in labels]}))
