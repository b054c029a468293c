"""Dense representations of event streams: stack image, voxel grid, EST."""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError
from .events import EventStream


class RepKind(Enum):
    STACK = "stack"
    VOXEL = "voxel"
    EST = "est"


@dataclass
class RepTensor:
    data: np.ndarray  # (C, H, W)
    kind: RepKind
    bins: int  # temporal bin count B (1 for stack)

    def __post_init__(self):
        if not np.all(np.isfinite(self.data)):
            raise ConfigError("non-finite representation values")


def _normalized_times(ts: np.ndarray, scale: float) -> np.ndarray:
    """Map timestamps to [0, scale]; single-timestamp streams collapse to 0."""
    t0 = ts[0]
    span = ts[-1] - t0
    if span == 0:
        return np.zeros(len(ts))
    return scale * (ts - t0).astype(np.float64) / span


def encode_stack(stream: EventStream, n_fixed: int,
                 normalize: bool = True) -> RepTensor:
    """Polarity-signed counts of the most recent n_fixed events, one channel."""
    if n_fixed < 1:
        raise ConfigError("n_fixed must be >= 1")
    grid = np.zeros((1, stream.height, stream.width))
    if len(stream):
        lo = max(0, len(stream) - n_fixed)
        np.add.at(grid[0], (stream.ys[lo:], stream.xs[lo:]),
                  stream.ps[lo:].astype(np.float64))
        if normalize:
            m = np.abs(grid).max()
            if m > 0:
                grid /= m
    return RepTensor(grid, RepKind.STACK, 1)


def _bilinear_deposit(grid, stream, tstar, values):
    """Deposit `values` split bilinearly between the two adjacent bins."""
    b = grid.shape[0]
    left = np.floor(tstar).astype(np.int64)
    frac = tstar - left
    np.add.at(grid, (left, stream.ys, stream.xs), values * (1.0 - frac))
    right_ok = left + 1 < b
    np.add.at(grid, (left[right_ok] + 1, stream.ys[right_ok],
                     stream.xs[right_ok]), values[right_ok] * frac[right_ok])


def encode_voxel_grid(stream: EventStream, b: int,
                      normalize: bool = True) -> RepTensor:
    """B-bin spatiotemporal histogram with bilinear temporal interpolation.

    t* = (B-1) * (t - t_first) / (t_last - t_first); each event deposits
    p * (1 - |bin - t*|) into its two adjacent bins.
    """
    if b < 1:
        raise ConfigError("bin count must be >= 1")
    grid = np.zeros((b, stream.height, stream.width))
    if len(stream):
        tstar = _normalized_times(stream.ts, float(b - 1))
        _bilinear_deposit(grid, stream, tstar, stream.ps.astype(np.float64))
        if normalize:
            m = np.abs(grid).max()
            if m > 0:
                grid /= m
    return RepTensor(grid, RepKind.VOXEL, b)


def encode_est(stream: EventStream, b: int, normalize: bool = True,
               measurement: str = "timestamp") -> RepTensor:
    """Event spike tensor: polarity-separated bins, trilinear-kernel variant.

    Positive events fill channels 0..b-1, negative b..2b-1. The deposited
    measurement is the event's normalized timestamp ("timestamp") or 1.0
    ("unit"); the unit configuration recovers the voxel grid when the two
    polarity groups are combined with signs.
    """
    if b < 1:
        raise ConfigError("bin count must be >= 1")
    if measurement not in ("timestamp", "unit"):
        raise ConfigError(f"unknown measurement '{measurement}'")
    grid = np.zeros((2 * b, stream.height, stream.width))
    if len(stream):
        tstar = _normalized_times(stream.ts, float(b - 1))
        tnorm = _normalized_times(stream.ts, 1.0)
        vals = tnorm if measurement == "timestamp" else np.ones(len(stream))
        for pol, lo in ((1, 0), (-1, b)):
            sel = stream.ps == pol
            sub = EventStream(stream.xs[sel], stream.ys[sel], stream.ts[sel],
                              stream.ps[sel], stream.width, stream.height,
                              validate=False)
            _bilinear_deposit(grid[lo:lo + b], sub, tstar[sel], vals[sel])
        if normalize:
            m = np.abs(grid).max()
            if m > 0:
                grid /= m
    return RepTensor(grid, RepKind.EST, b)


def encode_all(stream: EventStream, n_fixed: int, voxel_bins: int,
               est_bins: int, normalize: bool = True):
    """The fixed (stack, voxel, EST) triple consumed by the target models."""
    return (encode_stack(stream, n_fixed, normalize),
            encode_voxel_grid(stream, voxel_bins, normalize),
            encode_est(stream, est_bins, normalize))
