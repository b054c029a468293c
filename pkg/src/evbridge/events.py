"""Event data model, synthetic event-camera generator, N-MNIST codec."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, EmptyInputError, FormatError, RangeError

NMNIST_W = 34
NMNIST_H = 34

SHAPE_KINDS = ("bar", "disc", "cross", "ring")


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int  # microseconds
    p: int  # +1 or -1


class EventStream:
    """Ordered (x, y, t, p) records plus sensor geometry.

    Internally columnar (numpy int64 arrays) so encoders can vectorize.
    """

    def __init__(self, xs, ys, ts, ps, width, height, label=None,
                 validate=True):
        self.xs = np.asarray(xs, dtype=np.int64)
        self.ys = np.asarray(ys, dtype=np.int64)
        self.ts = np.asarray(ts, dtype=np.int64)
        self.ps = np.asarray(ps, dtype=np.int64)
        self.width = int(width)
        self.height = int(height)
        self.label = label
        if validate:
            self._validate()

    def _validate(self):
        n = len(self.xs)
        if not (len(self.ys) == len(self.ts) == len(self.ps) == n):
            raise FormatError("event columns have mismatched lengths")
        if n == 0:
            return
        if self.ts.min() < 0:
            raise FormatError("negative timestamp")
        if np.any(np.diff(self.ts) < 0):
            raise FormatError("timestamps are not non-decreasing")
        if (self.xs.min() < 0 or self.xs.max() >= self.width
                or self.ys.min() < 0 or self.ys.max() >= self.height):
            raise FormatError("event coordinates outside sensor geometry")
        if not np.all(np.abs(self.ps) == 1):
            raise FormatError("polarity must be +1 or -1")

    def __len__(self):
        return len(self.xs)

    def __iter__(self):
        for x, y, t, p in zip(self.xs, self.ys, self.ts, self.ps):
            yield Event(int(x), int(y), int(t), int(p))

    @classmethod
    def from_events(cls, events: Sequence[Event], width, height, label=None):
        xs = [e.x for e in events]
        ys = [e.y for e in events]
        ts = [e.t for e in events]
        ps = [e.p for e in events]
        return cls(xs, ys, ts, ps, width, height, label=label)

    @classmethod
    def empty(cls, width, height, label=None):
        return cls([], [], [], [], width, height, label=label)

    def with_label(self, label):
        return EventStream(self.xs, self.ys, self.ts, self.ps, self.width,
                           self.height, label=label, validate=False)


@dataclass
class IntensityFrame:
    pixels: np.ndarray  # (H, W) in [0, 1]
    timestamp: int  # microseconds, frame midpoint

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if not np.all(np.isfinite(self.pixels)):
            raise RangeError("non-finite intensity values")
        if self.pixels.min() < -1e-12 or self.pixels.max() > 1.0 + 1e-12:
            raise RangeError("intensity values outside [0, 1]")


@dataclass
class SceneSpec:
    class_index: int
    shape: str  # one of SHAPE_KINDS
    velocity: tuple  # (vx, vy) pixels per millisecond
    theta: float  # contrast threshold, log-intensity units
    duration_us: int
    noise_rate: float  # events / pixel / second
    width: int = 24
    height: int = 24
    start: Optional[tuple] = None  # (x0, y0) center; default sensor center
    size: float = 0.3  # shape scale as a fraction of min(width, height)
    step_us: int = 1000
    onset_us: int = 0  # contrast ramp-in time; 0 = shape present from t=0
    onset_spread_us: int = 0  # per-pixel random switch-on window; 0 = off

    def __post_init__(self):
        if self.shape not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind '{self.shape}'")
        if self.theta <= 0 or self.duration_us <= 0 or self.noise_rate < 0:
            raise ConfigError("need theta > 0, duration > 0, noise rate >= 0")
        if self.size <= 0:
            raise ConfigError("zero-area shape")


def _render_mask(spec: SceneSpec, cx: float, cy: float) -> np.ndarray:
    """Binary occupancy of the moving shape at center (cx, cy)."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]
    r = spec.size * min(w, h) / 2.0
    dx = xx - cx
    dy = yy - cy
    if spec.shape == "bar":
        return (np.abs(dx) <= max(1.0, r / 3.0)) & (np.abs(dy) <= r)
    if spec.shape == "disc":
        return dx * dx + dy * dy <= r * r
    if spec.shape == "cross":
        arm = max(1.0, r / 3.0)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    # ring
    d2 = dx * dx + dy * dy
    inner = max(0.5, r * 0.55)
    return (d2 <= r * r) & (d2 >= inner * inner)


BG_INTENSITY = 0.1
FG_INTENSITY = 0.9
LOG_OFFSET = 0.05


def _intensity_at(spec: SceneSpec, t_us: int,
                  switch_map: Optional[np.ndarray] = None) -> np.ndarray:
    t_ms = t_us / 1000.0
    x0, y0 = spec.start if spec.start is not None else (spec.width / 2.0,
                                                        spec.height / 2.0)
    cx = x0 + spec.velocity[0] * t_ms
    cy = y0 + spec.velocity[1] * t_ms
    mask = _render_mask(spec, cx, cy)
    ramp = 1.0 if spec.onset_us <= 0 else min(1.0, t_us / spec.onset_us)
    if switch_map is not None:
        ramp = ramp * (t_us >= switch_map)
    return np.where(mask, BG_INTENSITY + ramp * (FG_INTENSITY - BG_INTENSITY),
                    BG_INTENSITY)


def generate_scene(spec: SceneSpec, seed: int):
    """Ideal event-camera simulation of one moving-shape scene.

    Per pixel, a latched log-intensity reference emits one event for every
    full theta crossing; Poisson background noise is added per micro-step.
    Returns (EventStream, list of ground-truth IntensityFrames).
    """
    steps = max(1, spec.duration_us // spec.step_us)
    visible = any(_render_mask(
        spec,
        (spec.start or (spec.width / 2.0, spec.height / 2.0))[0]
        + spec.velocity[0] * s * spec.step_us / 1000.0,
        (spec.start or (spec.width / 2.0, spec.height / 2.0))[1]
        + spec.velocity[1] * s * spec.step_us / 1000.0).any()
        for s in range(steps + 1))
    if not visible:
        raise ConfigError("motion path leaves the sensor for the whole duration")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE9E]))
    switch_map = None
    if spec.onset_spread_us > 0:
        # per-pixel switch-on times; min one step so every switch is seen
        switch_map = rng.uniform(spec.step_us, spec.onset_spread_us,
                                 (spec.height, spec.width))
    ref = np.log(LOG_OFFSET + _intensity_at(spec, 0, switch_map))
    n_pix = spec.width * spec.height
    noise_lam = spec.noise_rate * n_pix * (spec.step_us / 1e6)

    xs, ys, ts, ps = [], [], [], []
    frames = []
    for s in range(1, steps + 1):
        t = s * spec.step_us
        img = _intensity_at(spec, t, switch_map)
        logi = np.log(LOG_OFFSET + img)
        d = logi - ref
        n = np.floor(np.abs(d) / spec.theta).astype(np.int64)
        sign = np.sign(d).astype(np.int64)
        fy, fx = np.nonzero(n)
        for y, x in zip(fy, fx):
            cnt = int(n[y, x])
            pol = int(sign[y, x])
            xs.extend([x] * cnt)
            ys.extend([y] * cnt)
            ts.extend([t] * cnt)
            ps.extend([pol] * cnt)
        ref = ref + n * sign * spec.theta
        if noise_lam > 0:
            k = rng.poisson(noise_lam)
            if k:
                nx = rng.integers(0, spec.width, k)
                ny = rng.integers(0, spec.height, k)
                npol = rng.choice([-1, 1], k)
                xs.extend(nx.tolist())
                ys.extend(ny.tolist())
                ts.extend([t] * k)
                ps.extend(npol.tolist())
        norm = (img - BG_INTENSITY) / (FG_INTENSITY - BG_INTENSITY)
        frames.append(IntensityFrame(norm, t))

    stream = EventStream(xs, ys, ts, ps, spec.width, spec.height,
                         label=spec.class_index)
    return stream, frames


# -- N-MNIST 5-byte AER codec -------------------------------------------

def read_nmnist_bin(data: bytes) -> EventStream:
    """Decode 5-byte AER records: x, y, then polarity bit + 23-bit
    big-endian timestamp in microseconds. Geometry fixed at 34x34."""
    if len(data) % 5 != 0:
        raise FormatError("trailing partial record",
                          offset=len(data) - len(data) % 5)
    a = np.frombuffer(data, dtype=np.uint8).reshape(-1, 5).astype(np.int64)
    xs = a[:, 0]
    ys = a[:, 1]
    ps = np.where(a[:, 2] & 0x80, 1, -1)
    ts = ((a[:, 2] & 0x7F) << 16) | (a[:, 3] << 8) | a[:, 4]
    for name, col in (("x", xs), ("y", ys)):
        bad = np.nonzero(col >= NMNIST_W)[0]
        if bad.size:
            raise FormatError(f"{name} coordinate {col[bad[0]]} out of range",
                              offset=int(bad[0]) * 5)
    if len(ts) and np.any(np.diff(ts) < 0):
        raise FormatError("timestamps are not non-decreasing")
    return EventStream(xs, ys, ts, ps, NMNIST_W, NMNIST_H)


def write_nmnist_bin(stream: EventStream) -> bytes:
    """Exact inverse of read_nmnist_bin."""
    for i, (x, y, t) in enumerate(zip(stream.xs, stream.ys, stream.ts)):
        if x >= 256 or y >= 256:
            raise RangeError(f"event {i}: coordinate not byte-encodable")
        if t >= 1 << 23:
            raise RangeError(f"event {i}: timestamp {t} overflows 23 bits")
    n = len(stream)
    out = np.empty((n, 5), dtype=np.uint8)
    out[:, 0] = stream.xs
    out[:, 1] = stream.ys
    pol_bit = (stream.ps > 0).astype(np.int64) << 7
    out[:, 2] = pol_bit | ((stream.ts >> 16) & 0x7F)
    out[:, 3] = (stream.ts >> 8) & 0xFF
    out[:, 4] = stream.ts & 0xFF
    return out.tobytes()


def slice_stream(stream: EventStream, k: int):
    """Split [t_first, t_last] into k equal time windows.

    Windows are half-open except the last; every event lands in exactly one
    segment and concatenation preserves order.
    """
    if len(stream) == 0:
        raise EmptyInputError("cannot slice an empty stream")
    if k < 1:
        raise ConfigError("k must be >= 1")
    t0 = int(stream.ts[0])
    span = int(stream.ts[-1]) - t0
    if span == 0:
        bins = np.zeros(len(stream), dtype=np.int64)
    else:
        bins = np.minimum((k * (stream.ts - t0)) // span, k - 1)
    segments = []
    for j in range(k):
        sel = bins == j
        segments.append(EventStream(stream.xs[sel], stream.ys[sel],
                                    stream.ts[sel], stream.ps[sel],
                                    stream.width, stream.height,
                                    label=stream.label, validate=False))
    return segments
