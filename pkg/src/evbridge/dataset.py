"""On-disk synthetic dataset: event files, source frames, manifest."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import DatasetConfig
from .errors import ConfigError, FormatError, PathError
from .events import EventStream, IntensityFrame, SHAPE_KINDS, SceneSpec, \
    generate_scene, read_nmnist_bin, write_nmnist_bin

EVT_MAGIC = b"EVS1"
SPLITS = ("source", "target", "eval")


# -- event file (header + the 5-byte AER records) ------------------------

def write_event_file(path, stream: EventStream):
    with open(path, "wb") as f:
        f.write(EVT_MAGIC)
        f.write(struct.pack("<HH", stream.width, stream.height))
        f.write(write_nmnist_bin(EventStream(
            stream.xs, stream.ys, stream.ts, stream.ps, 256, 256,
            validate=False)))


def read_event_file(path) -> EventStream:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != EVT_MAGIC:
        raise FormatError("bad event-file magic", offset=0)
    if len(data) < 8:
        raise FormatError("truncated event-file header", offset=len(data))
    width, height = struct.unpack_from("<HH", data, 4)
    body = data[8:]
    if len(body) % 5 != 0:
        raise FormatError("trailing partial record",
                          offset=8 + len(body) - len(body) % 5)
    a = np.frombuffer(body, dtype=np.uint8).reshape(-1, 5).astype(np.int64)
    xs = a[:, 0]
    ys = a[:, 1]
    ps = np.where(a[:, 2] & 0x80, 1, -1)
    ts = ((a[:, 2] & 0x7F) << 16) | (a[:, 3] << 8) | a[:, 4]
    try:
        return EventStream(xs, ys, ts, ps, width, height)
    except FormatError as e:
        raise FormatError(f"invalid event payload: {e}", offset=8)


# -- portable grayscale frames ------------------------------------------

def write_pgm(path, frame: IntensityFrame):
    """8-bit binary PGM; quantization is the documented precision."""
    pix = np.clip(np.round(frame.pixels * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(pix.tobytes())


def read_pgm(path) -> IntensityFrame:
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise FormatError("not a binary PGM file", offset=0)
    try:
        w, h = map(int, parts[1].split())
        maxval = int(parts[2])
    except ValueError:
        raise FormatError("bad PGM header")
    body = parts[3]
    if maxval != 255 or len(body) < w * h:
        raise FormatError("unsupported or truncated PGM payload")
    pix = np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w)
    return IntensityFrame(pix / 255.0, 0)


# -- manifest ------------------------------------------------------------

def write_manifest(path, rows):
    """One record per line: relative file path, class index, split name."""
    with open(path, "w") as f:
        for rel, cls, split in rows:
            f.write(f"{rel}\t{cls}\t{split}\n")


def read_manifest(path):
    rows = []
    with open(path) as f:
        for i, line in enumerate(f):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"manifest line {i + 1}: expected 3 fields")
            rel, cls, split = parts
            if split not in SPLITS:
                raise FormatError(f"manifest line {i + 1}: unknown split "
                                  f"'{split}'")
            rows.append((rel, int(cls), split))
    return rows


# -- generation ----------------------------------------------------------

def _sample_spec(cfg: DatasetConfig, cls: int, rng) -> SceneSpec:
    speed = rng.uniform(cfg.speed_min, max(cfg.speed_min, cfg.speed_max))
    angle = rng.uniform(0, 2 * np.pi)
    vx, vy = speed * np.cos(angle), speed * np.sin(angle)
    # center the path at mid-duration so neither end drifts far off-sensor
    jx = rng.uniform(-cfg.jitter, cfg.jitter) * cfg.width \
        - vx * cfg.duration_ms / 2.0
    jy = rng.uniform(-cfg.jitter, cfg.jitter) * cfg.height \
        - vy * cfg.duration_ms / 2.0
    return SceneSpec(
        class_index=cls,
        shape=SHAPE_KINDS[cls],
        velocity=(vx, vy),
        theta=cfg.theta,
        duration_us=cfg.duration_ms * 1000,
        noise_rate=cfg.noise_rate,
        width=cfg.width,
        height=cfg.height,
        start=(cfg.width / 2.0 + jx, cfg.height / 2.0 + jy),
        step_us=cfg.step_us,
        size=float(rng.uniform(cfg.size_min, max(cfg.size_min,
                                                 cfg.size_max))),
        onset_us=cfg.onset_ms * 1000,
        onset_spread_us=cfg.onset_spread_ms * 1000,
    )


def generate_dataset(cfg: DatasetConfig, out_dir, seed: int):
    """Write event files, source frames, and the manifest. Deterministic
    per (cfg, seed). Returns per-split counts."""
    if cfg.num_classes < 1:
        raise ConfigError("need at least one class")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    counts = {s: 0 for s in SPLITS}
    per_split = {"source": cfg.n_source, "target": cfg.n_target,
                 "eval": cfg.n_eval}
    for split_i, split in enumerate(SPLITS):
        split_dir = out / split
        split_dir.mkdir(exist_ok=True)
        for cls in range(cfg.num_classes):
            for j in range(per_split[split]):
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, split_i, cls, j]))
                spec = _sample_spec(cfg, cls, rng)
                gen_seed = int(rng.integers(0, 2 ** 31))
                stream, frames = generate_scene(spec, gen_seed)
                if split == "source":
                    # last frame: with a switch-on window the shape is
                    # fully developed only at the end of the scene
                    rel = f"{split}/c{cls}_{j:04d}.pgm"
                    write_pgm(out / rel, frames[-1])
                else:
                    rel = f"{split}/c{cls}_{j:04d}.evt"
                    write_event_file(out / rel, stream)
                rows.append((rel, cls, split))
                counts[split] += 1
    write_manifest(out / "manifest.txt", rows)
    return counts


# -- loading -------------------------------------------------------------

def load_split(data_dir, split: str):
    """Load one split from the manifest.

    source -> (frames, labels); target -> unlabeled streams;
    eval -> labeled streams.
    """
    root = Path(data_dir)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise PathError(f"no manifest at {manifest}")
    rows = [r for r in read_manifest(manifest) if r[2] == split]
    if split == "source":
        frames, labels = [], []
        for rel, cls, _ in rows:
            frames.append(read_pgm(root / rel))
            labels.append(cls)
        return frames, labels
    streams = []
    for rel, cls, _ in rows:
        stream = read_event_file(root / rel)
        streams.append(stream.with_label(None if split == "target" else cls))
    return streams
