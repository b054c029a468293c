"""Surrogate intensity-frame construction and reconstruction-side losses.

An event stream is sliced into K windows; a deterministic leaky integrator
gives reference frames, and a small trainable regressor maps each window's
voxel segment to a frame. The first frame is the anchor used for knowledge
extraction from the source classifier.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import DiffValue, Tape
from .encodings import encode_voxel_grid
from .errors import ConfigError, EmptyInputError, NumericError
from .events import EventStream, IntensityFrame, slice_stream


def integrate_reconstruct(stream: EventStream, k: int, theta: float,
                          gamma: float = 0.8) -> List[IntensityFrame]:
    """Flow-free reconstruction proxy: per-pixel leaky accumulation of
    polarity-signed log-intensity increments over k equal time windows.

    Each window's state is affinely normalized to [0, 1] around a neutral
    level of 0.5; a window with no accumulated signal is uniform 0.5.
    Deterministic and non-trainable.
    """
    if k < 2:
        raise ConfigError("need at least 2 surrogate frames")
    if len(stream) == 0:
        raise EmptyInputError("cannot reconstruct from an empty stream")
    segments = slice_stream(stream, k)
    state = np.zeros((stream.height, stream.width))
    frames = []
    for seg in segments:
        state = gamma * state
        if len(seg):
            np.add.at(state, (seg.ys, seg.xs),
                      theta * seg.ps.astype(np.float64))
        m = np.abs(state).max()
        pix = np.full_like(state, 0.5) if m == 0 else 0.5 + state / (2.0 * m)
        mid = (int(seg.ts[0]) + int(seg.ts[-1])) // 2 if len(seg) else 0
        frames.append(IntensityFrame(pix, mid))
    return frames


class Reconstructor(nn.MLP):
    """Voxel segment (B_r bins) -> sigmoid-clamped H x W intensity frame."""

    def __init__(self, width, height, recon_bins, hidden, rng=None,
                 params=None, name=""):
        super().__init__((recon_bins, height, width), hidden, height * width,
                         rng=rng, params=params, name=name)
        self.width = width
        self.height = height
        self.recon_bins = recon_bins

    def forward_frame(self, tape: Tape, voxel_seg, frozen=False) -> DiffValue:
        raw = self.forward(tape, voxel_seg, frozen=frozen)
        return ad.sigmoid(raw)

    def predict_frame(self, voxel_seg) -> np.ndarray:
        return self.forward_frame(Tape(), voxel_seg,
                                  frozen=True).value.reshape(self.height,
                                                             self.width)


@dataclass
class SurrogateBatch:
    """K reconstructed frames for one stream, anchor first.

    Frames stay on the tape so reconstruction losses can reach the
    regressor's parameters.
    """
    anchor: DiffValue  # flattened H*W frame from segment 0
    others: List[DiffValue]
    anchor_segment: int
    stream_id: object = None

    def __post_init__(self):
        if self.anchor_segment != 0:
            raise ConfigError("anchor must come from segment 0")
        if len(self.others) < 1:
            raise ConfigError("need K >= 2 surrogate frames")

    def anchor_frame(self, height, width) -> IntensityFrame:
        return IntensityFrame(self.anchor.value.reshape(height, width), 0)


def build_surrogate(tape: Tape, recon: Reconstructor, stream: EventStream,
                    k: int, stream_id=None,
                    train_recon: bool = True) -> SurrogateBatch:
    """Slice, encode each segment as a B_r-bin voxel grid, map through the
    regressor. Segment 0 becomes the anchor."""
    if k < 2:
        raise ConfigError("need K >= 2 surrogate frames")
    segments = slice_stream(stream, k)
    frames = []
    for seg in segments:
        vox = encode_voxel_grid(seg, recon.recon_bins)
        frames.append(recon.forward_frame(tape, vox.data,
                                          frozen=not train_recon))
    return SurrogateBatch(anchor=frames[0], others=frames[1:],
                          anchor_segment=0, stream_id=stream_id)


def rmb_losses(source: nn.Classifier, batch: SurrogateBatch, tape: Tape):
    """Entropy and temporal-consistency losses of the bridging stage.

    The entropy term sees the live anchor through a frozen source model, so
    its gradient reaches only the reconstructor. The consistency term sees
    detached frames through the trainable source model, with the anchor
    distribution held as a stop-gradient reference, so its gradient reaches
    only the source model.
    """
    p_anchor_live = nn.softmax(source.forward(tape, batch.anchor, frozen=True))
    l_en = nn.entropy(p_anchor_live)

    anchor_sg = ad.stop_gradient(batch.anchor)
    p_anchor_ref = ad.stop_gradient(
        nn.softmax(source.forward(tape, anchor_sg, frozen=False)))
    terms = []
    for frame in batch.others:
        p_other = nn.softmax(source.forward(tape, ad.stop_gradient(frame),
                                            frozen=False))
        terms.append(nn.kl_div(p_anchor_ref, p_other))
    l_tc = ad.mean_of(terms)
    return l_en, l_tc


def pretrain_reconstructor(recon: Reconstructor, streams, steps: int,
                           optimizer: nn.AdamW, k: int, theta: float,
                           gamma: float, rng: np.random.Generator,
                           log_cb=None):
    """Regress the integration proxy's frames from voxel segments (MSE).

    Consumes no labels. Returns the per-step mean losses.
    """
    if not streams:
        raise EmptyInputError("need at least one stream")
    losses = []
    for step in range(steps):
        idx = int(rng.integers(0, len(streams)))
        stream = streams[idx]
        targets = integrate_reconstruct(stream, k, theta, gamma)
        segments = slice_stream(stream, k)
        tape = Tape()
        terms = []
        for seg, target in zip(segments, targets):
            vox = encode_voxel_grid(seg, recon.recon_bins)
            pred = recon.forward_frame(tape, vox.data)
            terms.append(nn.mse(pred, target.pixels.reshape(-1)))
        loss = ad.mean_of(terms)
        if not np.isfinite(loss.value):
            raise NumericError("reconstructor pretraining diverged")
        grads = ad.backward(tape, loss)
        optimizer.step(recon.params, recon.local_grads(grads))
        losses.append(float(loss.value))
        if log_cb:
            log_cb(step, float(loss.value))
    return losses


def reconstruction_mse(recon: Reconstructor, streams, k: int, theta: float,
                       gamma: float) -> float:
    """Held-out per-pixel MSE of the regressor against the integration proxy."""
    total = 0.0
    count = 0
    for stream in streams:
        targets = integrate_reconstruct(stream, k, theta, gamma)
        for seg, target in zip(slice_stream(stream, k), targets):
            vox = encode_voxel_grid(seg, recon.recon_bins)
            pred = recon.predict_frame(vox.data)
            total += float(np.mean((pred - target.pixels) ** 2))
            count += 1
    return total / max(count, 1)
