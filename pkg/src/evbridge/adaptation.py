"""Multi-representation adaptation: pseudo-labels, the five-loss objective
with per-model gradient routing, the training step, and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape
from .encodings import RepKind, encode_all, encode_est, encode_stack, \
    encode_voxel_grid
from .errors import ConfigError, EmptyInputError, NumericError
from .events import EventStream, IntensityFrame
from .surrogate import Reconstructor, SurrogateBatch, build_surrogate, \
    integrate_reconstruct, rmb_losses

TARGET_KINDS = (RepKind.STACK, RepKind.VOXEL, RepKind.EST)


@dataclass
class PseudoLabel:
    label: int  # argmax of the anchor prediction
    confidence: float  # max probability
    stream_id: object = None


@dataclass
class LossBreakdown:
    l_en: float = 0.0
    l_tc: float = 0.0
    l_sup: float = 0.0
    l_pc: float = 0.0
    l_cm: float = 0.0

    @property
    def l_all(self) -> float:
        return self.l_en + self.l_tc + self.l_sup + self.l_pc + self.l_cm


@dataclass
class AblationFlags:
    en: bool = True
    tc: bool = True
    sup: bool = True
    pc: bool = True
    cm: bool = True
    finetune_fr: bool = True

    def any_on(self):
        return self.en or self.tc or self.sup or self.pc or self.cm


@dataclass
class AdaptationState:
    source: nn.Classifier
    targets: Dict[RepKind, nn.Classifier]
    recon: Reconstructor
    opt_source: nn.AdamW
    opt_targets: nn.AdamW  # one state over all three, keys prefixed by kind
    opt_recon: nn.AdamW
    step: int = 0
    seed: int = 0


def _np_softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max())
    return e / e.sum()


def pseudo_label(source: nn.Classifier, anchor, stream_id=None) -> PseudoLabel:
    """argmax over the source prediction on the anchor; no gradients.

    Ties break to the lowest class index (numpy argmax convention).
    """
    if isinstance(anchor, IntensityFrame):
        anchor = anchor.pixels
    elif hasattr(anchor, "value"):
        anchor = anchor.value
    probs = _np_softmax(source.predict_logits(anchor))
    idx = int(np.argmax(probs))
    return PseudoLabel(label=idx, confidence=float(probs[idx]),
                       stream_id=stream_id)


def _augment(frame: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random quarter-turn rotation plus horizontal flip."""
    out = np.rot90(frame, k=int(rng.integers(0, 4)))
    if rng.integers(0, 2):
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def pretrain_source(source: nn.Classifier, frames: List[IntensityFrame],
                    labels: List[int], steps: int, optimizer: nn.AdamW,
                    batch_size: int, rng: np.random.Generator,
                    augment: bool = True, log_cb=None):
    """Supervised cross-entropy training of the source classifier on
    labeled intensity frames with rotation/flip augmentation."""
    if len(set(labels)) < 2:
        raise ConfigError("source pretraining needs at least 2 classes")
    n = len(frames)
    losses = []
    for step in range(steps):
        idxs = rng.integers(0, n, batch_size)
        tape = Tape()
        terms = []
        for i in idxs:
            pix = frames[i].pixels
            if augment:
                pix = _augment(pix, rng)
            p = nn.softmax(source.forward(tape, pix))
            terms.append(nn.cross_entropy(p, labels[i]))
        loss = ad.mean_of(terms)
        grads = ad.backward(tape, loss)
        optimizer.step(source.params, source.local_grads(grads))
        losses.append(float(loss.value))
        if log_cb:
            log_cb(step, float(loss.value))
    return losses


def pc_loss(target_probs):
    """Sum of KLs over all ordered pairs of target predictions."""
    terms = []
    for a in range(len(target_probs)):
        for b in range(len(target_probs)):
            if a != b:
                terms.append(nn.kl_div(target_probs[a], target_probs[b]))
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def cm_loss(target_probs, p_source):
    """Bidirectional ensemble<->source KL; each direction detaches its
    teacher so the first term updates the targets, the second the source."""
    ensemble = ad.mean_of(target_probs)
    return ad.add(nn.kl_div(ensemble, ad.stop_gradient(p_source)),
                  nn.kl_div(p_source, ad.stop_gradient(ensemble)))


def mka_losses(state: AdaptationState, reps, batch: SurrogateBatch,
               pl: PseudoLabel, tape: Tape):
    """Pseudo-label supervision, cross-representation consistency, and
    bidirectional cross-modal consistency.

    Returns (l_sup, l_pc, l_cm). The cross-modal term detaches the teacher
    side of each KL so the first term updates only the target models and
    the second only the source model.
    """
    target_probs = []
    for kind, rep in zip(TARGET_KINDS, reps):
        model = state.targets[kind]
        logits = model.forward(tape, rep.data)
        target_probs.append(nn.softmax(logits))

    sup_terms = [nn.cross_entropy(p, pl.label) for p in target_probs]
    l_sup = sup_terms[0]
    for t in sup_terms[1:]:
        l_sup = ad.add(l_sup, t)

    l_pc = pc_loss(target_probs)

    anchor_sg = ad.stop_gradient(batch.anchor)
    p_source = nn.softmax(state.source.forward(tape, anchor_sg, frozen=False))
    l_cm = cm_loss(target_probs, p_source)
    return l_sup, l_pc, l_cm


def _prefix(grads: dict, prefix: str) -> dict:
    return {f"{prefix}{k}": v for k, v in grads.items()}


def train_step(state: AdaptationState, streams: List[EventStream], *,
               k_frames: int, stack_count: int, voxel_bins: int,
               est_bins: int, flags: AblationFlags,
               stream_ids=None) -> LossBreakdown:
    """One batched optimization step over the full five-loss objective.

    Per stream: build the surrogate batch, extract a pseudo-label, encode
    the three representations, assemble the routed losses. Losses are
    averaged over the batch; one optimizer step per parameter group. A
    numeric failure leaves all parameters untouched.
    """
    if not streams:
        raise EmptyInputError("train_step needs at least one stream")
    breakdown = LossBreakdown()
    if not flags.any_on():
        return breakdown

    if stream_ids is None:
        stream_ids = [None] * len(streams)
    tape = Tape()
    acc = {"en": [], "tc": [], "sup": [], "pc": [], "cm": []}
    for stream, sid in zip(streams, stream_ids):
        batch = build_surrogate(tape, state.recon, stream, k_frames,
                                stream_id=sid,
                                train_recon=flags.finetune_fr)
        pl = pseudo_label(state.source, batch.anchor, stream_id=sid)
        if flags.en or flags.tc:
            l_en, l_tc = rmb_losses(state.source, batch, tape)
            if flags.en:
                acc["en"].append(l_en)
            if flags.tc:
                acc["tc"].append(l_tc)
        if flags.sup or flags.pc or flags.cm:
            reps = encode_all(stream, stack_count, voxel_bins, est_bins)
            l_sup, l_pc, l_cm = mka_losses(state, reps, batch, pl, tape)
            if flags.sup:
                acc["sup"].append(l_sup)
            if flags.pc:
                acc["pc"].append(l_pc)
            if flags.cm:
                acc["cm"].append(l_cm)

    terms = []
    for name, items in acc.items():
        if items:
            mean = ad.mean_of(items)
            setattr(breakdown, f"l_{name}", float(mean.value))
            terms.append(mean)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)

    grads = ad.backward(tape, total)  # raises before any parameter changes

    target_names = {kind: state.targets[kind].name for kind in TARGET_KINDS}
    target_grads = {k: g for k, g in grads.items()
                    if k.split(".", 1)[0] in target_names.values()}

    # step only groups their enabled losses can reach, so disabled groups
    # see neither gradient nor weight decay
    if flags.tc or flags.cm:
        state.opt_source.step(state.source.params,
                              state.source.local_grads(grads))
    if flags.en and flags.finetune_fr:
        state.opt_recon.step(state.recon.params,
                             state.recon.local_grads(grads))
    if flags.sup or flags.pc or flags.cm:
        joint = {}
        for kind in TARGET_KINDS:
            model = state.targets[kind]
            for k, v in model.params.items():
                joint[f"{model.name}.{k}"] = v
        state.opt_targets.step(joint, target_grads)
        for kind in TARGET_KINDS:
            model = state.targets[kind]
            for k in model.params:
                model.params[k] = joint[f"{model.name}.{k}"]

    state.step += 1
    return breakdown


def encode_for_kind(stream: EventStream, kind: RepKind, *, stack_count: int,
                    voxel_bins: int, est_bins: int):
    if kind == RepKind.STACK:
        return encode_stack(stream, stack_count)
    if kind == RepKind.VOXEL:
        return encode_voxel_grid(stream, voxel_bins)
    return encode_est(stream, est_bins)


def evaluate(model: nn.Classifier, streams: List[EventStream], kind: RepKind,
             *, stack_count: int, voxel_bins: int, est_bins: int) -> float:
    """Fraction of labeled streams whose argmax prediction matches."""
    if not streams:
        raise ConfigError("evaluation needs a non-empty labeled set")
    correct = 0
    for stream in streams:
        if stream.label is None:
            raise ConfigError("evaluation stream lacks a label")
        rep = encode_for_kind(stream, kind, stack_count=stack_count,
                              voxel_bins=voxel_bins, est_bins=est_bins)
        if int(np.argmax(model.predict_logits(rep.data))) == stream.label:
            correct += 1
    return correct / len(streams)


def evaluate_ensemble(state: AdaptationState, streams, *, stack_count,
                      voxel_bins, est_bins) -> float:
    """Accuracy of the averaged three-model probability ensemble."""
    if not streams:
        raise ConfigError("evaluation needs a non-empty labeled set")
    correct = 0
    for stream in streams:
        probs = np.zeros(state.source.num_classes)
        for kind in TARGET_KINDS:
            rep = encode_for_kind(stream, kind, stack_count=stack_count,
                                  voxel_bins=voxel_bins, est_bins=est_bins)
            probs += _np_softmax(state.targets[kind].predict_logits(rep.data))
        if int(np.argmax(probs)) == stream.label:
            correct += 1
    return correct / len(streams)


def source_transfer_baseline(source: nn.Classifier, streams, *, k_frames,
                             theta, gamma) -> float:
    """Frozen source model applied to integration-proxy anchors: the
    no-adaptation reference accuracy."""
    if not streams:
        raise ConfigError("evaluation needs a non-empty labeled set")
    correct = 0
    for stream in streams:
        anchor = integrate_reconstruct(stream, k_frames, theta, gamma)[0]
        pred = int(np.argmax(source.predict_logits(anchor.pixels)))
        if pred == stream.label:
            correct += 1
    return correct / len(streams)
