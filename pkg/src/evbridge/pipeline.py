"""High-level pipeline stages shared by the CLI: model construction,
pretraining, adaptation with checkpoint/resume, evaluation, metrics files."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import nn
from .adaptation import AblationFlags, AdaptationState, TARGET_KINDS, \
    evaluate, evaluate_ensemble, source_transfer_baseline, train_step
from .config import RunConfig
from .dataset import load_split
from .encodings import RepKind
from .errors import ConfigError, PathError, StructuralError
from .surrogate import Reconstructor, pretrain_reconstructor, \
    reconstruction_mse
from .adaptation import pretrain_source

# named sub-seed tags so each component can be perturbed independently
SEED_GEN = 1
SEED_INIT = 2
SEED_SHUFFLE = 3
SEED_PRETRAIN = 4

TARGET_NAMES = {RepKind.STACK: "t1", RepKind.VOXEL: "t2", RepKind.EST: "t3"}


def sub_rng(seed: int, tag: int, *extra) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, *extra]))


def fmt(x: float) -> str:
    return format(float(x), ".12g")


def rep_kwargs(cfg: RunConfig):
    return dict(stack_count=cfg.reps.stack_count,
                voxel_bins=cfg.reps.voxel_bins,
                est_bins=cfg.reps.est_bins)


def target_input_shape(cfg: RunConfig, kind: RepKind):
    h, w = cfg.dataset.height, cfg.dataset.width
    if kind == RepKind.STACK:
        return (1, h, w)
    if kind == RepKind.VOXEL:
        return (cfg.reps.voxel_bins, h, w)
    return (2 * cfg.reps.est_bins, h, w)


def build_models(cfg: RunConfig):
    """Freshly initialized source, reconstructor, and target models."""
    rng = sub_rng(cfg.seed, SEED_INIT)
    c = cfg.dataset.num_classes
    h, w = cfg.dataset.height, cfg.dataset.width
    source = nn.Classifier((h, w), cfg.model.source_hidden, c, rng=rng,
                           name="fs")
    recon = Reconstructor(w, h, cfg.reps.recon_bins, cfg.model.recon_hidden,
                          rng=rng, name="fr")
    targets = {}
    for kind in TARGET_KINDS:
        targets[kind] = nn.Classifier(target_input_shape(cfg, kind),
                                      cfg.model.hidden, c, rng=rng,
                                      name=TARGET_NAMES[kind])
    return source, recon, targets


def _adamw(cfg: RunConfig, phase, lr=None):
    return nn.AdamW(lr=phase.lr if lr is None else lr,
                    betas=(cfg.optim.beta1, cfg.optim.beta2),
                    eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay,
                    total_steps=phase.steps or None)


def _adapt_optimizers(cfg: RunConfig):
    """Per-group optimizers for the adaptation phase."""
    a = cfg.optim.adapt
    return dict(
        opt_source=_adamw(cfg, a, lr=cfg.optim.adapt_source_lr),
        opt_targets=_adamw(cfg, a),
        opt_recon=_adamw(cfg, a, lr=cfg.optim.adapt_recon_lr))


# -- checkpoint bundle ---------------------------------------------------

def save_bundle(dir_path, cfg: RunConfig, state: AdaptationState):
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    nn.save_arrays(d / "fs.ckpt", state.source.params)
    nn.save_arrays(d / "fr.ckpt", state.recon.params)
    for kind in TARGET_KINDS:
        model = state.targets[kind]
        nn.save_arrays(d / f"{model.name}.ckpt", model.params)
    nn.save_arrays(d / "opt_fs.ckpt", state.opt_source.state_arrays())
    nn.save_arrays(d / "opt_fr.ckpt", state.opt_recon.state_arrays())
    nn.save_arrays(d / "opt_ft.ckpt", state.opt_targets.state_arrays())
    manifest = {"config_hash": cfg.config_hash(), "step": state.step,
                "seed": cfg.seed}
    (d / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))


def load_bundle(dir_path, cfg: RunConfig) -> AdaptationState:
    d = Path(dir_path)
    if not (d / "manifest.json").exists():
        raise PathError(f"no checkpoint bundle at {d}")
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest["config_hash"] != cfg.config_hash():
        raise StructuralError("checkpoint was produced by a different config")
    source, recon, targets = build_models(cfg)
    _load_params_into(source, d / "fs.ckpt")
    _load_params_into(recon, d / "fr.ckpt")
    for kind in TARGET_KINDS:
        _load_params_into(targets[kind], d / f"{targets[kind].name}.ckpt")
    state = AdaptationState(
        source=source, targets=targets, recon=recon,
        step=int(manifest["step"]), seed=cfg.seed,
        **_adapt_optimizers(cfg))
    for opt, fname in ((state.opt_source, "opt_fs.ckpt"),
                       (state.opt_recon, "opt_fr.ckpt"),
                       (state.opt_targets, "opt_ft.ckpt")):
        if (d / fname).exists():
            opt.load_state_arrays(nn.load_arrays(d / fname))
    return state


def _load_params_into(model, path):
    arrays = nn.load_arrays(path)
    for k, p in model.params.items():
        if k not in arrays:
            raise StructuralError(f"checkpoint missing parameter '{k}'")
        if arrays[k].shape != p.shape:
            raise StructuralError(
                f"checkpoint shape mismatch for '{k}': expected {p.shape}, "
                f"got {arrays[k].shape}")
    model.params = arrays


# -- pretraining ---------------------------------------------------------

def run_pretrain(cfg: RunConfig, data_dir, out_dir):
    """Train the source classifier (supervised) and the reconstructor
    (self-supervised); write checkpoints and a pretraining metrics CSV.
    Returns (source held-out accuracy, reconstructor held-out MSE)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames, labels = load_split(data_dir, "source")
    target_streams = load_split(data_dir, "target")
    if not frames:
        raise ConfigError("source split is empty")

    source, recon, targets = build_models(cfg)
    rng = sub_rng(cfg.seed, SEED_PRETRAIN)

    # hold out a slice of the source frames for the accuracy report
    n = len(frames)
    perm = rng.permutation(n)
    n_holdout = max(1, n // 5)
    hold = set(perm[:n_holdout].tolist())
    tr_frames = [frames[i] for i in range(n) if i not in hold]
    tr_labels = [labels[i] for i in range(n) if i not in hold]

    rows = []
    ps = cfg.optim.pretrain_source
    pretrain_source(source, tr_frames, tr_labels, ps.steps,
                    _adamw(cfg, ps), ps.batch_size, rng,
                    log_cb=lambda s, l: rows.append(("source", s, l)))

    pr = cfg.optim.pretrain_recon
    if target_streams:
        pretrain_reconstructor(
            recon, target_streams, pr.steps, _adamw(cfg, pr),
            cfg.reps.surrogate_frames, cfg.dataset.theta, cfg.reps.gamma,
            rng, log_cb=lambda s, l: rows.append(("recon", s, l)))

    with open(out / "pretrain_metrics.csv", "w") as f:
        f.write("phase,step,loss\n")
        for phase, s, l in rows:
            f.write(f"{phase},{s},{fmt(l)}\n")

    acc = _frame_accuracy(source, [frames[i] for i in sorted(hold)],
                          [labels[i] for i in sorted(hold)])
    mse = (reconstruction_mse(recon, target_streams,
                              cfg.reps.surrogate_frames, cfg.dataset.theta,
                              cfg.reps.gamma)
           if target_streams else float("nan"))

    state = AdaptationState(
        source=source, targets=targets, recon=recon,
        **_adapt_optimizers(cfg))
    save_bundle(out / "checkpoints", cfg, state)
    return acc, mse


def _frame_accuracy(source, frames, labels):
    correct = sum(
        int(np.argmax(source.predict_logits(f.pixels))) == l
        for f, l in zip(frames, labels))
    return correct / max(1, len(frames))


# -- adaptation ----------------------------------------------------------

def run_adapt(cfg: RunConfig, data_dir, out_dir, *, pretrain_ckpt=None,
              resume: bool = False):
    """The main training loop with periodic evaluation, transactional
    steps, and deterministic per-step batch selection (resumable)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"

    target_streams = load_split(data_dir, "target")
    eval_streams = load_split(data_dir, "eval")
    if not target_streams:
        raise ConfigError("target split is empty")

    if resume:
        state = load_bundle(ckpt_dir, cfg)
        metrics_mode = "a"
    else:
        if pretrain_ckpt is None:
            raise ConfigError("adapt needs a pretraining checkpoint bundle")
        state = load_bundle(pretrain_ckpt, cfg)
        state.step = 0
        metrics_mode = "w"

    flags = AblationFlags(**cfg.ablation.model_dump())
    steps = cfg.optim.adapt.steps
    batch = cfg.optim.adapt.batch_size
    n = len(target_streams)

    metrics_path = out / "metrics.csv"
    eval_path = out / "eval.csv"
    with open(metrics_path, metrics_mode) as mf, \
            open(eval_path, metrics_mode) as ef:
        if metrics_mode == "w":
            mf.write("step,l_en,l_tc,l_sup,l_pc,l_cm,l_all,lr\n")
            ef.write("step,split,kind,accuracy\n")
        while state.step < steps:
            step = state.step
            order = sub_rng(cfg.seed, SEED_SHUFFLE, step).permutation(n)
            idxs = order[:min(batch, n)]
            lr = state.opt_targets.current_lr()
            bd = train_step(
                state, [target_streams[i] for i in idxs],
                k_frames=cfg.reps.surrogate_frames, flags=flags,
                stream_ids=[int(i) for i in idxs], **rep_kwargs(cfg))
            mf.write(f"{step},{fmt(bd.l_en)},{fmt(bd.l_tc)},{fmt(bd.l_sup)},"
                     f"{fmt(bd.l_pc)},{fmt(bd.l_cm)},{fmt(bd.l_all)},"
                     f"{fmt(lr)}\n")
            if not flags.any_on():
                state.step += 1  # no optimizer touched; still advance
            done = state.step >= steps
            if eval_streams and (done or (cfg.eval_every
                                          and state.step % cfg.eval_every == 0)):
                for kind in TARGET_KINDS:
                    acc = evaluate(state.targets[kind], eval_streams, kind,
                                   **rep_kwargs(cfg))
                    ef.write(f"{state.step},eval,{kind.value},{fmt(acc)}\n")
                ens = evaluate_ensemble(state, eval_streams,
                                        **rep_kwargs(cfg))
                ef.write(f"{state.step},eval,ensemble,{fmt(ens)}\n")
            mf.flush()
            ef.flush()
            save_bundle(ckpt_dir, cfg, state)
    save_bundle(ckpt_dir, cfg, state)  # zero-step runs still persist
    return state


def run_eval(cfg: RunConfig, data_dir, ckpt_dir):
    """Accuracies of the three target models, their ensemble, and the
    frozen-source baseline on the eval split."""
    eval_streams = load_split(data_dir, "eval")
    if not eval_streams:
        raise ConfigError("eval split is empty")
    state = load_bundle(ckpt_dir, cfg)
    results = {}
    for kind in TARGET_KINDS:
        results[kind.value] = evaluate(state.targets[kind], eval_streams,
                                       kind, **rep_kwargs(cfg))
    results["ensemble"] = evaluate_ensemble(state, eval_streams,
                                            **rep_kwargs(cfg))
    results["source_baseline"] = source_transfer_baseline(
        state.source, eval_streams, k_frames=cfg.reps.surrogate_frames,
        theta=cfg.dataset.theta, gamma=cfg.reps.gamma)
    return results
