"""Command-line driver: gen, pretrain, adapt, eval, inspect."""
from __future__ import annotations

import functools
import sys
from pathlib import Path

import click
import numpy as np

from . import config as cfgmod
from . import dataset as ds
from .encodings import encode_all
from .errors import EvBridgeError, PathError
from .events import read_nmnist_bin
from .pipeline import run_adapt, run_eval, run_pretrain, load_bundle, fmt
from .surrogate import integrate_reconstruct
from .events import IntensityFrame


def _load_config(path, seed=None):
    if path is None:
        cfg = cfgmod.RunConfig()
    else:
        if not Path(path).exists():
            raise PathError(f"config file not found: {path}")
        cfg = cfgmod.load_config(path)
    if seed is not None:
        cfg.seed = seed
    return cfg


def handle_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except EvBridgeError as e:
            click.echo(f"{e.category}: {e}", err=True)
            sys.exit(2)
        except OSError as e:
            click.echo(f"path-error: {e}", err=True)
            sys.exit(2)
    return wrapper


@click.group()
def main():
    """Source-free image-to-event adaptation pipeline."""


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True, help="overwrite a non-empty directory")
@handle_errors
def gen(config_path, out, seed, force):
    """Generate the synthetic dataset (events + source frames + manifest)."""
    cfg = _load_config(config_path, seed)
    out_dir = Path(out)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise PathError(f"output directory {out_dir} is not empty "
                        f"(use --force)")
    counts = ds.generate_dataset(cfg.dataset, out_dir, cfg.seed)
    (out_dir / "config.yaml").write_text(cfgmod.to_yaml(cfg))
    for split, n in counts.items():
        click.echo(f"{split}: {n} samples")


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--steps", type=int, default=None,
              help="override both pretraining step budgets")
@handle_errors
def pretrain(config_path, data, out, seed, steps):
    """Pretrain the source classifier and the frame reconstructor."""
    cfg = _load_config(config_path, seed)
    if steps is not None:
        cfg.optim.pretrain_source.steps = steps
        cfg.optim.pretrain_recon.steps = steps
    acc, mse = run_pretrain(cfg, data, out)
    Path(out, "config.yaml").write_text(cfgmod.to_yaml(cfg))
    click.echo(f"source held-out accuracy: {fmt(acc)}")
    click.echo(f"reconstructor held-out mse: {fmt(mse)}")


def _ablation_options(f):
    for flag in ("en", "tc", "sup", "pc", "cm", "finetune-fr"):
        f = click.option(f"--{flag}/--no-{flag}", default=None)(f)
    return f


@main.command()
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--pretrain-ckpt", type=click.Path(), default=None,
              help="pretraining checkpoint bundle (required unless --resume)")
@click.option("--resume", is_flag=True)
@click.option("--seed", type=int, default=None)
@click.option("--steps", type=int, default=None)
@_ablation_options
@handle_errors
def adapt(config_path, data, out, pretrain_ckpt, resume, seed, steps,
          **abl):
    """Run the five-loss adaptation loop."""
    cfg = _load_config(config_path, seed)
    if steps is not None:
        cfg.optim.adapt.steps = steps
    for key, val in abl.items():
        if val is not None:
            setattr(cfg.ablation, key.replace("-", "_"), val)
    state = run_adapt(cfg, data, out, pretrain_ckpt=pretrain_ckpt,
                      resume=resume)
    Path(out, "config.yaml").write_text(cfgmod.to_yaml(cfg))
    click.echo(f"adapted for {state.step} steps")


@main.command("eval")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--data", required=True, type=click.Path(exists=True))
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--seed", type=int, default=None)
@handle_errors
def eval_cmd(config_path, data, ckpt, seed):
    """Report per-representation, ensemble, and baseline accuracies."""
    cfg = _load_config(config_path, seed)
    results = run_eval(cfg, data, ckpt)
    for name, acc in results.items():
        click.echo(f"{name}: {fmt(acc)}")


@main.command()
@click.argument("path", type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--images-out", type=click.Path(), default=None,
              help="dump per-channel encodings and surrogate frames as PGM")
@click.option("--ckpt", type=click.Path(), default=None,
              help="checkpoint bundle; adds learned reconstructions")
@handle_errors
def inspect(path, config_path, images_out, ckpt):
    """Print event-file statistics; optionally dump diagnostic images."""
    cfg = _load_config(config_path)
    raw = Path(path).read_bytes()
    if raw[:4] == ds.EVT_MAGIC:
        stream = ds.read_event_file(path)
    else:
        stream = read_nmnist_bin(raw)
    n = len(stream)
    click.echo(f"{n} events")
    if n:
        dur = int(stream.ts[-1]) - int(stream.ts[0])
        pos = int(np.sum(stream.ps > 0))
        click.echo(f"geometry: {stream.width}x{stream.height}")
        click.echo(f"duration: {dur} us")
        click.echo(f"polarity ratio (+/total): {fmt(pos / n)}")
    if images_out and n:
        img_dir = Path(images_out)
        img_dir.mkdir(parents=True, exist_ok=True)
        reps = encode_all(stream, cfg.reps.stack_count, cfg.reps.voxel_bins,
                          cfg.reps.est_bins)
        for rep in reps:
            for c in range(rep.data.shape[0]):
                chan = rep.data[c]
                lo, hi = chan.min(), chan.max()
                norm = (chan - lo) / (hi - lo) if hi > lo \
                    else np.zeros_like(chan)
                ds.write_pgm(img_dir / f"{rep.kind.value}_c{c}.pgm",
                             IntensityFrame(norm, 0))
        frames = integrate_reconstruct(stream, cfg.reps.surrogate_frames,
                                       cfg.dataset.theta, cfg.reps.gamma)
        for i, fr in enumerate(frames):
            ds.write_pgm(img_dir / f"integrated_{i}.pgm", fr)
        if ckpt:
            from .events import slice_stream
            from .encodings import encode_voxel_grid
            state = load_bundle(ckpt, cfg)
            segs = slice_stream(stream, cfg.reps.surrogate_frames)
            for i, seg in enumerate(segs):
                vox = encode_voxel_grid(seg, cfg.reps.recon_bins)
                frame = state.recon.predict_frame(vox.data)
                ds.write_pgm(img_dir / f"surrogate_{i}.pgm",
                             IntensityFrame(frame, 0))
        click.echo(f"wrote diagnostic images to {img_dir}")


if __name__ == "__main__":
    main()
