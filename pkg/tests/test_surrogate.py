"""Integration proxy, frame regressor, and the bridging losses."""
import numpy as np
import pytest

import evbridge.autodiff as ad
from evbridge import nn
from evbridge.autodiff import Tape, backward
from evbridge.errors import ConfigError, EmptyInputError
from evbridge.events import EventStream
from evbridge.surrogate import Reconstructor, SurrogateBatch, \
    build_surrogate, integrate_reconstruct, pretrain_reconstructor, \
    reconstruction_mse, rmb_losses

from conftest import make_stream

W = H = 8


def _recon(rng, name="fr"):
    return Reconstructor(W, H, recon_bins=2, hidden=8, rng=rng, name=name)


def _source(rng, name="fs"):
    return nn.Classifier((H, W), 6, 4, rng=rng, name=name)


# -- integration proxy ----------------------------------------------------

def test_integrate_zero_signal_windows_are_neutral_gray():
    # polarity pairs cancel in every window, so each frame is uniform 0.5
    s = EventStream([0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 30, 30],
                    [1, -1, 1, -1], W, H)
    frames = integrate_reconstruct(s, 3, theta=0.25, gamma=1.0)
    assert len(frames) == 3
    for f in frames:
        assert np.all(f.pixels == 0.5)


def test_integrate_single_event_dominates_frame_zero():
    s = EventStream([3, 0], [5, 0], [0, 29], [1, 1], W, H)
    frames = integrate_reconstruct(s, 2, theta=0.25)
    f0 = frames[0].pixels
    assert f0[5, 3] == f0.max() and f0[5, 3] > 0.5


def test_integrate_negation_window_complements():
    # window 1 integrates -2x window 0's pattern; with gamma=1 the state
    # flips sign, so frame 1 is the pixelwise complement about 0.5
    xs = [1, 2, 1, 1, 2, 2]
    ys = [1, 1, 1, 1, 1, 1]
    ts = [0, 5, 20, 21, 24, 25]
    ps = [1, -1, -1, -1, 1, 1]
    s = EventStream(xs, ys, ts, ps, W, H)
    f0, f1 = integrate_reconstruct(s, 2, theta=0.25, gamma=1.0)
    assert np.allclose(f1.pixels, 1.0 - f0.pixels)
    assert f0.pixels.max() == 1.0 and f0.pixels.min() == 0.0


def test_integrate_rejects_bad_inputs():
    s = EventStream([0], [0], [0], [1], W, H)
    with pytest.raises(ConfigError):
        integrate_reconstruct(s, 1, theta=0.25)
    with pytest.raises(EmptyInputError):
        integrate_reconstruct(EventStream.empty(W, H), 2, theta=0.25)


# -- surrogate batch ------------------------------------------------------

def test_build_surrogate_counts_and_anchor(rng):
    recon = _recon(rng)
    s = make_stream(rng, 60, width=W, height=H)
    batch = build_surrogate(Tape(), recon, s, 2)
    assert len(batch.others) == 1
    assert batch.anchor_segment == 0
    # anchor equals applying the regressor to segment 0 alone
    from evbridge.encodings import encode_voxel_grid
    from evbridge.events import slice_stream
    seg0 = slice_stream(s, 2)[0]
    vox = encode_voxel_grid(seg0, recon.recon_bins)
    expected = recon.predict_frame(vox.data).reshape(-1)
    assert np.allclose(batch.anchor.value, expected)


def test_surrogate_batch_rejects_non_zero_anchor_segment(rng):
    v = Tape().leaf(np.zeros(W * H))
    with pytest.raises(ConfigError):
        SurrogateBatch(anchor=v, others=[v], anchor_segment=1)
    with pytest.raises(ConfigError):
        SurrogateBatch(anchor=v, others=[], anchor_segment=0)


# -- bridging losses ------------------------------------------------------

def test_tc_zero_when_frames_identical(rng):
    source = _source(rng)
    tape = Tape()
    frame = tape.leaf(rng.random(W * H))
    batch = SurrogateBatch(anchor=frame, others=[frame, frame],
                           anchor_segment=0)
    _, l_tc = rmb_losses(source, batch, tape)
    assert l_tc.item() == pytest.approx(0.0, abs=1e-12)


def test_en_is_log_c_for_uniform_source(rng):
    source = _source(rng)
    for k in source.params:  # all-zero weights: uniform output everywhere
        source.params[k][:] = 0.0
    recon = _recon(rng)
    tape = Tape()
    s = make_stream(rng, 40, width=W, height=H)
    batch = build_surrogate(tape, recon, s, 2)
    l_en, _ = rmb_losses(source, batch, tape)
    assert l_en.item() == pytest.approx(np.log(4))
    grads = backward(tape, l_en)
    assert all(not g.any() for k, g in grads.items() if k.startswith("fr."))


def test_en_routes_to_reconstructor_only(rng):
    source = _source(rng)
    recon = _recon(rng)
    tape = Tape()
    s = make_stream(rng, 50, width=W, height=H)
    batch = build_surrogate(tape, recon, s, 3)
    l_en, l_tc = rmb_losses(source, batch, tape)
    grads = backward(tape, ad.add(l_en, ad.scale(l_tc, 0.0)))
    assert any(g.any() for k, g in grads.items() if k.startswith("fr."))
    assert all(not g.any() for k, g in grads.items() if k.startswith("fs."))


def test_tc_routes_to_source_only(rng):
    source = _source(rng)
    recon = _recon(rng)
    tape = Tape()
    s = make_stream(rng, 50, width=W, height=H)
    batch = build_surrogate(tape, recon, s, 3)
    l_en, l_tc = rmb_losses(source, batch, tape)
    grads = backward(tape, ad.add(ad.scale(l_en, 0.0), l_tc))
    assert any(g.any() for k, g in grads.items() if k.startswith("fs."))
    assert all(not g.any() for k, g in grads.items() if k.startswith("fr."))


def test_en_gradient_matches_finite_differences(rng):
    source = _source(rng)
    recon = _recon(rng)
    s = make_stream(rng, 30, width=W, height=H)

    def loss_fn(tape):
        batch = build_surrogate(tape, recon, s, 2)
        l_en, _ = rmb_losses(source, batch, tape)
        return l_en

    assert nn.gradient_check(recon, loss_fn) < 1e-4


# -- pretraining ----------------------------------------------------------

def test_pretrain_zero_steps_is_inert(rng):
    recon = _recon(rng)
    before = recon.clone_params()
    s = make_stream(rng, 40, width=W, height=H)
    pretrain_reconstructor(recon, [s], 0, nn.AdamW(lr=1e-3), 2, 0.25, 0.8,
                           rng)
    assert all(np.array_equal(before[k], recon.params[k]) for k in before)


def test_pretrain_fits_one_stream_below_mse_bound():
    rng = np.random.default_rng(7)
    recon = Reconstructor(W, H, recon_bins=2, hidden=16, rng=rng, name="fr")
    s = make_stream(rng, 120, width=W, height=H)
    opt = nn.AdamW(lr=3e-3, weight_decay=0.0, total_steps=600)
    pretrain_reconstructor(recon, [s], 600, opt, 2, 0.25, 0.8, rng)
    assert reconstruction_mse(recon, [s], 2, 0.25, 0.8) < 0.01


def test_pretrain_two_seeds_differ_but_both_fit():
    results = []
    for seed in (1, 2):
        rng = np.random.default_rng(seed)
        recon = Reconstructor(W, H, recon_bins=2, hidden=16, rng=rng,
                              name="fr")
        s = make_stream(np.random.default_rng(9), 120, width=W, height=H)
        opt = nn.AdamW(lr=3e-3, weight_decay=0.0, total_steps=600)
        pretrain_reconstructor(recon, [s], 600, opt, 2, 0.25, 0.8,
                               np.random.default_rng(seed))
        results.append((recon.clone_params(),
                        reconstruction_mse(recon, [s], 2, 0.25, 0.8)))
    (pa, ma), (pb, mb) = results
    assert ma < 0.01 and mb < 0.01
    assert any(not np.array_equal(pa[k], pb[k]) for k in pa)


def test_pretrain_empty_stream_list_raises(rng):
    with pytest.raises(EmptyInputError):
        pretrain_reconstructor(_recon(rng), [], 5, nn.AdamW(), 2, 0.25, 0.8,
                               rng)
