"""Stack, voxel-grid, and spike-tensor encoders."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evbridge.encodings import RepKind, encode_all, encode_est, encode_stack, \
    encode_voxel_grid
from evbridge.errors import ConfigError
from evbridge.events import EventStream

from conftest import make_stream


def _empty(w=8, h=8):
    return EventStream.empty(w, h)


# -- stack image ----------------------------------------------------------

def test_stack_empty_stream_is_zero():
    t = encode_stack(_empty(), 16)
    assert t.data.shape == (1, 8, 8) and not t.data.any()


def test_stack_net_count_normalizes_to_one():
    # two +1 and one -1 at one pixel: net +1 dominates after max-abs scaling
    s = EventStream([2, 2, 2], [3, 3, 3], [0, 1, 2], [1, 1, -1], 8, 8)
    t = encode_stack(s, 3)
    assert t.data[0, 3, 2] == 1.0
    assert np.count_nonzero(t.data) == 1


def test_stack_window_larger_than_stream_is_inert():
    rng = np.random.default_rng(5)
    s = make_stream(rng, 40)
    a = encode_stack(s, 40)
    b = encode_stack(s, 4000)
    assert np.array_equal(a.data, b.data)


def test_stack_uses_most_recent_events():
    s = EventStream([0, 7], [0, 7], [0, 10], [1, 1], 8, 8)
    t = encode_stack(s, 1)
    assert t.data[0, 7, 7] == 1.0 and t.data[0, 0, 0] == 0.0


def test_stack_rejects_bad_window():
    with pytest.raises(ConfigError):
        encode_stack(_empty(), 0)


# -- voxel grid -----------------------------------------------------------

def test_voxel_empty_stream_is_zero():
    t = encode_voxel_grid(_empty(), 5)
    assert t.data.shape == (5, 8, 8) and not t.data.any()


def test_voxel_single_event_lands_in_bin_zero():
    s = EventStream([1], [2], [99], [1], 8, 8)
    t = encode_voxel_grid(s, 4, normalize=False)
    assert t.data[0, 2, 1] == 1.0 and np.count_nonzero(t.data) == 1


def test_voxel_worked_example_deposits():
    # normalized times 0, 0.5, 2.0 with 3 bins
    s = EventStream([0, 1, 2], [0, 0, 0], [0, 25, 100], [1, 1, 1], 8, 8)
    t = encode_voxel_grid(s, 3, normalize=False)
    assert t.data[0, 0, 0] == 1.0
    assert t.data[0, 0, 1] == 0.5 and t.data[1, 0, 1] == 0.5
    assert t.data[2, 0, 2] == 1.0
    assert np.abs(t.data).sum() == 3.0


def test_voxel_single_timestamp_collapses_to_bin_zero():
    s = EventStream([0, 1], [0, 0], [7, 7], [1, 1], 8, 8)
    t = encode_voxel_grid(s, 5, normalize=False)
    assert t.data[0].sum() == 2.0 and not t.data[1:].any()


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=1000, deadline=None)
def test_voxel_temporal_weights_sum_to_one(seed):
    """Each event's |deposit| sums to 1 across bins (interior events split
    bilinearly, boundary events land whole)."""
    rng = np.random.default_rng(seed)
    s = make_stream(rng, int(rng.integers(1, 60)))
    b = int(rng.integers(1, 8))
    t = encode_voxel_grid(s, b, normalize=False)
    signed_total = sum(int(p) for p in s.ps)
    assert np.isclose(t.data.sum(), signed_total)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=80, deadline=None)
def test_voxel_polarity_antisymmetry(seed):
    rng = np.random.default_rng(seed)
    s = make_stream(rng, int(rng.integers(1, 80)))
    flipped = EventStream(s.xs, s.ys, s.ts, -s.ps, s.width, s.height)
    a = encode_voxel_grid(s, 4, normalize=False)
    b = encode_voxel_grid(flipped, 4, normalize=False)
    assert np.allclose(a.data, -b.data)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=80, deadline=None)
def test_voxel_spatial_equivariance(seed):
    # translating every event translates the tensor
    rng = np.random.default_rng(seed)
    s = make_stream(rng, int(rng.integers(1, 80)), width=10, height=10)
    shifted = EventStream(s.xs + 3, s.ys + 2, s.ts, s.ps, 13, 12)
    a = encode_voxel_grid(s, 4, normalize=False)
    b = encode_voxel_grid(shifted, 4, normalize=False)
    assert np.allclose(a.data, b.data[:, 2:12, 3:13])
    assert not b.data[:, :2, :].any() and not b.data[:, :, :3].any()


# -- event spike tensor ---------------------------------------------------

def test_est_empty_stream_is_zero():
    t = encode_est(_empty(), 3)
    assert t.data.shape == (6, 8, 8) and not t.data.any()


def test_est_positive_only_leaves_negative_channels_empty():
    s = EventStream([0, 1, 2], [0, 0, 0], [0, 5, 9], [1, 1, 1], 8, 8)
    t = encode_est(s, 3, normalize=False)
    assert not t.data[3:].any()
    assert t.data[:3].any()


def test_est_rejects_unknown_measurement():
    with pytest.raises(ConfigError):
        encode_est(_empty(), 3, measurement="voltage")


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=200, deadline=None)
def test_est_unit_measurement_recovers_voxel_grid(seed):
    """Signed sum of the two polarity groups under unit measurements equals
    the unnormalized voxel grid (cross-encoder identity)."""
    rng = np.random.default_rng(seed)
    s = make_stream(rng, 20, width=12, height=12)
    b = int(rng.integers(1, 7))
    est = encode_est(s, b, normalize=False, measurement="unit")
    vox = encode_voxel_grid(s, b, normalize=False)
    assert np.allclose(est.data[:b] - est.data[b:], vox.data)


def test_est_timestamp_measurement_matches_hand_oracle():
    # events at t = 0, 50, 100 with b = 2: tnorm = 0, 0.5, 1; t* = 0, 0.5, 1
    s = EventStream([0, 1, 2], [0, 0, 0], [0, 50, 100], [1, -1, 1], 8, 8)
    t = encode_est(s, 2, normalize=False)
    assert t.data[0, 0, 0] == 0.0  # tnorm 0 deposits nothing visible
    assert t.data[0, 0, 1] == 0.0  # negative event, positive channel empty
    assert np.isclose(t.data[2, 0, 1], 0.25)  # 0.5 * (1 - 0.5) in neg bin 0
    assert np.isclose(t.data[3, 0, 1], 0.25)
    assert np.isclose(t.data[1, 0, 2], 1.0)


# -- composition ----------------------------------------------------------

def test_encode_all_kinds_and_composition(rng):
    s = make_stream(rng, 64)
    triple = encode_all(s, 16, 5, 4)
    assert [t.kind for t in triple] == [RepKind.STACK, RepKind.VOXEL,
                                        RepKind.EST]
    assert np.array_equal(triple[0].data, encode_stack(s, 16).data)
    assert np.array_equal(triple[1].data, encode_voxel_grid(s, 5).data)
    assert np.array_equal(triple[2].data, encode_est(s, 4).data)


def test_encode_all_empty_stream_is_all_zero():
    for t in encode_all(_empty(), 8, 3, 3):
        assert not t.data.any()
