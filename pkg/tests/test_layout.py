import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentplan.layout import (
    AUDIO,
    LATENT,
    SPECIAL,
    TEXT,
    Markers,
    MalformedLayoutError,
    MalformedSequenceError,
    delay_decode,
    delay_encode,
    encoded_length,
    frame_sequence,
    split_sequence,
)
from latentplan.numerics import ContractError

P = 99
MARKERS = Markers(200, 201, 202, 203)


@st.composite
def grids(draw, max_n=64, max_q=8):
    n = draw(st.integers(0, max_n))
    q = draw(st.integers(1, max_q))
    seed = draw(st.integers(0, 2**32 - 1))
    return np.random.default_rng(seed).integers(0, P, size=(n, q))


def test_enumerated_q3_n2():
    grid = np.array([[11, 12, 13], [21, 22, 23]])
    want = [[11, P, P], [21, 12, P], [P, 22, 13], [P, P, 23]]
    enc = delay_encode(grid, P)
    np.testing.assert_array_equal(enc, want)
    np.testing.assert_array_equal(delay_decode(enc, 3, P), grid)


def test_empty_grid_encodes_empty():
    enc = delay_encode(np.zeros((0, 4), dtype=int), P)
    assert enc.shape == (0, 4)
    assert delay_decode(enc, 4, P).shape == (0, 4)


def test_single_codebook_is_identity():
    g = np.arange(7).reshape(7, 1)
    np.testing.assert_array_equal(delay_encode(g, P), g)


def test_corner_token_is_malformed():
    enc = delay_encode(np.array([[11, 12, 13], [21, 22, 23]]), P)
    enc[0, 1] = 5
    with pytest.raises(MalformedLayoutError) as exc:
        delay_decode(enc, 3, P)
    assert (exc.value.step, exc.value.channel) == (1, 2)


def test_interior_pad_is_malformed():
    enc = delay_encode(np.array([[11, 12, 13], [21, 22, 23]]), P)
    enc[2, 1] = P
    with pytest.raises(MalformedLayoutError, match="step 3, channel 2"):
        delay_decode(enc, 3, P)


@settings(max_examples=1000, deadline=None)
@given(grids())
def test_delay_round_trip(grid):
    n, q = grid.shape
    enc = delay_encode(grid, P)
    assert enc.shape[0] == encoded_length(n, q) == (n + q - 1 if n else 0)
    if n:
        assert int((enc == P).sum()) == q * (q - 1)
    np.testing.assert_array_equal(delay_decode(enc, q, P), grid)


def test_frame_sequence_length_formula():
    s = frame_sequence([1, 2, 3], 6, np.zeros((10, 4), dtype=int), MARKERS, P)
    assert len(s) == 26
    assert s.tag_histogram() == (3, 6, 13, 4)


def test_empty_audio_has_adjacent_soa_eoa():
    s = frame_sequence([1], 2, np.zeros((0, 3), dtype=int), MARKERS, P)
    assert list(s.ids[-2:]) == [MARKERS.soa, MARKERS.eoa]
    assert list(s.tags[-2:]) == [SPECIAL, SPECIAL]


@pytest.mark.parametrize("k", [0, -2])
def test_nonpositive_k_is_contract_error(k):
    with pytest.raises(ContractError):
        frame_sequence([1], k, np.zeros((2, 2), dtype=int), MARKERS, P)


def test_empty_text_is_contract_error():
    with pytest.raises(ContractError):
        frame_sequence([], 2, np.zeros((2, 2), dtype=int), MARKERS, P)


@settings(max_examples=1000, deadline=None)
@given(grids(max_n=20), st.lists(st.integers(0, 150), min_size=1, max_size=10), st.integers(1, 8))
def test_framing_round_trip_and_histogram(grid, text, k):
    n, q = grid.shape
    s = frame_sequence(text, k, grid, MARKERS, P)
    assert s.tag_histogram() == (len(text), k, encoded_length(n, q), 4)
    t2, k2, g2 = split_sequence(s, MARKERS, P, k)
    assert list(t2) == text and k2 == k
    np.testing.assert_array_equal(g2, grid)


@settings(max_examples=200, deadline=None)
@given(grids(max_n=10, max_q=4), st.integers(0, 3))
def test_any_marker_deletion_is_detected(grid, which):
    s = frame_sequence([5, 6], 3, grid, MARKERS, P)
    pos = s.marker_position(MARKERS.as_tuple()[which])
    with pytest.raises(MalformedSequenceError):
        split_sequence(s.delete(pos), MARKERS, P)


def test_slot_count_mismatch_is_detected():
    s = frame_sequence([5], 3, np.zeros((2, 2), dtype=int), MARKERS, P)
    with pytest.raises(MalformedSequenceError, match="3 latent slots, declared 4"):
        split_sequence(s, MARKERS, P, 4)


def test_tags_partition_positions():
    s = frame_sequence([5, 7], 2, np.ones((3, 2), dtype=int), MARKERS, P)
    assert sorted(set(s.tags.tolist())) == [TEXT, LATENT, AUDIO, SPECIAL]
    assert sum(s.tag_histogram()) == len(s)
