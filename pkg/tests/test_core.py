import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from planar_tof import (Frame, Label, PreprocessConfig, estimate_ambient, preprocess,
                        read_dataset, write_dataset)
from planar_tof.core import ambient_levels, feature_matrix
from planar_tof.errors import DatasetParseError, DegenerateInputError, InvalidInputError


def kde_grid_mode(values, bandwidth, step):
    """Brute-force KDE argmax on a dense grid over [min, max].

    Densities within 1e-12 relative of the maximum count as tied and the
    smallest grid point wins, so float noise cannot break an exact tie.
    """
    v = np.asarray(values, dtype=float)
    grid = np.arange(v.min(), v.max() + step / 2, step)
    dens = np.zeros_like(grid)
    for chunk in np.array_split(np.arange(v.size), max(1, v.size // 32)):
        dens += np.exp(-0.5 * ((grid[:, None] - v[None, chunk]) / bandwidth) ** 2).sum(1)
    return grid[int(np.argmax(dens >= dens.max() * (1 - 1e-12)))]


# -- Frame -----------------------------------------------------------------------

def test_frame_rejects_ragged_pixels():
    with pytest.raises(InvalidInputError, match="pixel 1"):
        Frame(pixels=[[1, 2, 3], [1, 2]])


def test_frame_rejects_negative_counts():
    with pytest.raises(InvalidInputError, match="negative"):
        Frame(pixels=[[1, -2, 3]])


def test_frame_rejects_wrong_distance_count():
    with pytest.raises(InvalidInputError, match="onboard"):
        Frame(pixels=[[1, 2], [3, 4]], onboard_distances=[0.1])


def test_frame_counts_is_read_only():
    f = Frame(pixels=[[1, 2, 3]])
    with pytest.raises(ValueError):
        f.counts[0, 0] = 5


# -- estimate_ambient ------------------------------------------------------------

def test_ambient_constant_histogram():
    assert estimate_ambient([5] * 128, 5.0) == pytest.approx(5.0)


def test_ambient_modal_value_dominates():
    assert estimate_ambient([10, 10, 10, 10, 200], 5.0) == pytest.approx(10.0, abs=1e-3)


def test_ambient_poisson_with_signal_matches_grid_oracle():
    rng = np.random.default_rng(0)
    h = rng.poisson(20, size=128).astype(float)
    h[40:48] = rng.integers(500, 900, size=8)
    a = estimate_ambient(h, 5.0)
    assert 15 <= a <= 25
    assert abs(a - kde_grid_mode(h, 5.0, 0.01)) <= 0.01


def test_ambient_empty_raises():
    with pytest.raises(InvalidInputError):
        estimate_ambient([], 5.0)


def test_ambient_bad_bandwidth_raises():
    with pytest.raises(InvalidInputError):
        estimate_ambient([1, 2, 3], 0.0)


def test_ambient_tie_goes_to_smaller_value():
    # Two equal, well separated clusters: the density is symmetric.
    assert estimate_ambient([0, 0, 0, 100, 100, 100], 5.0) == pytest.approx(0.0, abs=1e-3)


def test_ambient_two_equal_bumps_picks_smaller():
    assert estimate_ambient([2, 25], 5.0) == pytest.approx(2.0, abs=0.05)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 400), min_size=1, max_size=64),
       st.floats(0.5, 20.0))
def test_ambient_within_data_range(values, bandwidth):
    a = estimate_ambient(values, bandwidth)
    assert min(values) - 1e-9 <= a <= max(values) + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 300), min_size=2, max_size=64))
def test_ambient_matches_dense_grid_oracle(values):
    step = 0.01 * 5.0
    assert abs(estimate_ambient(values, 5.0) - kde_grid_mode(values, 5.0, step)) <= step


def test_ambient_levels_rowwise_equals_single():
    rng = np.random.default_rng(1)
    H = rng.poisson(30, size=(9, 128))
    rows = ambient_levels(H)
    assert np.allclose(rows, [estimate_ambient(h) for h in H], atol=0)


# -- preprocess ------------------------------------------------------------------

def test_preprocess_constant_histogram_is_zero():
    f = Frame(pixels=[[2, 2, 2, 2]])
    out = preprocess(f, PreprocessConfig(bin_range=(0, 4)))
    assert np.allclose(out.values, 0.0)
    assert out.ambient_levels[0] == pytest.approx(2.0)


def test_preprocess_one_hot_normalization():
    f = Frame(pixels=[[0, 0, 8, 0]])
    out = preprocess(f, PreprocessConfig(bin_range=(0, 4), ambient_correction=False))
    assert out.values.tolist() == [0.0, 0.0, 1.0, 0.0]


def test_preprocess_divides_by_raw_norm_by_default():
    h = [10, 10, 10, 10, 40]
    f = Frame(pixels=[h])
    out = preprocess(f, PreprocessConfig(bin_range=(0, 5)))
    a = out.ambient_levels[0]
    assert np.allclose(out.values, (np.array(h) - a) / sum(h), atol=1e-12)


def test_preprocess_normalize_after_ambient():
    h = [10, 10, 10, 10, 40]
    f = Frame(pixels=[h])
    out = preprocess(f, PreprocessConfig(bin_range=(0, 5), normalize_after_ambient=True))
    corrected = np.array(h) - out.ambient_levels[0]
    assert np.allclose(out.values, corrected / np.abs(corrected).sum(), atol=1e-12)


def test_preprocess_keeps_negative_values():
    f = Frame(pixels=[[10, 10, 10, 10, 4, 40]])
    out = preprocess(f, PreprocessConfig(bin_range=(0, 6)))
    assert out.values.min() < 0


def test_preprocess_trims_and_concatenates_in_pixel_order():
    f = Frame(pixels=[[0, 1, 2, 3, 4], [5, 6, 7, 8, 9]])
    cfg = PreprocessConfig(bin_range=(1, 3), ambient_correction=False, normalization=False)
    assert preprocess(f, cfg).values.tolist() == [1, 2, 6, 7]


def test_preprocess_zero_norm_names_pixel():
    f = Frame(pixels=[[1, 1, 1], [0, 0, 0]])
    with pytest.raises(DegenerateInputError, match="pixel 1"):
        preprocess(f, PreprocessConfig(bin_range=(0, 3)))


def test_preprocess_range_beyond_bins_raises():
    with pytest.raises(InvalidInputError):
        preprocess(Frame(pixels=[[1, 2, 3]]), PreprocessConfig(bin_range=(0, 4)))


def test_preprocess_config_validation():
    with pytest.raises(InvalidInputError):
        PreprocessConfig(kde_bandwidth=-1)
    with pytest.raises(InvalidInputError):
        PreprocessConfig(bin_range=(5, 5))


def test_default_feature_length_is_540():
    rng = np.random.default_rng(0)
    f = Frame(pixels=rng.poisson(20, size=(9, 128)).tolist())
    assert preprocess(f).values.shape == (540,)


counts_strategy = st.integers(1, 4).flatmap(
    lambda p: st.lists(st.lists(st.integers(0, 500), min_size=8, max_size=8),
                       min_size=p, max_size=p))


@settings(max_examples=100, deadline=None)
@given(counts_strategy, st.integers(1, 50))
def test_preprocess_scale_invariant_without_ambient(pixels, scale):
    if any(sum(px) == 0 for px in pixels):
        return
    cfg = PreprocessConfig(bin_range=(0, 8), ambient_correction=False)
    a = preprocess(Frame(pixels=pixels), cfg).values
    b = preprocess(Frame(pixels=[[v * scale for v in px] for px in pixels]), cfg).values
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(counts_strategy, st.integers(0, 7), st.integers(1, 8))
def test_preprocess_length_and_unit_norm(pixels, lo, width):
    if any(sum(px) == 0 for px in pixels):
        return
    hi = min(8, lo + width)
    cfg = PreprocessConfig(bin_range=(lo, hi), ambient_correction=False)
    out = preprocess(Frame(pixels=pixels), cfg).values
    assert out.shape == (len(pixels) * (hi - lo),)
    full = preprocess(Frame(pixels=pixels),
                      PreprocessConfig(bin_range=(0, 8), ambient_correction=False)).values
    for seg in full.reshape(len(pixels), 8):
        assert abs(np.abs(seg).sum() - 1.0) <= 1e-9


def test_feature_matrix_stacks_frames():
    rng = np.random.default_rng(2)
    frames = [Frame(pixels=rng.poisson(20, size=(9, 128)).tolist()) for _ in range(3)]
    X = feature_matrix(frames, PreprocessConfig())
    assert X.shape == (3, 540)
    assert np.array_equal(X[1], preprocess(frames[1]).values)


# -- dataset I/O -----------------------------------------------------------------

def _frames():
    return [
        Frame(pixels=[[1, 2, 3], [4, 5, 6]], label=Label.PLANAR, surface_id="a",
              capture_id="c0", onboard_distances=[0.1, 0.2]),
        Frame(pixels=[[0, 0, 9], [1, 1, 1]], label=Label.DEVIATION, surface_id="a",
              capture_id="c1", sublabel="box", deviation_distance_m=0.3),
        Frame(pixels=[[7, 7, 7], [7, 0, 7]], surface_id="b", capture_id="c2"),
    ]


def test_dataset_round_trip(tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(_frames(), path)
    assert read_dataset(path) == _frames()


def test_dataset_schema_fields(tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(_frames()[:1], path)
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"capture_id", "surface_id", "label", "sublabel",
                        "deviation_distance_m", "pixels", "onboard_distances_m"}


def test_dataset_missing_pixels_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"capture_id": "x", "surface_id": "s", "label": "planar"}) + "\n")
    with pytest.raises(DatasetParseError, match="line 1") as exc:
        read_dataset(path)
    assert exc.value.line == 1


def test_dataset_invalid_json_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    good = json.dumps({"capture_id": "x", "surface_id": "s", "label": "planar",
                       "pixels": [[1, 2]]})
    path.write_text(good + "\n{not json\n")
    with pytest.raises(DatasetParseError, match="line 2"):
        read_dataset(path)


def test_dataset_mismatched_pixels_is_invalid_input(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"capture_id": "x", "surface_id": "s", "label": "planar",
                                "pixels": [[1, 2], [1]]}) + "\n")
    with pytest.raises(InvalidInputError, match="line 1"):
        read_dataset(path)


def test_dataset_550_frames_reads_fast(tmp_path, forward_frames):
    path = tmp_path / "d.jsonl"
    write_dataset(forward_frames, path)
    t0 = time.perf_counter()
    frames = read_dataset(path)
    elapsed = time.perf_counter() - t0
    assert len(frames) == 550
    assert elapsed < 1.0
