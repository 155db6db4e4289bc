import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kavan.errors import DimensionError, NumericInputError
from kavan.heatmap import (
    HeatmapConfig,
    Keypoint,
    bin_edges,
    build_supervision,
    downsample,
    heatmap_for_frame,
    normalize,
    render_gaussians,
    write_pgm,
)


def nested_loop_downsample(grid, out=7):
    n = grid.shape[0]
    res = np.zeros((out, out))
    for i in range(out):
        r0, r1 = i * n // out, (i + 1) * n // out
        for j in range(out):
            c0, c1 = j * n // out, (j + 1) * n // out
            total, count = 0.0, 0
            for r in range(r0, r1):
                for c in range(c0, c1):
                    total += grid[r, c]
                    count += 1
            res[i, j] = total / count
    return res


def face_cluster(cx=0.5, cy=0.5, conf=1.0, radius=0.05):
    """Seven outline points on a ring plus three lip points below the center."""
    ring = np.linspace(0, 2 * np.pi, 7, endpoint=False)
    pts = [Keypoint(cx + radius * np.cos(a), cy + radius * np.sin(a), conf) for a in ring]
    pts += [Keypoint(cx + dx * radius, cy + 0.6 * radius, conf, "lips") for dx in (-0.3, 0.0, 0.3)]
    return pts


# -- render -------------------------------------------------------------------


def test_centered_keypoint_peaks_at_center():
    grid = render_gaussians([Keypoint(0.5, 0.5, 1.0)], resolution=65)
    assert np.unravel_index(grid.argmax(), grid.shape) == (32, 32)


def test_render_matches_pointwise_formula():
    kp = Keypoint(0.3, 0.7, 0.8)
    grid = render_gaussians([kp], sigma=5.0, resolution=64)
    r, c = np.mgrid[0:64, 0:64]
    expected = 0.8 * np.exp(-((r - 0.7 * 63) ** 2 + (c - 0.3 * 63) ** 2) / 50.0)
    np.testing.assert_allclose(grid, expected, rtol=1e-12, atol=1e-15)


def test_zero_confidence_is_bit_exact_no_op():
    base = face_cluster()
    with_dead = base[:4] + [Keypoint(0.1, 0.9, 0.0)] + base[4:]
    assert render_gaussians(with_dead).tobytes() == render_gaussians(base).tobytes()


def test_lip_weight_halves_confidence():
    lips = render_gaussians([Keypoint(0.4, 0.6, 1.0, "lips")])
    other = render_gaussians([Keypoint(0.4, 0.6, 0.5, "other")])
    np.testing.assert_allclose(lips, other, rtol=0, atol=1e-12)


def test_empty_frame_renders_zeros():
    assert not render_gaussians([]).any()


def test_off_frame_keypoints_are_flagged_and_rendered():
    kp = Keypoint(1.05, 0.5, 1.0)
    assert kp.off_frame
    assert render_gaussians([kp])[:, -1].max() > 0.5


def test_invalid_confidence_rejected():
    with pytest.raises(ValueError):
        Keypoint(0.5, 0.5, 1.5)


# -- downsample ---------------------------------------------------------------


def test_bins_are_nine_or_ten_wide():
    assert set(np.diff(bin_edges(64, 7))) == {9, 10}


def test_downsample_constant_and_locality():
    np.testing.assert_array_equal(downsample(np.full((64, 64), 2.5)), np.full((7, 7), 2.5))
    spike = np.zeros((64, 64))
    spike[0, 0] = 1.0
    out = downsample(spike)
    assert out[0, 0] > 0 and np.count_nonzero(out) == 1


@pytest.mark.parametrize("seed", range(5))
def test_downsample_matches_nested_loop_oracle(seed):
    grid = np.random.default_rng(seed).normal(size=(64, 64))
    assert np.max(np.abs(downsample(grid) - nested_loop_downsample(grid))) < 1e-12


def test_downsample_rejects_small_grids():
    with pytest.raises(DimensionError):
        downsample(np.zeros((6, 6)))


# -- normalize ----------------------------------------------------------------


def test_zero_grid_is_exactly_uniform():
    assert np.all(normalize(np.zeros((7, 7))).grid == 1 / 49)


def test_normalize_rejects_nan():
    g = np.zeros((7, 7))
    g[3, 3] = np.nan
    with pytest.raises(NumericInputError):
        normalize(g)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalize_sums_to_one_and_keeps_argmax(seed):
    g = np.random.default_rng(seed).uniform(-5, 5, (7, 7))
    h = normalize(g).grid
    assert abs(h.sum() - 1) < 1e-9 and np.all(h > 0)
    assert h.argmax() == g.argmax()


# -- pipeline -----------------------------------------------------------------


def test_keypoint_free_frame_is_uniform():
    (h,) = build_supervision([[]])
    assert np.all(h.grid == 1 / 49)


def test_low_confidence_frame_is_near_uniform():
    # face-sized layout, about 15 px across at 64 px
    h = heatmap_for_frame(face_cluster(conf=0.01, radius=0.12)).grid
    assert h.max() / h.min() < 1.05


def test_face_cluster_concentrates_mass():
    h = heatmap_for_frame(face_cluster(0.3, 0.6)).grid
    i, j = np.unravel_index(h.argmax(), h.shape)
    block = h[max(i - 1, 0) : i + 2, max(j - 1, 0) : j + 2]
    assert block.sum() > 0.5


def test_confidence_annealing_moves_monotonically():
    others = face_cluster()
    target = heatmap_for_frame(others).grid
    dists = []
    for c in np.linspace(1.0, 0.0, 10):
        h = heatmap_for_frame(others + [Keypoint(0.2, 0.8, float(c))]).grid
        dists.append(np.linalg.norm(h - target))
    assert all(a > b for a, b in zip(dists, dists[1:]))
    assert dists[-1] == 0.0


def test_pipeline_is_pure():
    cfg = HeatmapConfig()
    a = heatmap_for_frame(face_cluster(), cfg).grid
    b = heatmap_for_frame(face_cluster(), cfg).grid
    assert a.tobytes() == b.tobytes()


def test_write_pgm_header_and_size(tmp_path):
    path = tmp_path / "h.pgm"
    write_pgm(path, np.arange(49.0).reshape(7, 7), upscale=2)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n14 14\n255\n")
    assert len(raw) == len(b"P5\n14 14\n255\n") + 196
