import numpy as np
import pytest

from stdaffect.imageprep import (
    ColorCorrectionConfig,
    PixelImage,
    clahe,
    correct_color,
    hsv_to_rgb,
    offset_channel_to_mean,
    read_ppm,
    rgb_to_hsv,
    write_ppm,
)


def reference_clahe(plane, clip_limit, tiles):
    """Scalar per-pixel implementation of the same rule, written with plain loops."""
    h, w = len(plane), len(plane[0])
    tx, ty = tiles
    ye = [i * h // ty for i in range(ty + 1)]
    xe = [j * w // tx for j in range(tx + 1)]
    luts = {}
    for i in range(ty):
        for j in range(tx):
            hist = [0.0] * 256
            n = 0
            for y in range(ye[i], ye[i + 1]):
                for x in range(xe[j], xe[j + 1]):
                    hist[plane[y][x]] += 1
                    n += 1
            limit = max(clip_limit * n / 256.0, 1.0)
            excess = sum(max(c - limit, 0.0) for c in hist)
            hist = [min(c, limit) + excess / 256.0 for c in hist]
            total, acc, lut = sum(hist), 0.0, []
            for c in hist:
                acc += c
                lut.append(min(max(255.0 * acc / total, 0.0), 255.0))
            luts[i, j] = lut
    cy = [(ye[i] + ye[i + 1] - 1) / 2 for i in range(ty)]
    cx = [(xe[j] + xe[j + 1] - 1) / 2 for j in range(tx)]

    def neighbours(p, centres):
        if p <= centres[0]:
            return 0, 0, 0.0
        if p >= centres[-1]:
            k = len(centres) - 1
            return k, k, 0.0
        k = max(i for i, c in enumerate(centres) if c <= p)
        return k, k + 1, (p - centres[k]) / (centres[k + 1] - centres[k])

    out = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        i0, i1, wy = neighbours(y, cy)
        for x in range(w):
            j0, j1, wx = neighbours(x, cx)
            v = plane[y][x]
            val = ((1 - wy) * (1 - wx) * luts[i0, j0][v] + (1 - wy) * wx * luts[i0, j1][v]
                   + wy * (1 - wx) * luts[i1, j0][v] + wy * wx * luts[i1, j1][v])
            out[y, x] = min(max(int(np.rint(val)), 0), 255)
    return out


def test_primary_colours():
    img = PixelImage.from_array(np.array([[[255, 0, 0], [128, 128, 128], [0, 255, 0]]], dtype=np.uint8))
    h, s, v = rgb_to_hsv(img)
    assert (h[0, 0], s[0, 0], v[0, 0]) == (0, 255, 255)
    assert (s[0, 1], v[0, 1], h[0, 1]) == (0, 128, 0)
    assert (h[0, 2], s[0, 2], v[0, 2]) == (60, 255, 255)


def test_round_trip_grid():
    levels = np.arange(0, 256, 5)  # 52^3 = 140608 triples
    r, g, b = np.meshgrid(levels, levels, levels, indexing="ij")
    rgb = np.stack([r, g, b], axis=-1).reshape(-1, 1, 3).astype(np.uint8)
    img = PixelImage.from_array(rgb)
    back = hsv_to_rgb(*rgb_to_hsv(img))
    assert np.abs(back.pixels.astype(int) - rgb.astype(int)).max() <= 1


def test_pixel_image_validates_length():
    with pytest.raises(ValueError):
        PixelImage(2, 2, np.zeros(11))


def test_offset_uniform_shift():
    plane = np.array([[90, 100], [110, 100]], dtype=np.uint8)
    out = offset_channel_to_mean(plane, 128)
    assert (out.astype(int) - plane).tolist() == [[28, 28], [28, 28]]


def test_offset_constant_plane():
    assert (offset_channel_to_mean(np.full((3, 3), 255), 128) == 128).all()


def test_offset_identity():
    plane = np.array([[127, 129], [128, 128]])
    assert (offset_channel_to_mean(plane, 128) == plane).all()


def test_offset_mean_without_clamping(rng):
    plane = rng.integers(60, 190, (40, 40))
    out = offset_channel_to_mean(plane, 101.3)
    assert abs(out.mean() - 101.3) <= 0.5


def test_clahe_constant_plane():
    out = clahe(np.full((32, 32), 77, dtype=np.uint8), 2.0, (4, 4))
    assert len(np.unique(out)) == 1


def test_clahe_two_level_quadrants_matches_reference():
    plane = np.full((64, 64), 50, dtype=np.uint8)
    plane[:32, 32:] = 200
    plane[32:, :32] = 200
    out = clahe(plane, 2.0, (8, 8))
    ref = reference_clahe(plane.tolist(), 2.0, (8, 8))
    assert np.array_equal(out, ref)
    assert len(np.unique(out)) > len(np.unique(plane))


def test_clahe_matches_reference_on_random_plane(rng):
    plane = rng.integers(0, 256, (23, 31)).astype(np.uint8)
    assert np.array_equal(clahe(plane, 1.5, (3, 4)), reference_clahe(plane.tolist(), 1.5, (3, 4)))


def test_clahe_unclipped_is_plain_equalization(rng):
    plane = rng.integers(20, 120, (40, 40)).astype(np.uint8)
    out = clahe(plane, 1e9, (1, 1))
    cdf = np.cumsum(np.bincount(plane.ravel(), minlength=256))
    expected = np.rint(255.0 * cdf / cdf[-1])[plane]
    assert np.array_equal(out, expected)


def test_clahe_preserves_shape_and_range(rng):
    plane = rng.integers(0, 256, (37, 29)).astype(np.uint8)
    out = clahe(plane, 2.0, (8, 8))
    assert out.shape == plane.shape and out.dtype == np.uint8


def test_clahe_grid_too_large():
    with pytest.raises(ValueError, match="larger than"):
        clahe(np.zeros((4, 4), dtype=np.uint8), 2.0, (8, 8))


def face(brightness, size=64, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    base = np.stack([150 + 40 * np.sin(xx / 9) + 20 * np.cos(yy / 7),
                     110 + 30 * np.sin(xx / 9),
                     90 + 25 * np.cos(yy / 5)], -1) + rng.normal(0, 5, (size, size, 3))
    return PixelImage.from_array(np.clip(base * brightness, 0, 255).astype(np.uint8))


def test_corrected_hue_is_fixed():
    out = correct_color(face(1.0))
    h, s, _ = rgb_to_hsv(out)
    chroma = out.pixels.max(-1).astype(int) - out.pixels.min(-1)
    sat = chroma >= 90
    assert sat.mean() > 0.1
    assert (np.rint(h[sat]) == 14).all()
    # integer RGB bounds the hue error for weakly saturated pixels
    weak = (s > 0) & (chroma > 1)
    assert (np.abs(h[weak] - 14) <= 44.0 / (chroma[weak] - 1)).all()


def test_dim_and_bright_value_means_agree():
    _, _, vb = rgb_to_hsv(correct_color(face(1.0)))
    _, _, vd = rgb_to_hsv(correct_color(face(0.45)))
    assert abs(vb.mean() - vd.mean()) <= 2.0


def test_saturation_mean_hits_target():
    img = face(0.9, seed=4)
    _, s_in, _ = rgb_to_hsv(img)
    shifted = s_in.astype(float) + 128 - s_in.mean()
    assert np.mean((shifted < 0) | (shifted > 255)) < 0.01
    _, s, _ = rgb_to_hsv(correct_color(img))
    assert abs(s.mean() - 128) <= 1.0


def test_single_pixel_image():
    img = PixelImage.from_array(np.array([[[10, 200, 30]]], dtype=np.uint8))
    out = correct_color(img, ColorCorrectionConfig(clahe_tiles=(1, 1)))
    assert out.pixels.shape == (1, 1, 3)


def test_deterministic_bytes():
    a = correct_color(face(0.7, seed=2)).pixels.tobytes()
    b = correct_color(face(0.7, seed=2)).pixels.tobytes()
    assert a == b


def test_config_bounds():
    with pytest.raises(ValueError):
        ColorCorrectionConfig(fixed_hue=180)
    with pytest.raises(ValueError):
        ColorCorrectionConfig(clahe_clip_limit=0)


def test_ppm_round_trip(tmp_path):
    img = face(1.0, size=16)
    write_ppm(tmp_path / "a_1.ppm", img)
    back = read_ppm(tmp_path / "a_1.ppm")
    assert back.width == 16 and np.array_equal(back.pixels, img.pixels)
