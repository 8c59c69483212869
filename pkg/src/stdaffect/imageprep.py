"""Colour-tone correction for cropped face images.

HSV uses the 8-bit convention: H in half-degrees ``[0, 180)``, S and V in
``[0, 255]``. The corrected image has a fixed hue, a saturation plane shifted
to a target mean, and a value plane shifted to a target mean and then
contrast-limited adaptive histogram equalized (CLAHE).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(eq=False)
class PixelImage:
    width: int
    height: int
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.size != self.width * self.height * 3:
            raise ValueError(
                f"pixel buffer has {px.size} values, expected {self.width}x{self.height}x3"
            )
        if px.size and (px.min() < 0 or px.max() > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        self.pixels = px.reshape(self.height, self.width, 3).astype(np.uint8)

    @classmethod
    def from_array(cls, arr) -> "PixelImage":
        arr = np.asarray(arr)
        return cls(width=arr.shape[1], height=arr.shape[0], pixels=arr)


@dataclass(frozen=True)
class ColorCorrectionConfig:
    fixed_hue: int = 14
    target_saturation_mean: float = 128.0
    target_value_mean: float = 128.0
    clahe_clip_limit: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)  # (columns, rows)

    def __post_init__(self):
        if not 0 <= self.fixed_hue <= 179:
            raise ValueError("fixed_hue must lie in [0, 179]")
        for name in ("target_saturation_mean", "target_value_mean"):
            if not 0 <= getattr(self, name) <= 255:
                raise ValueError(f"{name} must lie in [0, 255]")
        if not self.clahe_clip_limit > 0:
            raise ValueError("clahe_clip_limit must be positive")
        if len(self.clahe_tiles) != 2 or min(self.clahe_tiles) < 1:
            raise ValueError("clahe_tiles must be two positive integers")


def rgb_to_hsv(image: PixelImage):
    """Split an RGB image into H, S, V planes.

    S and V are rounded to integers (uint8). H is returned at full precision in
    half-degrees; an 8-bit hue only resolves 2 degree steps, which is too coarse
    for RGB to survive a round trip within one level. Achromatic pixels get H = 0.
    Use ``np.rint(h) % 180`` for an integer hue plane.
    """
    rgb = image.pixels.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = v - mn
    s = np.zeros_like(v)
    np.divide(255.0 * delta, v, out=s, where=v > 0)

    h = np.zeros_like(v)
    nz = delta > 0
    safe = np.where(nz, delta, 1.0)
    rmax = nz & (v == r)
    gmax = nz & (v == g) & ~rmax
    bmax = nz & ~rmax & ~gmax
    h = np.where(rmax, 60.0 * (g - b) / safe, h)
    h = np.where(gmax, 120.0 + 60.0 * (b - r) / safe, h)
    h = np.where(bmax, 240.0 + 60.0 * (r - g) / safe, h)
    h = np.mod(h, 360.0) / 2.0
    h[h >= 180.0] -= 180.0
    return h, np.rint(s).astype(np.uint8), v.astype(np.uint8)


def hsv_to_rgb(h, s, v) -> PixelImage:
    h = np.mod(np.asarray(h, dtype=np.float64), 180.0) * 2.0
    s = np.asarray(s, dtype=np.float64) / 255.0
    v = np.asarray(v, dtype=np.float64)
    c = v * s
    hp = h / 60.0
    x = c * (1.0 - np.abs(np.mod(hp, 2.0) - 1.0))
    m = v - c
    sector = np.floor(hp).astype(int) % 6
    zeros = np.zeros_like(c)
    table = [
        (c, x, zeros),
        (x, c, zeros),
        (zeros, c, x),
        (zeros, x, c),
        (x, zeros, c),
        (c, zeros, x),
    ]
    out = np.zeros(h.shape + (3,))
    for k, (rr, gg, bb) in enumerate(table):
        mask = sector == k
        out[mask, 0] = rr[mask]
        out[mask, 1] = gg[mask]
        out[mask, 2] = bb[mask]
    out += m[..., None]
    out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return PixelImage.from_array(out)


def offset_channel_to_mean(plane, target_mean: float) -> np.ndarray:
    """Shift every pixel by ``target_mean - mean(plane)``, then clamp to [0, 255] and round."""
    plane = np.asarray(plane, dtype=np.float64)
    if plane.size == 0:
        raise ValueError("plane must be non-empty")
    shifted = plane + (target_mean - plane.mean())
    return np.rint(np.clip(shifted, 0.0, 255.0)).astype(np.uint8)


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * n) // tiles


def clipped_histogram(values: np.ndarray, clip_limit: float) -> np.ndarray:
    """256-bin histogram clipped at ``clip_limit * n / 256``; the excess is spread evenly."""
    hist = np.bincount(values.ravel(), minlength=256).astype(np.float64)
    limit = max(clip_limit * values.size / 256.0, 1.0)
    excess = np.maximum(hist - limit, 0.0).sum()
    hist = np.minimum(hist, limit) + excess / 256.0
    return hist


def equalization_lut(hist: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(hist)
    return np.clip(255.0 * cdf / cdf[-1], 0.0, 255.0)


def _axis_weights(n: int, edges: np.ndarray):
    """For each pixel coordinate: lower tile index, upper tile index, weight of upper."""
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(n, dtype=np.float64)
    t = len(centers)
    hi = np.searchsorted(centers, pos, side="right")
    lo = np.clip(hi - 1, 0, t - 1)
    hi = np.clip(hi, 0, t - 1)
    span = centers[hi] - centers[lo]
    w = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, np.clip(w, 0.0, 1.0)


def clahe(plane, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization of a uint8 plane.

    ``tiles`` is (columns, rows). Each tile's clipped histogram defines an
    equalization mapping; every pixel blends the mappings of the four
    surrounding tile centres bilinearly (edge pixels clamp to the outer tiles).
    """
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ValueError("clahe expects a 2-D plane")
    height, width = plane.shape
    tx, ty = int(tiles[0]), int(tiles[1])
    if tx < 1 or ty < 1:
        raise ValueError("tile grid must be positive")
    if tx > width or ty > height:
        raise ValueError(f"tile grid {tx}x{ty} is larger than the {width}x{height} image")
    if not clip_limit > 0:
        raise ValueError("clip_limit must be positive")
    plane = plane.astype(np.int64)
    if plane.min() < 0 or plane.max() > 255:
        raise ValueError("plane values must lie in [0, 255]")
    ye, xe = _tile_edges(height, ty), _tile_edges(width, tx)
    luts = np.empty((ty, tx, 256))
    for i in range(ty):
        for j in range(tx):
            tile = plane[ye[i]:ye[i + 1], xe[j]:xe[j + 1]]
            luts[i, j] = equalization_lut(clipped_histogram(tile, clip_limit))

    y0, y1, wy = _axis_weights(height, ye)
    x0, x1, wx = _axis_weights(width, xe)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    WY, WX = wy[:, None], wx[None, :]
    out = (
        (1 - WY) * (1 - WX) * luts[Y0, X0, plane]
        + (1 - WY) * WX * luts[Y0, X1, plane]
        + WY * (1 - WX) * luts[Y1, X0, plane]
        + WY * WX * luts[Y1, X1, plane]
    )
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def correct_color(image: PixelImage, config: ColorCorrectionConfig = ColorCorrectionConfig()) -> PixelImage:
    _, s, v = rgb_to_hsv(image)
    h = np.full(s.shape, float(config.fixed_hue))
    s = offset_channel_to_mean(s, config.target_saturation_mean)
    v = offset_channel_to_mean(v, config.target_value_mean)
    v = clahe(v, config.clahe_clip_limit, config.clahe_tiles)
    return hsv_to_rgb(h, s, v)


def read_ppm(path) -> PixelImage:
    """Read a binary P6 PPM with maxval 255."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6)")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1
    raw = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=pos)
    return PixelImage(width, height, raw.copy())


def write_ppm(path, image: PixelImage) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.pixels.astype(np.uint8).tobytes())


def prep_directory(in_dir, out_dir, config: ColorCorrectionConfig) -> list[Path]:
    """Correct every ``*.ppm`` under ``in_dir`` into ``out_dir`` with the same filename."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for src in sorted(in_dir.glob("*.ppm")):
        dst = out_dir / src.name
        write_ppm(dst, correct_color(read_ppm(src), config))
        written.append(dst)
    return written
