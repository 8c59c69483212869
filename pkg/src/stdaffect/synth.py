"""Desk-scale synthetic dataset with a planted per-subject feature bias.

Each subject is a sequence of expression episodes. A frame's features are
``baseline_s + amplitude(t) * prototype[c] + noise`` where ``baseline_s`` is a
subject-specific offset whose scale is ``bias`` times the signal scale, so
per-subject standardization removes it while a raw model has to generalise
across unseen offsets. Valence-arousal labels are drawn around
category-specific centres on the circumplex.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import (
    OPENFACE_COLUMNS,
    OPENFACE_DIM,
    DatasetManifest,
    audio_columns,
    image_columns,
    write_block_csv,
)
from .imageprep import PixelImage, write_ppm

VA_CENTRES = {
    0: (0.0, 0.0),
    1: (-0.6, 0.6),
    2: (-0.6, 0.3),
    3: (-0.4, 0.7),
    4: (0.6, 0.5),
    5: (-0.6, -0.5),
    6: (0.3, 0.7),
}


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 20
    n_frames: int = 600
    d_img: int = 64
    d_aud: int = 32
    bias: float = 5.0
    noise: float = 0.6
    episode_min: int = 40
    episode_max: int = 120
    neutral_prob: float = 0.3
    unlabeled_fraction: float = 0.25
    va_noise: float = 0.15
    short_gaps: int = 2
    long_gap_every: int = 4
    images_per_video: int = 2
    image_size: int = 32

    def __post_init__(self):
        for name in ("n_subjects", "n_frames", "d_img", "d_aud", "episode_min", "episode_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.bias < 0 or self.noise < 0:
            raise ValueError("bias and noise must be non-negative")


def _timeline(rng, spec: SynthSpec):
    cats, amps, labeled = [], [], []
    t = 0
    while t < spec.n_frames:
        length = int(rng.integers(spec.episode_min, spec.episode_max + 1))
        c = 0 if rng.random() < spec.neutral_prob else int(rng.integers(1, 7))
        has_label = rng.random() >= spec.unlabeled_fraction
        ramp = np.minimum(1.0, np.minimum(np.arange(length) + 1, length - np.arange(length)) / 8.0)
        cats.extend([c] * length)
        amps.extend(ramp.tolist())
        labeled.extend([has_label] * length)
        t += length
    n = spec.n_frames
    return np.array(cats[:n]), np.array(amps[:n]), np.array(labeled[:n])


def _dropped_frames(rng, spec: SynthSpec, subject: int) -> np.ndarray:
    drop = np.zeros(spec.n_frames, dtype=bool)
    n = spec.n_frames
    for _ in range(spec.short_gaps):
        length = int(rng.integers(1, 11))
        if n > length + 2:
            start = int(rng.integers(1, n - length - 1))
            drop[start:start + length] = True
    if spec.long_gap_every and subject % spec.long_gap_every == spec.long_gap_every - 1 and n > 200:
        start = int(rng.integers(n // 3, n // 2))
        drop[start:start + 40] = True
    drop[0] = drop[-1] = False
    return drop


def _face_image(rng, size: int, brightness: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    skin = np.array([200.0, 150.0, 120.0])
    shade = 0.7 + 0.3 * np.exp(-((xx - 0.5) ** 2 + (yy - 0.45) ** 2) * 6)
    img = skin * shade[..., None] * brightness + rng.normal(0, 4, (size, size, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def make_synthetic(out_dir, spec: SynthSpec = SynthSpec(), seed: int = 0) -> DatasetManifest:
    """Write CSV streams, optional PPM images and ``manifest.ini`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    proto_img = rng.normal(size=(7, spec.d_img))
    proto_of = rng.normal(size=(7, OPENFACE_DIM)) * 0.5
    proto_aud = rng.normal(size=(7, spec.d_aud))
    for p in (proto_img, proto_of, proto_aud):
        p[0] = 0.0  # neutral is the subject's baseline

    img_rows, of_rows, aud_rows, expr_rows, va_rows = [], [], [], [], []
    image_dir = out / "images"
    if spec.images_per_video:
        image_dir.mkdir(exist_ok=True)
    for s in range(spec.n_subjects):
        vid = f"s{s:03d}"
        base_img = rng.normal(size=spec.d_img) * spec.bias
        base_of = rng.normal(size=OPENFACE_DIM) * spec.bias * 0.5
        base_aud = rng.normal(size=spec.d_aud) * spec.bias
        cats, amps, labeled = _timeline(rng, spec)
        drop = _dropped_frames(rng, spec, s)
        n = spec.n_frames
        img = base_img + amps[:, None] * proto_img[cats] + rng.normal(size=(n, spec.d_img)) * spec.noise
        of = base_of + amps[:, None] * proto_of[cats] + rng.normal(size=(n, OPENFACE_DIM)) * spec.noise * 0.5
        aud = base_aud + amps[:, None] * proto_aud[cats] + rng.normal(size=(n, spec.d_aud)) * spec.noise
        centres = np.array([VA_CENTRES[c] for c in cats])
        va = np.clip(centres + rng.normal(size=(n, 2)) * spec.va_noise, -1.0, 1.0)
        for t in range(n):
            if not drop[t]:
                img_rows.append((vid, t, img[t]))
                of_rows.append((vid, t, of[t]))
                aud_rows.append((vid, t, aud[t]))
            if labeled[t]:
                expr_rows.append((vid, t, int(cats[t])))
            va_rows.append((vid, t, va[t]))
        brightness = float(rng.uniform(0.4, 1.1))
        for t in range(min(spec.images_per_video, n)):
            arr = _face_image(rng, spec.image_size, brightness)
            write_ppm(image_dir / f"{vid}_{t}.ppm", PixelImage.from_array(arr))

    write_block_csv(out / "image_features.csv", img_rows, image_columns(spec.d_img))
    write_block_csv(out / "openface.csv", of_rows, OPENFACE_COLUMNS)
    write_block_csv(out / "audio_features.csv", aud_rows, audio_columns(spec.d_aud))
    with open(out / "labels_expr.csv", "w", encoding="utf-8") as fh:
        fh.write("video_id,frame,expression\n")
        for vid, t, c in expr_rows:
            fh.write(f"{vid},{t},{c}\n")
    with open(out / "labels_va.csv", "w", encoding="utf-8") as fh:
        fh.write("video_id,frame,valence,arousal\n")
        for vid, t, (v, a) in va_rows:
            fh.write(f"{vid},{t},{float(v)!r},{float(a)!r}\n")

    manifest = DatasetManifest(
        image_features=out / "image_features.csv",
        openface=out / "openface.csv",
        audio_features=out / "audio_features.csv",
        labels_expr=out / "labels_expr.csv",
        labels_va=out / "labels_va.csv",
        image_dir=image_dir if spec.images_per_video else None,
        d_img=spec.d_img,
        d_aud=spec.d_aud,
    )
    manifest.to_file(out / "manifest.ini")
    return manifest
