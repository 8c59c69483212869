"""Feature-space transforms: PCA, standardization, gap interpolation, fusion and windowing."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datamodel import FPS, FrameRecord, SubjectSequence

STD_EPSILON = 1e-6
FEATURE_BLOCKS = ("image_feature", "openface_feature", "audio_feature")


# -- PCA ---------------------------------------------------------------------


@dataclass(eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (K, D), orthonormal rows
    explained_variance: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    def save(self, path) -> None:
        """CSV: first row mean, then one row per component, last row explained variances."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([repr(float(v)) for v in self.mean])
            for row in self.components:
                w.writerow([repr(float(v)) for v in row])
            w.writerow([repr(float(v)) for v in self.explained_variance])

    @classmethod
    def load(cls, path) -> "PcaModel":
        with open(path, newline="") as fh:
            rows = [np.array([float(v) for v in r]) for r in csv.reader(fh) if r]
        if len(rows) < 2:
            raise ValueError(f"{path}: not a PCA model file")
        return cls(rows[0], np.vstack(rows[1:-1]) if len(rows) > 2 else np.empty((0, rows[0].size)), rows[-1])


def pca_fit(samples, components: int, sample_fraction: float = 1.0, seed: int = 0) -> PcaModel:
    """Fit PCA on a seeded uniform row subsample via SVD of the centred rows.

    Each component's largest-magnitude entry is made positive so that fits
    are reproducible across platforms.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("samples must be a 2-D matrix")
    if not 0 < sample_fraction <= 1:
        raise ValueError("sample_fraction must lie in (0, 1]")
    m, d = X.shape
    n_keep = m if sample_fraction == 1 else int(round(sample_fraction * m))
    if n_keep < 2:
        raise ValueError(f"subsample has {n_keep} rows; at least 2 are needed")
    if n_keep < m:
        rng = np.random.default_rng(seed)
        X = X[np.sort(rng.choice(m, size=n_keep, replace=False))]
    max_k = min(n_keep - 1, d)
    if not 1 <= components <= max_k:
        raise ValueError(f"components={components} not achievable; maximum is {max_k}")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:components].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(components), pivot])
    comps *= signs[:, None]
    var = s[:components] ** 2 / (n_keep - 1)
    return PcaModel(mean=mean, components=comps, explained_variance=var)


def pca_transform(model: PcaModel, rows) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    if rows.shape[1] != model.mean.size:
        raise ValueError(f"row dimension {rows.shape[1]} does not match model dimension {model.mean.size}")
    return (rows - model.mean) @ model.components.T


def pca_inverse(model: PcaModel, coords) -> np.ndarray:
    return np.atleast_2d(coords) @ model.components + model.mean


# -- standardization ---------------------------------------------------------


def _moments(X: np.ndarray, valid: Optional[np.ndarray]):
    rows = X if valid is None else X[np.asarray(valid, dtype=bool)]
    if rows.shape[0] == 0:
        return np.zeros(X.shape[1]), np.ones(X.shape[1])
    mean = rows.mean(axis=0)
    std = np.sqrt(np.mean((rows - mean) ** 2, axis=0))
    return mean, std


def standardize_per_subject(features, valid=None, epsilon: float = STD_EPSILON) -> np.ndarray:
    """Z-score each dimension with population moments of this subject's valid frames.

    All frames are transformed; only valid frames contribute to the moments.
    The std is floored at ``epsilon`` so constant dimensions map to zero.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("features must be a non-empty T x F matrix")
    mean, std = _moments(X, valid)
    return (X - mean) / np.maximum(std, epsilon)


def global_moments(datasets: Sequence[np.ndarray], valids: Optional[Sequence] = None):
    rows = []
    for i, X in enumerate(datasets):
        X = np.asarray(X, dtype=np.float64)
        rows.append(X if valids is None or valids[i] is None else X[np.asarray(valids[i], dtype=bool)])
    pooled = np.vstack(rows)
    return _moments(pooled, None)


def standardize_global(datasets: Sequence[np.ndarray], valids=None, epsilon: float = STD_EPSILON) -> list[np.ndarray]:
    """As :func:`standardize_per_subject`, with moments pooled over every subject."""
    mean, std = global_moments(datasets, valids)
    scale = np.maximum(std, epsilon)
    return [(np.asarray(X, dtype=np.float64) - mean) / scale for X in datasets]


# -- gap interpolation -------------------------------------------------------


def _blocks(frame: FrameRecord) -> list[str]:
    return [b for b in FEATURE_BLOCKS if getattr(frame, b) is not None]


def interpolate_gaps(sequence: SubjectSequence, max_gap: int = 30) -> list[SubjectSequence]:
    """Fill short runs of missing/invalid frames and split at long ones.

    A run of ``g <= max_gap`` non-valid frames between valid frames ``a`` and
    ``b`` is filled by linear interpolation in frame index; invalid frames that
    were present keep their labels. Longer runs split the sequence into
    segments. Leading and trailing non-valid frames are dropped.
    """
    frames = sequence.frames
    valid_pos = [i for i, f in enumerate(frames) if f.valid]
    if not valid_pos:
        return []
    segments: list[list[FrameRecord]] = [[frames[valid_pos[0]]]]
    for p, q in zip(valid_pos, valid_pos[1:]):
        a, b = frames[p], frames[q]
        gap = b.frame_index - a.frame_index - 1
        if gap > max_gap:
            segments.append([b])
            continue
        if gap > 0:
            present = {f.frame_index: f for f in frames[p + 1:q]}
            blocks = [blk for blk in _blocks(a) if getattr(b, blk) is not None]
            span = b.frame_index - a.frame_index
            for idx in range(a.frame_index + 1, b.frame_index):
                w = (idx - a.frame_index) / span
                old = present.get(idx)
                filled = FrameRecord(
                    video_id=sequence.video_id,
                    frame_index=idx,
                    valid=True,
                    interpolated=True,
                    expression=None if old is None else old.expression,
                    valence=None if old is None else old.valence,
                    arousal=None if old is None else old.arousal,
                )
                for blk in blocks:
                    va, vb = getattr(a, blk), getattr(b, blk)
                    setattr(filled, blk, va + w * (vb - va))
                segments[-1].append(filled)
        segments[-1].append(b)
    return [SubjectSequence(sequence.video_id, seg, sequence.fps) for seg in segments]


# -- fusion and windows ------------------------------------------------------


def fuse(image_block, audio_block=None) -> np.ndarray:
    """Concatenate image then audio features (rows or single vectors)."""
    image_block = np.asarray(image_block, dtype=np.float64)
    if audio_block is None:
        return image_block.copy()
    audio_block = np.asarray(audio_block, dtype=np.float64)
    if audio_block.size == 0:
        return image_block.copy()
    return np.concatenate([image_block, audio_block], axis=-1)


@dataclass(frozen=True)
class WindowConfig:
    N: int = 2
    L: int = 6
    fps: int = FPS
    dim_image: int = 300
    dim_audio: int = 300
    pad: bool = False  # left-pad short histories by repeating the first frame

    def __post_init__(self):
        if self.N < 1 or self.L < 1:
            raise ValueError("N and L must be positive")
        if (self.N * self.fps) % self.L != 0:
            raise ValueError(f"N*fps={self.N * self.fps} is not a multiple of L={self.L}")
        if self.timesteps < 1:
            raise ValueError("window must contain at least one timestep")

    @property
    def timesteps(self) -> int:
        return self.N * self.fps // self.L

    @property
    def span(self) -> int:
        """Frames from the first to the last timestep, inclusive."""
        return (self.timesteps - 1) * self.L + 1

    def feature_dim(self, doubled: bool = True) -> int:
        base = self.dim_audio + self.dim_image
        return 2 * base if doubled else base

    def datasize(self, doubled: bool = True) -> int:
        return self.feature_dim(doubled) * self.timesteps


@dataclass(eq=False)
class WindowBatch:
    windows: np.ndarray  # (W, T, F)
    labels: np.ndarray  # (W,) int or (W, 2) float
    window_keys: list[tuple[str, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.windows.shape[0]

    @staticmethod
    def concat(batches: Sequence["WindowBatch"]) -> "WindowBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            raise ValueError("no windows to concatenate")
        return WindowBatch(
            np.concatenate([b.windows for b in batches]),
            np.concatenate([b.labels for b in batches]),
            [k for b in batches for k in b.window_keys],
        )

    def save(self, path) -> None:
        """Little-endian float32 tensor after a (W, T, F) uint32 header; labels/keys in a CSV sidecar."""
        w, t, f = self.windows.shape
        with open(path, "wb") as fh:
            fh.write(struct.pack("<III", w, t, f))
            fh.write(np.ascontiguousarray(self.windows, dtype="<f4").tobytes())
        with open(str(path) + ".labels.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            labels = np.asarray(self.labels)
            wr.writerow(["video_id", "end_frame", "label"] if labels.ndim == 1 else ["video_id", "end_frame", "valence", "arousal"])
            for (vid, fr), lab in zip(self.window_keys, labels):
                wr.writerow([vid, fr] + (list(np.atleast_1d(lab).tolist())))

    @classmethod
    def load(cls, path) -> "WindowBatch":
        raw = Path(path).read_bytes()
        w, t, f = struct.unpack("<III", raw[:12])
        windows = np.frombuffer(raw, dtype="<f4", offset=12, count=w * t * f).reshape(w, t, f).astype(np.float64)
        keys, labels = [], []
        with open(str(path) + ".labels.csv", newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            for row in rd:
                keys.append((row[0], int(row[1])))
                labels.append(int(row[2]) if len(header) == 3 else [float(row[2]), float(row[3])])
        return cls(windows, np.array(labels), keys)


def window_frame_indices(end: int, config: WindowConfig) -> list[int]:
    T, L = config.timesteps, config.L
    return [end - (T - 1 - k) * L for k in range(T)]


def make_windows(
    features,
    frame_indices,
    labels,
    config: WindowConfig,
    video_id: str = "",
    standardized=None,
    valid=None,
) -> WindowBatch:
    """Cut causal windows of ``T`` timesteps at stride ``L`` ending at each labelled frame.

    ``features`` holds the per-frame fused vectors of one contiguous segment
    (``frame_indices`` consecutive). Unless ``standardized`` is False, each
    vector is doubled by appending its per-subject standardized copy (raw
    first); pass an array to supply that copy precomputed. ``labels`` holds
    one entry per frame; entries that are negative (classification) or NaN
    (regression) mark unlabelled frames.
    """
    X = np.asarray(features, dtype=np.float64)
    idx = np.asarray(frame_indices, dtype=np.int64)
    labels = np.asarray(labels)
    if X.shape[0] != idx.size or labels.shape[0] != idx.size:
        raise ValueError("features, frame_indices and labels must have equal length")
    if idx.size and np.any(np.diff(idx) != 1):
        raise ValueError("frame_indices must be consecutive within a segment")
    if standardized is None:
        X = np.concatenate([X, standardize_per_subject(X, valid)], axis=1) if X.shape[0] else X
    elif standardized is not False:
        X = np.concatenate([X, np.asarray(standardized, dtype=np.float64)], axis=1)

    T, L = config.timesteps, config.L
    reach = (T - 1) * L
    if labels.ndim == 1:
        labelled = labels >= 0
    else:
        labelled = ~np.any(np.isnan(labels), axis=1)
    ends = np.flatnonzero(labelled)
    if not config.pad:
        ends = ends[ends >= reach]
    offsets = np.arange(-reach, 1, L)
    pos = np.clip(ends[:, None] + offsets[None, :], 0, None)
    windows = X[pos] if ends.size else np.empty((0, T, X.shape[1]))
    keys = [(video_id, int(idx[e])) for e in ends]
    return WindowBatch(windows, labels[ends], keys)
