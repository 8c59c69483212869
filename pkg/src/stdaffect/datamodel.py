"""Frame records, per-stream ingestion and per-subject sequence assembly.

Every stream is a separate CSV (or JSONL) file keyed by ``(video_id, frame)``.
Streams are joined into one :class:`FrameRecord` per key. A frame is valid
when every declared feature stream supplied a row for it; frames that only
appear in label streams become invalid frames rather than errors.
"""

from __future__ import annotations

import configparser
import csv
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

FPS = 30
OPENFACE_DIM = 43
N_CATEGORIES = 7

OPENFACE_COLUMNS = (
    ["gaze_0", "gaze_1"]
    + [f"au_int_{i}" for i in range(17)]
    + [f"au_occ_{i}" for i in range(18)]
    + [f"pose_{i}" for i in range(6)]
)
assert len(OPENFACE_COLUMNS) == OPENFACE_DIM


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset files."""


@dataclass(eq=False)
class FrameRecord:
    video_id: str
    frame_index: int
    valid: bool = False
    image_feature: Optional[np.ndarray] = None
    openface_feature: Optional[np.ndarray] = None
    audio_feature: Optional[np.ndarray] = None
    expression: Optional[int] = None
    valence: Optional[float] = None
    arousal: Optional[float] = None
    interpolated: bool = False

    @property
    def key(self) -> tuple[str, int]:
        return (self.video_id, self.frame_index)

    @property
    def has_va(self) -> bool:
        return self.valence is not None and self.arousal is not None


@dataclass(eq=False)
class SubjectSequence:
    video_id: str
    frames: list[FrameRecord]
    fps: int = FPS

    def __post_init__(self):
        idx = [f.frame_index for f in self.frames]
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DataError(f"{self.video_id}: frame_index must be strictly increasing")
        for f in self.frames:
            if f.video_id != self.video_id:
                raise DataError(f"frame {f.key} does not belong to sequence {self.video_id}")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class DatasetManifest:
    image_features: Optional[Path] = None
    openface: Optional[Path] = None
    audio_features: Optional[Path] = None
    labels_expr: Optional[Path] = None
    labels_va: Optional[Path] = None
    image_dir: Optional[Path] = None
    d_img: int = 512
    d_aud: int = 300
    fps: int = FPS

    def __post_init__(self):
        if self.fps != FPS:
            raise DataError(f"only {FPS} fps input is supported, manifest declares {self.fps}")

    @property
    def feature_streams(self) -> list[str]:
        return [s for s in ("image_features", "openface", "audio_features") if getattr(self, s) is not None]

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        """Read an INI manifest; relative paths resolve against the manifest's directory."""
        path = Path(path)
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise DataError(f"cannot read manifest {path}")
        if "manifest" not in cp:
            raise DataError(f"{path}: missing [manifest] section")
        sec = cp["manifest"]
        kwargs = {}
        for key in ("image_features", "openface", "audio_features", "labels_expr", "labels_va", "image_dir"):
            val = sec.get(key, "").strip()
            if val:
                p = Path(val)
                kwargs[key] = p if p.is_absolute() else path.parent / p
        for key in ("d_img", "d_aud", "fps"):
            if key in sec:
                kwargs[key] = sec.getint(key)
        return cls(**kwargs)

    def to_file(self, path) -> None:
        path = Path(path)
        cp = configparser.ConfigParser()
        sec = {}
        for key in ("image_features", "openface", "audio_features", "labels_expr", "labels_va", "image_dir"):
            val = getattr(self, key)
            if val is not None:
                val = Path(val)
                try:
                    val = val.relative_to(path.parent)
                except ValueError:
                    pass
                sec[key] = str(val)
        sec["d_img"] = str(self.d_img)
        sec["d_aud"] = str(self.d_aud)
        sec["fps"] = str(self.fps)
        cp["manifest"] = sec
        with open(path, "w", encoding="utf-8") as fh:
            cp.write(fh)


def _read_rows(path: Path):
    """Yield (line_number, dict) for a CSV or JSONL stream."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    if path.suffix == ".jsonl":
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
                if not isinstance(obj, dict):
                    raise DataError(f"{path}:{lineno}: expected a JSON object")
                yield lineno, obj
        return
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            yield lineno, dict(zip(header, row))


def _csv_header(path: Path) -> list[str]:
    if Path(path).suffix == ".jsonl":
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh), [])


def _key(path, lineno, row) -> tuple[str, int]:
    try:
        vid = str(row["video_id"])
        frame = int(row["frame"])
    except (KeyError, ValueError, TypeError):
        raise DataError(f"{path}:{lineno}: malformed video_id/frame") from None
    if frame < 0 or not vid:
        raise DataError(f"{path}:{lineno}: malformed video_id/frame")
    return vid, frame


def _floats(path, lineno, row, columns) -> np.ndarray:
    try:
        vals = np.array([float(row[c]) for c in columns], dtype=float)
    except KeyError as exc:
        raise DataError(f"{path}:{lineno}: missing column {exc.args[0]}") from None
    except (ValueError, TypeError):
        raise DataError(f"{path}:{lineno}: non-numeric value") from None
    if not np.all(np.isfinite(vals)):
        raise DataError(f"{path}:{lineno}: non-finite value")
    return vals


def _block_columns(path: Path, prefix: str, expected: int, stream: str) -> list[str]:
    header = _csv_header(path)
    if not header:
        # JSONL: dimension is checked per row
        return [f"{prefix}{i}" for i in range(expected)]
    if header[:2] != ["video_id", "frame"]:
        raise DataError(f"{path}: header must start with video_id,frame")
    cols = header[2:]
    if len(cols) != expected:
        raise DataError(f"{stream}: dimension mismatch, expected {expected}, got {len(cols)}")
    want = [f"{prefix}{i}" for i in range(expected)]
    if cols != want:
        raise DataError(f"{path}: unexpected feature columns (expected {want[0]}..{want[-1]})")
    return cols


def _check_jsonl_dim(path, lineno, row, prefix, expected, stream):
    n = sum(1 for k in row if k.startswith(prefix))
    if n != expected:
        raise DataError(f"{stream}: dimension mismatch at {path}:{lineno}, expected {expected}, got {n}")


def load_streams(manifest: DatasetManifest) -> list[FrameRecord]:
    """Join every stream named in ``manifest`` into one record per (video_id, frame).

    Records are returned sorted by key. A record is ``valid`` iff all declared
    feature streams supplied a row for its key.
    """
    records: dict[tuple[str, int], FrameRecord] = {}

    def get(key):
        rec = records.get(key)
        if rec is None:
            rec = records[key] = FrameRecord(video_id=key[0], frame_index=key[1])
        return rec

    blocks = (
        ("image_features", "img_", manifest.d_img, "image_feature"),
        ("openface", None, OPENFACE_DIM, "openface_feature"),
        ("audio_features", "aud_", manifest.d_aud, "audio_feature"),
    )
    for stream, prefix, dim, attr in blocks:
        path = getattr(manifest, stream)
        if path is None:
            continue
        path = Path(path)
        if prefix is None:
            header = _csv_header(path) if path.exists() else []
            if header and header != ["video_id", "frame"] + OPENFACE_COLUMNS:
                got = len(header) - 2
                if got != OPENFACE_DIM:
                    raise DataError(f"openface: dimension mismatch, expected {OPENFACE_DIM}, got {got}")
                raise DataError(f"{path}: unexpected openface columns")
            cols = OPENFACE_COLUMNS
        else:
            if not path.exists():
                raise DataError(f"{path}: file not found")
            cols = _block_columns(path, prefix, dim, stream)
        jsonl = path.suffix == ".jsonl"
        for lineno, row in _read_rows(path):
            key = _key(path, lineno, row)
            if jsonl and prefix is not None:
                _check_jsonl_dim(path, lineno, row, prefix, dim, stream)
            rec = get(key)
            if getattr(rec, attr) is not None:
                raise DataError(f"{path}:{lineno}: duplicate key {key}")
            setattr(rec, attr, _floats(path, lineno, row, cols))

    if manifest.labels_expr is not None:
        path = Path(manifest.labels_expr)
        for lineno, row in _read_rows(path):
            key = _key(path, lineno, row)
            try:
                value = int(row["expression"])
            except (KeyError, ValueError, TypeError):
                raise DataError(f"{path}:{lineno}: malformed expression label") from None
            if not 0 <= value < N_CATEGORIES:
                raise DataError(f"{path}:{lineno}: expression label {value} out of range 0..6")
            rec = get(key)
            if rec.expression is not None:
                raise DataError(f"{path}:{lineno}: duplicate key {key}")
            rec.expression = value

    if manifest.labels_va is not None:
        path = Path(manifest.labels_va)
        for lineno, row in _read_rows(path):
            key = _key(path, lineno, row)
            va = _floats(path, lineno, row, ["valence", "arousal"])
            if np.any(np.abs(va) > 1.0):
                raise DataError(f"{path}:{lineno}: valence/arousal outside [-1, 1]")
            rec = get(key)
            if rec.valence is not None:
                raise DataError(f"{path}:{lineno}: duplicate key {key}")
            rec.valence, rec.arousal = float(va[0]), float(va[1])

    attrs = [a for s, _, _, a in blocks if getattr(manifest, s) is not None]
    for rec in records.values():
        rec.valid = bool(attrs) and all(getattr(rec, a) is not None for a in attrs)
    return [records[k] for k in sorted(records)]


def assemble_sequences(records: Iterable[FrameRecord]) -> list[SubjectSequence]:
    by_video: dict[str, list[FrameRecord]] = defaultdict(list)
    seen = set()
    for rec in records:
        if rec.key in seen:
            raise DataError(f"duplicate frame key {rec.key}")
        seen.add(rec.key)
        by_video[rec.video_id].append(rec)
    return [
        SubjectSequence(vid, sorted(frames, key=lambda r: r.frame_index))
        for vid, frames in sorted(by_video.items())
    ]


def gap_runs(sequence: SubjectSequence) -> list[int]:
    """Lengths of interior runs of missing or invalid frames between valid frames."""
    valid_idx = [f.frame_index for f in sequence.frames if f.valid]
    return [b - a - 1 for a, b in zip(valid_idx, valid_idx[1:]) if b - a > 1]


def validate_dataset(sequences: Iterable[SubjectSequence]) -> dict:
    category_counts = {c: 0 for c in range(N_CATEGORIES)}
    frames_per_video = {}
    invalid = 0
    gaps: Counter = Counter()
    va_frames = 0
    for seq in sequences:
        frames_per_video[seq.video_id] = len(seq.frames)
        for f in seq.frames:
            if f.expression is not None:
                category_counts[f.expression] += 1
            if not f.valid:
                invalid += 1
            if f.has_va:
                va_frames += 1
        gaps.update(gap_runs(seq))
    if not frames_per_video:
        return {}
    return {
        "category_counts": category_counts,
        "frames_per_video": frames_per_video,
        "total_frames": sum(frames_per_video.values()),
        "invalid_frames": invalid,
        "va_frames": va_frames,
        "gap_histogram": dict(sorted(gaps.items())),
    }


def _fmt(x: float) -> str:
    return repr(float(x))


def serialize_sequences(sequences: Iterable[SubjectSequence]) -> bytes:
    """Canonical JSONL encoding of sequences (used for determinism checks and caching)."""
    lines = []
    for seq in sequences:
        for f in seq.frames:
            obj = {
                "video_id": f.video_id,
                "frame": f.frame_index,
                "valid": f.valid,
                "interpolated": f.interpolated,
                "expression": f.expression,
                "valence": f.valence,
                "arousal": f.arousal,
            }
            for name in ("image_feature", "openface_feature", "audio_feature"):
                v = getattr(f, name)
                obj[name] = None if v is None else [_fmt(x) for x in v]
            lines.append(json.dumps(obj, sort_keys=True))
    return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


def write_block_csv(path, rows: Iterable[tuple[str, int, np.ndarray]], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "frame"] + columns)
        for vid, frame, vec in rows:
            w.writerow([vid, frame] + [_fmt(v) if not math.isnan(v) else "nan" for v in vec])


def image_columns(d: int) -> list[str]:
    return [f"img_{i}" for i in range(d)]


def audio_columns(d: int) -> list[str]:
    return [f"aud_{i}" for i in range(d)]
