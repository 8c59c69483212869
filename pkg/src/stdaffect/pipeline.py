"""End-to-end experiment runner and ablation reporting.

A run reads a dataset manifest, trains the single-frame network (with one
pseudo-label round), optionally trains the windowed GRU on intermediate
features, and writes every artifact plus the final report to a run directory.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import features as F
from .datamodel import DatasetManifest, SubjectSequence, assemble_sequences, load_streams, validate_dataset
from .imageprep import ColorCorrectionConfig, prep_directory
from .metrics import MetricsReport, evaluate, render_table, report_to_rows
from .model import (
    TrainConfig,
    extract_intermediate,
    predict_expression,
    ridge_fit,
    ridge_predict,
    save_params,
    train_multi_frame,
    train_single_frame,
)
from .pseudolabel import FrameSet, balance_classes, generate_pseudo_labels, parse_strategy, retrain_with_pseudo

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    manifest: Optional[Path] = None
    tag: str = "run"
    seed: int = 0
    # ablation switches
    multi_frame: bool = True
    per_subject_standardize: bool = True
    global_standardize: bool = False
    use_audio: bool = True
    pseudo_label: bool = True
    prep_images: bool = True
    # features
    window_N: int = 2
    window_L: int = 6
    window_pad: bool = False
    image_dim: int = 300
    image_pca: int = 0
    audio_pca: int = 300
    pca_sample_fraction: float = 0.01
    max_gap: int = 30
    # training
    gru_hidden: int = 64
    val_fraction: float = 0.2
    balance: str = "min"
    va_lambda: float = 1.0
    single: TrainConfig = field(default_factory=TrainConfig)
    multi: TrainConfig = field(default_factory=TrainConfig)

    _SECTIONS = {
        "experiment": ("manifest", "tag", "seed"),
        "ablation": ("multi_frame", "per_subject_standardize", "global_standardize", "use_audio", "pseudo_label", "prep_images"),
        "features": ("window_N", "window_L", "window_pad", "image_dim", "image_pca", "audio_pca", "pca_sample_fraction", "max_gap"),
        "training": ("gru_hidden", "val_fraction", "balance", "va_lambda"),
    }

    @classmethod
    def from_file(cls, path, **overrides) -> "ExperimentConfig":
        """Load a flat ``key = value`` INI file. Relative manifest paths resolve against the file."""
        path = Path(path)
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(f"cannot read config {path}")
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for section, keys in cls._SECTIONS.items():
            if section not in cp:
                continue
            sec = cp[section]
            for key in keys:
                # configparser folds option names to lower case
                if key.lower() not in sec:
                    continue
                typ = types[key]
                if typ in ("bool", bool):
                    kwargs[key] = sec.getboolean(key.lower())
                elif typ in ("int", int):
                    kwargs[key] = sec.getint(key.lower())
                elif typ in ("float", float):
                    kwargs[key] = sec.getfloat(key.lower())
                elif key == "manifest":
                    p = Path(sec[key])
                    kwargs[key] = p if p.is_absolute() else path.parent / p
                else:
                    kwargs[key] = sec[key]
            unknown = set(sec) - {k.lower() for k in keys}
            if unknown:
                raise ValueError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
        for name in ("single", "multi"):
            sec_name = f"{name}_train"
            if sec_name in cp:
                sec = cp[sec_name]
                tc = {}
                for f in fields(TrainConfig):
                    if f.name in sec:
                        tc[f.name] = sec[f.name] if f.name == "optimizer" else (
                            sec.getint(f.name) if f.name in ("seed", "epochs", "batch_size") else sec.getfloat(f.name)
                        )
                kwargs[name] = TrainConfig(**tc)
        kwargs.update(overrides)
        return cls(**kwargs)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        for section, keys in self._SECTIONS.items():
            cp[section] = {k: str(getattr(self, k)) for k in keys}
        for name in ("single", "multi"):
            cp[f"{name}_train"] = {k: str(v) for k, v in asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def switches(self) -> dict:
        w = F.WindowConfig(self.window_N, self.window_L)
        return {
            "multi_frame": self.multi_frame,
            "standardize": self.per_subject_standardize,
            "global_standardize": self.global_standardize,
            "audio": self.use_audio,
            "gru_size": w.timesteps if self.multi_frame else None,
            "image_dim": self.image_dim,
        }


# -- helpers -----------------------------------------------------------------


class _Segment:
    """Dense arrays for one contiguous gap-filled segment."""

    def __init__(self, seq: SubjectSequence):
        self.video_id = seq.video_id
        fr = seq.frames
        self.frames = np.array([f.frame_index for f in fr], dtype=np.int64)
        self.image = np.vstack([f.image_feature for f in fr]) if fr[0].image_feature is not None else None
        self.openface = np.vstack([f.openface_feature for f in fr]) if fr[0].openface_feature is not None else None
        self.audio = np.vstack([f.audio_feature for f in fr]) if fr[0].audio_feature is not None else None
        self.expr = np.array([-1 if f.expression is None else f.expression for f in fr], dtype=np.int64)
        self.va = np.array(
            [[np.nan, np.nan] if not f.has_va else [f.valence, f.arousal] for f in fr], dtype=np.float64
        )

    def __len__(self):
        return self.frames.size

    def keys(self, mask=None):
        idx = self.frames if mask is None else self.frames[mask]
        return [(self.video_id, int(i)) for i in idx]


@dataclass
class _Encoder:
    """Single-frame input preparation: optional image PCA, then a z-score fitted on training rows."""

    image_pca: Optional[F.PcaModel]
    mean: np.ndarray
    std: np.ndarray

    def raw(self, seg: _Segment) -> np.ndarray:
        blocks = []
        if seg.image is not None:
            blocks.append(F.pca_transform(self.image_pca, seg.image) if self.image_pca else seg.image)
        if seg.openface is not None:
            blocks.append(seg.openface)
        return np.hstack(blocks)

    def __call__(self, seg: _Segment) -> np.ndarray:
        return (self.raw(seg) - self.mean) / self.std

    def save(self, path) -> None:
        arrays = {"mean": self.mean, "std": self.std}
        if self.image_pca is not None:
            arrays.update(pca_mean=self.image_pca.mean, pca_components=self.image_pca.components,
                          pca_var=self.image_pca.explained_variance)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path) -> "_Encoder":
        with np.load(path) as z:
            pca = F.PcaModel(z["pca_mean"], z["pca_components"], z["pca_var"]) if "pca_mean" in z else None
            return cls(pca, z["mean"], z["std"])


def load_encoder(path):
    return _Encoder.load(path)


def segments_from_manifest(manifest: DatasetManifest, max_gap: int = 30):
    records = load_streams(manifest)
    sequences = assemble_sequences(records)
    report = validate_dataset(sequences)
    segs = []
    for seq in sequences:
        for part in F.interpolate_gaps(seq, max_gap):
            segs.append(_Segment(part))
    return sequences, segs, report


def split_videos(video_ids: Sequence[str], val_fraction: float, seed: int):
    vids = sorted(set(video_ids))
    if len(vids) < 2:
        return set(vids), set()
    rng = np.random.default_rng(seed)
    order = [vids[i] for i in rng.permutation(len(vids))]
    n_val = min(len(vids) - 1, max(1, int(round(val_fraction * len(vids)))))
    return set(order[n_val:]), set(order[:n_val])


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


class _Run:
    def __init__(self, run_dir: Path):
        self.dir = run_dir
        self.log_path = run_dir / "stages.log"
        self.log_path.write_text("")

    def stage(self, name: str, fn, *args, **kwargs):
        try:
            result = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as exc:
            with open(self.log_path, "a") as fh:
                fh.write(f"{name}\tfailed\t{type(exc).__name__}: {exc}\n")
            raise StageError(name, exc) from exc
        with open(self.log_path, "a") as fh:
            fh.write(f"{name}\tok\n")
        log.info("stage %s done", name)
        return result


def make_run_dir(root, tag: str) -> Path:
    root = Path(root)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{tag}"
    path, k = base, 1
    while path.exists():
        path = Path(f"{base}-{k}")
        k += 1
    path.mkdir(parents=True)
    return path


# -- the pipeline ------------------------------------------------------------


def run_pipeline(config: ExperimentConfig, run_dir=None, runs_root="runs", stop_after: Optional[str] = None) -> MetricsReport:
    """Execute every stage for ``config``; returns the validation report.

    ``stop_after="train-single"`` ends after the (re)trained single-frame
    network has been written; no report is produced in that case and None
    is returned.
    """
    if config.manifest is None:
        raise StageError("config", ValueError("no manifest configured"))
    run_dir = Path(run_dir) if run_dir is not None else make_run_dir(runs_root, config.tag)
    run_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(run_dir)
    (run_dir / "config.ini").write_text(config.to_ini())
    (run_dir / "seed.txt").write_text(f"{config.seed}\n")

    manifest = run.stage("manifest", DatasetManifest.from_file, config.manifest)
    _, segs, validation = run.stage("load", segments_from_manifest, manifest, config.max_gap)
    (run_dir / "validation.json").write_text(json.dumps(validation, indent=2, sort_keys=True, default=str))
    if not segs:
        raise StageError("load", ValueError("dataset has no valid frames"))

    if config.prep_images and manifest.image_dir is not None and Path(manifest.image_dir).is_dir():
        run.stage("prep-image", prep_directory, manifest.image_dir, run_dir / "images", ColorCorrectionConfig())

    train_v, val_v = split_videos([s.video_id for s in segs], config.val_fraction, config.seed)
    _write_csv(run_dir / "split.csv", ["video_id", "split"],
               [(v, "train") for v in sorted(train_v)] + [(v, "val") for v in sorted(val_v)])
    train = [s for s in segs if s.video_id in train_v]
    val = [s for s in segs if s.video_id in val_v]

    encoder = run.stage("fit-pca", _fit_encoder, config, train, run_dir)
    audio_pca = None
    if config.use_audio and train[0].audio is not None:
        audio_pca = run.stage("fit-pca", _fit_audio_pca, config, train, run_dir)

    mlp = run.stage("train-single", _train_single, config, train, encoder, run_dir)
    if stop_after == "train-single":
        return None

    report_extra = {}
    if config.multi_frame:
        preds, truth, keys = run.stage("train-multi", _train_multi, config, train, val, encoder, mlp, audio_pca, run_dir)
        report_extra["eval_windows"] = len(keys)
    else:
        preds, truth, keys = run.stage("predict-single", _predict_single, val, encoder, mlp)

    va = run.stage("va-regression", _va_regression, config, train, val, encoder, audio_pca)
    report = run.stage("evaluate", _evaluate, truth, preds, va)
    report.extras.update(report_extra)
    report.extras["switches"] = json.dumps(config.switches(), sort_keys=True)

    _write_csv(run_dir / "predictions.csv", ["video_id", "frame", "expression"],
               [(k[0], k[1], int(p)) for k, p in zip(keys, preds)])
    if va is not None:
        _write_csv(run_dir / "predictions_va.csv", ["video_id", "frame", "valence", "arousal"],
                   [(k[0], k[1], repr(float(p[0])), repr(float(p[1]))) for k, p in zip(va[2], va[1])])
    _write_csv(run_dir / "report.csv", ["metric", "value"], report_to_rows(report))
    summary = {
        "tag": config.tag,
        "seed": config.seed,
        **config.switches(),
        "score": report.expression_score,
        "f1": report.macro_f1,
        "accuracy": report.accuracy,
        "ccc_valence": report.ccc_valence,
        "ccc_arousal": report.ccc_arousal,
        "n_eval": len(keys),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (run_dir / "report.txt").write_text(ablation_table([summary]))
    return report


def _fit_encoder(config: ExperimentConfig, train, run_dir: Path) -> _Encoder:
    image_pca = None
    if config.image_pca and train[0].image is not None:
        rows = np.vstack([s.image for s in train])
        image_pca = F.pca_fit(rows, config.image_pca, _fraction(config, rows.shape[0], config.image_pca), config.seed)
        image_pca.save(run_dir / "pca_image.csv")
    enc = _Encoder(image_pca, np.zeros(1), np.ones(1))
    raw = np.vstack([enc.raw(s) for s in train])
    mean, std = raw.mean(axis=0), raw.std(axis=0)
    enc.mean, enc.std = mean, np.maximum(std, F.STD_EPSILON)
    return enc


def _fraction(config, n_rows, k):
    """Use the configured sampling fraction unless it leaves too few rows for k components."""
    frac = config.pca_sample_fraction
    if frac * n_rows < k + 1:
        frac = min(1.0, (k + 1) / n_rows)
        log.info("PCA sample fraction raised to %.4f to fit %d components", frac, k)
    return frac


def _fit_audio_pca(config: ExperimentConfig, train, run_dir: Path):
    rows = np.vstack([s.audio for s in train])
    k = config.audio_pca
    if not k or k >= rows.shape[1]:
        return None
    model = F.pca_fit(rows, k, _fraction(config, rows.shape[0], k), config.seed)
    model.save(run_dir / "pca_audio.csv")
    return model


def _frameset(segs, encoder, mask_fn) -> FrameSet:
    keys, X, y, va = [], [], [], []
    for s in segs:
        m = mask_fn(s)
        if not m.any():
            continue
        keys.extend(s.keys(m))
        X.append(encoder(s)[m])
        y.append(s.expr[m])
        va.append(s.va[m])
    if not X:
        return FrameSet([], np.empty((0, 1)), np.empty(0, dtype=np.int64))
    return FrameSet(keys, np.vstack(X), np.concatenate(y), np.vstack(va))


def _train_single(config: ExperimentConfig, train, encoder: _Encoder, run_dir: Path):
    labeled = _frameset(train, encoder, lambda s: s.expr >= 0)
    strategy, cap = parse_strategy(config.balance)
    idx = balance_classes(labeled.y, strategy, cap, seed=config.single.seed)
    base = train_single_frame(labeled.X[idx], labeled.y[idx], config.single, hidden_size=config.image_dim)
    save_params(run_dir / "mlp_base.bin", base)
    encoder.save(run_dir / "encoder.npz")
    if not config.pseudo_label:
        save_params(run_dir / "mlp.bin", base)
        return base

    cand = _frameset(train, encoder, lambda s: (s.expr < 0) & ~np.isnan(s.va[:, 0]))
    candidates = [
        {"key": k, "x": x, "expression": None, "valence": v[0], "arousal": v[1]}
        for k, x, v in zip(cand.keys, cand.X, cand.va if cand.va is not None else [])
    ]
    result = generate_pseudo_labels(base, candidates)
    _write_csv(run_dir / "pseudo_labels.csv", ["video_id", "frame", "pseudo_expression", "accepted"],
               [(k[0], k[1], int(c), int(a)) for k, c, a in zip(result.keys, result.categories, result.accepted)])
    acc = np.flatnonzero(result.accepted)
    pseudo = FrameSet([result.keys[i] for i in acc], cand.X[acc], result.categories[acc]) if acc.size else None
    mlp = retrain_with_pseudo(labeled, pseudo, config.single, config.image_dim, config.balance)
    save_params(run_dir / "mlp.bin", mlp)
    return mlp


def _predict_single(val, encoder, mlp):
    fs = _frameset(val, encoder, lambda s: s.expr >= 0)
    if len(fs) == 0:
        raise ValueError("validation split has no labelled frames")
    preds, _ = predict_expression(mlp, fs.X)
    return preds, fs.y, fs.keys


def intermediate_features(config: ExperimentConfig, segs, encoder, mlp, audio_pca):
    """Per-segment fused intermediate features (hidden layer, then audio)."""
    out = []
    for s in segs:
        hidden = extract_intermediate(mlp, encoder(s))
        audio = None
        if config.use_audio and s.audio is not None:
            audio = F.pca_transform(audio_pca, s.audio) if audio_pca is not None else s.audio
        out.append(F.fuse(hidden, audio))
    return out


def build_windows(config: ExperimentConfig, segs, fused, wcfg: F.WindowConfig, global_moments=None):
    batches = []
    for s, X in zip(segs, fused):
        raw = X
        if config.global_standardize:
            mean, std = global_moments
            raw = (X - mean) / np.maximum(std, F.STD_EPSILON)
        std_block = F.standardize_per_subject(X) if config.per_subject_standardize else False
        batches.append(F.make_windows(raw, s.frames, s.expr, wcfg, s.video_id, standardized=std_block))
    return F.WindowBatch.concat(batches)


def _train_multi(config, train, val, encoder, mlp, audio_pca, run_dir: Path):
    fused_train = intermediate_features(config, train, encoder, mlp, audio_pca)
    fused_val = intermediate_features(config, val, encoder, mlp, audio_pca)
    dim_audio = fused_train[0].shape[1] - config.image_dim
    wcfg = F.WindowConfig(config.window_N, config.window_L, dim_image=config.image_dim, dim_audio=dim_audio,
                          pad=config.window_pad)
    moments = F.global_moments(fused_train + fused_val) if config.global_standardize else None
    wtrain = build_windows(config, train, fused_train, wcfg, moments)
    wval = build_windows(config, val, fused_val, wcfg, moments)
    wtrain.save(run_dir / "windows_train.bin")
    wval.save(run_dir / "windows_val.bin")
    gru = train_multi_frame(wtrain.windows, wtrain.labels, config.multi, hidden_size=config.gru_hidden)
    save_params(run_dir / "gru.bin", gru)
    preds, _ = predict_expression(gru, wval.windows)
    return preds, wval.labels, wval.window_keys


def _va_regression(config, train, val, encoder, audio_pca):
    def rows(segs):
        keys, X, Y = [], [], []
        for s in segs:
            m = ~np.isnan(s.va[:, 0])
            if not m.any():
                continue
            blocks = [encoder(s)]
            if config.use_audio and s.audio is not None:
                blocks.append(F.pca_transform(audio_pca, s.audio) if audio_pca is not None else s.audio)
            X.append(np.hstack(blocks)[m])
            Y.append(s.va[m])
            keys.extend(s.keys(m))
        return keys, (np.vstack(X) if X else None), (np.vstack(Y) if Y else None)

    _, Xt, Yt = rows(train)
    keys, Xv, Yv = rows(val)
    if Xt is None or Xv is None or len(keys) < 2:
        return None
    params = ridge_fit(Xt, Yt, config.va_lambda)
    pred = np.clip(ridge_predict(params, Xv), -1.0, 1.0)
    return Yv, pred, keys


def _evaluate(truth, preds, va):
    if va is None:
        return evaluate(truth, preds)
    return evaluate(truth, preds, va_truth=va[0], va_pred=va[1])


# -- ablation ----------------------------------------------------------------

ABLATION_COLUMNS = ["Method", "Multi-frame", "Standardize", "Audio", "GRU size", "Image dim", "Score", "F1", "Acc"]


def ablation_table(rows: Sequence[dict]) -> str:
    """Ablation comparison table; rows sorted by score, failed rows last."""
    ok = [r for r in rows if not r.get("failed")]
    failed = [r for r in rows if r.get("failed")]
    ok.sort(key=lambda r: (-float(r["score"]), str(r.get("tag", ""))))
    table_rows = []
    for r in ok:
        table_rows.append({
            "Method": r.get("tag", ""),
            "Multi-frame": bool(r.get("multi_frame")),
            "Standardize": bool(r.get("standardize")),
            "Audio": bool(r.get("audio")),
            "GRU size": r.get("gru_size"),
            "Image dim": r.get("image_dim"),
            "Score": float(r["score"]),
            "F1": float(r["f1"]),
            "Acc": float(r["accuracy"]),
        })
    for r in failed:
        table_rows.append({"Method": r.get("tag", ""), "Score": "FAILED"})
    return render_table(table_rows, ABLATION_COLUMNS)


def report_ablation(run_dirs: Sequence) -> str:
    rows = []
    for d in run_dirs:
        d = Path(d)
        try:
            rows.append(json.loads((d / "summary.json").read_text()))
        except (OSError, ValueError, KeyError):
            rows.append({"tag": d.name, "failed": True})
    return ablation_table(rows)


# ablation archetypes, from single-frame up to multi-modal with both standardizations: (tag, overrides)
ABLATION_ARCHETYPES = [
    ("single-frame", dict(multi_frame=False, per_subject_standardize=False, use_audio=False)),
    ("multi-frame", dict(multi_frame=True, per_subject_standardize=False, use_audio=False)),
    ("multi-frame-std", dict(multi_frame=True, per_subject_standardize=True, use_audio=False)),
    ("multi-modal-std", dict(multi_frame=True, per_subject_standardize=True, use_audio=True)),
    ("multi-modal-std-global", dict(multi_frame=True, per_subject_standardize=True, use_audio=True, global_standardize=True)),
]


def run_ablation(config: ExperimentConfig, runs_root, archetypes=ABLATION_ARCHETYPES) -> tuple[list[Path], str]:
    dirs = []
    for tag, overrides in archetypes:
        cfg = replace(config, tag=tag, **overrides)
        d = make_run_dir(runs_root, tag)
        try:
            run_pipeline(cfg, run_dir=d)
        except StageError as exc:
            log.error("%s failed: %s", tag, exc)
        dirs.append(d)
    return dirs, report_ablation(dirs)
