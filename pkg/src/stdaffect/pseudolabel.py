"""Pseudo-labelling of VA-only frames, circumplex filtering and class balancing."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import MlpParams, TrainConfig, predict_expression, train_single_frame

# Acceptance predicates on (valence, arousal); every inequality is strict.
CIRCUMPLEX_RULES: dict[int, Callable[[float, float], bool]] = {
    0: lambda v, a: abs(v) < 0.5 and abs(a) < 0.5,
    1: lambda v, a: v < 0 and a > 0,
    2: lambda v, a: v < 0 and a > 0,
    3: lambda v, a: v < 0 and a > 0,
    4: lambda v, a: v > 0 and a > 0,
    5: lambda v, a: v < 0 and a < 0,
    6: lambda v, a: a > 0,
}


@dataclass(eq=False)
class FrameSet:
    """Keyed rows of single-frame inputs with integer expression labels."""

    keys: list[tuple[str, int]]
    X: np.ndarray
    y: np.ndarray
    va: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if not (len(self.keys) == self.X.shape[0] == self.y.shape[0]):
            raise ValueError("keys, X and y must have equal length")

    def __len__(self) -> int:
        return len(self.keys)

    def subset(self, idx) -> "FrameSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FrameSet(
            [self.keys[i] for i in idx],
            self.X[idx],
            self.y[idx],
            None if self.va is None else self.va[idx],
        )


@dataclass
class PseudoLabelResult:
    keys: list[tuple[str, int]]
    categories: np.ndarray
    accepted: np.ndarray
    skipped: int = 0
    excluded: int = 0
    counts: dict = field(default_factory=dict)


def filter_by_circumplex(category: int, valence: float, arousal: float) -> bool:
    if not (-1.0 <= valence <= 1.0 and -1.0 <= arousal <= 1.0):
        raise ValueError(f"valence/arousal ({valence}, {arousal}) outside [-1, 1]")
    try:
        rule = CIRCUMPLEX_RULES[int(category)]
    except KeyError:
        raise ValueError(f"category {category} not in 0..6") from None
    return bool(rule(valence, arousal))


def generate_pseudo_labels(mlp: MlpParams, candidates: list[dict]) -> PseudoLabelResult:
    """Predict categories for frames that have VA labels but no expression label.

    Each candidate is a mapping with ``key``, ``x`` (input vector or None),
    ``expression`` (int or None), ``valence`` and ``arousal`` (float or None).
    Frames with an expression label or without VA are excluded; frames without
    features are skipped. Both are counted.
    """
    keys, rows, va = [], [], []
    skipped = excluded = 0
    for c in candidates:
        if c.get("expression") is not None or c.get("valence") is None or c.get("arousal") is None:
            excluded += 1
            continue
        x = c.get("x")
        if x is None or not np.all(np.isfinite(x)):
            skipped += 1
            continue
        keys.append(c["key"])
        rows.append(np.asarray(x, dtype=np.float64))
        va.append((float(c["valence"]), float(c["arousal"])))
    if rows:
        cats, _ = predict_expression(mlp, np.vstack(rows))
    else:
        cats = np.empty(0, dtype=np.int64)
    accepted = np.array(
        [filter_by_circumplex(int(k), v, a) for k, (v, a) in zip(cats, va)], dtype=bool
    )
    counts = {c: int(np.sum(cats[accepted] == c)) for c in range(7)}
    return PseudoLabelResult(keys, cats, accepted, skipped, excluded, counts)


def parse_strategy(text: str):
    """``"min"`` or ``"cap:N"`` -> (strategy, cap)."""
    if text == "min":
        return "min", None
    if text.startswith("cap:"):
        return "cap", int(text[4:])
    raise ValueError(f"unknown balance strategy {text!r} (use 'min' or 'cap:N')")


def balance_classes(labels, strategy: str = "min", cap: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """Indices of a class-balanced subset, in original order.

    "min" downsamples every category to the smallest category count; "cap"
    downsamples categories above ``cap`` to ``cap``. Sampling is seeded and
    without replacement.
    """
    labels = np.asarray(labels, dtype=np.int64)
    cats, counts = np.unique(labels, return_counts=True)
    if cats.size == 0:
        raise ValueError("no categories present")
    if strategy == "min":
        target = int(counts.min())
    elif strategy == "cap":
        if cap is None or cap < 1:
            raise ValueError("cap strategy needs a positive cap")
        target = int(cap)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    keep = []
    for c, n in zip(cats, counts):
        idx = np.flatnonzero(labels == c)
        if n > target:
            idx = rng.choice(idx, size=target, replace=False)
        keep.append(idx)
    return np.sort(np.concatenate(keep))


def retrain_with_pseudo(
    labeled: FrameSet,
    pseudo: Optional[FrameSet],
    config: TrainConfig = TrainConfig(),
    hidden_size: int = 300,
    balance: str = "min",
) -> MlpParams:
    """Balance the union of labelled and accepted pseudo-labelled frames, then train."""
    if len(labeled) == 0:
        raise ValueError("labeled set is empty")
    if pseudo is not None and len(pseudo):
        clash = sorted(set(labeled.keys) & set(pseudo.keys))
        if clash:
            raise ValueError(f"pseudo-labelled frames collide with labelled keys: {clash[:10]}")
        union = FrameSet(labeled.keys + pseudo.keys, np.vstack([labeled.X, pseudo.X]), np.concatenate([labeled.y, pseudo.y]))
    else:
        union = labeled
    strategy, cap = parse_strategy(balance)
    idx = balance_classes(union.y, strategy, cap, seed=config.seed)
    return train_single_frame(union.X[idx], union.y[idx], config, hidden_size=hidden_size)
