"""Trainable models with hand-written gradients.

* a two-layer single-frame classifier whose hidden layer is reused as the
  per-frame intermediate feature,
* a single-layer GRU over feature windows (classification or VA regression),
* closed-form ridge regression as the valence-arousal regressor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

N_CATEGORIES = 7


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # "adam" or "sgd"
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


class _Params:
    """Mixin: parameter bundles are dataclasses whose fields are all ndarrays."""

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.arrays().items()})

    def zeros_like(self):
        return type(self)(**{k: np.zeros_like(v) for k, v in self.arrays().items()})

    def allclose(self, other, atol=0.0) -> bool:
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(
            a[k].shape == b[k].shape and np.allclose(a[k], b[k], rtol=0, atol=atol) for k in a
        )


@dataclass(eq=False)
class MlpParams(_Params):
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.W1.shape[0]

    @property
    def input_size(self) -> int:
        return self.W1.shape[1]


@dataclass(eq=False)
class GruParams(_Params):
    Wz: np.ndarray
    Wr: np.ndarray
    Wh: np.ndarray
    Uz: np.ndarray
    Ur: np.ndarray
    Uh: np.ndarray
    bz: np.ndarray
    br: np.ndarray
    bh: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray

    @property
    def hidden_size(self) -> int:
        return self.Uz.shape[0]

    @property
    def input_size(self) -> int:
        return self.Wz.shape[1]


@dataclass(eq=False)
class RidgeParams(_Params):
    W: np.ndarray  # (outputs, F)
    b: np.ndarray
    lam: np.ndarray  # 0-d, kept as an array for serialization


def _glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_mlp(input_size: int, hidden_size: int, seed: int = 0, n_out: int = N_CATEGORIES) -> MlpParams:
    rng = np.random.default_rng(seed)
    return MlpParams(
        W1=_glorot(rng, hidden_size, input_size),
        b1=np.zeros(hidden_size),
        W2=_glorot(rng, n_out, hidden_size),
        b2=np.zeros(n_out),
    )


def init_gru(input_size: int, hidden_size: int = 64, n_out: int = N_CATEGORIES, seed: int = 0) -> GruParams:
    rng = np.random.default_rng(seed)
    H, F = hidden_size, input_size
    return GruParams(
        Wz=_glorot(rng, H, F), Wr=_glorot(rng, H, F), Wh=_glorot(rng, H, F),
        Uz=_glorot(rng, H, H), Ur=_glorot(rng, H, H), Uh=_glorot(rng, H, H),
        bz=np.zeros(H), br=np.zeros(H), bh=np.zeros(H),
        Wo=_glorot(rng, n_out, H), bo=np.zeros(n_out),
    )


# -- shared pieces -----------------------------------------------------------


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cross_entropy(logits, labels, reduction: str = "mean"):
    """Softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.size)
    loss = -logp[rows, labels]
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    if reduction == "mean":
        return float(loss.mean()), grad / labels.size
    if reduction == "sum":
        return float(loss.sum()), grad
    raise ValueError(f"unknown reduction {reduction!r}")


def squared_error(outputs, targets, reduction: str = "mean"):
    diff = np.atleast_2d(outputs) - np.atleast_2d(targets)
    loss = (diff ** 2).sum(axis=1)
    grad = 2.0 * diff
    if reduction == "mean":
        return float(loss.mean()), grad / diff.shape[0]
    if reduction == "sum":
        return float(loss.sum()), grad
    raise ValueError(f"unknown reduction {reduction!r}")


class _Optimizer:
    def __init__(self, params: _Params, config: TrainConfig):
        self.config = config
        self.t = 0
        if config.optimizer == "adam":
            self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
            self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}

    def step(self, params: _Params, grads: dict[str, np.ndarray], frozen=()) -> None:
        cfg = self.config
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
        self.t += 1
        for name, g in grads.items():
            if name in frozen:
                continue
            g = g * scale
            p = getattr(params, name)
            if cfg.optimizer == "sgd":
                p -= cfg.learning_rate * g
                continue
            b1, b2, eps = 0.9, 0.999, 1e-8
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p -= cfg.learning_rate * mhat / (np.sqrt(vhat) + eps)


# -- single-frame network ----------------------------------------------------


def mlp_forward(params: MlpParams, x):
    """Return (logits, hidden) for one vector or a batch of rows; hidden = relu(W1 x + b1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_size:
        raise ValueError(f"input dimension {x.shape[-1]} does not match model input {params.input_size}")
    hidden = np.maximum(x @ params.W1.T + params.b1, 0.0)
    logits = hidden @ params.W2.T + params.b2
    return logits, hidden


def mlp_loss_and_grads(params: MlpParams, X, y, reduction: str = "mean"):
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    pre = X @ params.W1.T + params.b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params.W2.T + params.b2
    loss, dlogits = cross_entropy(logits, y, reduction)
    dh = dlogits @ params.W2
    dpre = dh * (pre > 0)
    grads = {
        "W2": dlogits.T @ hidden,
        "b2": dlogits.sum(axis=0),
        "W1": dpre.T @ X,
        "b1": dpre.sum(axis=0),
    }
    return loss, grads


def train_single_frame(
    X,
    y,
    config: TrainConfig = TrainConfig(),
    hidden_size: int = 300,
    freeze_hidden: bool = False,
    init: Optional[MlpParams] = None,
    history: Optional[list] = None,
) -> MlpParams:
    """Mini-batch descent on mean softmax cross-entropy.

    ``freeze_hidden`` trains only the output layer, which makes the objective
    convex (softmax regression on fixed random features). When ``history`` is
    given, the full-data loss after each epoch is appended to it.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise TrainingError("training set is empty")
    if y.shape[0] != X.shape[0]:
        raise TrainingError("X and y lengths differ")
    params = init.copy() if init is not None else init_mlp(X.shape[1], hidden_size, config.seed)
    opt = _Optimizer(params, config)
    rng = np.random.default_rng(config.seed + 1)
    frozen = ("W1", "b1") if freeze_hidden else ()
    n = X.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            _, grads = mlp_loss_and_grads(params, X[batch], y[batch])
            opt.step(params, grads, frozen)
        if history is not None:
            history.append(mlp_loss_and_grads(params, X, y)[0])
    return params


def extract_intermediate(params: MlpParams, X) -> np.ndarray:
    return mlp_forward(params, X)[1]


# -- GRU ---------------------------------------------------------------------


def _gru_run(params: GruParams, X: np.ndarray):
    B, T, _ = X.shape
    H = params.hidden_size
    h = np.zeros((B, H))
    # input projections for all steps at once
    xz = X @ params.Wz.T + params.bz
    xr = X @ params.Wr.T + params.br
    xh = X @ params.Wh.T + params.bh
    cache = []
    for t in range(T):
        z = _sigmoid(xz[:, t] + h @ params.Uz.T)
        r = _sigmoid(xr[:, t] + h @ params.Ur.T)
        cand = np.tanh(xh[:, t] + (r * h) @ params.Uh.T)
        h_new = (1.0 - z) * h + z * cand
        cache.append((h, z, r, cand))
        h = h_new
    return h, cache


def _as_batch(params: GruParams, windows) -> np.ndarray:
    X = np.asarray(windows, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != params.input_size:
        raise ValueError(
            f"window feature dimension {X.shape[-1]} does not match model input {params.input_size}"
        )
    return X


def gru_forward(params: GruParams, window) -> np.ndarray:
    """Readout of the final hidden state; a (T, F) window gives a vector, (B, T, F) a matrix."""
    single = np.ndim(window) == 2
    X = _as_batch(params, window)
    h, _ = _gru_run(params, X)
    out = h @ params.Wo.T + params.bo
    return out[0] if single else out


def gru_gradients(params: GruParams, windows, targets, loss: str = "ce", reduction: str = "mean"):
    """Loss value and exact gradients by backpropagation through time.

    ``loss`` is "ce" (integer targets) or "mse" (real targets, squared error
    summed over outputs).
    """
    X = _as_batch(params, windows)
    h_last, cache = _gru_run(params, X)
    out = h_last @ params.Wo.T + params.bo
    if loss == "ce":
        value, dout = cross_entropy(out, targets, reduction)
    elif loss == "mse":
        value, dout = squared_error(out, targets, reduction)
    else:
        raise ValueError(f"unknown loss {loss!r}")

    g = params.zeros_like()
    g.Wo = dout.T @ h_last
    g.bo = dout.sum(axis=0)
    dh = dout @ params.Wo
    for t in range(X.shape[1] - 1, -1, -1):
        h_prev, z, r, cand = cache[t]
        x = X[:, t]
        dcand = dh * z
        dz = dh * (cand - h_prev)
        dh_prev = dh * (1.0 - z)

        da_h = dcand * (1.0 - cand * cand)
        g.Wh += da_h.T @ x
        g.bh += da_h.sum(axis=0)
        g.Uh += da_h.T @ (r * h_prev)
        drh = da_h @ params.Uh
        dr = drh * h_prev
        dh_prev += drh * r

        da_z = dz * z * (1.0 - z)
        g.Wz += da_z.T @ x
        g.bz += da_z.sum(axis=0)
        g.Uz += da_z.T @ h_prev
        dh_prev += da_z @ params.Uz

        da_r = dr * r * (1.0 - r)
        g.Wr += da_r.T @ x
        g.br += da_r.sum(axis=0)
        g.Ur += da_r.T @ h_prev
        dh_prev += da_r @ params.Ur

        dh = dh_prev
    return value, g


def train_multi_frame(
    windows,
    labels,
    config: TrainConfig = TrainConfig(),
    hidden_size: int = 64,
    task: str = "classification",
    history: Optional[list] = None,
) -> GruParams:
    """Seeded mini-batch training of a GRU on (W, T, F) windows.

    ``task`` is "classification" (cross-entropy over 7 categories) or
    "regression" (squared error on valence-arousal pairs).
    """
    X = np.asarray(windows, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 3 or X.shape[0] == 0:
        raise TrainingError("no training windows")
    if task == "classification":
        n_out, loss = N_CATEGORIES, "ce"
    elif task == "regression":
        n_out, loss = (y.shape[1] if y.ndim == 2 else 1), "mse"
        y = y.reshape(len(y), n_out).astype(np.float64)
    else:
        raise ValueError(f"unknown task {task!r}")
    params = init_gru(X.shape[2], hidden_size, n_out, config.seed)
    opt = _Optimizer(params, config)
    rng = np.random.default_rng(config.seed + 1)
    n = X.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            value, grads = gru_gradients(params, X[batch], y[batch], loss)
            opt.step(params, grads.arrays())
            total += value * batch.size
        if history is not None:
            history.append(total / n)
    return params


# -- ridge regression --------------------------------------------------------


def ridge_fit(X, Y, lam: float = 1.0) -> RidgeParams:
    """Closed-form ridge regression on centred data (the intercept is not penalised)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] < 1 or X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y must have the same, non-zero number of rows")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    A = Xc.T @ Xc + lam * np.eye(X.shape[1])
    if lam == 0 and (np.linalg.matrix_rank(A) < A.shape[0]):
        raise ValueError("normal equations are singular with lam=0; use lam > 0")
    W = np.linalg.solve(A, Xc.T @ Yc).T
    return RidgeParams(W=W, b=ym - W @ xm, lam=np.array(float(lam)))


def ridge_predict(params: RidgeParams, X) -> np.ndarray:
    return np.atleast_2d(np.asarray(X, dtype=np.float64)) @ params.W.T + params.b


# -- prediction --------------------------------------------------------------


def predict_expression(params: Union[MlpParams, GruParams], inputs):
    """Return (categories, probabilities); ties in argmax go to the lowest category."""
    if isinstance(params, MlpParams):
        logits = mlp_forward(params, np.atleast_2d(inputs))[0]
    elif isinstance(params, GruParams):
        logits = gru_forward(params, _as_batch(params, inputs))
    else:
        logits = np.atleast_2d(np.asarray(params, dtype=np.float64))
    probs = softmax(logits)
    return np.argmax(logits, axis=1), probs


def predict_logits(logits):
    """Same contract as :func:`predict_expression` for precomputed logits."""
    return predict_expression(np.atleast_2d(logits), None)


# -- serialization -----------------------------------------------------------

_MAGIC = b"STDAFFP1"
_KINDS = {"mlp": MlpParams, "gru": GruParams, "ridge": RidgeParams}


def save_params(path, params: _Params) -> None:
    """Flat binary: magic, kind, array count, then per array name/shape/little-endian float64 data."""
    kind = next(k for k, cls in _KINDS.items() if isinstance(params, cls))
    out = [_MAGIC, struct.pack("<B", len(kind)), kind.encode()]
    arrays = params.arrays()
    out.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<B", len(name)) + name.encode())
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_params(path) -> _Params:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a parameter file")
    pos = len(_MAGIC)
    n = raw[pos]
    kind = raw[pos + 1:pos + 1 + n].decode()
    pos += 1 + n
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        n = raw[pos]
        name = raw[pos + 1:pos + 1 + n].decode()
        pos += 1 + n
        ndim = raw[pos]
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return _KINDS[kind](**arrays)
