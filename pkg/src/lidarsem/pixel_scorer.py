"""Per-pixel objectness from a linear softmax classifier over range-image features.

The model is deliberately small: two logits per pixel, each an affine
function of 19 standardized features

    3  channels of the pixel (range, intensity, height)
    12 channels of its four neighbours (up, down, left, right)
    4  absolute range jumps to those neighbours

Columns wrap around (the image covers 360 degrees); a neighbour that is
off the image or invalid is replaced by the centre pixel, so its jump is 0.

Externally produced objectness maps can be plugged in through score files
("OBJSCORE" + H*W little-endian float32), which is how a deep network's
output would enter the pipeline.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericalError
from .projection import RANGE, RangeImage

log = logging.getLogger(__name__)

N_FEATURES = 19
SCORE_MAGIC = b"OBJSCORE"
MODEL_MAGIC = b"PXSCORER"
MODEL_VERSION = 1
XI_CLAMP = 1e-6
LOG_CLAMP = 1e-12


def softmax_objectness(a0, a1):
    """Movable-class posterior exp(a1) / (exp(a0) + exp(a1)), overflow-safe."""
    a0 = np.asarray(a0, dtype=float)
    a1 = np.asarray(a1, dtype=float)
    if not (np.all(np.isfinite(a0)) and np.all(np.isfinite(a1))):
        raise NumericalError("non-finite logit")
    m = np.maximum(a0, a1)
    e0 = np.exp(a0 - m)
    e1 = np.exp(a1 - m)
    return e1 / (e0 + e1)


def _softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(p, q, w):
    """-sum_c w_c p_c log q_c per sample (last axis is the class axis)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ConfigError("class weights must be non-negative")
    if np.any(np.abs(q.sum(axis=-1) - 1.0) > 1e-9):
        raise ValueError("predicted distribution does not sum to 1")
    return -np.sum(w * p * np.log(np.maximum(q, LOG_CLAMP)), axis=-1)


def class_balance_weights(counts):
    """Median-frequency balancing: w_c = median(freq) / freq_c."""
    counts = np.asarray(counts, dtype=float)
    if np.any(counts <= 0):
        raise DataError(f"class balancing needs every class present, got counts {counts.tolist()}")
    freq = counts / counts.sum()
    return np.median(freq) / freq


def image_features(img: RangeImage) -> np.ndarray:
    """(H, W, 19) raw features; values at invalid pixels are meaningless."""
    d = img.data
    v = img.valid
    H, W = v.shape
    out = np.empty((H, W, N_FEATURES))
    out[..., :3] = d
    rows = np.arange(H)
    cols = np.arange(W)
    shifts = (
        (np.clip(rows - 1, 0, H - 1), cols, rows > 0),  # up
        (np.clip(rows + 1, 0, H - 1), cols, rows < H - 1),  # down
        (rows, (cols - 1) % W, None),  # left
        (rows, (cols + 1) % W, None),  # right
    )
    for n, (r, c, inside) in enumerate(shifts):
        nd = d[np.ix_(r, c)]
        ok = v[np.ix_(r, c)]
        if inside is not None:
            ok = ok & inside[:, None]
        nd = np.where(ok[..., None], nd, d)
        out[..., 3 + 3 * n: 6 + 3 * n] = nd
        out[..., 15 + n] = np.abs(nd[..., RANGE] - d[..., RANGE])
    return out


@dataclass
class TrainingSample:
    """Valid pixels of one image: raw features ``x`` (N, F) and labels ``y`` (1 = movable)."""

    x: np.ndarray
    y: np.ndarray

    @classmethod
    def from_image(cls, img: RangeImage, labels) -> TrainingSample:
        labels = np.asarray(labels)
        if labels.shape != img.valid.shape:
            raise DataError(f"label grid {labels.shape} does not match image {img.valid.shape}")
        feats = image_features(img)
        return cls(feats[img.valid], labels[img.valid].astype(np.int64))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-6
    momentum: float = 0.99
    epochs: int = 10
    balance: bool = True
    seed: int = 0


@dataclass
class ScorerModel:
    theta: np.ndarray  # (2, F)
    bias: np.ndarray  # (2,)
    mean: np.ndarray  # (F,)
    std: np.ndarray  # (F,)
    class_weights: np.ndarray = field(default_factory=lambda: np.ones(2))
    losses: list = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.theta.shape[1]

    @classmethod
    def zeros(cls, n_features=N_FEATURES) -> ScorerModel:
        return cls(np.zeros((2, n_features)), np.zeros(2), np.zeros(n_features), np.ones(n_features))

    def standardize(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_features:
            raise DataError(f"model expects {self.n_features} features, got {x.shape[-1]}")
        return (x - self.mean) / self.std

    def logits(self, x):
        return self.standardize(x) @ self.theta.T + self.bias


def loss_and_grad(theta, bias, z, y, w):
    """Summed weighted cross-entropy of standardized features ``z`` and its gradient."""
    logits = z @ theta.T + bias
    q = _softmax(logits)
    p = np.zeros_like(q)
    p[np.arange(len(y)), y] = 1.0
    # log-softmax instead of log(q): no clamp, so the loss stays consistent with its gradient
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_q = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-np.sum(w[y] * log_q[np.arange(len(y)), y]))
    # d/da of -w_y log q_y is w_y (q - p)
    g = w[y][:, None] * (q - p)
    return loss, g.T @ z, g.sum(axis=0)


def train(samples, cfg: TrainConfig = TrainConfig(), init: ScorerModel | None = None) -> ScorerModel:
    """SGD with momentum, one image per step, images visited in a seeded order.

    ``losses[0]`` is the total training loss before the first update and
    ``losses[e]`` the total after epoch ``e``.
    """
    samples = list(samples)
    if not samples:
        raise DataError("no training samples")
    y_all = np.concatenate([s.y for s in samples])
    counts = np.bincount(y_all, minlength=2)[:2]
    if np.any(counts == 0):
        raise DataError("training labels contain a single class")
    x_all = np.concatenate([s.x for s in samples])
    if init is None:
        model = ScorerModel.zeros(x_all.shape[1])
        model.mean = x_all.mean(axis=0)
        std = x_all.std(axis=0)
        model.std = np.where(std > 1e-12, std, 1.0)
    else:
        model = ScorerModel(init.theta.copy(), init.bias.copy(), init.mean.copy(), init.std.copy())
    model.class_weights = class_balance_weights(counts) if cfg.balance else np.ones(2)
    w = model.class_weights
    zs = [model.standardize(s.x) for s in samples]

    def total():
        return sum(loss_and_grad(model.theta, model.bias, z, s.y, w)[0] for z, s in zip(zs, samples))

    losses = [total()]
    vt = np.zeros_like(model.theta)
    vb = np.zeros_like(model.bias)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        for i in rng.permutation(len(samples)):
            _, gt, gb = loss_and_grad(model.theta, model.bias, zs[i], samples[i].y, w)
            vt = cfg.momentum * vt - cfg.learning_rate * gt
            vb = cfg.momentum * vb - cfg.learning_rate * gb
            model.theta = model.theta + vt
            model.bias = model.bias + vb
        if not (np.all(np.isfinite(model.theta)) and np.all(np.isfinite(model.bias))):
            raise NumericalError("scorer weights diverged; lower the learning rate")
        losses.append(total())
    model.losses = losses
    return model


@dataclass
class ScoreMap:
    logits: np.ndarray  # (H, W, 2)
    xi: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W)


def predict(model: ScorerModel, img: RangeImage) -> ScoreMap:
    H, W = img.valid.shape
    logits = np.zeros((H, W, 2))
    xi = np.full((H, W), 0.5)
    if img.valid.any():
        feats = image_features(img)[img.valid]
        a = model.logits(feats)
        logits[img.valid] = a
        xi[img.valid] = softmax_objectness(a[:, 0], a[:, 1])
    return ScoreMap(logits, xi, img.valid.copy())


def save_scores(path, scores: ScoreMap) -> None:
    """Objectness grid as "OBJSCORE" + row-major little-endian float32."""
    with open(path, "wb") as fh:
        fh.write(SCORE_MAGIC)
        fh.write(np.asarray(scores.xi, dtype="<f4").tobytes())


def load_scores(path, shape=(64, 870)) -> ScoreMap:
    """Read a score file; logits are rebuilt as (0, logit(xi)) with xi clamped."""
    H, W = shape
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != SCORE_MAGIC:
        raise FormatError(f"{path}: bad score-file magic")
    if len(raw) != 8 + 4 * H * W:
        raise FormatError(f"{path}: expected {H}x{W} float32 values, file holds {(len(raw) - 8) / 4:g}")
    xi = np.frombuffer(raw, dtype="<f4", offset=8).astype(float).reshape(H, W)
    if not np.all(np.isfinite(xi)) or xi.min() < 0 or xi.max() > 1:
        raise FormatError(f"{path}: objectness outside [0, 1]")
    xc = np.clip(xi, XI_CLAMP, 1 - XI_CLAMP)
    logits = np.zeros((H, W, 2))
    logits[..., 1] = np.log(xc / (1 - xc))
    return ScoreMap(logits, xi, np.ones((H, W), dtype=bool))


def save_model(path, model: ScorerModel) -> None:
    F = model.n_features
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, F))
        for arr in (model.theta, model.bias, model.mean, model.std, model.class_weights):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())


def load_model(path) -> ScorerModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad model magic")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated model header")
    version, F = struct.unpack_from("<II", raw, 8)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    sizes = (2 * F, 2, F, F, 2)
    if len(raw) != 16 + 8 * sum(sizes):
        raise FormatError(f"{path}: model size does not match feature dim {F}")
    vals = np.frombuffer(raw, dtype="<f8", offset=16).astype(float)
    parts = np.split(vals, np.cumsum(sizes)[:-1])
    return ScorerModel(parts[0].reshape(2, F), parts[1], parts[2], parts[3], parts[4])
