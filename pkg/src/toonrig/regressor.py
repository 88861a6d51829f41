"""Landmark -> blendshape weight regression with a small numpy MLP."""
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import SchemaError, TrainingError
from .landmarks import LandmarkSet
from .rig import AXES, WEIGHT_LIMIT, ParamVector

log = logging.getLogger(__name__)

MAGIC = b"TRMLP\x00\x00\x01"
VERSION = 1
DEFAULT_HIDDEN = (256, 256, 128)


@dataclass(eq=False)
class MlpModel:
    """Four affine layers, ReLU between them, linear output.

    Inputs are landmark residuals against ``input_offset`` divided by
    ``input_scale``; outputs are weights divided by ``param_scale``.
    """

    weights: list
    biases: list
    activation: str = "relu"
    landmark_ids: tuple = ()
    component_ids: tuple = ()
    rig_fingerprint: str = ""
    input_offset: np.ndarray = None
    input_scale: np.ndarray = None
    param_scale: float = WEIGHT_LIMIT

    def __post_init__(self):
        if len(self.weights) != 4 or len(self.biases) != 4:
            raise SchemaError(f"expected 4 weight layers, got {len(self.weights)}")
        for k in range(4):
            w, b = self.weights[k], self.biases[k]
            if w.shape[1] != b.shape[0] or (k and w.shape[0] != self.weights[k - 1].shape[1]):
                raise SchemaError(f"layer {k} shape {w.shape} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise SchemaError(f"layer {k} has non-finite weights")
        n_in = self.weights[0].shape[0]
        if self.input_offset is None:
            self.input_offset = np.zeros(n_in)
        if self.input_scale is None:
            self.input_scale = np.ones(n_in)

    @property
    def layer_dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_parameters(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self):
        return replace(self, weights=[w.copy() for w in self.weights], biases=[b.copy() for b in self.biases],
                       input_offset=self.input_offset.copy(), input_scale=self.input_scale.copy())

    def __eq__(self, other):
        if not isinstance(other, MlpModel):
            return NotImplemented
        return (self.activation == other.activation and self.landmark_ids == other.landmark_ids
                and self.component_ids == other.component_ids and self.rig_fingerprint == other.rig_fingerprint
                and self.param_scale == other.param_scale
                and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
                and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
                and np.array_equal(self.input_offset, other.input_offset)
                and np.array_equal(self.input_scale, other.input_scale))


def init_model(input_dim, output_dim, hidden=DEFAULT_HIDDEN, seed=0):
    """He-uniform weights, zero biases."""
    if input_dim < 1 or output_dim < 1 or len(hidden) != 3 or min(hidden) < 1:
        raise ValueError("dimensions must be >= 1 with exactly three hidden layers")
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, output_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights, biases)


# -- forward / backward ------------------------------------------------------


def _forward(model, x):
    """Return the list of layer outputs, input first."""
    acts = [x]
    h = x
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if k < 3:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def mse_loss(pred, target):
    """Mean over samples of the per-sample mean squared error."""
    return float(np.mean((pred - target) ** 2))


def backprop(model, x, target):
    """Loss and gradients of :func:`mse_loss` w.r.t. every weight and bias."""
    acts = _forward(model, x)
    n, p = target.shape
    diff = acts[-1] - target
    loss = float(np.mean(diff ** 2))
    delta = 2.0 * diff / (n * p)
    gw = [None] * 4
    gb = [None] * 4
    for k in range(3, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k:
            delta = (delta @ model.weights[k].T) * (acts[k] > 0)
    return loss, gw, gb


def encode_inputs(model, landmarks):
    """Model input rows from a LandmarkSet or an (n, L, 2) / (L, 2) array of normalized points."""
    if isinstance(landmarks, LandmarkSet):
        if model.landmark_ids and landmarks.ids != tuple(model.landmark_ids):
            raise SchemaError("landmark ids/order differ from the model's training schema")
        flat = landmarks.normalized.reshape(1, -1)
    else:
        arr = np.asarray(landmarks, dtype=np.float64)
        n_in = model.weights[0].shape[0]
        if arr.ndim == 1 or (arr.ndim == 2 and arr.size == n_in and arr.shape[1] == 2):
            flat = arr.reshape(1, -1)
        else:
            flat = arr.reshape(arr.shape[0], -1)
    if flat.shape[1] != model.weights[0].shape[0]:
        raise SchemaError(f"expected {model.weights[0].shape[0]} inputs, got {flat.shape[1]}")
    return (flat - model.input_offset) / model.input_scale


def forward(model, landmarks):
    """Normalized weight predictions, one row per input."""
    out = _forward(model, encode_inputs(model, landmarks))[-1]
    return out[0] if isinstance(landmarks, LandmarkSet) else out


def predict_params(model, landmarks):
    out = np.atleast_2d(forward(model, landmarks))
    w = np.clip(out * model.param_scale, -WEIGHT_LIMIT, WEIGHT_LIMIT)
    vectors = [ParamVector.from_array(model.component_ids, row) for row in w]
    return vectors[0] if isinstance(landmarks, LandmarkSet) else vectors


# -- training ----------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 256
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    validation_fraction: float = 0.1
    patience: int = 30
    plateau: int = 10
    lr_decay: float = 0.5
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.validation_fraction < 0.5:
            raise ValueError("validation_fraction must lie in (0, 0.5)")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer '{self.optimizer}'")


@dataclass
class LossHistory:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    learning_rate: list = field(default_factory=list)
    best_epoch: int = -1

    def rows(self):
        return [(k + 1, t, v, lr) for k, (t, v, lr) in enumerate(zip(self.train, self.validation, self.learning_rate))]


class _Adam:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def split_indices(n, fraction, rng):
    order = rng.permutation(n)
    n_val = max(1, int(round(n * fraction)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def fit_input_normalization(model, x_train, template=None):
    """Residual coding against the template (or the training mean), then per-feature scaling."""
    offset = x_train.mean(axis=0) if template is None else np.asarray(template, dtype=np.float64).ravel()
    std = (x_train - offset).std(axis=0)
    scale = np.where(std > 1e-12, std, 1.0)
    return replace(model, input_offset=offset, input_scale=scale)


def train(model, dataset, cfg, template=None):
    """Minimize MSE between predictions and weights / 30.

    ``template`` is the (L, 2) normalized template landmark array used for
    residual coding; ``None`` centers on the training mean instead. Returns the best-validation model
    and its per-epoch history.
    """
    if len(dataset) < 2:
        raise TrainingError("dataset needs at least two samples")
    if model.rig_fingerprint and model.rig_fingerprint != dataset.rig_fingerprint:
        raise SchemaError("dataset was generated from a different rig than the model schema")
    if model.landmark_ids and tuple(model.landmark_ids) != tuple(dataset.landmark_ids):
        raise SchemaError("dataset landmark order differs from the model schema")
    rng = np.random.default_rng(cfg.seed)
    n = len(dataset)
    x_all = dataset.landmarks.reshape(n, -1).astype(np.float64)
    y_all = dataset.params.astype(np.float64) / model.param_scale
    tr, va = split_indices(n, cfg.validation_fraction, rng)
    model = fit_input_normalization(model.copy(), x_all[tr], template)
    model.landmark_ids = tuple(dataset.landmark_ids)
    model.component_ids = tuple(dataset.component_ids)
    model.rig_fingerprint = dataset.rig_fingerprint
    x_tr = (x_all[tr] - model.input_offset) / model.input_scale
    x_va = (x_all[va] - model.input_offset) / model.input_scale
    y_tr, y_va = y_all[tr], y_all[va]

    params = model.weights + model.biases
    opt = _Adam([p.shape for p in params]) if cfg.optimizer == "adam" else None
    lr = cfg.learning_rate
    hist = LossHistory()
    best = (np.inf, model.copy())
    since_best = 0
    since_plateau = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(tr))
        total = 0.0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            loss, gw, gb = backprop(model, x_tr[idx], y_tr[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch + 1}, batch {b + 1}")
            total += loss * len(idx)
            if opt is not None:
                opt.step(params, gw + gb, lr)
            else:
                for p, g in zip(params, gw + gb):
                    p -= lr * g
        train_loss = total / len(order)
        val_loss = mse_loss(_forward(model, x_va)[-1], y_va)
        hist.train.append(train_loss)
        hist.validation.append(val_loss)
        hist.learning_rate.append(lr)
        if val_loss < best[0] * (1 - 1e-4):
            best = (val_loss, model.copy())
            hist.best_epoch = epoch + 1
            since_best = since_plateau = 0
        else:
            since_best += 1
            since_plateau += 1
        if since_plateau >= cfg.plateau and lr > cfg.min_lr:
            lr = max(lr * cfg.lr_decay, cfg.min_lr)
            since_plateau = 0
            log.debug("epoch %d: learning rate -> %g", epoch + 1, lr)
        if since_best >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch + 1, hist.best_epoch)
            break
    return best[1], hist


def gradient_check(model, sample, epsilon=1e-5, n_weights=200, seed=0, grad_fn=backprop):
    """Largest relative gap between ``grad_fn`` and central differences.

    ``sample`` is an (inputs, targets) pair of already-encoded rows. Relative
    error is |a - n| / max(|a| + |n|, 1e-7); the floor keeps exactly-zero
    gradients from dividing by zero.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    x, y = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in sample)
    _, gw, gb = grad_fn(model, x, y)
    tensors = model.weights + model.biases
    grads = gw + gb
    sizes = np.array([t.size for t in tensors])
    rng = np.random.default_rng(seed)
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_weights, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    probe = model.copy()
    ptensors = probe.weights + probe.biases
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        i = flat - offsets[k]
        t = ptensors[k].reshape(-1)
        orig = t[i]
        t[i] = orig + epsilon
        up = mse_loss(_forward(probe, x)[-1], y)
        t[i] = orig - epsilon
        down = mse_loss(_forward(probe, x)[-1], y)
        t[i] = orig
        numeric = (up - down) / (2 * epsilon)
        analytic = float(grads[k].reshape(-1)[i])
        err = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-7)
        worst = max(worst, err)
    return worst


# -- persistence -------------------------------------------------------------

_HEAD = struct.Struct("<8sHI")


def save_model(model, path):
    meta = {
        "layer_dims": model.layer_dims,
        "activation": model.activation,
        "landmark_ids": list(model.landmark_ids),
        "component_ids": list(model.component_ids),
        "axes": list(AXES),
        "rig_fingerprint": model.rig_fingerprint,
        "param_scale": model.param_scale,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    arrays = [model.input_offset, model.input_scale]
    for w, b in zip(model.weights, model.biases):
        arrays += [w, b]
    body = b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)
    Path(path).write_bytes(_HEAD.pack(MAGIC, VERSION, len(blob)) + blob + body)


def load_model(path):
    raw = Path(path).read_bytes()
    magic, version, n_meta = _HEAD.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise SchemaError(f"{path}: not a toonrig model file")
    meta = json.loads(raw[_HEAD.size:_HEAD.size + n_meta])
    dims = meta["layer_dims"]
    pos = _HEAD.size + n_meta

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        a = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += 4 * count
        return a

    offset = take((dims[0],))
    scale = take((dims[0],))
    weights, biases = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        weights.append(take((a, b)))
        biases.append(take((b,)))
    if pos != len(raw):
        raise SchemaError(f"{path}: {len(raw) - pos} trailing bytes")
    return MlpModel(weights, biases, meta["activation"], tuple(meta["landmark_ids"]), tuple(meta["component_ids"]),
                    meta["rig_fingerprint"], offset, scale, meta["param_scale"])


def quantize(model):
    """The model as it reads back from disk (float32 storage)."""
    def q(a):
        return np.asarray(a, dtype=np.float32).astype(np.float64)

    return replace(model, weights=[q(w) for w in model.weights], biases=[q(b) for b in model.biases],
                   input_offset=q(model.input_offset), input_scale=q(model.input_scale))
