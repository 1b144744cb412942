"""MLP classifiers, SGD training, fine-tuning and FTAL extraction."""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T

log = logging.getLogger(__name__)

MAGIC = b"MLPC"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.1
    seed: int = 0
    l2_penalty: float = 1e-4

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0 or self.l2_penalty < 0:
            raise ValueError(f"invalid training config {self}")


DEFAULT_HIDDEN = (64, 64)


class MlpClassifier:
    """Feed-forward ReLU network. Parameters are frozen once constructed."""

    def __init__(self, layer_dims, params, train_seed: int):
        self.layer_dims = tuple(int(d) for d in layer_dims)
        if len(params) != 2 * (len(self.layer_dims) - 1):
            raise ValueError("parameter count does not match layer dims")
        frozen = []
        for i, (fan_in, fan_out) in enumerate(zip(self.layer_dims[:-1], self.layer_dims[1:])):
            w = np.array(params[2 * i], dtype=np.float64)
            b = np.array(params[2 * i + 1], dtype=np.float64)
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ValueError(f"layer {i}: bad parameter shapes {w.shape}, {b.shape}")
            w.setflags(write=False)
            b.setflags(write=False)
            frozen += [w, b]
        self.params = frozen
        self.train_seed = int(train_seed)
        self._digest = None

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def num_classes(self):
        return self.layer_dims[-1]

    @property
    def hidden(self):
        return self.layer_dims[1:-1]

    def to_bytes(self) -> bytes:
        head = MAGIC + struct.pack("<HH", FORMAT_VERSION, len(self.layer_dims))
        head += struct.pack(f"<{len(self.layer_dims)}I", *self.layer_dims)
        head += struct.pack("<q", self.train_seed)
        body = b"".join(p.astype("<f8").tobytes() for p in self.params)
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MlpClassifier":
        if blob[:4] != MAGIC:
            raise ValueError("not a model file")
        version, n = struct.unpack_from("<HH", blob, 4)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        off = 8
        dims = struct.unpack_from(f"<{n}I", blob, off)
        off += 4 * n
        (seed,) = struct.unpack_from("<q", blob, off)
        off += 8
        params = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            for shape in ((fan_in, fan_out), (fan_out,)):
                count = int(np.prod(shape))
                params.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape))
                off += 8 * count
        if off != len(blob):
            raise ValueError("trailing bytes in model file")
        return cls(dims, params, seed)

    @property
    def digest(self) -> str:
        if self._digest is None:
            self._digest = hashlib.sha256(self.to_bytes()).hexdigest()
        return self._digest

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MlpClassifier":
        return cls.from_bytes(Path(path).read_bytes())

    def forward(self, x) -> T.Tensor:
        """Differentiable forward pass with constant weights (for input gradients)."""
        return forward(x, [T.Tensor(p) for p in self.params])

    def __repr__(self):
        return f"MlpClassifier(dims={self.layer_dims}, digest={self.digest[:12]})"


def forward(x, params) -> T.Tensor:
    h = x if isinstance(x, T.Tensor) else T.Tensor(x)
    n_layers = len(params) // 2
    for i in range(n_layers):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n_layers - 1:
            h = T.relu(h)
    return h


def init_mlp(layer_dims, seed: int) -> MlpClassifier:
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return MlpClassifier(layer_dims, params, seed)


def _check_input(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.input_dim:
        raise ValueError(f"input dimension {x.shape[1]} does not match model input {model.input_dim}")
    return x, single


def predict_logits(model: MlpClassifier, x) -> np.ndarray:
    x, single = _check_input(model, x)
    h = x
    n_layers = len(model.params) // 2
    for i in range(n_layers):
        h = h @ model.params[2 * i] + model.params[2 * i + 1]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def predict(model: MlpClassifier, x):
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    logits = predict_logits(model, x)
    return np.argmax(logits, axis=-1)


def accuracy(model: MlpClassifier, x, y) -> float:
    return float(np.mean(predict(model, x) == np.asarray(y)))


def _sgd(model, batches, cfg: TrainConfig, epoch_hook=None, perturb=None):
    """Plain mini-batch SGD. ``perturb(xb, yb, params)`` may replace each batch's inputs."""
    params = [np.array(p) for p in model.params]
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for xb, yb in batches(rng):
            if perturb is not None:
                xb = perturb(xb, yb, params)
            leaves = [T.Tensor(p, requires_grad=True) for p in params]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss = T.softmax_xent(forward(xb, leaves), yb)
            except FloatingPointError:
                raise TrainingDiverged(f"training diverged at epoch {epoch}") from None
            grads = T.backward(loss)
            for p, leaf in zip(params, leaves):
                g = grads[leaf]
                if cfg.l2_penalty and p.ndim == 2:
                    g = g + cfg.l2_penalty * p
                p -= cfg.learning_rate * g
            total += float(loss.data) * len(yb)
            count += len(yb)
        mean_loss = total / max(count, 1)
        if not np.isfinite(mean_loss) or not all(np.isfinite(p).all() for p in params):
            raise TrainingDiverged(f"training diverged at epoch {epoch}")
        history.append(mean_loss)
        if epoch_hook is not None:
            if epoch_hook(epoch, MlpClassifier(model.layer_dims, params, model.train_seed)):
                break
    return MlpClassifier(model.layer_dims, params, model.train_seed), history


def _minibatches(x, y, batch_size):
    def gen(rng):
        order = rng.permutation(len(y))
        for s in range(0, len(y), batch_size):
            idx = order[s:s + batch_size]
            yield x[idx], y[idx]
    return gen


def train(ds, cfg: TrainConfig, hidden=DEFAULT_HIDDEN, return_history=False, perturb=None):
    """Mini-batch SGD on softmax cross-entropy from a seeded initialization."""
    if len(ds) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = init_mlp((ds.dim, *hidden, ds.num_classes), cfg.seed)
    model, history = _sgd(model, _minibatches(ds.features, ds.labels, cfg.batch_size), cfg,
                          perturb=perturb)
    return (model, history) if return_history else model


def fine_tune(model: MlpClassifier, samples, labels, cfg: TrainConfig, base=None,
              per_batch: int = 16, until=None):
    """Continue SGD from ``model``'s weights.

    Without ``base`` the model is tuned on (samples, labels) alone. With a base
    dataset every base batch gets ``per_batch`` trigger samples appended, cycling
    through the trigger set. ``until`` is an optional accuracy on the trigger set
    at which tuning stops early (checked after each epoch).
    """
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(samples) != len(labels):
        raise ValueError("samples and labels are not aligned")
    if base is None:
        batches = _minibatches(samples, labels, cfg.batch_size)
    else:
        bx, by = base.features, base.labels

        def batches(rng):
            order = rng.permutation(len(by))
            trig = rng.permutation(len(labels))
            pos = 0
            for s in range(0, len(by), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                take = trig[(pos + np.arange(per_batch)) % len(labels)]
                pos += per_batch
                yield (np.concatenate([bx[idx], samples[take]]),
                       np.concatenate([by[idx], labels[take]]))

    def reached(epoch, m):
        return accuracy(m, samples, labels) >= until
    tuned, _ = _sgd(model, batches, cfg, None if until is None else reached)
    return tuned


def extract_ftal(source: MlpClassifier, query_x, cfg: TrainConfig, labels=None,
                 source_lr: float | None = 0.1):
    """Fine-Tune-All-Layers extraction.

    Queries are labelled by the source (or by ``labels``, e.g. responses of a
    watermarking API) and a copy of the source is tuned on them with a smaller
    learning rate.
    """
    if source_lr is not None and not cfg.learning_rate < source_lr:
        raise ValueError(f"FTAL learning rate {cfg.learning_rate} must be below the source's {source_lr}")
    query_x = np.asarray(query_x, dtype=np.float64)
    if labels is None:
        labels = predict(source, query_x)
    copy = MlpClassifier(source.layer_dims, source.params, cfg.seed)
    return fine_tune(copy, query_x, labels, cfg)


def with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)
