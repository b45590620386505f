"""Small ReLU MLP classifier with hand-written forward/backward passes.

Weights are stored as ``(fan_in, fan_out)`` matrices so a batch ``X`` of shape
``(B, d0)`` maps through ``X @ W + b``. Arithmetic is float64; parameters
produced by :func:`init_model` and :func:`train_submodel` are rounded to
float32-representable values so checkpoints (float32 on disk) reload bit-exactly.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import FormatError, InvalidDimensions, InvalidLabel, RoutingError, ShapeMismatch
from .rngcore import RngStream
from .transform import Ciphertext, ShuffleKey, encrypt

log = logging.getLogger(__name__)

MODEL_MAGIC = b"KSMD"
MODEL_VERSION = 1


@dataclass
class SubModel:
    key_id: Optional[str]
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        dims = self.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise InvalidDimensions("number of layers does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise InvalidDimensions(f"layer {i}: weight {w.shape} / bias {b.shape} inconsistent with {dims}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "SubModel":
        return SubModel(self.key_id, self.layer_dims,
                        [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def logits_encrypted(self, ct: Ciphertext) -> np.ndarray:
        """Forward a tagged ciphertext; refuses images encrypted under another key."""
        if ct.key_id != self.key_id:
            raise RoutingError(f"model bound to {self.key_id!r} received ciphertext of {ct.key_id!r}")
        return forward(self, flatten(ct.data))


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.003
    momentum: float = 0.9
    rng_seed: int = 0
    hidden: tuple[int, ...] = (128,)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidDimensions("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidDimensions("epochs and batch_size must be >= 1")
        self.hidden = tuple(int(h) for h in self.hidden)


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def init_model(layer_dims: Sequence[int], rng_seed: int, key_id: Optional[str] = None) -> SubModel:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise InvalidDimensions(f"invalid layer_dims {layer_dims}")
    root = RngStream(rng_seed)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        z = root.derive(f"layer{i}").normals(fan_in * fan_out).reshape(fan_in, fan_out)
        weights.append(_f32(z * np.sqrt(2.0 / fan_in)))
        biases.append(np.zeros(fan_out))
    return SubModel(key_id, tuple(dims), weights, biases)


def flatten(images: np.ndarray) -> np.ndarray:
    """(B, H, W, C) -> (B, H*W*C); a single (H, W, C) image becomes (H*W*C,)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return images.reshape(-1)
    return images.reshape(images.shape[0], -1)


def _forward_cache(m: SubModel, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.input_dim or x.ndim not in (1, 2):
        raise ShapeMismatch(f"expected input of length {m.input_dim}, got shape {x.shape}")
    acts = [x]
    h = x
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w + b
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return h, acts


def forward(m: SubModel, x: np.ndarray) -> np.ndarray:
    """Logits for one flattened input ``(d0,)`` or a batch ``(B, d0)``."""
    return _forward_cache(m, x)[0]


def backward(m: SubModel, acts: list[np.ndarray], dlogits: np.ndarray, need_params: bool = True):
    """Backpropagate ``dL/dlogits`` through a cached forward pass.

    Returns ``(param_grads, input_grad)``; param grads follow :meth:`SubModel.params`
    order and are summed over the batch.
    """
    grads: list[np.ndarray] = []
    d = dlogits
    for i in range(len(m.weights) - 1, -1, -1):
        a_in = acts[i]
        if need_params:
            if d.ndim == 1:
                gw, gb = np.outer(a_in, d), d.copy()
            else:
                gw, gb = a_in.T @ d, d.sum(axis=0)
            grads = [gw, gb] + grads
        d = d @ m.weights[i].T
        if i > 0:
            d = d * (acts[i] > 0)
    return grads, d


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer) or np.any(labels < 0) or np.any(labels >= k):
        raise InvalidLabel(f"labels must be integers in [0, {k})")
    return labels.astype(np.int64)


def loss_and_grads(m: SubModel, x: np.ndarray, label):
    """Softmax cross-entropy and its analytic gradients.

    Single example: ``x`` is ``(d0,)`` and ``label`` an int. Batch: ``x`` is
    ``(B, d0)``, the loss is the batch mean and gradients are of that mean.
    Returns ``(loss, param_grads, input_grad)``.
    """
    logits, acts = _forward_cache(m, x)
    labels = _check_labels(label, m.num_classes)
    single = logits.ndim == 1
    lg = logits[None] if single else logits
    lab = labels.reshape(-1)
    if lab.size != lg.shape[0]:
        raise ShapeMismatch("one label per input required")
    n = lg.shape[0]
    lsm = log_softmax(lg)
    loss = -lsm[np.arange(n), lab].mean()
    dlogits = np.exp(lsm)
    dlogits[np.arange(n), lab] -= 1.0
    dlogits /= n
    param_grads, input_grad = backward(m, acts, dlogits[0] if single else dlogits)
    return float(loss), param_grads, input_grad


def accuracy(m: SubModel, images: np.ndarray, labels: np.ndarray, key: Optional[ShuffleKey] = None) -> float:
    if len(labels) == 0:
        return 0.0
    x = encrypt(images, key) if key is not None else images
    return float(np.mean(forward(m, flatten(x)).argmax(axis=1) == labels))


def train_submodel(dataset, key: Optional[ShuffleKey], cfg: TrainConfig,
                   progress: Optional[Callable[[dict], None]] = None) -> SubModel:
    """Minibatch SGD with momentum on ``dataset`` encrypted under ``key``.

    ``key=None`` trains a plain (unencrypted) model. ``progress`` receives one
    ``{"epoch", "loss", "train_acc"}`` record per epoch.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    labels = _check_labels(dataset.labels, dataset.num_classes)
    if len(labels) == 0:
        raise ShapeMismatch("cannot train on an empty dataset")
    x = flatten(encrypt(images, key) if key is not None else images)
    dims = (x.shape[1], *cfg.hidden, dataset.num_classes)
    root = RngStream(cfg.rng_seed)
    m = init_model(dims, root.derive("init").next_u64(), key.key_id if key is not None else None)
    velocity = [np.zeros_like(p) for p in m.params()]
    order_rng = root.derive("batches")
    n = len(labels)
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            _, grads, _ = loss_and_grads(m, x[idx], labels[idx])
            for p, v, g in zip(m.params(), velocity, grads):
                v *= cfg.momentum
                v += g
                p -= cfg.learning_rate * v
        if progress is not None:
            logits = forward(m, x)
            loss = float(-log_softmax(logits)[np.arange(n), labels].mean())
            acc = float(np.mean(logits.argmax(axis=1) == labels))
            progress({"epoch": epoch + 1, "loss": loss, "train_acc": acc})
    for p in m.params():
        p[...] = _f32(p)
    return m


def jsonl_progress(stream) -> Callable[[dict], None]:
    """Progress callback writing one JSON object per line to ``stream``."""
    def emit(record: dict) -> None:
        stream.write(json.dumps(record, sort_keys=True) + "\n")
    return emit


def save_model(m: SubModel, path) -> None:
    """Write a ``KSMD`` checkpoint.

    Layout (little-endian): magic, u16 version, u16 key-id length, key id
    (utf-8, empty for plain models), u16 number of dims, u32 per dim, then
    for each layer ``W`` row-major ``(fan_in, fan_out)`` followed by ``b``, all
    as float32.
    """
    for p in m.params():
        if not np.array_equal(_f32(p), p):
            raise ValueError("model parameters are not float32-representable; checkpoint would be lossy")
    kid = (m.key_id or "").encode("utf-8")
    parts = [MODEL_MAGIC, struct.pack("<HH", MODEL_VERSION, len(kid)), kid,
             struct.pack(f"<H{len(m.layer_dims)}I", len(m.layer_dims), *m.layer_dims)]
    parts += [p.astype("<f4").tobytes() for p in m.params()]
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_model(path) -> SubModel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic")
    try:
        version, klen = struct.unpack_from("<HH", raw, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 8
        key_id = raw[off:off + klen].decode("utf-8")
        if len(key_id.encode("utf-8")) != klen:
            raise struct.error("short key id")
        off += klen
        (ndims,) = struct.unpack_from("<H", raw, off)
        off += 2
        dims = struct.unpack_from(f"<{ndims}I", raw, off)
        off += 4 * ndims
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated header") from exc
    sizes = []
    for a, b in zip(dims[:-1], dims[1:]):
        sizes += [(a, b), (b,)]
    expected = off + 4 * sum(int(np.prod(s)) for s in sizes)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    params = []
    for shape in sizes:
        count = int(np.prod(shape))
        params.append(np.frombuffer(raw, "<f4", count, off).astype(np.float64).reshape(shape))
        off += 4 * count
    try:
        return SubModel(key_id or None, dims, params[0::2], params[1::2])
    except InvalidDimensions as exc:
        raise FormatError(f"{path}: {exc}") from exc
