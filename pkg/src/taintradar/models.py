"""Small CNN classifiers: definition, training, persistence, and prediction.

A ``Model`` is an ordered layer list with one designated last convolutional
layer whose activations are captured on every forward pass. Persistence uses
the ``TRM1`` format (magic, version, class count, layer descriptors, float32
LE weights, trailing CRC32); the per-pixel training-mean image used as a
filling pattern travels in an RT1 sidecar next to the model file.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from . import engine
from .engine import Tape, Tensor
from .formats import read_rt1, write_rt1
from .validation import check_images, check_labels


class ArchitectureError(ValueError):
    """Layer descriptors that cannot be chained into a model."""


class ModelFormatError(ValueError):
    """Bad magic, version, or checksum in a model file."""


@dataclass
class Conv2dLayer:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0
    weight: np.ndarray = None
    bias: np.ndarray = None


@dataclass
class DenseLayer:
    units: int
    weight: np.ndarray = None
    bias: np.ndarray = None


@dataclass
class ReluLayer:
    pass


@dataclass
class MaxPool2dLayer:
    kernel: int = 2
    stride: int = 2


@dataclass
class FlattenLayer:
    pass


_LAYER_KINDS = {"conv2d": Conv2dLayer, "relu": ReluLayer, "maxpool2d": MaxPool2dLayer,
                "flatten": FlattenLayer, "dense": DenseLayer}


@dataclass
class Model:
    layers: list
    input_shape: tuple          # (C, H, W)
    num_classes: int
    last_conv_index: int
    mean_image: Optional[np.ndarray] = None

    def weight_layers(self):
        return [(i, l) for i, l in enumerate(self.layers) if isinstance(l, (Conv2dLayer, DenseLayer))]

    @property
    def tap_index(self) -> int:
        """Layer whose output is recorded as the feature maps A: the ReLU
        right after the last conv when present (post-activation maps), else
        the conv itself."""
        nxt = self.last_conv_index + 1
        if nxt < len(self.layers) and isinstance(self.layers[nxt], ReluLayer):
            return nxt
        return self.last_conv_index

    def parameters(self) -> list:
        out = []
        for _, l in self.weight_layers():
            out += [l.weight, l.bias]
        return out

    @property
    def feature_shape(self) -> tuple:
        shape = (1,) + tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            shape = _layer_out_shape(layer, shape)
            if i == self.last_conv_index:
                return shape[1:]
        raise ArchitectureError("last_conv_index outside layer list")

    def astype(self, dtype) -> "Model":
        layers = []
        for l in self.layers:
            if isinstance(l, Conv2dLayer):
                layers.append(Conv2dLayer(l.out_channels, l.kernel, l.stride, l.pad,
                                          l.weight.astype(dtype), l.bias.astype(dtype)))
            elif isinstance(l, DenseLayer):
                layers.append(DenseLayer(l.units, l.weight.astype(dtype), l.bias.astype(dtype)))
            else:
                layers.append(l)
        mean = None if self.mean_image is None else self.mean_image.astype(dtype)
        return Model(layers, self.input_shape, self.num_classes, self.last_conv_index, mean)

    def forward(self, x, tape: Tape = None, weight_tensors: dict = None):
        """Run the network on a batch; returns (logits, last-conv activations).

        ``weight_tensors`` maps layer index -> (weight Tensor, bias Tensor)
        for training steps that need gradients w.r.t. parameters; otherwise
        weights enter the tape as constants.
        """
        if isinstance(x, Tensor):
            t = x
        elif tape is not None:
            t = tape.leaf(x)
        else:
            t = Tensor(np.asarray(x))
        feats = None
        tap = self.tap_index
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2dLayer):
                w, b = (weight_tensors or {}).get(i, (layer.weight, layer.bias))
                t = engine.conv2d(t, w, b, stride=layer.stride, pad=layer.pad)
            elif isinstance(layer, ReluLayer):
                t = engine.relu(t)
            elif isinstance(layer, MaxPool2dLayer):
                t = engine.maxpool2d(t, layer.kernel, layer.stride)
            elif isinstance(layer, FlattenLayer):
                t = engine.flatten(t)
            elif isinstance(layer, DenseLayer):
                w, b = (weight_tensors or {}).get(i, (layer.weight, layer.bias))
                t = engine.dense(t, w, b)
            if i == tap:
                feats = t
        return t, feats


def _layer_out_shape(layer, shape):
    if isinstance(layer, Conv2dLayer):
        n, c, h, w = shape
        oh = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        ow = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        return (n, layer.out_channels, oh, ow)
    if isinstance(layer, MaxPool2dLayer):
        n, c, h, w = shape
        return (n, c, (h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1)
    if isinstance(layer, FlattenLayer):
        return (shape[0], int(np.prod(shape[1:])))
    if isinstance(layer, DenseLayer):
        return (shape[0], layer.units)
    return shape


def parse_architecture(spec: dict) -> tuple:
    """Validate an architecture dict; returns (input_shape, layer list)."""
    try:
        input_shape = tuple(int(v) for v in spec["input_shape"])
        entries = spec["layers"]
    except (KeyError, TypeError) as exc:
        raise ArchitectureError(f"architecture needs 'input_shape' and 'layers': {exc}")
    if len(input_shape) != 3:
        raise ArchitectureError(f"input_shape must be (C, H, W), got {input_shape}")
    layers = []
    for entry in entries:
        kind = entry.get("kind")
        if kind not in _LAYER_KINDS:
            raise ArchitectureError(f"unknown layer kind {kind!r}")
        if kind == "conv2d":
            layers.append(Conv2dLayer(int(entry["out_channels"]), int(entry["kernel"]),
                                      int(entry.get("stride", 1)), int(entry.get("pad", 0))))
        elif kind == "maxpool2d":
            layers.append(MaxPool2dLayer(int(entry.get("kernel", 2)), int(entry.get("stride", 2))))
        elif kind == "dense":
            layers.append(DenseLayer(int(entry["units"])))
        else:
            layers.append(_LAYER_KINDS[kind]())
    return input_shape, layers


def build_model(architecture: dict, seed: int = 0) -> Model:
    """Instantiate a model with He-uniform weights from a descriptor dict."""
    input_shape, layers = parse_architecture(architecture)
    rng = np.random.default_rng(seed)
    shape = (1,) + input_shape
    last_conv = -1
    seen_dense = False
    for i, layer in enumerate(layers):
        if isinstance(layer, Conv2dLayer):
            if seen_dense or len(shape) != 4:
                raise ArchitectureError("conv after dense unsupported")
            fan_in = shape[1] * layer.kernel * layer.kernel
            limit = np.sqrt(6.0 / fan_in)
            layer.weight = rng.uniform(-limit, limit,
                                       (layer.out_channels, shape[1], layer.kernel, layer.kernel)
                                       ).astype(np.float32)
            layer.bias = np.zeros(layer.out_channels, dtype=np.float32)
            last_conv = i
        elif isinstance(layer, DenseLayer):
            if len(shape) != 2:
                raise ArchitectureError(
                    f"dense layer {i} needs flattened input, got shape {shape}")
            limit = np.sqrt(6.0 / shape[1])
            layer.weight = rng.uniform(-limit, limit, (shape[1], layer.units)).astype(np.float32)
            layer.bias = np.zeros(layer.units, dtype=np.float32)
            seen_dense = True
        shape = _layer_out_shape(layer, shape)
        if any(d <= 0 for d in shape):
            raise ArchitectureError(f"layer {i} collapses shape to {shape}")
    if last_conv < 0:
        raise ArchitectureError("architecture contains no convolutional layer")
    if len(shape) != 2:
        raise ArchitectureError(f"network must end in a dense head, final shape {shape}")
    return Model(layers, input_shape, int(shape[1]), last_conv)


@dataclass
class Prediction:
    logits: np.ndarray            # (m,)
    probs: np.ndarray             # (m,)
    label: int
    feature_maps: np.ndarray      # (K, Hf, Wf)
    tape: Tape = None             # live tape handles for gradient passes
    z: Tensor = None              # (1, m) on the tape
    feats: Tensor = None          # (1, K, Hf, Wf) on the tape


@dataclass
class RankingView:
    order: np.ndarray    # class indices, descending probability
    rank_of: np.ndarray  # 1-based rank per class index


def rankings(probs) -> RankingView:
    """Descending probability ranking; ties broken by ascending class index."""
    p = np.asarray(probs)
    if p.ndim != 1 or p.size < 2:
        raise ValueError(f"rankings needs a 1-d probability vector of length >= 2, got {p.shape}")
    order = np.argsort(-p, kind="stable")
    rank_of = np.empty(p.size, dtype=np.int64)
    rank_of[order] = np.arange(1, p.size + 1)
    return RankingView(order=order, rank_of=rank_of)


def predict(model: Model, image) -> Prediction:
    """Single-image forward pass with a live tape and the last-conv tap."""
    img = check_images(image, model.input_shape, name="image")
    tape = Tape(np.float32 if model.parameters()[0].dtype == np.float32 else model.parameters()[0].dtype)
    x = tape.leaf(img[None])
    z, feats = model.forward(x, tape=tape)
    logits = np.array(z.data[0])
    probs = engine.softmax_with_temperature(Tensor(logits), 1.0).data
    return Prediction(logits=logits, probs=probs, label=int(probs.argmax()),
                      feature_maps=np.array(feats.data[0]), tape=tape, z=z, feats=feats)


def predict_batch(model: Model, images) -> tuple:
    """Tape-free batched forward; returns (logits, labels)."""
    x = check_images(images, model.input_shape, name="images", batched=True)
    z, _ = model.forward(x)
    return z.data, z.data.argmax(axis=1)


@dataclass
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 64
    val_fraction: float = 0.1
    seed: int = 0
    flip_augment: bool = False
    verbose: bool = False


@dataclass
class TrainResult:
    model: Model
    accuracy: float
    history: list = field(default_factory=list)


def train(model: Model, dataset, hyper: TrainConfig = None) -> TrainResult:
    """Adam / cross-entropy training with a seeded held-out split."""
    hyper = hyper or TrainConfig()
    images, labels = dataset
    images = check_images(images, model.input_shape, name="dataset images", batched=True)
    labels = check_labels(labels, model.num_classes, n=images.shape[0])
    if images.shape[0] == 0:
        raise ValueError("empty dataset")

    rng = np.random.default_rng(hyper.seed)
    perm = rng.permutation(images.shape[0])
    n_val = max(1, int(round(hyper.val_fraction * images.shape[0])))
    val_idx, trn_idx = perm[:n_val], perm[n_val:]
    if trn_idx.size == 0:
        trn_idx = val_idx

    widx = model.weight_layers()
    params = model.parameters()
    opt = engine.Adam(params, lr=hyper.learning_rate)
    history = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(trn_idx)
        losses = []
        for start in range(0, order.size, hyper.batch_size):
            batch = order[start:start + hyper.batch_size]
            xb = images[batch]
            yb = labels[batch]
            if hyper.flip_augment:
                flip = rng.random(batch.size) < 0.5
                xb = xb.copy()
                xb[flip] = xb[flip, :, :, ::-1]
            tape = Tape(np.float32)
            tensors = {}
            leaves = []
            for i, layer in widx:
                wt, bt = tape.leaf(layer.weight), tape.leaf(layer.bias)
                tensors[i] = (wt, bt)
                leaves += [wt, bt]
            z, _ = model.forward(tape.leaf(xb), tape=tape, weight_tensors=tensors)
            loss = engine.scale(engine.tmean(engine.pick_rows(engine.log_softmax(z, 1.0), yb)), -1.0)
            if not np.isfinite(loss.data):
                raise FloatingPointError("training loss diverged to NaN/Inf")
            grads = engine.backward(tape, loss)
            opt.step([grads.array(t) for t in leaves])
            losses.append(float(loss.data))
        acc = accuracy(model, images[val_idx], labels[val_idx])
        history.append({"epoch": epoch, "loss": float(np.mean(losses)) if losses else None, "val_acc": acc})
        if hyper.verbose:
            print(f"epoch {epoch + 1}/{hyper.epochs}  loss={history[-1]['loss']:.4f}  val_acc={acc:.4f}")
    model.mean_image = images[trn_idx].mean(axis=0).astype(np.float32)
    final_acc = accuracy(model, images[val_idx], labels[val_idx])
    return TrainResult(model=model, accuracy=final_acc, history=history)


def accuracy(model: Model, images, labels, batch_size: int = 256) -> float:
    images = np.asarray(images)
    labels = np.asarray(labels)
    hits = 0
    for start in range(0, images.shape[0], batch_size):
        z, pred = predict_batch(model, images[start:start + batch_size])
        hits += int((pred == labels[start:start + batch_size]).sum())
    return hits / max(1, images.shape[0])


# ---------------------------------------------------------------------------
# TRM1 persistence
# ---------------------------------------------------------------------------

TRM1_MAGIC = b"TRM1"
TRM1_VERSION = 1
_KIND_CODES = {Conv2dLayer: 1, ReluLayer: 2, MaxPool2dLayer: 3, FlattenLayer: 4, DenseLayer: 5}


def save_model(model: Model, path) -> None:
    chunks = [TRM1_MAGIC, struct.pack("<I", TRM1_VERSION),
              struct.pack("<I", model.num_classes),
              struct.pack("<3I", *model.input_shape),
              struct.pack("<I", model.last_conv_index),
              struct.pack("<I", len(model.layers))]
    for layer in model.layers:
        chunks.append(struct.pack("<B", _KIND_CODES[type(layer)]))
        if isinstance(layer, Conv2dLayer):
            chunks.append(struct.pack("<4I", layer.out_channels, layer.kernel, layer.stride, layer.pad))
        elif isinstance(layer, MaxPool2dLayer):
            chunks.append(struct.pack("<2I", layer.kernel, layer.stride))
        elif isinstance(layer, DenseLayer):
            chunks.append(struct.pack("<I", layer.units))
    for _, layer in model.weight_layers():
        chunks.append(struct.pack("<I", layer.weight.ndim))
        chunks.append(struct.pack(f"<{layer.weight.ndim}I", *layer.weight.shape))
        chunks.append(np.ascontiguousarray(layer.weight, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF))
    if model.mean_image is not None:
        write_rt1(str(path) + ".mean.rt1", model.mean_image)


class _Reader:
    def __init__(self, data, path):
        self.data, self.off, self.path = data, 0, path

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.data):
            raise ModelFormatError(f"{self.path}: truncated model file")
        out = struct.unpack_from(fmt, self.data, self.off)
        self.off += size
        return out

    def raw(self, size):
        if self.off + size > len(self.data):
            raise ModelFormatError(f"{self.path}: truncated model file")
        out = self.data[self.off:self.off + size]
        self.off += size
        return out


def load_model(path) -> Model:
    blob = Path(path).read_bytes()
    if len(blob) < 8 or blob[:4] != TRM1_MAGIC:
        raise ModelFormatError(f"{path}: bad magic, expected {TRM1_MAGIC!r}")
    body, (crc_stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ModelFormatError(f"{path}: checksum failure")
    r = _Reader(body, path)
    r.take("<4s")
    (version,) = r.take("<I")
    if version != TRM1_VERSION:
        raise ModelFormatError(f"{path}: version mismatch ({version}, supported {TRM1_VERSION})")
    (num_classes,) = r.take("<I")
    input_shape = r.take("<3I")
    (last_conv,) = r.take("<I")
    (n_layers,) = r.take("<I")
    codes = {v: k for k, v in _KIND_CODES.items()}
    layers = []
    for _ in range(n_layers):
        (code,) = r.take("<B")
        if code not in codes:
            raise ModelFormatError(f"{path}: unknown layer code {code}")
        cls = codes[code]
        if cls is Conv2dLayer:
            oc, k, s, p = r.take("<4I")
            layers.append(Conv2dLayer(oc, k, s, p))
        elif cls is MaxPool2dLayer:
            k, s = r.take("<2I")
            layers.append(MaxPool2dLayer(k, s))
        elif cls is DenseLayer:
            (u,) = r.take("<I")
            layers.append(DenseLayer(u))
        else:
            layers.append(cls())
    for layer in layers:
        if isinstance(layer, (Conv2dLayer, DenseLayer)):
            (ndim,) = r.take("<I")
            shape = r.take(f"<{ndim}I")
            count = int(np.prod(shape))
            layer.weight = np.frombuffer(r.raw(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
            nb = shape[0] if isinstance(layer, Conv2dLayer) else shape[-1]
            layer.bias = np.frombuffer(r.raw(4 * nb), dtype="<f4").astype(np.float32)
    if r.off != len(body):
        raise ModelFormatError(f"{path}: trailing bytes in model body")
    model = Model(layers, tuple(input_shape), num_classes, last_conv)
    sidecar = Path(str(path) + ".mean.rt1")
    if sidecar.exists():
        model.mean_image = read_rt1(sidecar)
    return model


# ---------------------------------------------------------------------------
# Estimator wrapper
# ---------------------------------------------------------------------------

class CnnClassifier(BaseEstimator):
    """fit/predict wrapper around the CNN trainer.

    ``X`` is an (N, C, H, W) float array in [0, 1]; ``y`` holds integer
    labels. ``architecture`` defaults to the reference toy network for the
    data's input shape.
    """

    def __init__(self, architecture=None, epochs=10, learning_rate=1e-3,
                 batch_size=64, val_fraction=0.1, flip_augment=False, seed=0):
        self.architecture = architecture
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.flip_augment = flip_augment
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y)
        if X.ndim != 4:
            raise ValueError(f"X must be (N, C, H, W), got shape {X.shape}")
        arch = self.architecture
        if arch is None:
            from .data import default_architecture
            arch = default_architecture(input_shape=X.shape[1:],
                                        num_classes=int(y.max()) + 1)
        self.model_ = build_model(arch, seed=self.seed)
        cfg = TrainConfig(epochs=self.epochs, learning_rate=self.learning_rate,
                          batch_size=self.batch_size, val_fraction=self.val_fraction,
                          seed=self.seed, flip_augment=self.flip_augment)
        result = train(self.model_, (X, y), cfg)
        self.val_accuracy_ = result.accuracy
        self.history_ = result.history
        return self

    def _require_fit(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("CnnClassifier is not fitted; call fit(X, y) first")

    def decision_function(self, X):
        self._require_fit()
        z, _ = predict_batch(self.model_, np.asarray(X, dtype=np.float32))
        return z

    def predict(self, X):
        self._require_fit()
        _, labels = predict_batch(self.model_, np.asarray(X, dtype=np.float32))
        return labels

    def predict_proba(self, X):
        z = self.decision_function(X)
        return engine.softmax_with_temperature(Tensor(z), 1.0).data

    def score(self, X, y):
        return float((self.predict(X) == np.asarray(y)).mean())
