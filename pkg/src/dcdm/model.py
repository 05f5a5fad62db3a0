"""Model assembly, training, prediction, and weight serialization.

The classifier is a fixed family: six 3x3 convolutions with interleaved
ReLU and 2x2 max pooling, then three dense layers with dropout between
them, closed by a softmax marker. `build_dcdm` instantiates it for a
given class count and input size; everything else in the package works
against the resulting Model object.

Weights travel in a little-endian binary container: magic "DCDM", a
version, the class count, then named tensor records. The input size rides
along as a metadata tensor named "input_hw" so a file is self-describing
enough to rebuild the network it came from. Class names live in a JSON
sidecar next to the weight file.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import layers, tensor
from .errors import NumericError, ShapeError, WeightFormatError
from .layers import LayerParams, LayerSpec, OptimizerConfig, OptimizerState

MAGIC = b"DCDM"
FORMAT_VERSION = 1
WEIGHT_SUFFIX = ".dcdm"
_DTYPE_CODES = {0: np.float32, 1: np.float64}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_META_INPUT_HW = "input_hw"


def dcdm_specs(num_classes: int = 25) -> list:
    """The layer chain of the classifier family."""
    chain = []
    for oc in (64, 64):
        chain += [LayerSpec("conv3x3", out_channels=oc), LayerSpec("relu")]
    chain.append(LayerSpec("maxpool2x2"))
    for oc in (128, 256, 512, 512):
        chain += [
            LayerSpec("conv3x3", out_channels=oc),
            LayerSpec("relu"),
            LayerSpec("maxpool2x2"),
        ]
    chain.append(LayerSpec("flatten"))
    for width in (1024, 1024):
        chain += [
            LayerSpec("dense", out_features=width),
            LayerSpec("relu"),
            LayerSpec("dropout", rate=0.5),
        ]
    chain += [LayerSpec("dense", out_features=num_classes), LayerSpec("softmax")]
    return chain


class Model:
    """A spec chain plus its parameters and label names."""

    def __init__(
        self,
        specs: list,
        params: list,
        num_classes: int,
        input_hw: tuple,
        labels: Optional[list] = None,
    ):
        if labels is not None and len(labels) != num_classes:
            raise ShapeError(
                f"{len(labels)} labels for {num_classes} classes")
        self.specs = specs
        self.params = params
        self.num_classes = num_classes
        self.input_hw = (int(input_hw[0]), int(input_hw[1]))
        self.labels = labels

    @property
    def input_shape(self) -> tuple:
        return (3, self.input_hw[0], self.input_hw[1])

    def param_count(self) -> int:
        return sum(p.count() for p in self.params)

    def spec_param_count(self) -> int:
        """Parameter count derived from layer shapes alone (no arrays)."""
        total = 0
        shape = self.input_shape
        for spec in self.specs:
            if spec.kind == "conv3x3":
                total += spec.out_channels * (shape[0] * 9 + 1)
            elif spec.kind == "dense":
                total += (shape[0] + 1) * spec.out_features
            shape = layers.out_shape(spec, shape)
        return total

    def stage_shapes(self) -> list:
        """(kind, output shape) for every layer, starting from the input."""
        shape = self.input_shape
        out = [("input", shape)]
        for spec in self.specs:
            shape = layers.out_shape(spec, shape)
            out.append((spec.kind, shape))
        return out

    def conv_activation_indices(self) -> list:
        """Layer indices of the ReLU directly after each convolution."""
        idx = []
        for i, spec in enumerate(self.specs[:-1]):
            if spec.kind == "conv3x3" and self.specs[i + 1].kind == "relu":
                idx.append(i + 1)
        return idx

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"model expects (N,) + {self.input_shape} input, got {x.shape}")
        return x

    def forward(
        self,
        x: np.ndarray,
        train: bool = False,
        rng: Optional[np.random.Generator] = None,
        capture: Optional[dict] = None,
        _caches: Optional[list] = None,
    ) -> np.ndarray:
        """Run the network; returns logits of shape (N, num_classes).

        `capture` is an optional dict whose keys are layer indices; the
        matching activations are written into it. When `_caches` is a
        list, per-layer backward caches are appended to it (training path).
        """
        x = self._check_input(x)
        tensor.ensure_finite(x, "model input")
        act = x
        for i, (spec, params) in enumerate(zip(self.specs, self.params)):
            act, cache = layers.forward_layer(spec, params, act, train, rng)
            tensor.ensure_finite(act, f"layer {i} ({spec.kind}) output")
            if _caches is not None:
                _caches.append(cache)
            if capture is not None and i in capture:
                capture[i] = act
        return act

    def predict(self, x: np.ndarray):
        """Class indices and softmax probabilities for a batch.

        Ties in the probability vector resolve to the lowest class index.
        """
        logits = self.forward(x)
        probs = layers.softmax(logits)
        return np.argmax(probs, axis=1), probs

    def loss_and_grads(
        self,
        x: np.ndarray,
        y: np.ndarray,
        rng: Optional[np.random.Generator] = None,
    ):
        """Mean cross-entropy loss and parameter gradients for one batch."""
        caches = []
        logits = self.forward(x, train=True, rng=rng, _caches=caches)
        loss, grad, probs = layers.softmax_cross_entropy(logits, y)
        grads = [None] * len(self.specs)
        for i in range(len(self.specs) - 1, -1, -1):
            grad, gparams = layers.backward_layer(
                self.specs[i], self.params[i], caches[i], grad)
            grads[i] = gparams if gparams is not None else LayerParams()
        return loss, grads, probs


def build_dcdm(
    num_classes: int = 25,
    input_hw: tuple = (272, 363),
    seed: int = 0,
    init: bool = True,
    labels: Optional[list] = None,
    dtype=np.float32,
) -> Model:
    """Instantiate the classifier for a class count and input size.

    With init=False the parameter slots are left empty (used by the
    weight loader). Initialization draws each layer from an rng seeded
    by (seed, layer_index) so layer widths can change without reshuffling
    every other layer's draw.
    """
    if num_classes < 2:
        raise ShapeError(f"need at least 2 classes, got {num_classes}")
    specs = dcdm_specs(num_classes)
    last_dense = max(i for i, s in enumerate(specs) if s.kind == "dense")
    shape = (3, int(input_hw[0]), int(input_hw[1]))
    if shape[1] < 32 or shape[2] < 32:
        raise ShapeError(
            f"input {input_hw} too small: five pooling halvings need >= 32")
    params = []
    for i, spec in enumerate(specs):
        if init:
            rng = np.random.default_rng([seed, i])
            params.append(layers.init_params(
                spec, shape, rng, final_dense=(i == last_dense), dtype=dtype))
        else:
            params.append(LayerParams())
        shape = layers.out_shape(spec, shape)
    return Model(specs, params, num_classes, input_hw, labels=labels)


# -- training ------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    checkpoint_dir: Optional[str] = None
    checkpoint_every: int = 10
    target_train_acc: Optional[float] = None  # early stop once reached
    log: Optional[Callable[[str], None]] = None


def _epoch_order(n: int, seed: int, epoch: int, shuffle: bool) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng(seed ^ epoch).permutation(n)


def train_model(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    config: TrainConfig,
    x_val: Optional[np.ndarray] = None,
    y_val: Optional[np.ndarray] = None,
) -> list:
    """Minibatch gradient descent over (x, y); returns per-epoch history.

    Each epoch visits a seeded permutation of the samples (seed XOR epoch,
    epochs numbered from 1). A non-finite loss aborts with NumericError.
    Checkpoints, when enabled, are written every `checkpoint_every` epochs
    as model.ep<N> weight files.
    """
    x = model._check_input(x)
    y = np.asarray(y)
    if y.shape != (x.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match {x.shape[0]} samples")
    if y.size and (y.min() < 0 or y.max() >= model.num_classes):
        raise ShapeError(
            f"labels must lie in [0, {model.num_classes}), got "
            f"[{y.min()}, {y.max()}]")
    state = OptimizerState()
    dropout_rng = np.random.default_rng([config.seed, 1])
    history = []
    for epoch in range(1, config.epochs + 1):
        order = _epoch_order(x.shape[0], config.seed, epoch, config.shuffle)
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), config.batch_size):
            take = order[start : start + config.batch_size]
            loss, grads, probs = model.loss_and_grads(
                x[take], y[take], rng=dropout_rng)
            if not np.isfinite(loss):
                raise NumericError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"batch {start // config.batch_size}")
            layers.optimizer_step(config.optimizer, state, model.params, grads)
            total_loss += loss * len(take)
            correct += int((np.argmax(probs, axis=1) == y[take]).sum())
        record = {
            "epoch": epoch,
            "loss": total_loss / len(order),
            "train_acc": correct / len(order),
        }
        if x_val is not None and y_val is not None:
            pred, probs = model.predict(x_val)
            record["val_acc"] = float((pred == y_val).mean())
            picked = probs[np.arange(len(y_val)), np.asarray(y_val)]
            record["val_loss"] = float(
                -np.log(np.maximum(picked, np.finfo(probs.dtype).tiny)).mean())
        history.append(record)
        if config.log is not None:
            msg = (f"epoch {epoch}/{config.epochs} "
                   f"loss {record['loss']:.4f} acc {record['train_acc']:.4f}")
            if "val_acc" in record:
                msg += f" val_acc {record['val_acc']:.4f}"
            config.log(msg)
        if config.checkpoint_dir and epoch % config.checkpoint_every == 0:
            path = Path(config.checkpoint_dir) / f"model.ep{epoch}{WEIGHT_SUFFIX}"
            save_weights(model, path)
        if (config.target_train_acc is not None
                and record["train_acc"] >= config.target_train_acc):
            break
    return history


# -- serialization -------------------------------------------------------------


def _param_names(specs: list) -> list:
    """Stable (layer_index, tensor_name) pairs in file order."""
    out = []
    for i, spec in enumerate(specs):
        if spec.kind in ("conv3x3", "dense"):
            out.append((i, f"L{i:02d}.{spec.kind}.w"))
            out.append((i, f"L{i:02d}.{spec.kind}.b"))
    return out


def _write_tensor(out, hasher, name: str, arr: np.ndarray) -> None:
    code = _CODE_FOR_DTYPE.get(arr.dtype)
    if code is None:
        raise WeightFormatError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    encoded = name.encode("utf-8")
    head = struct.pack("<H", len(encoded)) + encoded
    head += struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    body = np.ascontiguousarray(arr).tobytes()
    for chunk in (head, body):
        out.write(chunk)
        hasher.update(chunk)


def save_weights(model: Model, path) -> str:
    """Write the weight container; returns its sha256 hex fingerprint.

    The fingerprint covers the exact bytes written, so hashing the file
    afterwards reproduces it.
    """
    path = Path(path)
    records = _param_names(model.specs)
    hasher = hashlib.sha256()
    with open(path, "wb") as out:
        header = MAGIC + struct.pack(
            "<III", FORMAT_VERSION, model.num_classes, len(records) + 1)
        out.write(header)
        hasher.update(header)
        hw = np.array(model.input_hw, dtype=np.float32)
        _write_tensor(out, hasher, _META_INPUT_HW, hw)
        for i, name in records:
            arr = getattr(model.params[i], name[-1])
            if arr is None:
                raise WeightFormatError(
                    f"cannot save uninitialized parameters ({name})")
            _write_tensor(out, hasher, name, arr)
    if model.labels is not None:
        labels_path = path.with_suffix(".labels.json")
        labels_path.write_text(json.dumps(model.labels, indent=0) + "\n")
    return hasher.hexdigest()


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise WeightFormatError(f"truncated weight file while reading {what}")
    return data


def _read_tensor(f):
    raw = f.read(2)
    if not raw:
        return None  # clean end of stream
    if len(raw) != 2:
        raise WeightFormatError("truncated weight file while reading record header")
    (name_len,) = struct.unpack("<H", raw)
    name = _read_exact(f, name_len, "tensor name").decode("utf-8")
    code, ndim = struct.unpack("<BB", _read_exact(f, 2, f"{name} descriptor"))
    if code not in _DTYPE_CODES:
        raise WeightFormatError(f"tensor {name!r} has unknown dtype code {code}")
    dims = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, f"{name} shape"))
    dtype = np.dtype(_DTYPE_CODES[code])
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    data = _read_exact(f, nbytes, f"{name} data")
    return name, np.frombuffer(data, dtype=dtype).reshape(dims).copy()


def load_weights(path) -> Model:
    """Rebuild a Model from a weight container written by save_weights."""
    path = Path(path)
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise WeightFormatError(f"{path.name}: not a weight file (bad magic)")
        version, num_classes, count = struct.unpack(
            "<III", _read_exact(f, 12, "header"))
        if version != FORMAT_VERSION:
            raise WeightFormatError(
                f"{path.name}: unsupported format version {version}")
        tensors = {}
        for _ in range(count):
            rec = _read_tensor(f)
            if rec is None:
                raise WeightFormatError(
                    f"{path.name}: header promises {count} tensors, stream ended early")
            name, arr = rec
            if name in tensors:
                raise WeightFormatError(f"{path.name}: duplicate tensor {name!r}")
            tensors[name] = arr
        if f.read(1):
            raise WeightFormatError(f"{path.name}: trailing bytes after last tensor")

    hw = tensors.pop(_META_INPUT_HW, None)
    if hw is None or hw.shape != (2,):
        raise WeightFormatError(f"{path.name}: missing input size record")
    model = build_dcdm(num_classes, (int(hw[0]), int(hw[1])), init=False)
    expected = dict(
        (name, i) for i, name in _param_names(model.specs))
    shape = model.input_shape
    shapes = {}
    for i, spec in enumerate(model.specs):
        if spec.kind == "conv3x3":
            shapes[f"L{i:02d}.conv3x3.w"] = (spec.out_channels, shape[0], 3, 3)
            shapes[f"L{i:02d}.conv3x3.b"] = (spec.out_channels,)
        elif spec.kind == "dense":
            shapes[f"L{i:02d}.dense.w"] = (shape[0], spec.out_features)
            shapes[f"L{i:02d}.dense.b"] = (spec.out_features,)
        shape = layers.out_shape(spec, shape)
    missing = sorted(set(expected) - set(tensors))
    unknown = sorted(set(tensors) - set(expected))
    if missing or unknown:
        raise WeightFormatError(
            f"{path.name}: tensor set mismatch "
            f"(missing {missing or 'none'}, unknown {unknown or 'none'})")
    for name, arr in tensors.items():
        if arr.shape != shapes[name]:
            raise WeightFormatError(
                f"{path.name}: {name} has shape {arr.shape}, expected {shapes[name]}")
        setattr(model.params[expected[name]], name[-1], arr)

    labels_path = path.with_suffix(".labels.json")
    if labels_path.exists():
        labels = json.loads(labels_path.read_text())
        if (isinstance(labels, list) and len(labels) == num_classes
                and all(isinstance(s, str) for s in labels)):
            model.labels = labels
    return model


def fingerprint_weights(path) -> str:
    """sha256 of a weight file's bytes; matches what save_weights returned."""
    hasher = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            hasher.update(chunk)
    return hasher.hexdigest()
