"""Small convolutional classifiers: architecture descriptors, seeded builds,
SGD training, prediction, and a checksummed binary checkpoint format.

Three stock architectures ship by default. Two take 32x32 inputs and one
takes 48x48, so cross-model evaluation exercises the resize boundary that
appears whenever source and target networks disagree on input size.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

__all__ = [
    "Conv",
    "Relu",
    "MaxPool",
    "Flatten",
    "Dense",
    "ArchitectureDescriptor",
    "DescriptorError",
    "Classifier",
    "TrainConfig",
    "EpochStats",
    "stock_descriptor",
    "STOCK_ARCHITECTURES",
    "build_model",
    "train",
    "top_k",
    "least_likely_class",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "CheckpointChecksumError",
]


class DescriptorError(ValueError):
    """An architecture descriptor whose layer shapes do not chain."""


@dataclass(frozen=True)
class Conv:
    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class MaxPool:
    size: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int
    in_features: int | None = None


LayerSpec = Conv | Relu | MaxPool | Flatten | Dense


@dataclass(frozen=True)
class ArchitectureDescriptor:
    name: str
    input_size: int
    layers: tuple[LayerSpec, ...]
    num_classes: int


def infer_shapes(desc: ArchitectureDescriptor) -> list[tuple[int, ...]]:
    """Chain layer output shapes from the input image to the logits,
    raising DescriptorError at the first layer that does not fit."""
    shape: tuple[int, ...] = (desc.input_size, desc.input_size, 3)
    shapes = [shape]
    for i, layer in enumerate(desc.layers):
        where = f"layer {i} ({type(layer).__name__})"
        if isinstance(layer, Conv):
            if len(shape) != 3:
                raise DescriptorError(f"{where}: conv needs an image, got {shape}")
            h, w, _ = shape
            oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise DescriptorError(f"{where}: kernel {layer.kernel} too large for {shape}")
            shape = (oh, ow, layer.filters)
        elif isinstance(layer, MaxPool):
            if len(shape) != 3:
                raise DescriptorError(f"{where}: pool needs an image, got {shape}")
            h, w, c = shape
            if layer.size < 1 or h % layer.size or w % layer.size:
                raise DescriptorError(f"{where}: window {layer.size} does not tile {shape}")
            shape = (h // layer.size, w // layer.size, c)
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            if len(shape) != 1:
                raise DescriptorError(f"{where}: dense needs a flat input, got {shape}")
            if layer.in_features is not None and layer.in_features != shape[0]:
                raise DescriptorError(
                    f"{where}: expects {layer.in_features} features, gets {shape[0]}"
                )
            shape = (layer.units,)
        elif isinstance(layer, Relu):
            pass
        else:
            raise DescriptorError(f"{where}: unknown layer kind")
        shapes.append(shape)
    if shape != (desc.num_classes,):
        raise DescriptorError(
            f"final layer produces {shape}, expected ({desc.num_classes},) logits"
        )
    return shapes


def stock_descriptor(arch: str, num_classes: int) -> ArchitectureDescriptor:
    if arch == "cnn_a":
        layers = (
            Conv(8, 3, padding=1), Relu(), MaxPool(2),
            Conv(16, 3, padding=1), Relu(), MaxPool(2),
            Flatten(), Dense(32), Relu(), Dense(num_classes),
        )
        return ArchitectureDescriptor("cnn_a", 32, layers, num_classes)
    if arch == "cnn_b":
        layers = (
            Conv(8, 3, padding=1), Relu(), MaxPool(2),
            Conv(16, 3, padding=1), Relu(), MaxPool(2),
            Conv(32, 3, padding=1), Relu(), MaxPool(2),
            Flatten(), Dense(64), Relu(), Dense(num_classes),
        )
        return ArchitectureDescriptor("cnn_b", 32, layers, num_classes)
    if arch == "cnn_c":
        layers = (
            Conv(8, 3, padding=1), Relu(), MaxPool(2),
            Conv(16, 3, padding=1), Relu(), MaxPool(2),
            Flatten(), Dense(32), Relu(), Dense(num_classes),
        )
        return ArchitectureDescriptor("cnn_c", 48, layers, num_classes)
    raise ValueError(f"unknown stock architecture {arch!r}")


STOCK_ARCHITECTURES = ("cnn_a", "cnn_b", "cnn_c")


class Classifier:
    """A descriptor plus its parameters. Pixels in [0, 255] are divided by
    255 at the model boundary, so attack budgets stay in pixel units and the
    input gradient carries the 1/255 factor automatically.

    Frozen classifiers never mutate and are safe for concurrent prediction
    and gradient queries; training requires exclusive access.
    """

    def __init__(
        self,
        descriptor: ArchitectureDescriptor,
        params: dict[str, Parameter],
        provenance: dict | None = None,
    ):
        self.descriptor = descriptor
        self.params = params
        self.provenance = dict(provenance or {})

    @property
    def name(self) -> str:
        return self.descriptor.name

    @property
    def num_classes(self) -> int:
        return self.descriptor.num_classes

    @property
    def input_size(self) -> int:
        return self.descriptor.input_size

    def freeze(self) -> "Classifier":
        for p in self.params.values():
            p.requires_grad = False
        return self

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def forward(self, x: Tensor) -> Tensor:
        """Logits for a (B, S, S, 3) batch of raw [0, 255] pixels."""
        h = ad.scale(x, 1.0 / 255.0)
        conv_i = dense_i = 0
        for layer in self.descriptor.layers:
            if isinstance(layer, Conv):
                h = ad.conv2d(
                    h,
                    self.params[f"conv{conv_i}.w"],
                    self.params[f"conv{conv_i}.b"],
                    stride=layer.stride,
                    padding=layer.padding,
                )
                conv_i += 1
            elif isinstance(layer, Relu):
                h = ad.relu(h)
            elif isinstance(layer, MaxPool):
                h = ad.max_pool2d(h, layer.size)
            elif isinstance(layer, Flatten):
                h = ad.reshape(h, (h.shape[0], -1))
            elif isinstance(layer, Dense):
                h = ad.affine(
                    h, self.params[f"dense{dense_i}.w"], self.params[f"dense{dense_i}.b"]
                )
                dense_i += 1
        return h

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float32)
        s = self.descriptor.input_size
        if image.shape != (s, s, 3):
            raise ValueError(
                f"{self.name} expects {s}x{s}x3 images, got {image.shape}; "
                "resize via the pipeline transforms first"
            )
        return image

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Probability vector over the N classes for one image."""
        image = self._check_image(image)
        logits = self.forward(Tensor(image[None]))
        return ad.softmax(logits).data[0]

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        logits = self.forward(Tensor(images))
        return ad.softmax(logits).data

    def loss_on(self, image: np.ndarray, label: int) -> float:
        image = self._check_image(image)
        logits = self.forward(Tensor(image[None]))
        return float(ad.cross_entropy(logits, [int(label)]).data[0])

    def loss_batch(self, images: np.ndarray, labels) -> np.ndarray:
        logits = self.forward(Tensor(np.asarray(images, dtype=np.float32)))
        return ad.cross_entropy(logits, labels).data.copy()

    def input_gradient(self, image: np.ndarray, label: int) -> np.ndarray:
        """Gradient of the cross-entropy loss w.r.t. the raw pixels."""
        grads, _ = self.input_gradient_batch(self._check_image(image)[None], [label])
        return grads[0]

    def input_gradient_batch(
        self, images: np.ndarray, labels
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-image pixel gradients and per-sample losses for a batch.

        The batch loss is the sum of per-sample losses, so every image's
        gradient equals its individual gradient.
        """
        x = Tensor(np.asarray(images, dtype=np.float32), requires_grad=True)
        logits = self.forward(x)
        losses = ad.cross_entropy(logits, labels)
        ad.backward(ad.sum_all(losses))
        return x.grad, losses.data.copy()


def input_gradient(model: Classifier, image: np.ndarray, label: int) -> np.ndarray:
    return model.input_gradient(image, label)


def build_model(desc: ArchitectureDescriptor, seed: int) -> Classifier:
    """Deterministically initialized classifier (He fan-in scaling, zero biases)."""
    infer_shapes(desc)
    rng = np.random.default_rng(seed)
    params: dict[str, Parameter] = {}
    shape: tuple[int, ...] = (desc.input_size, desc.input_size, 3)
    conv_i = dense_i = 0
    for layer in desc.layers:
        if isinstance(layer, Conv):
            h, w, cin = shape
            fan_in = layer.kernel * layer.kernel * cin
            wdata = rng.standard_normal(
                (layer.kernel, layer.kernel, cin, layer.filters)
            ) * np.sqrt(2.0 / fan_in)
            params[f"conv{conv_i}.w"] = Parameter(wdata, f"conv{conv_i}.w")
            params[f"conv{conv_i}.b"] = Parameter(
                np.zeros(layer.filters), f"conv{conv_i}.b"
            )
            oh = (h + 2 * layer.padding - layer.kernel) // layer.stride + 1
            ow = (w + 2 * layer.padding - layer.kernel) // layer.stride + 1
            shape = (oh, ow, layer.filters)
            conv_i += 1
        elif isinstance(layer, MaxPool):
            shape = (shape[0] // layer.size, shape[1] // layer.size, shape[2])
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
        elif isinstance(layer, Dense):
            fan_in = shape[0]
            wdata = rng.standard_normal((fan_in, layer.units)) * np.sqrt(2.0 / fan_in)
            params[f"dense{dense_i}.w"] = Parameter(wdata, f"dense{dense_i}.w")
            params[f"dense{dense_i}.b"] = Parameter(np.zeros(layer.units), f"dense{dense_i}.b")
            shape = (layer.units,)
            dense_i += 1
    return Classifier(desc, params, {"seed": seed})


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 15
    batch_size: int = 32
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_accuracy: float


def _accuracy(model: Classifier, images: np.ndarray, labels: np.ndarray) -> float:
    if len(images) == 0:
        return 0.0
    hits = 0
    for start in range(0, len(images), 256):
        probs = model.predict_batch(images[start : start + 256])
        hits += int((probs.argmax(axis=1) == labels[start : start + 256]).sum())
    return hits / len(images)


def train(model: Classifier, dataset, config: TrainConfig) -> list[EpochStats]:
    """SGD with momentum on the dataset's train split; the eval split (when
    present) is the validation set. Deterministic under a fixed seed."""
    s = model.input_size
    if len(dataset.images) == 0:
        raise ValueError("train: empty dataset")
    if dataset.images.shape[1:] != (s, s, 3):
        raise ValueError(
            f"train: dataset images {dataset.images.shape[1:]} do not match "
            f"{model.name} input {s}x{s}x3"
        )
    if int(dataset.labels.max()) >= model.num_classes:
        raise ValueError(
            f"train: label {int(dataset.labels.max())} overflows "
            f"{model.num_classes} classes"
        )
    tr = dataset.train_indices()
    ev = dataset.eval_indices()
    if len(tr) == 0:
        raise ValueError("train: dataset has no training images")
    x_train, y_train = dataset.images[tr], dataset.labels[tr]
    if len(ev) > 0:
        x_val, y_val = dataset.images[ev], dataset.labels[ev]
    else:
        x_val, y_val = x_train, y_train

    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    stats: list[EpochStats] = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x_train))
        total_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = Tensor(x_train[idx])
            losses = ad.cross_entropy(model.forward(xb), y_train[idx])
            loss = ad.scale(ad.sum_all(losses), 1.0 / len(idx))
            for p in model.params.values():
                p.zero_grad()
            ad.backward(loss)
            for k, p in model.params.items():
                velocity[k] = config.momentum * velocity[k] - config.lr * p.grad
                p.data += velocity[k]
            total_loss += float(loss.data) * len(idx)
        stats.append(
            EpochStats(
                epoch=epoch,
                train_loss=total_loss / len(x_train),
                train_accuracy=_accuracy(model, x_train, y_train),
                val_accuracy=_accuracy(model, x_val, y_val),
            )
        )
    model.provenance.update(
        {
            "dataset_id": dataset.provenance.get("id", "unknown"),
            "train_seed": config.seed,
            "epochs": config.epochs,
            "final_train_accuracy": stats[-1].train_accuracy if stats else None,
            "final_val_accuracy": stats[-1].val_accuracy if stats else None,
        }
    )
    return stats


def top_k(probs: np.ndarray, k: int) -> list[int]:
    """The k most probable labels, non-increasing probability, ties broken
    by ascending label index."""
    probs = np.asarray(probs)
    n = probs.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"top_k: k={k} out of range for {n} classes")
    return [int(i) for i in np.argsort(-probs, kind="stable")[:k]]


def least_likely_class(model: Classifier, image: np.ndarray, y_true: int | None = None) -> int:
    """The lowest-probability class for the clean image (ties by ascending
    index). If that class is the true label, the second-least-likely is
    returned instead so targeted descent never aims at the truth."""
    probs = model.predict(image)
    order = np.argsort(probs, kind="stable")
    if y_true is not None and int(order[0]) == int(y_true):
        if len(order) < 2:
            raise ValueError("least_likely_class: need at least 2 classes")
        return int(order[1])
    return int(order[0])


# --- checkpoint format: magic "CLKB", u32 version, JSON header, raw f32 ---
# --- little-endian arrays in header order, trailing CRC32 of all bytes  ---

CHECKPOINT_MAGIC = b"CLKB"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


def _layer_to_dict(layer: LayerSpec) -> dict:
    if isinstance(layer, Conv):
        return {
            "kind": "conv",
            "filters": layer.filters,
            "kernel": layer.kernel,
            "stride": layer.stride,
            "padding": layer.padding,
        }
    if isinstance(layer, Relu):
        return {"kind": "relu"}
    if isinstance(layer, MaxPool):
        return {"kind": "maxpool", "size": layer.size}
    if isinstance(layer, Flatten):
        return {"kind": "flatten"}
    if isinstance(layer, Dense):
        return {"kind": "dense", "units": layer.units, "in_features": layer.in_features}
    raise ValueError(f"unknown layer {layer!r}")


def _layer_from_dict(d: dict) -> LayerSpec:
    kind = d.get("kind")
    if kind == "conv":
        return Conv(d["filters"], d["kernel"], d["stride"], d["padding"])
    if kind == "relu":
        return Relu()
    if kind == "maxpool":
        return MaxPool(d["size"])
    if kind == "flatten":
        return Flatten()
    if kind == "dense":
        return Dense(d["units"], d.get("in_features"))
    raise CheckpointFormatError(f"unknown layer kind {kind!r}")


def descriptor_to_dict(desc: ArchitectureDescriptor) -> dict:
    return {
        "name": desc.name,
        "input_size": desc.input_size,
        "num_classes": desc.num_classes,
        "layers": [_layer_to_dict(l) for l in desc.layers],
    }


def descriptor_from_dict(d: dict) -> ArchitectureDescriptor:
    return ArchitectureDescriptor(
        name=d["name"],
        input_size=d["input_size"],
        layers=tuple(_layer_from_dict(l) for l in d["layers"]),
        num_classes=d["num_classes"],
    )


def save_checkpoint(model: Classifier, path) -> None:
    names = sorted(model.params)
    header = json.dumps(
        {
            "descriptor": descriptor_to_dict(model.descriptor),
            "provenance": model.provenance,
            "params": [
                {"name": n, "shape": list(model.params[n].data.shape)} for n in names
            ],
        },
        sort_keys=True,
    ).encode("utf-8")
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(header))
    blob += header
    for n in names:
        blob += model.params[n].data.astype("<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_checkpoint(path) -> Classifier:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise CheckpointFormatError(f"{path}: truncated checkpoint")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointChecksumError(f"{path}: CRC32 mismatch, file corrupted")
    (header_len,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header") from exc
    desc = descriptor_from_dict(header["descriptor"])
    params: dict[str, Parameter] = {}
    offset = 12 + header_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob) - 4:
            raise CheckpointFormatError(f"{path}: truncated parameter data")
        arr = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape)
        params[entry["name"]] = Parameter(arr.copy(), entry["name"])
        offset = end
    if offset != len(blob) - 4:
        raise CheckpointFormatError(f"{path}: trailing bytes after parameters")
    model = Classifier(desc, params, header.get("provenance"))
    return model.freeze()
