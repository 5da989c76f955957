"""The seven-phase expression classifier and its checkpoint format.

Each convolutional phase runs Conv(3x1) -> Conv(1x3) -> BatchNorm -> ReLU ->
MaxPool. The head is Flatten -> [Dense -> BatchNorm -> ReLU] x 2 -> Dense ->
Softmax. The sizes are configurable so the same code can build small
surrogates for gradient checks.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .labels import LABELS
from .layers import (
    BatchNorm, Conv2D, Dense, Flatten, Layer, MaxPool2D, Mode, ReLU, StateError,
    softmax_rows,
)
from .tensor import ShapeError

MAGIC = b"FERCKPT1"
VERSION = 1
PHASE_ORDER = "conv3x1-conv1x3-bn-relu-pool"
NORMALIZATION = "divide-by-255"
# output layer starts at 2% of the He scale so untrained predictions are near uniform
OUTPUT_INIT_SCALE = 0.02


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    input_size: int = 48
    filters: tuple[int, ...] = (64, 128, 256, 512)
    dense_units: tuple[int, ...] = (512, 256)
    n_classes: int = 7
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-5


@dataclass
class FerModel:
    config: ArchConfig
    layers: list[tuple[str, Layer]] = field(default_factory=list)
    dtype: type = np.float32
    _forward_done: bool = False

    # -- registries ---------------------------------------------------------

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{name}.{p}": arr for name, layer in self.layers for p, arr in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for name, layer in self.layers:
            for p in layer.params:
                if p not in layer.grads:
                    raise StateError(f"no gradient for {name}.{p}; run backward first")
                out[f"{name}.{p}"] = layer.grads[p]
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state saved with the parameters (batchnorm statistics)."""
        out = {}
        for name, layer in self.layers:
            if isinstance(layer, BatchNorm):
                out[f"{name}.running_mean"] = layer.running_mean
                out[f"{name}.running_var"] = layer.running_var
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def n_parameters(self) -> int:
        return sum(a.size for a in self.state().values())

    # -- passes -------------------------------------------------------------

    def _check_input(self, x: np.ndarray, mode: Mode) -> None:
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (s, s, 1):
            raise ShapeError(f"expected input of shape (B, {s}, {s}, 1), got {x.shape}")
        if mode is Mode.TRAIN and x.shape[0] < 2:
            raise ShapeError(f"train mode needs a batch of >= 2 samples, got {x.shape[0]}")

    def forward_logits(self, x: np.ndarray, mode: Mode = Mode.INFER) -> np.ndarray:
        self._check_input(x, mode)
        h = np.asarray(x, dtype=self.dtype)
        for _, layer in self.layers:
            h = layer.forward(h, mode)
        self._forward_done = mode is Mode.TRAIN
        return h

    def forward(self, x: np.ndarray, mode: Mode = Mode.INFER) -> np.ndarray:
        return softmax_rows(self.forward_logits(x, mode))

    def backward(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Backpropagate a gradient w.r.t. the logits; returns the gradient registry."""
        if not self._forward_done:
            raise StateError("backward requires a preceding Train-mode forward")
        g = grad_logits
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        return self.gradients()

    def trace_shapes(self, x: np.ndarray) -> list[tuple[str, tuple[int, ...]]]:
        """Shapes after every conv, pool, flatten and dense layer (Infer mode)."""
        self._check_input(x, Mode.INFER)
        h = np.asarray(x, dtype=self.dtype)
        chain = []
        for name, layer in self.layers:
            h = layer.forward(h, Mode.INFER)
            if isinstance(layer, (Conv2D, MaxPool2D, Flatten, Dense)):
                chain.append((name, h.shape))
        return chain

    def fingerprint(self) -> dict:
        n = self.config.n_classes
        labels = list(LABELS) if n == len(LABELS) else [str(i) for i in range(n)]
        return {
            "input_shape": [self.config.input_size, self.config.input_size, 1],
            "phase_order": PHASE_ORDER,
            "normalization": NORMALIZATION,
            "labels": labels,
            "layers": [{"name": name, **layer.describe()} for name, layer in self.layers],
        }


def predict(model: FerModel, images: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Infer-mode class indices and probabilities; ties go to the lowest class."""
    probs = []
    for i in range(0, len(images), batch_size):
        probs.append(model.forward(images[i:i + batch_size], Mode.INFER))
    p = np.concatenate(probs) if probs else np.zeros((0, model.config.n_classes), model.dtype)
    return np.argmax(p, axis=1), p


def build_model(seed: int = 0, config: ArchConfig = ArchConfig(), dtype=np.float32) -> FerModel:
    c = config
    layers: list[tuple[str, Layer]] = []
    cin, size = 1, c.input_size
    for i, f in enumerate(c.filters, start=1):
        p = f"phase{i}"
        layers += [
            (f"{p}.conv3x1", Conv2D(3, 1, cin, f, dtype, need_input_grad=(i > 1))),
            (f"{p}.conv1x3", Conv2D(1, 3, f, f, dtype)),
            (f"{p}.bn", BatchNorm(f, c.bn_momentum, c.bn_epsilon, dtype)),
            (f"{p}.relu", ReLU()),
            (f"{p}.pool", MaxPool2D()),
        ]
        cin, size = f, (size - 2) // 2
        if size < 1:
            raise ShapeError(f"input size {c.input_size} too small for {len(c.filters)} phases")
    layers.append(("flatten", Flatten()))
    width = size * size * cin
    phase = len(c.filters)
    for units in c.dense_units:
        phase += 1
        layers += [
            (f"phase{phase}.dense", Dense(width, units, dtype)),
            (f"phase{phase}.bn", BatchNorm(units, c.bn_momentum, c.bn_epsilon, dtype)),
            (f"phase{phase}.relu", ReLU()),
        ]
        width = units
    layers.append((f"phase{phase + 1}.dense", Dense(width, c.n_classes, dtype)))

    rng = np.random.default_rng(seed)
    last = layers[-1][1]
    for _, layer in layers:
        if layer is last:
            layer.init_params(rng, scale=OUTPUT_INIT_SCALE)
        else:
            layer.init_params(rng)
    return FerModel(config, layers, dtype)


# -- checkpoints ----------------------------------------------------------------
#
# layout (little-endian):
#   magic "FERCKPT1" | u16 version
#   u32 n | n bytes JSON fingerprint
#   u32 n | n bytes JSON metadata (arch config, epoch, seed, ...)
#   u32 count, then per tensor: u16 n | name | u8 ndim | u32 dims... | float32 data
#   u32 crc32 of everything above


def _block(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def save_checkpoint(model: FerModel, path: str | os.PathLike, **metadata) -> None:
    meta = {"arch": asdict(model.config), **metadata}
    parts = [
        MAGIC,
        struct.pack("<H", VERSION),
        _block(json.dumps(model.fingerprint(), sort_keys=True).encode()),
        _block(json.dumps(meta, sort_keys=True).encode()),
    ]
    state = model.state()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | os.PathLike) -> tuple[dict, dict, dict[str, np.ndarray]]:
    """Parse and integrity-check a checkpoint: (fingerprint, metadata, tensors)."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    if len(data) < len(MAGIC) + 6:
        raise CheckpointError(f"{path}: checkpoint truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    try:
        fingerprint = json.loads(r.take(r.unpack("<I")[0]))
        meta = json.loads(r.take(r.unpack("<I")[0]))
        tensors = {}
        (count,) = r.unpack("<I")
        for _ in range(count):
            name = r.take(r.unpack("<H")[0]).decode()
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            n = int(np.prod(shape))
            tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
    except (CheckpointError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: checkpoint truncated or corrupt ({exc})") from None
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor blocks")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    return fingerprint, meta, tensors


def load_checkpoint(path: str | os.PathLike, config: ArchConfig | None = None) -> tuple[FerModel, dict]:
    """Rebuild a model and fill it from ``path``.

    The architecture is ``config`` when given, else the default network. The
    stored fingerprint must equal the rebuilt model's fingerprint exactly.
    """
    fingerprint, meta, tensors = read_checkpoint(path)
    model = build_model(0, config or ArchConfig(), np.float32)
    expected = json.loads(json.dumps(model.fingerprint(), sort_keys=True))
    if fingerprint != expected:
        diffs = _fingerprint_diff(expected, fingerprint)
        raise CheckpointError(f"{path}: architecture fingerprint mismatch ({diffs})")
    state = model.state()
    if set(state) != set(tensors):
        raise CheckpointError(f"{path}: tensor names differ from the model's registry")
    for name, arr in state.items():
        if arr.shape != tensors[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {arr.shape}")
        arr[...] = tensors[name]
    return model, meta


def _fingerprint_diff(expected: dict, found: dict) -> str:
    for key in sorted(set(expected) | set(found)):
        if expected.get(key) != found.get(key):
            if key == "layers" and isinstance(found.get(key), list):
                for a, b in zip(expected[key], found[key]):
                    if a != b:
                        return f"layer {a.get('name')}: expected {a}, found {b}"
            return f"{key}: expected {expected.get(key)!r}, found {found.get(key)!r}"
    return "unknown difference"
