"""Desk-scale teacher/student architectures, feature taps and adapter blocks.

Classifiers are plain conv stacks (3x3 conv, ReLU, optional 2x2 max pool)
followed by global average pooling and a linear head.  Segmenters are
two-level U-Nets with one conv per stage.  Every network declares named taps
whose activations are returned by the same forward pass that produces the
prediction.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor

TEACHER = "teacher"
STUDENT = "student"
CAPACITIES = (TEACHER, STUDENT)

# (width, pool_after) per conv block
CLASSIFIER_BLOCKS = {
    TEACHER: ((16, True), (32, True), (64, False), (64, False)),
    STUDENT: ((8, True), (16, True)),
}
SEGMENTER_WIDTHS = {TEACHER: (16, 32), STUDENT: (8, 16)}

CLASSIFIER_TAP = "last_conv"
SEGMENTER_TAP = "decoder_conv1"


class ConfigurationError(ValueError):
    """A network, plan or experiment was configured inconsistently."""


def _rng_for(name: str, seed: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def _he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class ForwardResult:
    logits: Tensor
    output: Tensor
    taps: dict[str, Tensor]


@dataclass
class Network:
    """Base class: named parameters plus a forward pass that exposes taps."""

    name: str
    capacity: str
    in_shape: tuple[int, int, int]
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict)
    taps: tuple[str, ...] = ()
    task: str = ""

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def tap_shape(self, tap: str, batch: int = 1) -> tuple[int, ...]:
        if tap not in self.taps:
            raise ConfigurationError(f"{self.name}: unknown tap {tap!r}; declared taps are {self.taps}")
        with ad.no_grad():
            x = Tensor(np.zeros((batch,) + tuple(self.in_shape)))
            return self.forward(x).taps[tap].shape

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.in_shape):
            raise DimensionError(f"{self.name}: input {x.shape} does not match in_shape {self.in_shape}")

    def forward(self, x: Tensor) -> ForwardResult:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ConfigurationError(f"{self.name}: state keys differ: {sorted(missing)}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise DimensionError(f"{self.name}.{k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def _conv_block(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.relu(ad.add_bias(ad.conv2d(x, w, stride=1, pad=1), b))


class Classifier(Network):
    def __init__(self, name, capacity, in_shape, n_classes, seed=0):
        super().__init__(name=name, capacity=capacity, in_shape=tuple(in_shape), seed=seed,
                         taps=(CLASSIFIER_TAP,), task="classification")
        self.n_classes = n_classes
        self.blocks = CLASSIFIER_BLOCKS[capacity]
        rng = _rng_for(name, seed)
        c_in = in_shape[0]
        for i, (width, _) in enumerate(self.blocks):
            self.params[f"conv{i}.w"] = _he_uniform(rng, (width, c_in, 3, 3), c_in * 9)
            self.params[f"conv{i}.b"] = _zeros((width,))
            c_in = width
        self.params["head.w"] = _he_uniform(rng, (c_in, n_classes), c_in)
        self.params["head.b"] = _zeros((n_classes,))

    def forward(self, x: Tensor) -> ForwardResult:
        self._check_input(x)
        h = x
        for i, (_, pool) in enumerate(self.blocks):
            h = _conv_block(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            if pool:
                h = ad.max_pool2d(h, 2)
        feat = h
        pooled = ad.global_avg_pool(h)
        logits = ad.add_bias(ad.matmul(pooled, self.params["head.w"]), self.params["head.b"])
        return ForwardResult(logits=logits, output=logits, taps={CLASSIFIER_TAP: feat})


class Segmenter(Network):
    """Encoder (2 levels) -> bottleneck -> decoder with skip connections."""

    def __init__(self, name, capacity, in_shape, seed=0):
        super().__init__(name=name, capacity=capacity, in_shape=tuple(in_shape), seed=seed,
                         taps=(SEGMENTER_TAP,), task="segmentation")
        w1, w2 = SEGMENTER_WIDTHS[capacity]
        rng = _rng_for(name, seed)
        c = in_shape[0]
        layout = {
            "enc1": (w1, c),
            "enc2": (w2, w1),
            "mid": (w2, w2),
            "dec1": (w2, w2 + w2),
            "dec2": (w1, w2 + w1),
        }
        for key, (out_c, in_c) in layout.items():
            self.params[f"{key}.w"] = _he_uniform(rng, (out_c, in_c, 3, 3), in_c * 9)
            self.params[f"{key}.b"] = _zeros((out_c,))
        self.params["head.w"] = _he_uniform(rng, (1, w1, 1, 1), w1)
        self.params["head.b"] = _zeros((1,))

    def _conv(self, key: str, x: Tensor) -> Tensor:
        return _conv_block(x, self.params[f"{key}.w"], self.params[f"{key}.b"])

    def forward(self, x: Tensor) -> ForwardResult:
        self._check_input(x)
        e1 = self._conv("enc1", x)                                  # H
        e2 = self._conv("enc2", ad.max_pool2d(e1, 2))               # H/2
        m = self._conv("mid", ad.max_pool2d(e2, 2))                 # H/4
        d1 = self._conv("dec1", ad.concat_channels([ad.upsample_nearest2d(m, 2), e2]))  # H/2
        d2 = self._conv("dec2", ad.concat_channels([ad.upsample_nearest2d(d1, 2), e1]))  # H
        logits = ad.add_bias(ad.conv2d(d2, self.params["head.w"]), self.params["head.b"])
        return ForwardResult(logits=logits, output=ad.sigmoid(logits), taps={SEGMENTER_TAP: d1})


def build_classifier(capacity: str, in_shape, n_classes: int, seed: int = 0,
                     name: str | None = None) -> Classifier:
    if capacity not in CAPACITIES:
        raise ContractError(f"unknown capacity {capacity!r}")
    if n_classes < 2:
        raise ContractError(f"n_classes must be >= 2, got {n_classes}")
    if in_shape[0] < 1:
        raise ContractError(f"input needs at least one channel, got {in_shape}")
    n_pool = sum(1 for _, pool in CLASSIFIER_BLOCKS[capacity] if pool)
    if in_shape[1] % (2 ** n_pool) or in_shape[2] % (2 ** n_pool):
        raise ContractError(f"spatial size {in_shape[1:]} must be divisible by {2 ** n_pool}")
    return Classifier(name or capacity, capacity, tuple(in_shape), n_classes, seed)


def build_segmenter(capacity: str, in_shape, seed: int = 0, name: str | None = None) -> Segmenter:
    if capacity not in CAPACITIES:
        raise ContractError(f"unknown capacity {capacity!r}")
    if in_shape[1] % 4 or in_shape[2] % 4:
        raise ContractError(f"segmenter needs H, W divisible by 4, got {in_shape[1:]}")
    return Segmenter(name or capacity, capacity, tuple(in_shape), seed)


def forward_with_taps(net: Network, x: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    res = net.forward(x)
    return res.output, res.taps


# ---------------------------------------------------------------------------
# adapters
# ---------------------------------------------------------------------------

class AdapterBlock:
    """1x1 conv from teacher tap channels to student tap channels.

    Spatial mismatch is resolved with average pooling (teacher larger) or
    nearest upsampling (teacher smaller) by an integer factor.
    """

    def __init__(self, in_shape: Sequence[int], out_shape: Sequence[int], seed: int = 0,
                 name: str = "adapter", identity: bool = False):
        self.name = name
        self.in_shape = tuple(in_shape)    # (C, H, W)
        self.out_shape = tuple(out_shape)  # (D, H', W')
        c_in, h_in, _ = self.in_shape
        c_out, h_out, _ = self.out_shape
        if h_in % h_out and h_out % h_in:
            raise DimensionError(f"{name}: spatial sizes {h_in} and {h_out} are not integer multiples")
        if identity:
            if c_in != c_out:
                raise ContractError("identity adapter needs equal channel counts")
            w = Tensor(np.eye(c_in).reshape(c_out, c_in, 1, 1), requires_grad=True)
        else:
            w = _he_uniform(_rng_for(name, seed), (c_out, c_in, 1, 1), c_in)
        self.params = {"w": w, "b": _zeros((c_out,))}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def __call__(self, t_feat: Tensor) -> Tensor:
        return adapt(self, t_feat)


def adapt(adapter: AdapterBlock, t_feat: Tensor) -> Tensor:
    if tuple(t_feat.shape[1:]) != adapter.in_shape:
        raise DimensionError(f"{adapter.name}: expected (B,)+{adapter.in_shape}, got {t_feat.shape}")
    h = t_feat
    h_in, h_out = adapter.in_shape[1], adapter.out_shape[1]
    if h_in > h_out:
        h = ad.avg_pool2d(h, h_in // h_out)
    elif h_in < h_out:
        h = ad.upsample_nearest2d(h, h_out // h_in)
    return ad.add_bias(ad.conv2d(h, adapter.params["w"]), adapter.params["b"])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Little-endian flat file: count, then (name, rank, extents, float32 payload) records."""
    buf = bytearray(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    (count,) = struct.unpack_from("<I", blob, 0)
    off = 4
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape).copy()
        off += 4 * size
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return out
