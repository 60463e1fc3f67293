"""Small 2D encoder-decoder segmentation network and its checkpoint format.

The network is a U-Net at desk scale: ``depth`` resolution levels, each with
two 3x3 conv / instance-norm / leaky-ReLU blocks, stride-2 convolutions going
down, nearest upsampling plus skip concatenation coming up, and a 1x1 logits
head per decoder level when deep supervision is on.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"CDFL"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    """Bad magic, truncated data or trailing bytes."""


class CheckpointVersionError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError, KeyError):
    pass


class ShapeMismatchError(CheckpointError, ValueError):
    pass


@dataclass
class Checkpoint:
    """Ordered named float32 arrays plus the round/step they were taken at."""

    entries: dict[str, np.ndarray]
    round: int = 0
    step: int = 0
    version: int = FORMAT_VERSION

    def copy(self) -> "Checkpoint":
        return Checkpoint({k: v.copy() for k, v in self.entries.items()}, self.round, self.step, self.version)

    def names(self) -> list[str]:
        return list(self.entries)

    def equals(self, other: "Checkpoint") -> bool:
        """Bit-exact comparison of names, shapes and values."""
        if list(self.entries) != list(other.entries):
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.entries.values(), other.entries.values())
        )

    # ----------------------------------------------------------------- bytes
    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<III", self.version, len(self.entries), self.round), struct.pack("<Q", self.step)]
        for name, arr in self.entries.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"parameter name too long: {name[:40]}...")
            out.append(struct.pack("<H", len(raw)))
            out.append(raw)
            out.append(struct.pack("<B", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        view = memoryview(buf)
        pos = 0

        def take(n):
            nonlocal pos
            if pos + n > len(view):
                raise CheckpointFormatError(f"truncated checkpoint: need {n} bytes at offset {pos}, have {len(view) - pos}")
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4)) != MAGIC:
            raise CheckpointFormatError("not a checkpoint file (bad magic)")
        version, count, round_ = struct.unpack("<III", take(12))
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
        (step,) = struct.unpack("<Q", take(8))
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", take(2))
            name = bytes(take(n)).decode("utf-8")
            (rank,) = struct.unpack("<B", take(1))
            shape = struct.unpack(f"<{rank}I", take(4 * rank))
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(shape)
            entries[name] = arr.astype(np.float32)
        if pos != len(view):
            raise CheckpointFormatError(f"{len(view) - pos} trailing bytes after checkpoint entries")
        return cls(entries, round_, step, version)


def save_checkpoint(obj: "Checkpoint | SegNet", path, round: int | None = None, step: int | None = None) -> Path:
    ckpt = obj.checkpoint() if isinstance(obj, SegNet) else obj
    if round is not None or step is not None:
        ckpt = Checkpoint(ckpt.entries, ckpt.round if round is None else round, ckpt.step if step is None else step)
    path = Path(path)
    path.write_bytes(ckpt.to_bytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------- #
# Network
# --------------------------------------------------------------------------- #
def deep_supervision_weights(num_heads: int) -> list[float]:
    """Head weights proportional to ``2**-d``, normalised to sum to one."""
    if num_heads < 1:
        raise ValueError("need at least one head")
    raw = [2.0 ** -d for d in range(num_heads)]
    total = sum(raw)
    return [r / total for r in raw]


def downsample_label(label: np.ndarray, level: int) -> np.ndarray:
    """Nearest-neighbour label for head ``level`` (stride ``2**level``)."""
    s = 2 ** level
    return label[..., ::s, ::s]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; ``seed`` fixes the initial weights."""

    depth: int = 3
    base_channels: int = 8
    deep_supervision: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")

    def build(self, num_classes: int) -> "SegNet":
        return SegNet(num_classes, self.depth, self.base_channels, 1, self.deep_supervision, self.seed)


@dataclass
class SegNet:
    num_classes: int
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    ds_heads: bool = True
    seed: int = 0
    params: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if not self.params:
            self.params = self._init_params(np.random.default_rng(self.seed))

    def _channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def _layout(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        c_in = self.in_channels
        for d in range(self.depth):
            c = self._channels(d)
            shapes.append((f"enc{d}.conv1.weight", (c, c_in, 3, 3)))
            shapes.append((f"enc{d}.conv2.weight", (c, c, 3, 3)))
            c_in = c
        for d in range(self.depth - 2, -1, -1):
            c = self._channels(d)
            shapes.append((f"dec{d}.conv1.weight", (c, self._channels(d + 1) + c, 3, 3)))
            shapes.append((f"dec{d}.conv2.weight", (c, c, 3, 3)))
        for d in self.head_levels:
            shapes.append((f"head{d}.weight", (self.num_classes, self._channels(d), 1, 1)))
            shapes.append((f"head{d}.bias", (self.num_classes,)))
        return shapes

    @property
    def head_levels(self) -> list[int]:
        return list(range(self.depth)) if self.ds_heads else [0]

    def _init_params(self, rng) -> dict[str, Tensor]:
        params = {}
        for name, shape in self._layout():
            if name.endswith(".bias"):
                data = np.zeros(shape, dtype=np.float32)
            else:
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            params[name] = T.parameter(data, name=name)
        return params

    # ------------------------------------------------------------ forward
    def forward(self, image, all_heads: bool | None = None) -> list[Tensor]:
        """Logits per head, full resolution first.

        ``all_heads=False`` computes only the full-resolution head even when
        deep supervision is on.
        """
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim != 4:
            raise ValueError(f"expected [B, C, H, W] input, got {x.shape}")
        H, W = x.shape[2:]
        f = 2 ** (self.depth - 1)
        if H % f or W % f:
            raise ValueError(f"spatial extent {H}x{W} not divisible by {f} for depth {self.depth}")
        p = self.params
        want = self.head_levels if all_heads in (None, True) else [0]

        def block(h, name, stride=1):
            return T.norm_act(T.conv2d(h, p[name], stride=stride), 0.01)

        skips = []
        h = x
        for d in range(self.depth):
            h = block(h, f"enc{d}.conv1.weight", stride=1 if d == 0 else 2)
            h = block(h, f"enc{d}.conv2.weight")
            skips.append(h)
        heads: dict[int, Tensor] = {}
        if self.depth - 1 in want:
            heads[self.depth - 1] = self._head(h, self.depth - 1)
        for d in range(self.depth - 2, -1, -1):
            h = T.concat([T.upsample2(h), skips[d]], axis=1)
            h = block(h, f"dec{d}.conv1.weight")
            h = block(h, f"dec{d}.conv2.weight")
            if d in want:
                heads[d] = self._head(h, d)
        return [heads[d] for d in sorted(heads)]

    __call__ = forward

    def _head(self, h: Tensor, level: int) -> Tensor:
        return T.conv2d(h, self.params[f"head{level}.weight"], padding="valid", bias=self.params[f"head{level}.bias"])

    def predict(self, image) -> np.ndarray:
        """Argmax class map from the full-resolution head."""
        with T.no_grad():
            logits = self.forward(image, all_heads=False)[0]
        return T.argmax(logits, axis=1)

    # ------------------------------------------------------------ state
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def checkpoint(self, round: int = 0, step: int = 0) -> Checkpoint:
        return Checkpoint({k: v.data.astype(np.float32, copy=True) for k, v in self.params.items()}, round, step)

    def load_checkpoint(self, ckpt: Checkpoint) -> None:
        """Copy values in; names must match exactly and shapes must agree."""
        for name in ckpt.entries:
            if name not in self.params:
                raise UnknownParameterError(f"unknown parameter {name!r} in checkpoint")
        for name, t in self.params.items():
            if name not in ckpt.entries:
                raise UnknownParameterError(f"checkpoint is missing parameter {name!r}")
            arr = ckpt.entries[name]
            if arr.shape != t.shape:
                raise ShapeMismatchError(f"parameter {name!r}: checkpoint shape {arr.shape} vs model {t.shape}")
            t.data = np.array(arr, dtype=t.dtype, copy=True)
            t.grad = None

    def clone(self, trainable: bool = True) -> "SegNet":
        params = {k: Tensor(v.data.copy(), requires_grad=trainable, name=k) for k, v in self.params.items()}
        return SegNet(self.num_classes, self.depth, self.base_channels, self.in_channels, self.ds_heads, self.seed,
                      params=params)
