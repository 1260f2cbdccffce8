"""Toy encoder-decoder segmentation net plus teacher/student machinery.

The default network is deliberately small: two strided stages down, one
nearest-neighbour upsample back, and a 1x1 projection to class scores.
Output spatial size always equals input size (inputs must be divisible by
the downsample factor).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

import numpy as np

from .autodiff import Tensor, conv2d, relu, upsample_nearest
from .errors import FormatError, ShapeError

__all__ = [
    "SegArch",
    "SegNet",
    "ModelGroup",
    "forward",
    "init_group",
    "ema_update",
    "save_params",
    "load_params",
    "save_group_dir",
    "load_group_dir",
]

CHECKPOINT_MAGIC = b"DTSCKPT1"
MODEL_FILENAMES = ("g1_student", "g1_teacher", "g2_student", "g2_teacher")


@dataclass(frozen=True)
class SegArch:
    """Architecture descriptor: channel widths and the class count."""

    num_classes: int = 5
    in_channels: int = 3
    stem_channels: int = 16
    hidden_channels: int = 32

    # One stride-2 stage, one x2 upsample.
    downsample: int = 2

    def validate(self) -> None:
        if min(self.num_classes, self.in_channels, self.stem_channels,
               self.hidden_channels) < 1:
            raise ShapeError(f"SegArch: all sizes must be positive, got {self}")


class SegNet:
    """Named parameter tensors for the fixed conv-relu topology."""

    def __init__(self, arch: SegArch, params: dict[str, Tensor]):
        self.arch = arch
        self.params = params  # insertion order is the canonical order

    @classmethod
    def init(cls, arch: SegArch, seed: int, trainable: bool = True) -> "SegNet":
        arch.validate()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0x5E6])))
        params: dict[str, Tensor] = {}

        def conv_param(name: str, cout: int, cin: int, k: int) -> None:
            fan_in = cin * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k))
            params[f"{name}.w"] = Tensor(w.astype(np.float32), requires_grad=trainable)
            params[f"{name}.b"] = Tensor(np.zeros(cout, dtype=np.float32),
                                         requires_grad=trainable)

        conv_param("enc1", arch.stem_channels, arch.in_channels, 3)
        conv_param("enc2", arch.hidden_channels, arch.stem_channels, 3)
        conv_param("enc3", arch.hidden_channels, arch.hidden_channels, 3)
        conv_param("head", arch.num_classes, arch.hidden_channels, 1)
        return cls(arch, params)

    def copy(self, trainable: bool) -> "SegNet":
        params = {n: Tensor(p.data.copy(), requires_grad=trainable)
                  for n, p in self.params.items()}
        return SegNet(self.arch, params)

    def param_groups(self) -> dict[str, list[str]]:
        """Encoder vs decoder split used for per-group learning rates."""
        names = list(self.params)
        return {
            "encoder": [n for n in names if not n.startswith("head")],
            "decoder": [n for n in names if n.startswith("head")],
        }

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def forward(net: SegNet, image) -> Tensor:
    """Class scores for (3,H,W) or (N,3,H,W) images, same spatial size out."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.data.ndim not in (3, 4):
        raise ShapeError(f"forward: image must be 3D or 4D, got {image.data.shape}")
    h, w = image.data.shape[-2], image.data.shape[-1]
    d = net.arch.downsample
    if h % d or w % d:
        raise ShapeError(
            f"forward: input {h}x{w} must be divisible by the downsample factor {d}")
    if image.data.shape[-3] != net.arch.in_channels:
        raise ShapeError(
            f"forward: expected {net.arch.in_channels} input channels, "
            f"got {image.data.shape[-3]}")
    p = net.params
    x = relu(conv2d(image, p["enc1.w"], p["enc1.b"], stride=1, padding=1))
    x = relu(conv2d(x, p["enc2.w"], p["enc2.b"], stride=2, padding=1))
    x = relu(conv2d(x, p["enc3.w"], p["enc3.b"], stride=1, padding=1))
    x = upsample_nearest(x, net.arch.downsample)
    return conv2d(x, p["head.w"], p["head.b"], stride=1, padding=0)


@dataclass
class ModelGroup:
    """One teacher-student pair."""

    student: SegNet
    teacher: SegNet
    group_id: int = 0


def init_group(arch: SegArch, seed: int, group_id: int = 0) -> ModelGroup:
    """Seeded student plus a teacher starting as an exact copy of it."""
    student = SegNet.init(arch, seed, trainable=True)
    teacher = student.copy(trainable=False)
    return ModelGroup(student=student, teacher=teacher, group_id=group_id)


def ema_update(group: ModelGroup, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise ShapeError(f"ema_update: momentum must lie in [0,1], got {momentum}")
    lam = np.float32(momentum)
    rem = np.float32(1.0 - momentum)
    for name, te in group.teacher.params.items():
        st = group.student.params[name]
        te.data = lam * te.data + rem * st.data


# ---------------------------------------------------------------------------
# Checkpoint format
# ---------------------------------------------------------------------------

def _write_record(fh: BinaryIO, name: str, data: np.ndarray) -> None:
    nb = name.encode("utf-8")
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<I", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def save_params(net: SegNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name, p in net.params.items():
            _write_record(fh, name, p.data)


def _read_exact(fh: BinaryIO, n: int, path) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"checkpoint {path}: truncated (wanted {n} bytes, got {len(buf)})")
    return buf


def load_params(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into a name -> float32 array dict."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"checkpoint {path}: bad magic {magic!r}")
        out: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise FormatError(f"checkpoint {path}: truncated name length")
            (nlen,) = struct.unpack("<I", head)
            name = _read_exact(fh, nlen, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, path))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path))
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = _read_exact(fh, 4 * count, path)
            out[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    return out


def load_into(net: SegNet, path) -> None:
    """Load a checkpoint into an existing net, shape-checked."""
    loaded = load_params(path)
    if set(loaded) != set(net.params):
        raise FormatError(
            f"checkpoint {path}: parameter names {sorted(loaded)} do not match "
            f"model {sorted(net.params)}")
    for name, arr in loaded.items():
        p = net.params[name]
        if arr.shape != p.data.shape:
            raise FormatError(
                f"checkpoint {path}: shape {arr.shape} for {name}, expected {p.data.shape}")
        p.data = arr.copy()


def save_group_dir(path, groups: Iterable[ModelGroup]) -> None:
    """Write every model of a run into one directory with fixed filenames."""
    import os

    os.makedirs(path, exist_ok=True)
    for group in groups:
        gid = group.group_id
        save_params(group.student, os.path.join(path, f"g{gid}_student"))
        save_params(group.teacher, os.path.join(path, f"g{gid}_teacher"))


def load_group_dir(path, arch: SegArch, group_ids: Iterable[int] = (1, 2)) -> list[ModelGroup]:
    import os

    groups = []
    for gid in group_ids:
        sp = os.path.join(path, f"g{gid}_student")
        tp = os.path.join(path, f"g{gid}_teacher")
        if not os.path.exists(sp):
            continue
        student = SegNet.init(arch, seed=0, trainable=True)
        teacher = SegNet.init(arch, seed=0, trainable=False)
        load_into(student, sp)
        load_into(teacher, tp)
        groups.append(ModelGroup(student=student, teacher=teacher, group_id=gid))
    if not groups:
        raise FormatError(f"checkpoint directory {path}: no model files found")
    return groups
