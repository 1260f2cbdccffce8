"""ShapesWorld: a deterministic two-domain synthetic segmentation benchmark.

Scenes are a dark background plus a handful of non-overlapping colored
shapes; the class of a region is carried by its palette color.  The source
and target domains share geometry statistics but differ in appearance (hue
rotation, sensor noise, texture), which opens a measurable domain gap that
a desk-scale adaptation method can close.

Everything is a pure function of (seed, spec, H, W, C): the scene geometry
comes from a seed-derived stream that ignores the domain, so the same seed
under two specs yields the same label map with differently styled images.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ShapeError
from .imageops import apply_color_matrix, gaussian_blur, hue_rotation_matrix

__all__ = [
    "DomainSpec",
    "SceneSample",
    "SOURCE",
    "TARGET",
    "generate_scene",
    "write_dataset",
    "read_dataset",
    "write_sample",
    "read_sample",
    "generate_benchmark",
    "class_frequency",
]

DATASET_MAGIC = b"DTSIMG1"

_GEOM_SALT = 0x5CE7E
_STYLE_SALT = 0x57871E


@dataclass(frozen=True)
class DomainSpec:
    """Appearance parameters of one domain."""

    name: str
    palette: tuple[tuple[float, float, float], ...]
    texture_amp: float = 0.0
    hue_shift: float = 0.0
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0
    illumination: float = 0.0


# Chromatic classes sit on a luminance ladder with modest saturation, so the
# target hue shift moves each color by less than the gap between classes.
_PALETTE = (
    (0.15, 0.15, 0.15),
    (0.38, 0.30, 0.30),
    (0.38, 0.50, 0.38),
    (0.56, 0.58, 0.72),
    (0.92, 0.92, 0.92),
)

SOURCE = DomainSpec(name="source", palette=_PALETTE, texture_amp=0.0,
                    hue_shift=0.0, noise_sigma=0.0, blur_sigma=0.0,
                    illumination=0.15)
TARGET = replace(SOURCE, name="target", hue_shift=0.15, noise_sigma=0.05,
                 texture_amp=0.1)


@dataclass
class SceneSample:
    image: np.ndarray  # (3,H,W) float32 in [0,1]
    label: np.ndarray  # (H,W) uint8, every value < C
    seed: int = 0
    domain: str = ""


def _shape_mask(kind: int, cy: float, cx: float, size: float, extra: float,
                yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    half = size / 2.0
    if kind == 0:  # rectangle, aspect from extra in [0.6, 1.6]
        hh, hw = half, half * (0.6 + extra)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == 1:  # disc
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= half * half
    if kind == 2:  # upright triangle, apex on top
        rel = (yy - (cy - half)) / size
        inside_y = (rel >= 0) & (rel <= 1)
        return inside_y & (np.abs(xx - cx) <= rel * half)
    # bar: thin rectangle, horizontal or vertical from extra
    thin = max(size / 4.0, 2.0) / 2.0
    if extra < 0.5:
        return (np.abs(yy - cy) <= thin) & (np.abs(xx - cx) <= half)
    return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= thin)


def generate_scene(seed: int, spec: DomainSpec, height: int = 64,
                   width: int = 64, num_classes: int = 5) -> SceneSample:
    """Render one labelled scene; deterministic in all arguments."""
    if height < 32 or width < 32:
        raise ShapeError(f"generate_scene: minimum size is 32x32, got {height}x{width}")
    if not 2 <= num_classes <= 8:
        raise ShapeError(f"generate_scene: class count must be in [2,8], got {num_classes}")
    if len(spec.palette) < num_classes:
        raise ShapeError(
            f"generate_scene: palette has {len(spec.palette)} entries, need {num_classes}")

    geom = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _GEOM_SALT])))
    style = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([seed, _STYLE_SALT, zlib.crc32(spec.name.encode())])))

    yy = np.arange(height, dtype=np.float32)[:, None]
    xx = np.arange(width, dtype=np.float32)[None, :]
    label = np.zeros((height, width), dtype=np.uint8)
    short = min(height, width)

    n_shapes = int(geom.integers(3, 7))
    for _ in range(n_shapes):
        cls = int(geom.integers(1, num_classes))
        kind = int(geom.integers(0, 4))
        size = float(geom.uniform(0.10, 0.40)) * short
        extra = float(geom.uniform())
        for attempt in range(40):
            if attempt >= 10:  # shrink stubborn shapes so they still fit
                size = max(size * 0.9, 0.08 * short)
            half = size / 2.0 + 1.0
            cy = float(geom.uniform(half, height - half))
            cx = float(geom.uniform(half, width - half))
            mask = _shape_mask(kind, cy, cx, size, extra, yy, xx)
            if mask.any() and not label[mask].any():
                label[mask] = cls
                break

    palette = np.asarray(spec.palette[:num_classes], dtype=np.float32)
    image = palette[label].transpose(2, 0, 1).copy()  # (3,H,W)

    u = (xx / width).astype(np.float32)
    v = (yy / height).astype(np.float32)
    fx = float(style.uniform(2.0, 6.0))
    fy = float(style.uniform(2.0, 6.0))
    phase = float(style.uniform(0.0, 2.0 * np.pi))
    theta = float(style.uniform(0.0, 2.0 * np.pi))
    if spec.texture_amp > 0:
        field = 1.0 + spec.texture_amp * np.sin(
            2.0 * np.pi * (fx * u + fy * v) + phase, dtype=np.float32)
        image *= field
    if spec.illumination > 0:
        ramp = 1.0 + spec.illumination * 2.0 * (
            (u - 0.5) * np.cos(theta) + (v - 0.5) * np.sin(theta))
        image *= ramp.astype(np.float32)
    if spec.hue_shift != 0.0:
        image = apply_color_matrix(image, hue_rotation_matrix(spec.hue_shift))
    if spec.blur_sigma > 0:
        image = gaussian_blur(image, spec.blur_sigma)
    if spec.noise_sigma > 0:
        image = image + style.normal(0.0, spec.noise_sigma,
                                     size=image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SceneSample(image=image, label=label, seed=int(seed), domain=spec.name)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def write_sample(path, image: np.ndarray, label: np.ndarray,
                 num_classes: int) -> None:
    h, w = label.shape
    if image.shape != (3, h, w):
        raise ShapeError(f"write_sample: image {image.shape} does not match label {label.shape}")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<III", h, w, num_classes))
        fh.write(np.ascontiguousarray(image, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(label, dtype=np.uint8).tobytes())


def read_sample(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Read one sample file -> (image, label, num_classes)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(DATASET_MAGIC))
        if magic != DATASET_MAGIC:
            raise FormatError(
                f"{path}: bad magic {magic!r} at offset 0, expected {DATASET_MAGIC!r}")
        head = fh.read(12)
        if len(head) != 12:
            raise FormatError(f"{path}: truncated header at offset {fh.tell()}")
        h, w, c = struct.unpack("<III", head)
        nbytes = 3 * h * w * 4
        raw = fh.read(nbytes)
        if len(raw) != nbytes:
            raise FormatError(f"{path}: truncated image payload at offset {fh.tell()}")
        image = np.frombuffer(raw, dtype="<f4").reshape(3, h, w).astype(np.float32)
        raw = fh.read(h * w)
        if len(raw) != h * w:
            raise FormatError(f"{path}: truncated label payload at offset {fh.tell()}")
        label = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
    return image, label, int(c)


def write_dataset(samples: Sequence[SceneSample], directory,
                  num_classes: int = 5, zero_labels: bool = False) -> None:
    os.makedirs(directory, exist_ok=True)
    for i, s in enumerate(samples):
        label = np.zeros_like(s.label) if zero_labels else s.label
        write_sample(os.path.join(directory, f"{i:05d}.dimg"), s.image, label,
                     num_classes)


def read_dataset(directory) -> list[SceneSample]:
    if not os.path.isdir(directory):
        raise FormatError(f"dataset directory not found: {directory}")
    names = sorted(n for n in os.listdir(directory) if n.endswith(".dimg"))
    out = []
    for n in names:
        image, label, _ = read_sample(os.path.join(directory, n))
        out.append(SceneSample(image=image, label=label))
    return out


def dataset_num_classes(directory) -> int:
    names = sorted(n for n in os.listdir(directory) if n.endswith(".dimg"))
    if not names:
        raise FormatError(f"dataset directory is empty: {directory}")
    return read_sample(os.path.join(directory, names[0]))[2]


def _derive_seed(base: int, stream: int, index: int) -> int:
    ss = np.random.SeedSequence([base, stream, index])
    return int(ss.generate_state(1, np.uint64)[0])


def generate_benchmark(root, seed: int = 0, n_source: int = 800,
                       n_target: int = 800, n_eval: int = 200,
                       height: int = 64, width: int = 64,
                       num_classes: int = 5,
                       source_spec: DomainSpec = SOURCE,
                       target_spec: DomainSpec = TARGET,
                       paired: bool = False,
                       n_source_eval: int = 0) -> dict:
    """Emit the on-disk layout: source/train, target/train (labels zeroed),
    target/eval (labels intact), plus a plain-text manifest."""
    streams = {"source/train": (0, n_source, source_spec, False),
               "target/train": (1, n_target, target_spec, True),
               "target/eval": (2, n_eval, target_spec, False)}
    if n_source_eval:
        streams["source/eval"] = (3, n_source_eval, source_spec, False)
    manifest = {
        "seed": seed,
        "height": height, "width": width, "classes": num_classes,
        "paired": paired,
        "domains": {"source": asdict(source_spec), "target": asdict(target_spec)},
        "splits": {},
    }
    for split, (stream, count, spec, hide) in streams.items():
        stream_id = 0 if (paired and stream == 1) else stream
        samples = [generate_scene(_derive_seed(seed, stream_id, i), spec,
                                  height, width, num_classes)
                   for i in range(count)]
        write_dataset(samples, os.path.join(root, *split.split("/")),
                      num_classes, zero_labels=hide)
        manifest["splits"][split] = {"count": count, "stream": stream_id,
                                     "labels": "zeroed" if hide else "intact"}
    with open(os.path.join(root, "spec.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def class_frequency(dataset: Iterable, num_classes: int) -> np.ndarray:
    """Fraction of images containing at least one pixel of each class."""
    counts = np.zeros(num_classes, dtype=np.int64)
    total = 0
    for item in dataset:
        label = item.label if isinstance(item, SceneSample) else np.asarray(item)
        present = np.unique(label)
        present = present[present < num_classes]
        counts[present] += 1
        total += 1
    if total == 0:
        raise ShapeError("class_frequency: dataset is empty")
    return counts / total
