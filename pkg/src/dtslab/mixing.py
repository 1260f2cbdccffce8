"""Class-level mixing across domains, pseudo-labels, and strong augmentation.

A mix mask selects, per pixel, which of two parent images supplies the
value; no pixel is ever interpolated.  For source/target mixes the mask is
cut from the source ground truth and the pasted source pixels keep weight
1.0 while target pixels carry the pseudo label's scalar confidence weight.
For target/target mixes the mask comes from whichever parent's pseudo label
is more confident on average.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .errors import ShapeError
from .imageops import gaussian_blur, resize_nearest

__all__ = [
    "IGNORE_LABEL",
    "PseudoLabel",
    "MixedSample",
    "pseudo_label",
    "classmix_mask",
    "mix",
    "mix_labels",
    "choose_tt_mask_source",
    "AugmentParams",
    "draw_augment_params",
    "draw_geometric_params",
    "draw_photometric_params",
    "apply_geometric",
    "apply_geometric_label",
    "apply_photometric",
    "augment",
]

IGNORE_LABEL = 255


@dataclass
class PseudoLabel:
    """Argmax labels, per-pixel max probability, and the image-level
    confidence fraction gamma (share of pixels at or above the threshold)."""

    labels: np.ndarray  # (H,W) uint8
    conf: np.ndarray    # (H,W) float32
    gamma: float


@dataclass
class MixedSample:
    """One training sample after mixing and augmentation.

    ``target_frac`` records the fraction of pixels sourced from a
    target-domain image (0 for pure source, 1 for target/target mixes).
    """

    image: np.ndarray         # (3,H,W) float32
    label: np.ndarray         # (H,W) uint8
    pixel_weight: np.ndarray  # (H,W) float32
    provenance: str           # "S", "ST", or "TT"
    target_frac: float = 0.0


def pseudo_label(teacher_logits, tau: float) -> PseudoLabel:
    """Argmax prediction with confidence statistics from raw class scores."""
    logits = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if logits.ndim != 3:
        raise ShapeError(f"pseudo_label: logits must be (C,H,W), got {logits.shape}")
    if not 0.0 < tau < 1.0:
        raise ShapeError(f"pseudo_label: tau must lie in (0,1), got {tau}")
    if not np.all(np.isfinite(logits)):
        raise ShapeError("pseudo_label: logits contain non-finite values")
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z, dtype=np.float32)
    probs = e / e.sum(axis=0, keepdims=True)
    labels = probs.argmax(axis=0).astype(np.uint8)
    conf = probs.max(axis=0).astype(np.float32)
    gamma = float((conf >= tau).mean())
    return PseudoLabel(labels=labels, conf=conf, gamma=gamma)


def classmix_mask(label: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Boolean mask covering ceil(K/2) of the K classes present in ``label``.

    The classes are chosen uniformly without replacement; the mask is True
    exactly on their pixels.
    """
    label = np.asarray(label)
    if label.ndim != 2:
        raise ShapeError(f"classmix_mask: label must be (H,W), got {label.shape}")
    present = np.unique(label)
    present = present[present != IGNORE_LABEL]
    if present.size == 0:
        raise ShapeError("classmix_mask: label map is fully ignored")
    n_pick = (present.size + 1) // 2
    chosen = rng.choice(present, size=n_pick, replace=False)
    return np.isin(label, chosen)


def _check_mix_shapes(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mix: inputs differ in shape, {a.shape} vs {b.shape}")
    if mask.shape != a.shape[-2:]:
        raise ShapeError(f"mix: mask {mask.shape} does not match spatial size {a.shape[-2:]}")


def mix(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel select: output takes ``a`` where mask is set, else ``b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    mask = np.asarray(mask, dtype=bool)
    _check_mix_shapes(a, b, mask)
    return np.where(mask, a, b)


def mix_labels(a: np.ndarray, b: np.ndarray, weight_a: np.ndarray,
               weight_b: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mix label maps and their per-pixel weight maps with one mask."""
    a = np.asarray(a)
    b = np.asarray(b)
    mask = np.asarray(mask, dtype=bool)
    _check_mix_shapes(a, b, mask)
    wa = np.asarray(weight_a, dtype=np.float32)
    wb = np.asarray(weight_b, dtype=np.float32)
    _check_mix_shapes(wa, wb, mask)
    return np.where(mask, a, b), np.where(mask, wa, wb)


def choose_tt_mask_source(pl_a: PseudoLabel, pl_b: PseudoLabel) -> int:
    """Index (0 or 1) of the pseudo label that should cut the mix mask."""
    return 0 if pl_a.gamma >= pl_b.gamma else 1


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    """Sampled augmentation knobs; identity is scale 1, unit jitter, sigma 0."""

    scale: float = 1.0
    offset_y: float = 0.5
    offset_x: float = 0.5
    contrast: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brightness: float = 0.0
    blur_sigma: float = 0.0


def draw_geometric_params(rng: np.random.Generator,
                          scale_range: tuple[float, float] = (0.75, 1.25)
                          ) -> AugmentParams:
    """Sample only the rescale/crop knobs; photometric part stays identity."""
    scale = float(rng.uniform(*scale_range))
    offset_y = float(rng.uniform())
    offset_x = float(rng.uniform())
    return AugmentParams(scale=scale, offset_y=offset_y, offset_x=offset_x)


def draw_photometric_params(rng: np.random.Generator,
                            jitter_range: tuple[float, float] = (0.8, 1.2),
                            brightness_delta: float = 0.1,
                            blur_prob: float = 0.5,
                            sigma_max: float = 1.1) -> AugmentParams:
    """Sample only the jitter/blur knobs.  Consumes a fixed number of draws
    regardless of whether the blur gate fires."""
    contrast = tuple(float(v) for v in rng.uniform(*jitter_range, size=3))
    brightness = float(rng.uniform(-brightness_delta, brightness_delta))
    gate = float(rng.uniform())
    sigma = float(rng.uniform(0.0, sigma_max))
    return AugmentParams(contrast=contrast, brightness=brightness,
                         blur_sigma=sigma if gate < blur_prob else 0.0)


def draw_augment_params(rng: np.random.Generator,
                        scale_range: tuple[float, float] = (0.75, 1.25),
                        jitter_range: tuple[float, float] = (0.8, 1.2),
                        brightness_delta: float = 0.1,
                        blur_prob: float = 0.5,
                        sigma_max: float = 1.1) -> AugmentParams:
    """Sample a full set of knobs (geometric draws first, then photometric)."""
    geo = draw_geometric_params(rng, scale_range)
    pho = draw_photometric_params(rng, jitter_range, brightness_delta,
                                  blur_prob, sigma_max)
    return AugmentParams(scale=geo.scale, offset_y=geo.offset_y,
                         offset_x=geo.offset_x, contrast=pho.contrast,
                         brightness=pho.brightness, blur_sigma=pho.blur_sigma)


def _window(params: AugmentParams, h: int, w: int) -> tuple[int, int, int, int]:
    """Resized size and crop/pad origin implied by the params."""
    sh = max(1, round(h * params.scale))
    sw = max(1, round(w * params.scale))
    oy = int(params.offset_y * (abs(sh - h) + 1))
    ox = int(params.offset_x * (abs(sw - w) + 1))
    oy = min(oy, abs(sh - h))
    ox = min(ox, abs(sw - w))
    return sh, sw, oy, ox


def _place(resized: np.ndarray, h: int, w: int, oy: int, ox: int, fill) -> np.ndarray:
    sh, sw = resized.shape[-2], resized.shape[-1]
    if sh >= h and sw >= w:
        return np.ascontiguousarray(resized[..., oy:oy + h, ox:ox + w])
    out = np.full(resized.shape[:-2] + (h, w), fill, dtype=resized.dtype)
    out[..., oy:oy + sh, ox:ox + sw] = resized
    return out


def apply_geometric(image: np.ndarray, params: AugmentParams,
                    fill: float = 0.0) -> np.ndarray:
    """Rescale by the sampled factor, then crop or pad back to H x W."""
    h, w = image.shape[-2], image.shape[-1]
    if params.scale == 1.0:
        return np.asarray(image, dtype=np.float32).copy()
    sh, sw, oy, ox = _window(params, h, w)
    resized = resize_nearest(np.asarray(image, dtype=np.float32), sh, sw)
    return _place(resized, h, w, oy, ox, np.float32(fill))


def apply_geometric_label(label: np.ndarray, weight: np.ndarray,
                          params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    """Same geometry as the image; padded pixels become ignore with weight 0."""
    if params.scale == 1.0:
        return label.copy(), np.asarray(weight, dtype=np.float32).copy()
    h, w = label.shape
    sh, sw, oy, ox = _window(params, h, w)
    rl = resize_nearest(label, sh, sw)
    rw = resize_nearest(np.asarray(weight, dtype=np.float32), sh, sw)
    return (_place(rl, h, w, oy, ox, np.uint8(IGNORE_LABEL)),
            _place(rw, h, w, oy, ox, np.float32(0.0)))


def apply_photometric(image: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Per-channel contrast, shared brightness shift, optional blur, clamp."""
    out = np.asarray(image, dtype=np.float32)
    # Neutral knobs stay bitwise-identity (float32 0.5 round trips are not).
    if params.brightness != 0.0 or any(c != 1.0 for c in params.contrast):
        cvec = np.asarray(params.contrast, dtype=np.float32)[:, None, None]
        out = cvec * (out - np.float32(0.5)) + np.float32(0.5) + np.float32(params.brightness)
    if params.blur_sigma > 0:
        out = gaussian_blur(out, params.blur_sigma)
    return np.clip(out, 0.0, 1.0)


def augment(image: np.ndarray, rng: Optional[np.random.Generator] = None,
            params: Optional[AugmentParams] = None) -> np.ndarray:
    """Full pipeline: geometric rescale/crop, color jitter, blur, clamp."""
    if params is None:
        if rng is None:
            raise ShapeError("augment: provide either rng or explicit params")
        params = draw_augment_params(rng)
    return apply_photometric(apply_geometric(image, params), params)
