"""Weak photometric augmentation plus the MedMix family of strong
augmentations that synthesise pseudo-abnormal training classes.

Class index n is the number of pasted lesions: class 0 keeps the image
clean, class n >= 1 cuts n patches from donor images, deforms them (colour
jitter, additive noise, fisheye, horizontal wave) and pastes them back at
non-overlapping locations, tracked by an exact lesion mask. Alternative
strong-augmentation strategies (rotation, permutation, cutout, plain noise)
share the same interface for comparison sweeps.

Everything is a pure function of (inputs, RngStream), so batch generation
can fan out per sample and stay schedule-independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import imgops
from .dataset import save_mask_png, save_png
from .errors import ConfigError, NumericError
from .numerics import RngStream


@dataclass
class WeakAugCfg:
    """SimCLR-style weak augmentation menu."""

    jitter_brightness: float = 0.8
    jitter_contrast: float = 0.8
    jitter_saturation: float = 0.8
    jitter_hue: float = 0.2
    jitter_prob: float = 0.8
    greyscale_prob: float = 0.2
    crop_min: float = 0.2
    crop_max: float = 1.0
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 2.0
    blur_prob: float = 0.5


@dataclass
class AugConfig:
    """Strong-augmentation settings; defaults follow the training recipe."""

    n_classes: int = 4
    strategy: str = "medmix"
    patch_min: float = 0.1
    patch_max: float = 0.3
    deform_prob: float = 0.25
    wave_control_points: int = 3
    wave_amplitude: float = 0.15
    fisheye_min: float = 0.1
    fisheye_max: float = 0.4
    noise_sigma_min: float = 0.05
    noise_sigma_max: float = 0.15
    max_place_retries: int = 20
    weak: WeakAugCfg = field(default_factory=WeakAugCfg)

    def validate(self) -> "AugConfig":
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if not (0.0 < self.patch_min <= self.patch_max < 1.0):
            raise ConfigError(f"bad patch side range [{self.patch_min}, {self.patch_max}]")
        if not (0.0 <= self.deform_prob <= 1.0):
            raise ConfigError(f"deform_prob must be in [0,1], got {self.deform_prob}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strong-augmentation strategy {self.strategy!r}")
        return self


@dataclass
class AugmentedSample:
    image: np.ndarray
    class_index: int
    view_index: int
    lesion_mask: np.ndarray
    source_id: str


# Number of paste placements that fell back to overlapping after retries;
# exposed for inspection, reset at will.
OVERLAP_FALLBACKS = 0


# ---------------------------------------------------------------------------
# Weak augmentation
# ---------------------------------------------------------------------------


def _colour_jitter(img: np.ndarray, rng: RngStream, cfg: WeakAugCfg) -> np.ndarray:
    out = img
    fb = 1.0 + float(rng.uniform()) * 2.0 * cfg.jitter_brightness - cfg.jitter_brightness
    fc = 1.0 + float(rng.uniform()) * 2.0 * cfg.jitter_contrast - cfg.jitter_contrast
    fs = 1.0 + float(rng.uniform()) * 2.0 * cfg.jitter_saturation - cfg.jitter_saturation
    fh = float(rng.uniform()) * 2.0 * cfg.jitter_hue - cfg.jitter_hue
    if fb != 1.0:
        out = imgops.clamp01(out * max(fb, 0.0))
    if fc != 1.0:
        mean = imgops.to_greyscale(out).mean()
        out = imgops.clamp01(mean + (out - mean) * max(fc, 0.0))
    if fs != 1.0:
        grey = imgops.to_greyscale(out)
        out = imgops.clamp01(grey + (out - grey) * max(fs, 0.0))
    if fh != 0.0:
        hsv = imgops.rgb_to_hsv(imgops.clamp01(out))
        hsv[..., 0] = (hsv[..., 0] + fh) % 1.0
        out = imgops.clamp01(imgops.hsv_to_rgb(hsv))
    return out


def _random_crop_resize(img: np.ndarray, rng: RngStream, cfg: WeakAugCfg) -> np.ndarray:
    h, w = img.shape[:2]
    for _ in range(10):
        area = float(rng.uniform()) * (cfg.crop_max - cfg.crop_min) + cfg.crop_min
        aspect = float(np.exp(rng.uniform() * (np.log(4 / 3) - np.log(3 / 4)) + np.log(3 / 4)))
        ch = int(round(np.sqrt(area * h * w * aspect)))
        cw = int(round(np.sqrt(area * h * w / aspect)))
        if 0 < ch <= h and 0 < cw <= w:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            if (ch, cw, top, left) == (h, w, 0, 0):
                return img
            return imgops.resize_bilinear(img[top : top + ch, left : left + cw], h, w)
    return img  # degenerate crop: fall back to the full frame


def weak_augment(img: np.ndarray, rng: RngStream, cfg: AugConfig) -> np.ndarray:
    """Crop-resize, colour jitter, random greyscale and Gaussian blur.

    Output has the input shape with values clamped to [0, 1].
    """
    wk = cfg.weak
    out = _random_crop_resize(img, rng, wk)
    if rng.bernoulli(wk.jitter_prob):
        out = _colour_jitter(out, rng, wk)
    if rng.bernoulli(wk.greyscale_prob):
        out = imgops.to_greyscale(out)
    if rng.bernoulli(wk.blur_prob):
        sigma = float(rng.uniform()) * (wk.blur_sigma_max - wk.blur_sigma_min) + wk.blur_sigma_min
        out = imgops.gaussian_blur(out, sigma)
    return imgops.clamp01(np.ascontiguousarray(out, dtype=img.dtype))


# ---------------------------------------------------------------------------
# Patch deformation
# ---------------------------------------------------------------------------


def _fisheye(patch: np.ndarray, strength: float) -> np.ndarray:
    h, w = patch.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    scale = max(h, w) / 2.0
    rr, cc = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    u = (rr - cy) / scale
    v = (cc - cx) / scale
    r2 = u * u + v * v
    factor = 1.0 + strength * r2  # barrel: sample outward, centre is a fixed point
    return imgops.bilinear_sample(patch, cy + u * factor * scale, cx + v * factor * scale)


def _horizontal_wave(patch: np.ndarray, rng: RngStream, cfg: AugConfig) -> np.ndarray:
    h, w = patch.shape[:2]
    n_pts = cfg.wave_control_points
    ctrl_rows = np.sort(rng.uniform(n_pts) * (h - 1))
    ctrl_amp = (rng.uniform(n_pts) * 2.0 - 1.0) * cfg.wave_amplitude * w
    rows = np.arange(h, dtype=np.float64)
    # Cosine interpolation through the control points, clamped outside them.
    shift = np.empty(h)
    shift[rows <= ctrl_rows[0]] = ctrl_amp[0]
    shift[rows >= ctrl_rows[-1]] = ctrl_amp[-1]
    for (r0, a0), (r1, a1) in zip(zip(ctrl_rows, ctrl_amp), zip(ctrl_rows[1:], ctrl_amp[1:])):
        sel = (rows > r0) & (rows < r1)
        if r1 - r0 > 0:
            t = (rows[sel] - r0) / (r1 - r0)
            shift[sel] = a0 + (a1 - a0) * (1.0 - np.cos(np.pi * t)) / 2.0
    rr, cc = np.meshgrid(rows, np.arange(w, dtype=np.float64), indexing="ij")
    return imgops.bilinear_sample(patch, rr, cc - shift[:, None])


def deform_patch(patch: np.ndarray, rng: RngStream, cfg: AugConfig) -> np.ndarray:
    """Apply each patch deformation independently with probability
    ``cfg.deform_prob``; output is clamped to [0, 1]."""
    if patch.shape[0] < 4 or patch.shape[1] < 4:
        raise NumericError(f"patch {patch.shape[:2]} too small to warp (min 4x4)")
    apply_jitter = rng.bernoulli(cfg.deform_prob)
    apply_noise = rng.bernoulli(cfg.deform_prob)
    apply_fisheye = rng.bernoulli(cfg.deform_prob)
    apply_wave = rng.bernoulli(cfg.deform_prob)
    out = patch.astype(np.float64)
    if apply_jitter:
        out = _colour_jitter(out, rng, cfg.weak)
    if apply_noise:
        sigma = float(rng.uniform()) * (cfg.noise_sigma_max - cfg.noise_sigma_min) + cfg.noise_sigma_min
        out = out + rng.normal(out.shape) * sigma
    if apply_fisheye:
        strength = float(rng.uniform()) * (cfg.fisheye_max - cfg.fisheye_min) + cfg.fisheye_min
        out = _fisheye(out, strength)
    if apply_wave:
        out = _horizontal_wave(out, rng, cfg)
    return imgops.clamp01(out).astype(patch.dtype)


# ---------------------------------------------------------------------------
# MedMix and the alternative strong-augmentation strategies
# ---------------------------------------------------------------------------


def medmix(
    img: np.ndarray,
    n_lesions: int,
    rng: RngStream,
    cfg: AugConfig,
    donor_pool: list[np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Cut-deform-paste ``n_lesions`` donor patches into ``img``.

    Returns the augmented image and a boolean lesion mask. Pixels outside
    the mask are bit-identical to the input. Placement keeps patches fully
    inside the frame and retries up to ``cfg.max_place_retries`` times for a
    non-touching position before allowing overlap.
    """
    global OVERLAP_FALLBACKS
    h, w = img.shape[:2]
    out = img.copy()
    mask = np.zeros((h, w), dtype=bool)
    if n_lesions == 0:
        return out, mask
    if not donor_pool:
        raise NumericError("medmix needs a non-empty donor pool when n_lesions > 0")
    for _ in range(n_lesions):
        donor = donor_pool[rng.choice(len(donor_pool))]
        dh, dw = donor.shape[:2]
        ph = max(4, int(round((float(rng.uniform()) * (cfg.patch_max - cfg.patch_min) + cfg.patch_min) * h)))
        pw = max(4, int(round((float(rng.uniform()) * (cfg.patch_max - cfg.patch_min) + cfg.patch_min) * w)))
        ph, pw = min(ph, dh, h), min(pw, dw, w)
        src_r = int(rng.integers(0, dh - ph + 1))
        src_c = int(rng.integers(0, dw - pw + 1))
        patch = deform_patch(donor[src_r : src_r + ph, src_c : src_c + pw], rng.child("deform"), cfg)
        placed = False
        for _attempt in range(cfg.max_place_retries + 1):
            dst_r = int(rng.integers(0, h - ph + 1))
            dst_c = int(rng.integers(0, w - pw + 1))
            # Test a 1-pixel halo so successful placements never touch.
            r0, c0 = max(dst_r - 1, 0), max(dst_c - 1, 0)
            if not mask[r0 : dst_r + ph + 1, c0 : dst_c + pw + 1].any():
                placed = True
                break
        if not placed:
            OVERLAP_FALLBACKS += 1
        out[dst_r : dst_r + ph, dst_c : dst_c + pw] = patch
        mask[dst_r : dst_r + ph, dst_c : dst_c + pw] = True
    return out, mask


def _medmix_strategy(img, class_idx, rng, cfg, donor_pool):
    return medmix(img, class_idx, rng, cfg, donor_pool)


def _rotation_strategy(img, class_idx, rng, cfg, donor_pool):
    del rng, cfg, donor_pool
    out = np.ascontiguousarray(np.rot90(img, k=class_idx, axes=(0, 1)))
    mask = np.full(img.shape[:2], class_idx > 0, dtype=bool)
    return out, mask


_QUAD_PERMS = [
    (0, 1, 2, 3), (1, 0, 3, 2), (2, 3, 0, 1), (3, 2, 1, 0),
    (1, 2, 3, 0), (3, 0, 1, 2), (2, 0, 3, 1), (0, 3, 1, 2),
]


def _permutation_strategy(img, class_idx, rng, cfg, donor_pool):
    del rng, cfg, donor_pool
    h2, w2 = img.shape[0] // 2, img.shape[1] // 2
    quads = [img[:h2, :w2], img[:h2, w2:], img[h2:, :w2], img[h2:, w2:]]
    perm = _QUAD_PERMS[class_idx % len(_QUAD_PERMS)]
    out = img.copy()
    mask = np.zeros(img.shape[:2], dtype=bool)
    slots = [(slice(0, h2), slice(0, w2)), (slice(0, h2), slice(w2, 2 * w2)),
             (slice(h2, 2 * h2), slice(0, w2)), (slice(h2, 2 * h2), slice(w2, 2 * w2))]
    for slot, src in enumerate(perm):
        out[slots[slot]] = quads[src]
        if src != slot:
            mask[slots[slot]] = True
    return out, mask


def _cutout_strategy(img, class_idx, rng, cfg, donor_pool):
    del donor_pool
    h, w = img.shape[:2]
    out = img.copy()
    mask = np.zeros((h, w), dtype=bool)
    for _ in range(class_idx):
        bh = max(2, int(round((float(rng.uniform()) * (cfg.patch_max - cfg.patch_min) + cfg.patch_min) * h)))
        bw = max(2, int(round((float(rng.uniform()) * (cfg.patch_max - cfg.patch_min) + cfg.patch_min) * w)))
        r = int(rng.integers(0, h - bh + 1))
        c = int(rng.integers(0, w - bw + 1))
        out[r : r + bh, c : c + bw] = 0.0
        mask[r : r + bh, c : c + bw] = True
    return out, mask


def _gauss_noise_strategy(img, class_idx, rng, cfg, donor_pool):
    del cfg, donor_pool
    if class_idx == 0:
        return img.copy(), np.zeros(img.shape[:2], dtype=bool)
    out = imgops.clamp01(img + rng.normal(img.shape) * 0.05 * class_idx).astype(img.dtype)
    return out, np.ones(img.shape[:2], dtype=bool)


STRATEGIES = {
    "medmix": _medmix_strategy,
    "rotation": _rotation_strategy,
    "permutation": _permutation_strategy,
    "cutout": _cutout_strategy,
    "gauss_noise": _gauss_noise_strategy,
}


def strong_augment(
    img: np.ndarray,
    class_idx: int,
    rng: RngStream,
    cfg: AugConfig,
    donor_pool: list[np.ndarray],
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the configured strong-augmentation strategy for class ``class_idx``."""
    if not (0 <= class_idx < cfg.n_classes):
        raise ConfigError(f"class index {class_idx} outside [0, {cfg.n_classes})")
    return STRATEGIES[cfg.strategy](img, class_idx, rng, cfg, donor_pool)


# ---------------------------------------------------------------------------
# Batch construction
# ---------------------------------------------------------------------------


def make_pretrain_batch(
    sources: list[tuple[str, np.ndarray]],
    rng: RngStream,
    cfg: AugConfig,
) -> list[AugmentedSample]:
    """Build the two-view pre-training batch for a list of source images.

    Per source: draw a class uniformly over [0, n_classes), strongly augment
    with that class, then emit two weak views that share the class, lesion
    mask and source id. The donor pool is the minibatch itself. Each sample
    derives its own stream from its source id, so generation order and
    worker fan-out cannot change the output.
    """
    donor_pool = [img for _, img in sources]
    samples: list[AugmentedSample] = []
    for source_id, img in sources:
        srng = rng.child("sample", source_id)
        class_idx = int(srng.integers(0, cfg.n_classes))
        strong, mask = strong_augment(img, class_idx, srng.child("strong"), cfg, donor_pool)
        for view_idx in (0, 1):
            view = weak_augment(strong, srng.child("weak", view_idx), cfg)
            samples.append(AugmentedSample(view, class_idx, view_idx, mask, source_id))
    return samples


def export_corpus(samples: list[AugmentedSample], out_dir: str | Path) -> Path:
    """Write samples as PNGs plus a JSON-lines manifest; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "corpus.jsonl"
    with open(manifest, "w") as fh:
        for i, s in enumerate(samples):
            image_name = f"{i:05d}_{s.source_id}_n{s.class_index}_l{s.view_index}.png"
            mask_name = image_name.replace(".png", "_mask.png")
            save_png(out_dir / image_name, s.image)
            save_mask_png(out_dir / mask_name, s.lesion_mask)
            fh.write(
                json.dumps(
                    {
                        "source_id": s.source_id,
                        "class_index": s.class_index,
                        "view_index": s.view_index,
                        "image_path": image_name,
                        "mask_path": mask_name,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return manifest
