"""Desk-scale synthetic screening dataset.

Normal images are smooth tinted multi-frequency fields overlaid with a
coherent high-frequency grain (a per-image orientation and frequency) plus
mild speckle, so per-position statistics across the training set have real
width. Abnormal val/test images carry 1-3 blob lesions with exact masks:

* normal mode: lesions shift intensity by a clear margin and swap in a
  foreign grain - easy to catch, so end-to-end scores are meaningful;
* --hard mode: the intensity margin shrinks and the lesion is mostly a
  structural change (rotated, re-scaled grain), which plain per-position
  intensity statistics largely absorb but patch-deformation pre-training is
  tuned to expose.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import RunConfig, SynthCfg, config_hash
from .dataset import ABNORMAL, NORMAL, DatasetOnDisk, load_dataset, save_mask_png, save_png, write_manifest
from .errors import ConfigError, NumericError
from .numerics import RngStream


def _coords(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    return yy, xx


def _smooth_base(rng: RngStream, size: int) -> np.ndarray:
    """Low-frequency luminance field in roughly [0.35, 0.65]."""
    yy, xx = _coords(size)
    angle = float(rng.uniform()) * 2.0 * np.pi
    dy, dx = rng.uniform(2) * size
    cy = np.cos(angle) * (yy - dy) - np.sin(angle) * (xx - dx)
    cx = np.sin(angle) * (yy - dy) + np.cos(angle) * (xx - dx)
    out = np.zeros((size, size))
    total = 0.0
    for k in range(4):
        freq = (0.5 + float(rng.uniform()) * 2.5) / size
        theta = float(rng.uniform()) * np.pi
        phase = float(rng.uniform()) * 2.0 * np.pi
        amp = 1.0 / (k + 1)
        out += amp * np.sin(2.0 * np.pi * freq * (cy * np.cos(theta) + cx * np.sin(theta)) + phase)
        total += amp
    return 0.5 + 0.15 * out / total


def _orientation_field(rng: RngStream, size: int) -> np.ndarray:
    """Slowly varying grain orientation: normal tissue grain bends smoothly,
    so local orientation mixtures are part of the normal class."""
    yy, xx = _coords(size)
    theta0 = float(rng.uniform()) * np.pi
    fy = 0.5 + float(rng.uniform())
    fx = 0.5 + float(rng.uniform())
    ph1 = float(rng.uniform()) * 2 * np.pi
    ph2 = float(rng.uniform()) * 2 * np.pi
    swirl = 0.35 + float(rng.uniform()) * 0.35
    return theta0 + swirl * (
        np.sin(2 * np.pi * fy * yy / size + ph1) + np.sin(2 * np.pi * fx * xx / size + ph2)
    )


def _grain(rng: RngStream, size: int, theta_field: np.ndarray, cycles: float, amp: float) -> np.ndarray:
    """Locally oriented grain following an orientation field."""
    yy, xx = _coords(size)
    phase = float(rng.uniform()) * 2.0 * np.pi
    u = yy * np.cos(theta_field) + xx * np.sin(theta_field)
    g = np.sin(2.0 * np.pi * cycles * u / size + phase)
    g = g + 0.5 * np.sin(4.0 * np.pi * cycles * u / size + 2.1 * phase)
    return amp * g / 1.5


def _grain_params(rng: RngStream) -> tuple[float, float]:
    cycles = 8.0 + float(rng.uniform()) * 5.0
    amp = 0.05 + float(rng.uniform()) * 0.04
    return cycles, amp


def _normal_image(rng: RngStream, size: int) -> np.ndarray:
    lum = _smooth_base(rng.child("base"), size)
    cycles, amp = _grain_params(rng.child("grainp"))
    theta_field = _orientation_field(rng.child("ofield"), size)
    lum = lum + _grain(rng.child("grain"), size, theta_field, cycles, amp)
    lum = lum + rng.child("speckle").normal((size, size)) * 0.02
    tint = np.array([
        0.75 + float(rng.uniform()) * 0.2,
        0.5 + float(rng.uniform()) * 0.25,
        0.4 + float(rng.uniform()) * 0.2,
    ])
    img = lum[:, :, None] * tint[None, None, :]
    img += (rng.uniform(3) - 0.5)[None, None, :] * 0.04
    return np.clip(img, 0.0, 1.0)


def _blob_mask(rng: RngStream, size: int) -> np.ndarray:
    radius = 5.0 + float(rng.uniform()) * 6.0
    margin = int(np.ceil(radius * 1.4)) + 2
    cy = int(rng.integers(margin, size - margin))
    cx = int(rng.integers(margin, size - margin))
    amp2 = 0.1 + float(rng.uniform()) * 0.25
    amp3 = 0.1 + float(rng.uniform()) * 0.2
    ph2 = float(rng.uniform()) * 2.0 * np.pi
    ph3 = float(rng.uniform()) * 2.0 * np.pi
    yy, xx = _coords(size)
    dist = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)
    edge = radius * (1.0 + amp2 * np.cos(2 * theta + ph2) + amp3 * np.cos(3 * theta + ph3))
    return dist < edge


def _inject_lesions(
    img: np.ndarray,
    host_grain: np.ndarray,
    theta_field: np.ndarray,
    grain_cycles: float,
    grain_amp: float,
    rng: RngStream,
    margin: float,
    n_min: int,
    n_max: int,
) -> tuple[np.ndarray, np.ndarray]:
    size = img.shape[0]
    n_lesions = int(rng.integers(n_min, n_max + 1))
    out = img.copy()
    mask = np.zeros((size, size), dtype=bool)
    for k in range(n_lesions):
        lrng = rng.child("lesion", k)
        blob = None
        for _ in range(20):
            candidate = _blob_mask(lrng.child("place"), size)
            if not (candidate & mask).any():
                blob = candidate
                break
        if blob is None:
            blob = candidate  # allow overlap after bounded retries; masks merge
        replaced_mean = float(out[blob].mean())

        # structural change: abruptly rotated, re-scaled grain replaces the
        # host grain inside the blob (normal orientation varies smoothly, so
        # the abrupt discontinuity is the anomaly signature)
        delta = np.pi / 4.0 + float(lrng.uniform()) * np.pi / 4.0
        cyc = grain_cycles * (1.2 + float(lrng.uniform()) * 0.4)
        foreign = _grain(lrng.child("fg"), size, theta_field + delta, cyc, grain_amp)
        structural = foreign - host_grain  # swap textures under the same base field

        # intensity shift toward the side with gamut headroom
        sign = 1.0 if lrng.bernoulli(0.5) else -1.0
        headroom = 1.0 - replaced_mean if sign > 0 else replaced_mean
        if headroom < margin + 0.15:
            sign = -sign
        shift = sign * margin

        region = out[blob] + shift + structural[blob][:, None]
        tint_shift = (lrng.uniform(3) - 0.5) * (margin * 0.3)
        out[blob] = np.clip(region + tint_shift[None, :], 0.0, 1.0)
        if margin >= 0.02:
            _margin_self_check(float(out[blob].mean()), replaced_mean, margin)
        mask |= blob
    return out, mask


def _margin_self_check(inside: float, matched_bg: float, margin: float) -> None:
    """Per-lesion contrast guard: the mean shift against the pixels the blob
    replaced must retain at least half the configured margin."""
    if abs(inside - matched_bg) < 0.5 * margin:
        raise NumericError(
            f"lesion contrast {abs(inside - matched_bg):.3f} under half the configured margin {margin}"
        )


def synth_generate(cfg: RunConfig, out_dir: str | Path, hard: bool = False) -> DatasetOnDisk:
    """Generate the dataset directory; byte-identical for a fixed config."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    sc: SynthCfg = cfg.synth
    size = cfg.image_size
    margin = sc.hard_margin if hard else sc.lesion_margin
    root_rng = RngStream(cfg.seed, "synth")
    for sub in ("images", "masks"):
        (out_dir / sub).mkdir(exist_ok=True)

    records = []

    def emit(item_id: str, split: str, label: str, img: np.ndarray, mask: np.ndarray | None):
        image_rel = f"images/{item_id}.png"
        save_png(out_dir / image_rel, img)
        rec = {"id": item_id, "split": split, "label": label, "image_path": image_rel}
        if mask is not None:
            mask_rel = f"masks/{item_id}.png"
            save_mask_png(out_dir / mask_rel, mask)
            rec["mask_path"] = mask_rel
        records.append(rec)

    for split, n_normal, n_abnormal in (
        ("train", sc.train_normals, 0),
        ("val", sc.val_normals, sc.val_abnormals),
        ("test", sc.test_normals, sc.test_abnormals),
    ):
        for i in range(n_normal):
            item_id = f"{split}_n_{i:04d}"
            emit(item_id, split, NORMAL, _normal_image(root_rng.child(item_id), size), None)
        for i in range(n_abnormal):
            item_id = f"{split}_a_{i:04d}"
            irng = root_rng.child(item_id)
            base = _normal_image(irng, size)
            # same (seed, label) reproduces the draws _normal_image made, so
            # the injector sees the host image's actual grain and field
            cycles, amp = _grain_params(irng.child("grainp"))
            theta_field = _orientation_field(irng.child("ofield"), size)
            host_grain = _grain(irng.child("grain"), size, theta_field, cycles, amp)
            img, mask = _inject_lesions(
                base, host_grain, theta_field, cycles, amp, irng.child("inject"), margin,
                sc.lesion_min, sc.lesion_max,
            )
            if not mask.any():
                raise NumericError(f"abnormal item {item_id} has an empty mask")
            emit(item_id, split, ABNORMAL, img, mask)

    meta = {
        "config_hash": config_hash(cfg).hex(),
        "seed": cfg.seed,
        "image_size": size,
        "hard": hard,
        "lesion_margin": margin,
        "counts": {
            "train": sc.train_normals,
            "val": sc.val_normals + sc.val_abnormals,
            "test": sc.test_normals + sc.test_abnormals,
        },
    }
    write_manifest(out_dir, records, meta)
    return load_dataset(out_dir)
