"""On-disk dataset layout: PNG images, 0/255 mask PNGs, and a JSON-lines
manifest with one record per item {id, split, label, image_path, mask_path?}.

The train split may contain only normal items; abnormal val/test items carry
exact lesion masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, MissingArtifactError

NORMAL = "normal"
ABNORMAL = "abnormal"
SPLITS = ("train", "val", "test")


def save_png(path: str | Path, img: np.ndarray) -> None:
    """Save an H x W x 3 float image in [0,1] as 8-bit RGB PNG."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    """Load an RGB PNG as float32 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    """Save a boolean mask as a 1-channel 0/255 PNG."""
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def load_mask_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


@dataclass
class DatasetItem:
    item_id: str
    split: str
    label: str
    image_path: Path
    mask_path: Path | None = None

    def load_image(self) -> np.ndarray:
        return load_png(self.image_path)

    def load_mask(self) -> np.ndarray | None:
        return load_mask_png(self.mask_path) if self.mask_path else None


@dataclass
class DatasetOnDisk:
    root: Path
    items: list[DatasetItem]
    meta: dict

    def split(self, name: str) -> list[DatasetItem]:
        return [it for it in self.items if it.split == name]

    def train_images(self) -> list[tuple[str, np.ndarray]]:
        return [(it.item_id, it.load_image()) for it in self.split("train")]


def write_manifest(root: Path, records: list[dict], meta: dict) -> None:
    root = Path(root)
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(root / "meta.json", "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(root: str | Path) -> DatasetOnDisk:
    """Load a dataset directory, enforcing the normal-only train premise."""
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise MissingArtifactError(f"no dataset manifest at {manifest}")
    items = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["split"] not in SPLITS:
            raise ConfigError(f"unknown split {rec['split']!r} in manifest")
        if rec["label"] not in (NORMAL, ABNORMAL):
            raise ConfigError(f"unknown label {rec['label']!r} in manifest")
        if rec["split"] == "train" and rec["label"] != NORMAL:
            raise ConfigError(f"train split must be normal-only, item {rec['id']}")
        mask_path = root / rec["mask_path"] if rec.get("mask_path") else None
        if rec["label"] == ABNORMAL and mask_path is not None and not mask_path.exists():
            raise MissingArtifactError(f"missing mask {mask_path}")
        items.append(
            DatasetItem(
                item_id=rec["id"],
                split=rec["split"],
                label=rec["label"],
                image_path=root / rec["image_path"],
                mask_path=mask_path,
            )
        )
    meta_path = root / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    return DatasetOnDisk(root=root, items=items, meta=meta)
