"""Manifests and preprocessing: train/val split, crops, normalization,
and batch streaming."""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .imagery import RasterImage

MANIFEST_HEADER = ["image_path", "city_id", "city_name", "lat", "lon", "source", "split"]


class DatasetError(Exception):
    pass


@dataclass
class ManifestRow:
    image_path: str
    city_id: str
    city_name: str
    lat: float
    lon: float
    source: str
    split: str  # "train" | "val"


@dataclass
class DatasetManifest:
    rows: list
    class_index: dict  # city_id -> contiguous integer label

    def split_rows(self, split):
        return [r for r in self.rows if r.split == split]

    def save(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(MANIFEST_HEADER)
            for r in self.rows:
                w.writerow([r.image_path, r.city_id, r.city_name,
                            repr(r.lat), repr(r.lon), r.source, r.split])
        with open(_class_index_path(path), "w") as f:
            json.dump(self.class_index, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path, newline="") as f:
            rows = [ManifestRow(image_path=r["image_path"], city_id=r["city_id"],
                                city_name=r["city_name"], lat=float(r["lat"]),
                                lon=float(r["lon"]), source=r["source"],
                                split=r["split"])
                    for r in csv.DictReader(f)]
        with open(_class_index_path(path)) as f:
            class_index = json.load(f)
        return cls(rows=rows, class_index=class_index)


def _class_index_path(manifest_path):
    base, _ = os.path.splitext(manifest_path)
    return base + ".classes.json"


def build_manifest(image_dirs, cities, val_fraction=0.25, seed=0, source="map"):
    """Per-city deterministic shuffle and split into train/val.

    image_dirs maps city_id -> directory of image files. floor(val_fraction*n)
    images go to validation.
    """
    city_by_id = {c.id: c for c in cities}
    missing = [cid for cid in sorted(image_dirs) if not os.path.isdir(image_dirs[cid])]
    if missing:
        raise DatasetError(f"missing image directories for cities: {missing}")
    rows = []
    for cid in sorted(image_dirs):
        if cid not in city_by_id:
            raise DatasetError(f"city {cid!r} not present in the cities table")
        city = city_by_id[cid]
        files = sorted(f for f in os.listdir(image_dirs[cid])
                       if f.lower().endswith(".png"))
        if len(files) < 4:
            raise DatasetError(f"city {cid!r} has {len(files)} images; need >= 4")
        rng = np.random.default_rng(np.random.SeedSequence([seed, _stable_hash(cid)]))
        order = rng.permutation(len(files))
        n_val = int(np.floor(val_fraction * len(files)))
        for rank, idx in enumerate(order):
            rows.append(ManifestRow(
                image_path=os.path.join(image_dirs[cid], files[idx]),
                city_id=cid, city_name=city.name, lat=city.lat, lon=city.lon,
                source=source, split="val" if rank < n_val else "train"))
    class_index = {cid: i for i, cid in enumerate(sorted(image_dirs))}
    return DatasetManifest(rows=rows, class_index=class_index)


def _stable_hash(s):
    import hashlib
    return int.from_bytes(hashlib.sha256(s.encode()).digest()[:4], "little")


def normalize(img):
    """uint8 RGB to float32 in [-1, 1]: (v - 128) / 128."""
    return (img.pixels.astype(np.float32) - 128.0) / 128.0


def denormalize(tensor):
    return np.clip(np.asarray(tensor) * 128.0 + 128.0, 0, 255).astype(np.uint8)


def random_crop(img, out=224, rng=None, seed=0):
    """Uniform random subwindow; no scaling or color transforms."""
    if img.height < out or img.width < out:
        raise DatasetError(f"cannot crop {img.width}x{img.height} to {out}x{out}")
    if rng is None:
        rng = np.random.default_rng(seed)
    dy = int(rng.integers(0, img.height - out + 1))
    dx = int(rng.integers(0, img.width - out + 1))
    return RasterImage(img.pixels[dy:dy + out, dx:dx + out])


def center_crop(img, out=224):
    if img.height < out or img.width < out:
        raise DatasetError(f"cannot crop {img.width}x{img.height} to {out}x{out}")
    dy = (img.height - out) // 2
    dx = (img.width - out) // 2
    return RasterImage(img.pixels[dy:dy + out, dx:dx + out])


@dataclass
class Batch:
    inputs: np.ndarray  # (N, H, W, 3) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64


def batches(manifest, split, batch_size=64, seed=0, epoch=0, crop=224,
            image_loader=None):
    """Yield shuffled batches for one epoch.

    Train rows get a random crop, val rows a center crop. The final short
    batch is kept. Order is a pure function of (seed, epoch).
    """
    rows = manifest.split_rows(split)
    load = image_loader or RasterImage.load
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    order = rng.permutation(len(rows))
    crop_rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 1]))
    for start in range(0, len(rows), batch_size):
        chunk = order[start:start + batch_size]
        inputs = np.empty((len(chunk), crop, crop, 3), dtype=np.float32)
        labels = np.empty(len(chunk), dtype=np.int64)
        for k, idx in enumerate(chunk):
            row = rows[idx]
            img = load(row.image_path)
            if split == "train":
                img = random_crop(img, out=crop, rng=crop_rng)
            else:
                img = center_crop(img, out=crop)
            inputs[k] = normalize(img)
            labels[k] = manifest.class_index[row.city_id]
        yield Batch(inputs=inputs, labels=labels)
