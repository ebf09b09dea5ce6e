"""Dataset ingestion: scenes, tiling, manifests and synthetic fixtures.

Directory conventions (``<split>`` is ``train`` or ``test``)::

    cloud38          <root>/<split>_red/red_<id>.*   (band 4)
                     <root>/<split>_green/green_<id>.* (band 3)
                     <root>/<split>_blue/blue_<id>.*  (band 2)
                     <root>/<split>_gt/gt_<id>.*
    inria            <root>/<split>/images/<id>.*, <root>/<split>/gt/<id>.*
    deepglobe-road   <root>/<split>/images/<id>.*, <root>/<split>/masks/<id>.*
    sentinel2-field  <root>/<split>/images/<id>.*, <root>/<split>/masks/<id>.*

Labels are required for the train split and optional for test.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from .errors import DataError, ParameterError

KINDS = ("inria", "cloud38", "sentinel2-field", "deepglobe-road", "synthetic")
SPLITS = ("train", "test")
RASTER_SUFFIXES = (".tif", ".tiff", ".png", ".jpg", ".jpeg")

CLOUD38_BAND_DIRS = {4: "red", 3: "green", 2: "blue"}
_RGB_LAYOUTS = {
    "inria": ("images", "gt"),
    "deepglobe-road": ("images", "masks"),
    "sentinel2-field": ("images", "masks"),
}


@dataclass(frozen=True)
class BandSpec:
    """Band identifiers in output channel order."""

    bands: Tuple[Union[int, str], ...]

    @classmethod
    def for_kind(cls, kind: str) -> "BandSpec":
        if kind == "cloud38":
            return cls((4, 3, 2))  # R, G, B
        return cls(("rgb",))


@dataclass
class SceneRecord:
    scene_id: str
    band_paths: Dict[str, str]
    label_path: Optional[str]
    width: int
    height: int


@dataclass
class PatchRecord:
    scene_id: str
    origin: Tuple[int, int]  # (row, col)
    size: int
    image_ref: Union[str, Dict[str, str]]
    label_ref: Optional[str] = None

    @property
    def record_id(self) -> str:
        return f"{self.scene_id}_r{self.origin[0]}_c{self.origin[1]}"

    def to_json(self) -> dict:
        d = asdict(self)
        d["origin"] = list(self.origin)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PatchRecord":
        return cls(
            scene_id=d["scene_id"],
            origin=tuple(d["origin"]),
            size=int(d["size"]),
            image_ref=d["image_ref"],
            label_ref=d.get("label_ref"),
        )


@dataclass
class DatasetManifest:
    kind: str
    split: str
    records: List[PatchRecord]
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ParameterError(f"unknown dataset kind {self.kind!r}")
        if not self.records:
            raise DataError(f"{self.kind}/{self.split} manifest has no records")
        keys = [(r.scene_id, tuple(r.origin)) for r in self.records]
        if len(set(keys)) != len(keys):
            raise DataError("manifest has duplicate (scene, origin) records")

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> List[str]:
        return [r.record_id for r in self.records]

    def save(self, path: Union[str, Path]) -> None:
        lines = [json.dumps({"kind": self.kind, "split": self.split, "provenance": self.provenance}, sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in self.records]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DatasetManifest":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        try:
            head = json.loads(lines[0])
            records = [PatchRecord.from_json(json.loads(line)) for line in lines[1:] if line.strip()]
        except (IndexError, KeyError, ValueError) as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc
        return cls(head["kind"], head["split"], records, head.get("provenance", {}))


# -- rasters -----------------------------------------------------------------


@functools.lru_cache(maxsize=8)
def _read_raster_cached(path: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.array(img)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc
    arr.setflags(write=False)
    return arr


def read_raster(path: Union[str, Path]) -> np.ndarray:
    """(H, W) or (H, W, C) array in the file's native dtype; read-only."""
    return _read_raster_cached(str(path))


def raster_size(path: Union[str, Path]) -> Tuple[int, int]:
    """(height, width) from the file header, without decoding pixels."""
    try:
        with Image.open(path) as img:
            w, h = img.size
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc
    return h, w


def binarize_label(label: np.ndarray) -> np.ndarray:
    values = np.unique(label)
    if np.isin(values, (0, 1)).all():
        return label.astype(np.uint8)
    if np.isin(values, (0, 255)).all():
        return (label > 127).astype(np.uint8)
    raise DataError(f"label has values outside {{0,1}} / {{0,255}}: {values[:8].tolist()}")


def compose_bands(scene: SceneRecord, spec: BandSpec) -> np.ndarray:
    """Stack the scene's bands into a (3, H, W) float32 image."""
    channels = []
    for band in spec.bands:
        path = scene.band_paths.get(str(band))
        if path is None:
            raise DataError(f"scene {scene.scene_id}: missing band {band}")
        arr = read_raster(path)
        if arr.ndim == 2:
            channels.append(arr)
        else:
            channels.extend(arr[..., c] for c in range(min(arr.shape[-1], 3)))
    if len(channels) != 3:
        raise DataError(f"scene {scene.scene_id}: composed {len(channels)} channels, need 3")
    shapes = {c.shape for c in channels}
    if len(shapes) != 1:
        raise DataError(f"scene {scene.scene_id}: bands differ in size {sorted(shapes)}")
    return np.stack(channels).astype(np.float32)


def normalize(image: np.ndarray, policy: str = "minmax") -> np.ndarray:
    """Per-channel min-max to [0, 1]; constant channels map to 0."""
    if policy == "none":
        return image.astype(np.float32)
    if policy != "minmax":
        raise ParameterError(f"unknown normalization policy {policy!r}")
    image = image.astype(np.float64)
    lo = image.min(axis=(-2, -1), keepdims=True)
    span = image.max(axis=(-2, -1), keepdims=True) - lo
    out = np.where(span > 0, (image - lo) / np.where(span > 0, span, 1.0), 0.0)
    return out.astype(np.float32)


# -- tiling ------------------------------------------------------------------


def tile_origins(length: int, patch: int) -> List[int]:
    """Grid origins along one axis; the last tile is shifted inward to fit."""
    if patch > length:
        raise DataError(f"patch {patch} exceeds scene extent {length}")
    count = math.ceil(length / patch)
    return [min(i * patch, length - patch) for i in range(count)]


def tile_scene(scene: SceneRecord, patch: int, policy: str = "shift") -> List[PatchRecord]:
    if policy != "shift":
        raise ParameterError(f"unknown tiling policy {policy!r}")
    if patch < 1:
        raise ParameterError(f"patch size must be positive, got {patch}")
    if patch > scene.height or patch > scene.width:
        raise DataError(
            f"scene {scene.scene_id} ({scene.height}x{scene.width}) is smaller than patch {patch}"
        )
    return [
        PatchRecord(scene.scene_id, (r, c), patch, dict(scene.band_paths), scene.label_path)
        for r in tile_origins(scene.height, patch)
        for c in tile_origins(scene.width, patch)
    ]


# -- scanning datasets on disk ---------------------------------------------


def _rasters(directory: Path) -> Dict[str, Path]:
    return {
        p.stem: p
        for p in sorted(directory.iterdir())
        if p.is_file() and p.suffix.lower() in RASTER_SUFFIXES
    }


def _strip_prefix(stem: str, prefix: str) -> str:
    return stem[len(prefix) :] if stem.startswith(prefix) else stem


def scan_scenes(kind: str, root: Union[str, Path], split: str) -> List[SceneRecord]:
    root = Path(root)
    if kind == "cloud38":
        band_files = {}
        for band, name in CLOUD38_BAND_DIRS.items():
            d = root / f"{split}_{name}"
            band_files[band] = (
                {_strip_prefix(k, f"{name}_"): v for k, v in _rasters(d).items()} if d.is_dir() else {}
            )
        ids = sorted(set().union(*band_files.values()))
        label_dir = root / f"{split}_gt"
        label_prefix = "gt_"
        if not ids:
            raise DataError(f"no cloud38 scenes under {root} for split {split!r}")
    elif kind in _RGB_LAYOUTS:
        image_name, label_name = _RGB_LAYOUTS[kind]
        image_dir = root / split / image_name
        if not image_dir.is_dir():
            raise DataError(f"missing image directory {image_dir}")
        images = _rasters(image_dir)
        ids = sorted(images)
        label_dir = root / split / label_name
        label_prefix = ""
        if not ids:
            raise DataError(f"no images in {image_dir}")
    else:
        raise ParameterError(f"cannot scan dataset kind {kind!r}")

    if label_dir.is_dir():
        labels = {_strip_prefix(k, label_prefix): v for k, v in _rasters(label_dir).items()}
    elif split == "train":
        raise DataError(f"missing label directory {label_dir}")
    else:
        labels = {}

    scenes = []
    for sid in ids:
        if kind == "cloud38":
            band_paths = {}
            for band in (4, 3, 2):
                path = band_files[band].get(sid)
                if path is None:
                    raise DataError(f"scene {sid}: missing band {band}")
                band_paths[str(band)] = str(path)
        else:
            band_paths = {"rgb": str(images[sid])}
        sizes = {raster_size(p) for p in band_paths.values()}
        if len(sizes) != 1:
            raise DataError(f"scene {sid}: bands differ in size {sorted(sizes)}")
        (h, w) = sizes.pop()
        label = labels.get(sid)
        if label is None and split == "train":
            raise DataError(f"scene {sid}: no label in {label_dir}")
        if label is not None and raster_size(label) != (h, w):
            raise DataError(f"scene {sid}: label size {raster_size(label)} differs from image {(h, w)}")
        scenes.append(SceneRecord(sid, band_paths, str(label) if label else None, w, h))
    return scenes


def prepare_manifest(kind: str, root: Union[str, Path], split: str, patch: int) -> DatasetManifest:
    records = []
    for scene in scan_scenes(kind, root, split):
        records.extend(tile_scene(scene, patch))
    return DatasetManifest(kind, split, records, {"root": str(root), "patch": patch})


# -- few-shot ----------------------------------------------------------------


def canonical_order(records: Sequence[PatchRecord]) -> List[PatchRecord]:
    return sorted(records, key=lambda r: (r.scene_id, tuple(r.origin)))


def fewshot_subset(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Seeded random subset of ``floor(fraction * n)`` records.

    All fractions at one seed take prefixes of the same permutation, so
    smaller subsets are contained in larger ones.
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    ordered = canonical_order(manifest.records)
    n = len(ordered)
    if fraction == 1.0:
        chosen = ordered
    else:
        k = math.floor(fraction * n + 1e-9)
        if k == 0:
            raise DataError(f"fraction {fraction} of {n} records selects nothing")
        perm = np.random.default_rng(seed).permutation(n)
        chosen = [ordered[i] for i in perm[:k]]
    provenance = dict(manifest.provenance, fewshot_seed=seed, fraction=fraction)
    return DatasetManifest(manifest.kind, manifest.split, chosen, provenance)


# -- synthetic fixtures ------------------------------------------------------

SYNTHETIC_SCHEME = "synthetic://"


def _smooth_noise(rng: np.random.Generator, size: int, waves: int = 4) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    field_ = np.zeros((size, size))
    for _ in range(waves):
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    return field_ / waves


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.2, 0.8, size=2) * size
    ry, rx = rng.uniform(0.1, 0.3, size=2) * size
    if rng.random() < 0.5:
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)


def generate_synthetic(seed: int, index: int, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Filled rectangles/ellipses over textured noise.

    Returns a (3, size, size) float32 image in [0, 1] and a (size, size)
    uint8 mask whose foreground fraction lies in (0.05, 0.6).
    """
    rng = np.random.default_rng([seed, index])
    while True:
        label = np.zeros((size, size), dtype=bool)
        for _ in range(rng.integers(1, 4)):
            label |= _shape_mask(rng, size)
        frac = label.mean()
        if 0.05 < frac < 0.6:
            break
    base = rng.uniform(0.2, 0.45, size=3)
    shift = rng.uniform(0.25, 0.4, size=3)
    image = np.empty((3, size, size))
    texture = _smooth_noise(rng, size)
    # fine checker texture inside the shapes gives the high-pass branch a cue
    checker = ((np.indices((size, size)).sum(axis=0) % 2) * 2 - 1) * 0.04
    for c in range(3):
        bg = base[c] + 0.08 * texture + rng.normal(0, 0.02, size=(size, size))
        fg = base[c] + shift[c] + checker + rng.normal(0, 0.02, size=(size, size))
        image[c] = np.where(label, fg, bg)
    return np.clip(image, 0.0, 1.0).astype(np.float32), label.astype(np.uint8)


def synthetic_fixture(count: int, size: int, seed: int, split: str = "train") -> DatasetManifest:
    if count < 1:
        raise DataError("synthetic fixture must contain at least one record")
    if size < 2:
        raise ParameterError(f"synthetic size must be >= 2, got {size}")
    records = [
        PatchRecord(
            scene_id=f"syn{seed}-{i:05d}",
            origin=(0, 0),
            size=size,
            image_ref=f"{SYNTHETIC_SCHEME}{seed}/{i}/{size}",
        )
        for i in range(count)
    ]
    return DatasetManifest("synthetic", split, records, {"seed": seed, "count": count, "size": size})


# -- patch loading -----------------------------------------------------------


def load_patch(
    manifest_kind: str, record: PatchRecord, normalization: str = "minmax"
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """(3, S, S) float32 image and (S, S) uint8 label (or None if unlabeled)."""
    ref = record.image_ref
    if isinstance(ref, str) and ref.startswith(SYNTHETIC_SCHEME):
        seed, index, size = (int(v) for v in ref[len(SYNTHETIC_SCHEME) :].split("/"))
        image, label = generate_synthetic(seed, index, size)
        return normalize(image, normalization), label
    if not isinstance(ref, dict):
        raise DataError(f"record {record.record_id}: unsupported image reference {ref!r}")
    r, c = record.origin
    s = record.size
    scene = SceneRecord(record.scene_id, ref, record.label_ref, 0, 0)
    full = compose_bands(scene, BandSpec.for_kind(manifest_kind))
    if r + s > full.shape[1] or c + s > full.shape[2]:
        raise DataError(f"record {record.record_id} extends outside its scene")
    image = normalize(full[:, r : r + s, c : c + s], normalization)
    label = None
    if record.label_ref:
        raw = read_raster(record.label_ref)
        if raw.ndim == 3:
            raw = raw[..., 0]
        label = binarize_label(raw[r : r + s, c : c + s])
    return image, label
