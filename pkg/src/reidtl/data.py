"""Image records, CSV manifests, synthetic two-view data and probe/gallery splits."""

from __future__ import annotations

import csv
import dataclasses
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SPLITS = ("train", "val", "test", "probe", "gallery")
PROTOCOLS = ("single_shot", "single_query", "multi_query")
MANIFEST_HEADER = ["image_id", "path", "person_id", "camera_id", "split"]


class DataError(ValueError):
    """Base class for dataset ingestion errors."""


class ManifestNotFoundError(DataError, FileNotFoundError):
    pass


class MalformedRowError(DataError):
    pass


class MissingImageError(DataError, FileNotFoundError):
    pass


class UnreadableImageError(DataError):
    pass


class DuplicateImageIdError(DataError):
    pass


class ProtocolError(DataError):
    """Raised when a probe/gallery protocol cannot be satisfied."""


@dataclass(frozen=True, eq=False)
class ImageRecord:
    """One person detection.

    ``pixels`` is an H x W x C float array in [0, 1]. ``person_id`` is None for
    unlabelled target data. ``path`` is the manifest-relative file, if any.
    """

    image_id: str
    person_id: int | None
    camera_id: int
    pixels: np.ndarray
    split: str = "train"
    path: str | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"{self.image_id}: unknown split {self.split!r}")


@dataclass
class Dataset:
    records: list[ImageRecord]
    name: str = "dataset"
    image_size: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.image_size is None and self.records:
            self.image_size = tuple(self.records[0].pixels.shape)
        for rec in self.records:
            if self.image_size is not None and tuple(rec.pixels.shape) != tuple(self.image_size):
                raise DataError(
                    f"{self.name}: image {rec.image_id} has shape {rec.pixels.shape}, "
                    f"expected {self.image_size}"
                )
        labelled = [r.person_id is not None for r in self.records]
        if any(labelled) and not all(labelled):
            raise DataError(f"{self.name}: mixes labelled and unlabelled records")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labelled(self) -> bool:
        return bool(self.records) and self.records[0].person_id is not None

    @property
    def num_identities(self) -> int:
        return len(self.person_ids)

    @property
    def person_ids(self) -> list[int]:
        return sorted({r.person_id for r in self.records if r.person_id is not None})

    @property
    def cameras(self) -> set[int]:
        return {r.camera_id for r in self.records}

    def subset(self, split: str | None = None, keep=None, name: str | None = None) -> Dataset:
        recs = [r for r in self.records if (split is None or r.split == split)]
        if keep is not None:
            recs = [r for r in recs if keep(r)]
        return Dataset(recs, name=name or self.name, image_size=self.image_size)

    def by_identity(self) -> dict[int, list[int]]:
        """Map person_id -> record indices, in record order."""
        out: dict[int, list[int]] = defaultdict(list)
        for i, r in enumerate(self.records):
            if r.person_id is not None:
                out[r.person_id].append(i)
        return dict(out)

    def stack(self) -> np.ndarray:
        """Pixels as an N x C x H x W float32 array."""
        if not self.records:
            h, w, c = self.image_size or (0, 0, 0)
            return np.zeros((0, c, h, w), dtype=np.float32)
        return np.stack([r.pixels for r in self.records]).transpose(0, 3, 1, 2).astype(np.float32)

    def unlabelled(self) -> Dataset:
        recs = [dataclasses.replace(r, person_id=None) for r in self.records]
        return Dataset(recs, name=self.name, image_size=self.image_size)


def _read_image(path: Path) -> np.ndarray:
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img)
        arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr.astype(np.float32)


def _write_image(path: Path, pixels: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".npy":
        np.save(path, pixels.astype(np.float32))
        return
    arr = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_manifest(path, name: str | None = None) -> Dataset:
    """Read a manifest CSV (``image_id,path,person_id,camera_id,split``).

    Image paths are resolved relative to the manifest's directory. An empty
    person_id column on every row yields an unlabelled dataset.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records: list[ImageRecord] = []
    seen: set[str] = set()
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise MalformedRowError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise MalformedRowError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            image_id, rel, pid, cam, split = (c.strip() for c in row)
            if not image_id or not rel:
                raise MalformedRowError(f"{path}:{lineno}: empty image_id or path")
            if image_id in seen:
                raise DuplicateImageIdError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
            seen.add(image_id)
            try:
                person_id = int(pid) if pid else None
                camera_id = int(cam)
            except ValueError as e:
                raise MalformedRowError(f"{path}:{lineno}: {e}") from None
            if split not in SPLITS:
                raise MalformedRowError(f"{path}:{lineno}: unknown split {split!r}")
            img_path = root / rel
            if not img_path.is_file():
                raise MissingImageError(f"{path}:{lineno}: image {image_id!r} missing at {img_path}")
            try:
                pixels = _read_image(img_path)
            except Exception as e:  # noqa: BLE001 - decoder errors vary by format
                raise UnreadableImageError(f"{path}:{lineno}: cannot decode {img_path}: {e}") from e
            records.append(ImageRecord(image_id, person_id, camera_id, pixels, split, rel))
    return Dataset(records, name=name or path.stem)


def write_manifest(ds: Dataset, path, image_format: str = "png") -> Path:
    """Write ``ds`` as a manifest; records without a path get an image file under ``images/``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in ds.records:
            rel = rec.path
            if rel is None:
                rel = f"images/{rec.image_id}.{image_format}"
                _write_image(root / rel, rec.pixels)
            elif not (root / rel).is_file():
                _write_image(root / rel, rec.pixels)
            pid = "" if rec.person_id is None else str(rec.person_id)
            writer.writerow([rec.image_id, rel, pid, rec.camera_id, rec.split])
    return path


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic multi-camera identity generator."""

    num_identities: int = 20
    images_per_identity_per_camera: int = 2
    num_cameras: int = 2
    image_size: tuple[int, int, int] = (16, 8, 3)
    cross_view_noise: float = 0.0
    seed: int = 0
    name: str = "synth"
    id_offset: int = 0
    camera_shift: float = 1.0

    def __post_init__(self):
        counts = {
            "num_identities": self.num_identities,
            "images_per_identity_per_camera": self.images_per_identity_per_camera,
            "num_cameras": self.num_cameras,
        }
        for key, v in counts.items():
            if int(v) < 1:
                raise ValueError(f"synth.{key} must be >= 1, got {v}")
        if len(self.image_size) != 3 or min(self.image_size) < 1:
            raise ValueError(f"synth.image_size must be three positive ints, got {self.image_size}")
        if self.cross_view_noise < 0:
            raise ValueError(f"synth.cross_view_noise must be >= 0, got {self.cross_view_noise}")
        if self.camera_shift < 0:
            raise ValueError(f"synth.camera_shift must be >= 0, got {self.camera_shift}")


def _camera_params(rng: np.random.Generator, num_cameras: int, channels: int, scale: float = 1.0):
    # at scale 1 noise-free cross-camera nearest neighbours stay within identity
    gain = 1.0 + scale * rng.uniform(-0.1, 0.1, size=(num_cameras, channels))
    bias = scale * rng.uniform(-0.05, 0.05, size=(num_cameras, channels))
    shift = scale * rng.uniform(-0.5, 0.5, size=(num_cameras, 2))
    return gain, bias, shift


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Build a labelled dataset of smooth per-identity patterns seen through fixed camera transforms.

    Every identity gets a low-resolution random colour layout upsampled to the
    image size. Camera ``c`` shifts it by a fixed sub-pixel offset and applies a
    per-channel gain and bias (ranges scaled by ``camera_shift``); each image then receives i.i.d. Gaussian pixel
    noise with standard deviation ``cross_view_noise`` and a per-image
    brightness jitter of the same magnitude.
    """
    h, w, c = spec.image_size
    rng = np.random.default_rng(spec.seed)
    grid = (max(2, h // 4), max(1, w // 4))
    layouts = rng.uniform(0.05, 0.95, size=(spec.num_identities, grid[0], grid[1], c))
    zoom = (h / grid[0], w / grid[1], 1.0)
    bases = np.stack([
        ndimage.zoom(lay, zoom, order=1, mode="nearest", grid_mode=True)[:h, :w] for lay in layouts
    ])
    gain, bias, shift = _camera_params(rng, spec.num_cameras, c, spec.camera_shift)
    views = np.empty((spec.num_identities, spec.num_cameras, h, w, c))
    for p in range(spec.num_identities):
        for cam in range(spec.num_cameras):
            moved = ndimage.shift(bases[p], (shift[cam, 0], shift[cam, 1], 0.0), order=1, mode="nearest")
            views[p, cam] = moved * gain[cam] + bias[cam]

    records = []
    noise = float(spec.cross_view_noise)
    for p in range(spec.num_identities):
        pid = p + spec.id_offset
        for cam in range(spec.num_cameras):
            for k in range(spec.images_per_identity_per_camera):
                img = views[p, cam]
                if noise > 0:
                    img = img * (1.0 + noise * rng.standard_normal()) + noise * rng.standard_normal(img.shape)
                pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
                records.append(ImageRecord(f"{spec.name}_p{pid:04d}_c{cam}_{k:02d}", pid, cam, pixels))
    return Dataset(records, name=spec.name, image_size=(h, w, c))


def make_probe_gallery(ds: Dataset, protocol: str = "single_shot", seed: int = 0):
    """Split labelled records into (probe, gallery) lists under a cross-camera protocol.

    single_shot: one probe and one gallery image per identity, different cameras.
    single_query: one probe per identity per camera; remaining images form the gallery.
    multi_query: all images of an identity in one randomly chosen camera form a
    query group; its images in the other cameras go to the gallery.
    """
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    if not ds.labelled:
        raise ProtocolError(f"{ds.name}: probe/gallery split needs labelled records")
    rng = np.random.default_rng(seed)
    by_cam: dict[int, dict[int, list[ImageRecord]]] = defaultdict(lambda: defaultdict(list))
    for r in ds.records:
        by_cam[r.person_id][r.camera_id].append(r)

    probe, gallery = [], []
    for pid in sorted(by_cam):
        cams = sorted(by_cam[pid])
        if len(cams) < 2:
            raise ProtocolError(
                f"{ds.name}: identity {pid} appears only in camera(s) {cams}; "
                f"{protocol} needs at least two cameras"
            )
        imgs = by_cam[pid]
        if protocol == "single_shot":
            pc = cams[rng.integers(len(cams))]
            others = [c for c in cams if c != pc]
            gc = others[rng.integers(len(others))]
            probe.append(imgs[pc][rng.integers(len(imgs[pc]))])
            gallery.append(imgs[gc][rng.integers(len(imgs[gc]))])
        elif protocol == "multi_query":
            pc = cams[rng.integers(len(cams))]
            probe.extend(imgs[pc])
            for c in cams:
                if c != pc:
                    gallery.extend(imgs[c])
        else:
            remaining = {c: list(imgs[c]) for c in cams}
            chosen = []
            for c in cams:
                pick = remaining[c][rng.integers(len(remaining[c]))]
                # keep at least one gallery image outside every chosen probe's camera
                left = {k: [r for r in v if r is not pick] for k, v in remaining.items()}
                if all(any(left[k] for k in cams if k != p.camera_id) for p in chosen + [pick]):
                    remaining = left
                    chosen.append(pick)
            probe.extend(chosen)
            for c in cams:
                gallery.extend(remaining[c])

    probe = [dataclasses.replace(r, split="probe") for r in probe]
    gallery = [dataclasses.replace(r, split="gallery") for r in gallery]
    return probe, gallery


def query_groups(probe: list[ImageRecord]) -> list[list[int]]:
    """Indices of probe records grouped by (person_id, camera_id), in first-seen order."""
    groups: dict[tuple, list[int]] = {}
    for i, r in enumerate(probe):
        groups.setdefault((r.person_id, r.camera_id), []).append(i)
    return list(groups.values())


def split_identities(ds: Dataset, num_test: int, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Disjoint (train, test) datasets holding ``num_test`` randomly chosen identities in test."""
    pids = ds.person_ids
    if not 0 <= num_test <= len(pids):
        raise ValueError(f"{ds.name}: cannot hold out {num_test} of {len(pids)} identities")
    rng = np.random.default_rng(seed)
    test = {pids[i] for i in rng.choice(len(pids), size=num_test, replace=False)}
    train = ds.subset(keep=lambda r: r.person_id not in test, name=f"{ds.name}-train")
    held = ds.subset(keep=lambda r: r.person_id in test, name=f"{ds.name}-test")
    return train, held


def merge_datasets(datasets: list[Dataset], name: str = "merged") -> Dataset:
    """Concatenate labelled datasets, offsetting person_ids so identities stay disjoint."""
    records = []
    offset = 0
    prefix = len(datasets) > 1
    for ds in datasets:
        if not ds.labelled:
            raise DataError(f"{ds.name}: cannot merge an unlabelled dataset")
        remap = {pid: offset + i for i, pid in enumerate(ds.person_ids)}
        records.extend(
            dataclasses.replace(r, person_id=remap[r.person_id],
                                image_id=f"{ds.name}/{r.image_id}" if prefix else r.image_id)
            for r in ds.records
        )
        offset += len(remap)
    merged = Dataset(records, name=name)
    if merged.num_identities != offset:
        raise DataError(f"{name}: identity collision after merge")
    return merged
