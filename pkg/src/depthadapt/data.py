"""Dataset construction, manifests, and image/depth file I/O.

Layout written by :func:`build_dataset` under ``out_dir``::

    source_train/{rgb_%06d.png, depth_%06d.png, manifest.json}
    target_train/{rgb_%06d.png, manifest.json}
    target_eval/{rgb_%06d.png, depth_%06d.png, manifest.json}

RGB is 8-bit PNG; depth is 16-bit grayscale PNG storing round(meters*1000)
(the Kinect millimeter convention), so the decode error is at most 0.5 mm.
Manifests are versioned JSON with the generation configs embedded.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetError
from .scenes import SceneSpec, generate_scene
from .shift import ShiftConfig, apply_domain_shift

MANIFEST_VERSION = 1
DEPTH_SCALE = 1000.0  # millimeters per meter


def encode_rgb_png(img: np.ndarray, path):
    arr = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def decode_rgb_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode RGB image {path}: {exc}") from exc
    return arr.astype(np.float32) / 255.0


def encode_depth_png(depth_m: np.ndarray, path):
    if not np.all(np.isfinite(depth_m)):
        raise DatasetError(f"non-finite depth values when writing {path}")
    mm = np.round(np.asarray(depth_m, dtype=np.float64) * DEPTH_SCALE)
    if mm.min() < 0 or mm.max() > np.iinfo(np.uint16).max:
        raise DatasetError(f"depth out of 16-bit millimeter range when writing {path}")
    Image.fromarray(mm.astype(np.uint16)).save(path, format="PNG")


def decode_depth_png(path):
    """Return (depth_m float32, valid mask); raw value 0 marks invalid."""
    try:
        with Image.open(path) as im:
            raw = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode depth image {path}: {exc}") from exc
    if raw.dtype not in (np.uint16, np.int32):
        raise DatasetError(f"depth file {path} is not 16-bit (dtype {raw.dtype})")
    raw = raw.astype(np.int64)
    depth = (raw / DEPTH_SCALE).astype(np.float32)
    return depth, raw > 0


@dataclass(frozen=True)
class ManifestEntry:
    rgb: str
    depth: str | None
    seed: int


@dataclass
class DatasetManifest:
    domain: str  # "source" | "target"
    split: str  # "train" | "eval" | "labeled"
    image_size: tuple[int, int]
    entries: list[ManifestEntry]
    scene_spec: dict
    shift: dict | None
    version: int = MANIFEST_VERSION
    root: Path | None = None  # directory containing the files; not serialized

    def __len__(self):
        return len(self.entries)

    @property
    def has_depth(self):
        return all(e.depth is not None for e in self.entries)

    def to_dict(self):
        return {
            "version": self.version,
            "domain": self.domain,
            "split": self.split,
            "image_size": list(self.image_size),
            "scene_spec": self.scene_spec,
            "shift": self.shift,
            "entries": [
                {"rgb": e.rgb, "depth": e.depth, "seed": e.seed} for e in self.entries
            ],
        }

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "manifest.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
        self.root = directory


def load_manifest(directory) -> DatasetManifest:
    directory = Path(directory)
    path = directory / "manifest.json"
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if raw.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"unsupported manifest version {raw.get('version')} in {path}")
    entries = [ManifestEntry(e["rgb"], e["depth"], e["seed"]) for e in raw["entries"]]
    for e in entries:
        if not (directory / e.rgb).exists():
            raise DatasetError(f"missing file {directory / e.rgb}")
        if e.depth is not None and not (directory / e.depth).exists():
            raise DatasetError(f"missing file {directory / e.depth}")
    return DatasetManifest(
        domain=raw["domain"],
        split=raw["split"],
        image_size=tuple(raw["image_size"]),
        entries=entries,
        scene_spec=raw["scene_spec"],
        shift=raw["shift"],
        root=directory,
    )


def load_sample(manifest: DatasetManifest, idx: int):
    """Return (image, depth_or_None, mask_or_None, domain) for one entry."""
    if not 0 <= idx < len(manifest.entries):
        raise IndexError(f"sample index {idx} out of range [0, {len(manifest.entries)})")
    if manifest.root is None:
        raise DatasetError("manifest has no root directory; load it with load_manifest()")
    entry = manifest.entries[idx]
    img = decode_rgb_png(manifest.root / entry.rgb)
    if img.shape[:2] != tuple(manifest.image_size):
        raise DatasetError(
            f"{entry.rgb}: decoded size {img.shape[:2]} != declared {manifest.image_size}"
        )
    depth = mask = None
    if entry.depth is not None:
        depth, mask = decode_depth_png(manifest.root / entry.depth)
        if depth.shape != tuple(manifest.image_size):
            raise DatasetError(
                f"{entry.depth}: decoded size {depth.shape} != declared {manifest.image_size}"
            )
    return img, depth, mask, manifest.domain


def _write_split(directory, domain, split, spec, shift_cfg, seeds, with_depth, shifted):
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {directory}: {exc}") from exc
    entries = []
    for i, seed in enumerate(seeds):
        rgb, depth = generate_scene(seed, spec)
        if shifted:
            rgb = apply_domain_shift(rgb, shift_cfg.with_sample_seed(seed))
        rgb_name = f"rgb_{i:06d}.png"
        depth_name = f"depth_{i:06d}.png" if with_depth else None
        try:
            encode_rgb_png(rgb, directory / rgb_name)
            if with_depth:
                encode_depth_png(depth, directory / depth_name)
        except OSError as exc:
            raise DatasetError(f"cannot write sample under {directory}: {exc}") from exc
        entries.append(ManifestEntry(rgb_name, depth_name, int(seed)))
    manifest = DatasetManifest(
        domain=domain,
        split=split,
        image_size=spec.image_size,
        entries=entries,
        scene_spec=dataclasses.asdict(spec),
        shift=dataclasses.asdict(shift_cfg) if shifted else None,
    )
    manifest.save(directory)
    return manifest


def build_dataset(n_train, n_eval, spec: SceneSpec, shift_cfg: ShiftConfig, out_dir):
    """Write the three splits and return their manifests.

    Scene seeds are ``spec.seed + offset`` with pairwise-disjoint offset
    ranges, and target scenes are freshly sampled (never the source scenes).
    """
    spec.validate()
    shift_cfg.validate()
    if n_train < 1 or n_eval < 1:
        raise ConfigError("n_train and n_eval must be >= 1")
    out_dir = Path(out_dir)
    base = spec.seed
    src_seeds = [base + i for i in range(n_train)]
    tgt_seeds = [base + n_train + i for i in range(n_train)]
    eval_seeds = [base + 2 * n_train + i for i in range(n_eval)]
    source_train = _write_split(
        out_dir / "source_train", "source", "train", spec, shift_cfg, src_seeds,
        with_depth=True, shifted=False,
    )
    target_train = _write_split(
        out_dir / "target_train", "target", "train", spec, shift_cfg, tgt_seeds,
        with_depth=False, shifted=True,
    )
    target_eval = _write_split(
        out_dir / "target_eval", "target", "eval", spec, shift_cfg, eval_seeds,
        with_depth=True, shifted=True,
    )
    return source_train, target_train, target_eval


def materialize_labeled_split(target_train: DatasetManifest, fraction: float, out_dir):
    """Re-render depth for a fraction of target-train scenes into a labeled split.

    Scenes are seed-derived, so ground truth for a target-train image can be
    regenerated on demand without ever touching the eval split.  Used by the
    semi-supervised variant.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"labeled fraction must be in (0, 1], got {fraction}")
    n = max(1, int(round(fraction * len(target_train.entries))))
    spec = SceneSpec(**target_train.scene_spec)
    if target_train.shift is None:
        raise DatasetError("target-train manifest lacks its shift config")
    shift_cfg = ShiftConfig(**{**target_train.shift, "color_gamma": tuple(target_train.shift["color_gamma"])})
    seeds = [e.seed for e in target_train.entries[:n]]
    return _write_split(
        Path(out_dir), "target", "labeled", spec, shift_cfg, seeds,
        with_depth=True, shifted=True,
    )


class ArrayDataset:
    """In-memory uint8/uint16 cache of one split for fast batched access.

    Tracks ``depth_reads`` so tests can assert that unsupervised training
    never touches depth.  Construction with ``with_depth=True`` fails on
    splits that do not carry depth, which is how the no-leak contract is
    enforced at the interface.
    """

    def __init__(self, manifest: DatasetManifest, with_depth: bool):
        if with_depth and not manifest.has_depth:
            raise DatasetError(
                f"split {manifest.domain}/{manifest.split} carries no depth labels"
            )
        self.manifest = manifest
        h, w = manifest.image_size
        n = len(manifest.entries)
        self.images = np.empty((n, h, w, 3), dtype=np.uint8)
        self.depths_mm = np.empty((n, h, w), dtype=np.uint16) if with_depth else None
        for i, entry in enumerate(manifest.entries):
            img = decode_rgb_png(manifest.root / entry.rgb)
            if img.shape[:2] != (h, w):
                raise DatasetError(f"{entry.rgb}: size {img.shape[:2]} != {(h, w)}")
            self.images[i] = np.round(img * 255.0).astype(np.uint8)
            if with_depth:
                depth, _ = decode_depth_png(manifest.root / entry.depth)
                self.depths_mm[i] = np.round(depth * DEPTH_SCALE).astype(np.uint16)
        self.depth_reads = 0

    def __len__(self):
        return len(self.images)

    def image_batch(self, idxs) -> np.ndarray:
        """(B, 3, H, W) float32 in [0, 1]."""
        batch = self.images[np.asarray(idxs)].astype(np.float32) / 255.0
        return np.ascontiguousarray(batch.transpose(0, 3, 1, 2))

    def depth_batch(self, idxs):
        """(B, H, W) float32 meters and validity mask."""
        if self.depths_mm is None:
            raise DatasetError("this split has no depth labels")
        self.depth_reads += len(np.atleast_1d(idxs))
        mm = self.depths_mm[np.asarray(idxs)]
        return (mm.astype(np.float32) / DEPTH_SCALE), mm > 0
