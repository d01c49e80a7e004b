"""Image manifests: Dresden-style directory ingest, synthetic sensor-noise
camera generator, device filtering and the stratified train/val/test split."""
from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter, OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy.ndimage import correlate, gaussian_filter

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".tif", ".tiff", ".bmp"}
SPLITS = ("train", "val", "test", "unassigned")

_DEVICE_RE = re.compile(r"^(?P<model>.+)_(?P<instance>\d+)$")


class ManifestError(ValueError):
    pass


def parse_device_id(device_id: str) -> Tuple[str, int]:
    """Split ``Model_Name_3`` into ``("Model_Name", 3)``."""
    m = _DEVICE_RE.match(device_id)
    if m is None or not m.group("model"):
        raise ManifestError(f"device id {device_id!r} is not <model>_<instance>")
    return m.group("model"), int(m.group("instance"))


def model_of(device_id: str) -> str:
    return parse_device_id(device_id)[0]


def parse_dresden_name(filename: str) -> Tuple[str, str]:
    """Return ``(device_id, model_id)`` for a Dresden file name.

    The naming convention is ``Model_Instance_Counter.ext``; the model part may
    itself contain underscores (``Agfa_DC-504_0_1.JPG``).
    """
    parts = Path(filename).stem.split("_")
    if len(parts) < 3 or not parts[-1].isdigit() or not parts[-2].isdigit():
        raise ManifestError(f"cannot parse device from {filename!r}")
    model_id = "_".join(parts[:-2])
    if not model_id:
        raise ManifestError(f"cannot parse device from {filename!r}")
    return f"{model_id}_{int(parts[-2])}", model_id


@dataclass
class ImageRecord:
    path: str
    device_id: str
    model_id: str
    width: int
    height: int
    split: str = "unassigned"

    def __post_init__(self):
        if not self.device_id:
            raise ManifestError("empty device_id")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")

    def to_dict(self) -> "OrderedDict[str, object]":
        return OrderedDict(
            [
                ("path", self.path),
                ("device_id", self.device_id),
                ("model_id", self.model_id),
                ("width", self.width),
                ("height", self.height),
                ("split", self.split),
            ]
        )


@dataclass
class Manifest:
    records: List[ImageRecord]
    devices: List[str]
    seed: int = 0

    def __post_init__(self):
        if len(set(self.devices)) != len(self.devices):
            raise ManifestError("duplicate device ids")
        known = set(self.devices)
        for r in self.records:
            if r.device_id not in known:
                raise ManifestError(f"record {r.path} has unlisted device {r.device_id}")

    def __len__(self) -> int:
        return len(self.records)

    def counts(self) -> Counter:
        return Counter(r.device_id for r in self.records)

    def select(self, *splits: str) -> List[ImageRecord]:
        return [r for r in self.records if r.split in splits]

    def device_index(self) -> dict:
        return {d: i for i, d in enumerate(self.devices)}

    def to_json(self) -> str:
        payload = OrderedDict(
            [
                ("seed", self.seed),
                ("devices", list(self.devices)),
                ("records", [r.to_dict() for r in self.records]),
            ]
        )
        return json.dumps(payload, indent=1, ensure_ascii=False) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        raw = json.loads(text)
        records = [ImageRecord(**r) for r in raw["records"]]
        return cls(records=records, devices=list(raw["devices"]), seed=int(raw["seed"]))

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _probe_image(path: Path) -> Optional[Tuple[int, int]]:
    try:
        with Image.open(path) as im:
            size = im.size
            im.draft("RGB", (max(1, im.width // 8), max(1, im.height // 8)))
            im.convert("RGB").load()
    except Exception:  # noqa: BLE001 - any decoder failure means skip
        return None
    return size


def build_manifest(root, seed: int = 0) -> Manifest:
    """Scan ``root`` recursively for Dresden-named images.

    Files whose names do not follow ``Model_Instance_Counter`` or that fail to
    decode are skipped and tallied in the log.
    """
    root = Path(root)
    if not root.is_dir():
        raise ManifestError(f"no such directory: {root}")
    records: List[ImageRecord] = []
    skipped = Counter()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            device_id, model_id = parse_dresden_name(path.name)
        except ManifestError:
            skipped["unparseable name"] += 1
            continue
        size = _probe_image(path)
        if size is None:
            skipped["undecodable"] += 1
            continue
        records.append(ImageRecord(str(path), device_id, model_id, size[0], size[1]))
    for reason, n in skipped.items():
        logger.warning("skipped %d files: %s", n, reason)
    if not records:
        raise ManifestError(f"no images found under {root}")
    devices = sorted({r.device_id for r in records})
    return Manifest(records=records, devices=devices, seed=seed)


def filter_min_images(m: Manifest, min_count: int = 2) -> Manifest:
    """Drop devices with fewer than ``min_count`` images."""
    if min_count < 2:
        raise ValueError("min_count must be >= 2")
    counts = m.counts()
    keep = [d for d in m.devices if counts[d] >= min_count]
    dropped = [d for d in m.devices if counts[d] < min_count]
    if dropped:
        logger.info("dropping devices with < %d images: %s", min_count, ", ".join(dropped))
    if len(keep) < 2:
        raise ManifestError("insufficient devices")
    kept = set(keep)
    return Manifest(
        records=[r for r in m.records if r.device_id in kept], devices=keep, seed=m.seed
    )


def stratified_split(
    m: Manifest, train_frac: float = 0.7, seed: int = 0, val_frac: float = 0.15
) -> Manifest:
    """Per-device random split.

    ``ceil(train_frac * n)`` images of each device go to the train+val pool,
    the rest to test. Inside the pool ``round(val_frac * pool)`` images (at
    least one when the pool has two or more) become validation.
    """
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie in (0, 1)")
    if not 0.0 <= val_frac < 1.0:
        raise ValueError("val_frac must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    by_device = {d: [] for d in m.devices}
    for r in m.records:
        by_device[r.device_id].append(r)
    out: List[ImageRecord] = []
    for d in m.devices:
        recs = sorted(by_device[d], key=lambda r: r.path)
        n = len(recs)
        n_pool = math.ceil(round(train_frac * n, 9))
        if n_pool < 1 or n - n_pool < 1:
            raise ManifestError(
                f"device {d} has {n} images; cannot give both sides of a "
                f"{train_frac:.2f} split at least one"
            )
        n_val = 0
        if val_frac > 0 and n_pool >= 2:
            n_val = min(n_pool - 1, max(1, int(round(val_frac * n_pool))))
        order = rng.permutation(n)
        for rank, idx in enumerate(order):
            r = recs[idx]
            split = "val" if rank < n_val else "train" if rank < n_pool else "test"
            out.append(
                ImageRecord(r.path, r.device_id, r.model_id, r.width, r.height, split)
            )
    out.sort(key=lambda r: (m.devices.index(r.device_id), r.path))
    return Manifest(records=out, devices=list(m.devices), seed=seed)


# --------------------------------------------------------------------------
# synthetic cameras


@dataclass
class SynthConfig:
    n_devices: int = 8
    images_per_device: int = 40
    image_size: Tuple[int, int] = (64, 64)
    prnu_strength: float = 0.04
    fpn_strength: float = 3.0
    shot_noise_scale: float = 0.01
    scene_pool: int = 16
    scene_contrast: float = 1.0
    seed: int = 0
    instances_per_model: int = 2

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        if min(self.prnu_strength, self.fpn_strength, self.shot_noise_scale) < 0:
            raise ValueError("noise strengths must be non-negative")
        if self.n_devices < 2:
            raise ValueError("n_devices must be >= 2")
        if self.images_per_device < 2:
            raise ValueError("images_per_device must be >= 2")
        if self.scene_pool < 1:
            raise ValueError("scene_pool must be >= 1")
        if self.instances_per_model < 1:
            raise ValueError("instances_per_model must be >= 1")


def textured_field(rng: np.random.Generator, shape, kernel: np.ndarray, gains: np.ndarray) -> np.ndarray:
    """Zero-mean Gaussian field: white noise correlated by ``kernel`` (per
    channel, unit L2 norm so the variance stays 1) and scaled per channel."""
    white = rng.standard_normal(shape)
    out = np.empty(shape)
    for c in range(shape[-1]):
        out[..., c] = correlate(white[..., c], kernel[c], mode="wrap")
    return out * gains


def device_texture(rng: np.random.Generator, channels: int = 3, size: int = 3):
    kernel = rng.standard_normal((channels, size, size))
    kernel /= np.sqrt((kernel ** 2).sum(axis=(1, 2), keepdims=True))
    gains = rng.uniform(0.5, 1.5, size=channels)
    return kernel, gains


@dataclass
class SyntheticCamera:
    """One simulated sensor with fixed PNU gain and FPN offset fields.

    Each device's fields carry their own spatial correlation and per-channel
    gains, so devices differ in noise texture as well as in pixel positions.
    ``capture`` applies ``scene * (1 + prnu) + fpn + shot`` on the 0..255
    intensity scale; shot noise is relative to the scene intensity.
    """

    device_id: str
    prnu: np.ndarray
    fpn: np.ndarray
    shot_noise_scale: float

    @classmethod
    def create(cls, device_id, shape, prnu_strength, fpn_strength, shot_noise_scale, seed,
               texture=None):
        rng = np.random.default_rng(seed)
        kernel, gains = texture if texture is not None else device_texture(rng, shape[-1])
        prnu = prnu_strength * textured_field(rng, shape, kernel, gains)
        fpn = fpn_strength * textured_field(rng, shape, kernel[:, ::-1], gains[::-1])
        return cls(device_id, prnu, fpn, shot_noise_scale)

    def expose(self, scene: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Unclipped float exposure of ``scene`` (0..255 scale)."""
        out = scene * (1.0 + self.prnu) + self.fpn
        if self.shot_noise_scale > 0:
            if rng is None:
                raise ValueError("rng required when shot noise is enabled")
            out = out + self.shot_noise_scale * scene * rng.standard_normal(scene.shape)
        return out

    def capture(self, scene: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return np.clip(np.rint(self.expose(scene, rng)), 0, 255).astype(np.uint8)


def make_scenes(n: int, shape: Tuple[int, int, int], seed, contrast: float = 1.0) -> np.ndarray:
    """Smooth random RGB scenes on the 0..255 scale, kept away from clipping.

    ``contrast`` scales the spatial variation around mid-grey.
    """
    rng = np.random.default_rng(seed)
    h, w, _ = shape
    scenes = np.empty((n,) + tuple(shape))
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    for k in range(n):
        blobs = gaussian_filter(rng.standard_normal(shape), sigma=(max(h, w) / 8, max(h, w) / 8, 0))
        blobs /= blobs.std() + 1e-12
        ramp = rng.uniform(-1, 1) * xx + rng.uniform(-1, 1) * yy
        tint = rng.uniform(-0.3, 0.3, size=3)
        base = 0.5 + contrast * (0.12 * blobs + 0.15 * ramp[..., None] + 0.1 * tint)
        scenes[k] = 255.0 * np.clip(base, 0.15, 0.85)
    return scenes


def synthetic_device_ids(n_devices: int, instances_per_model: int = 2) -> List[str]:
    return [
        f"SynthCam{d // instances_per_model:02d}_{d % instances_per_model}"
        for d in range(n_devices)
    ]


def build_cameras(cfg: SynthConfig) -> List[SyntheticCamera]:
    h, w = cfg.image_size
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_devices + 1)[1:]
    return [
        SyntheticCamera.create(
            dev, (h, w, 3), cfg.prnu_strength, cfg.fpn_strength, cfg.shot_noise_scale,
            seeds[i],
        )
        for i, dev in enumerate(synthetic_device_ids(cfg.n_devices, cfg.instances_per_model))
    ]


def generate_synthetic(cfg: SynthConfig, out_dir) -> Manifest:
    """Render ``cfg.n_devices * cfg.images_per_device`` PNG images into ``out_dir``.

    Scenes come from a pool shared by all devices, so only the sensor noise
    tells devices apart. Files are named ``<device>_<counter>.png``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ManifestError(f"cannot create output directory {out_dir}: {exc}") from exc
    h, w = cfg.image_size
    scene_seq, *_ = np.random.SeedSequence(cfg.seed).spawn(1)
    scenes = make_scenes(cfg.scene_pool, (h, w, 3), scene_seq, cfg.scene_contrast)
    cameras = build_cameras(cfg)
    shot_seqs = np.random.SeedSequence([cfg.seed, 1]).spawn(cfg.n_devices)
    records = []
    for cam, seq in zip(cameras, shot_seqs):
        rng = np.random.default_rng(seq)
        model_id = model_of(cam.device_id)
        for k in range(cfg.images_per_device):
            scene = scenes[rng.integers(cfg.scene_pool)]
            img = cam.capture(scene, rng)
            path = out_dir / f"{cam.device_id}_{k + 1:05d}.png"
            try:
                Image.fromarray(img, "RGB").save(path, format="PNG")
            except OSError as exc:
                raise ManifestError(f"cannot write {path}: {exc}") from exc
            records.append(ImageRecord(str(path), cam.device_id, model_id, w, h))
    return Manifest(records=records, devices=[c.device_id for c in cameras], seed=cfg.seed)


def load_image(path, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Decode ``path`` to an ``(H, W, 3)`` uint8 array, resized to ``size=(H, W)``."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and (im.height, im.width) != tuple(size):
                im = im.resize((size[1], size[0]), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot decode image {path}: {exc}") from exc


def load_images(records: Iterable[ImageRecord], size: Tuple[int, int]) -> np.ndarray:
    arrays = [load_image(r.path, size) for r in records]
    if not arrays:
        return np.zeros((0, size[0], size[1], 3), dtype=np.uint8)
    return np.stack(arrays)
