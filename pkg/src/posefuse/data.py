"""Pose files, image preprocessing, normalization, splitting and a synthetic benchmark.

Canonical pose file: one record per line, ``image_ref tx ty tz roll pitch yaw``
(whitespace separated, meters and radians).  Lines starting with ``#`` and
blank lines are skipped.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import geometry as geo
from .errors import EmptyDataset, ValidationError

RESIZE_TO = 260
CROP_TO = 250
MIN_SYNTHETIC = 8


class ParseError(ValidationError):
    def __init__(self, path, line_no: int, msg: str):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.line_no = line_no


class UnsupportedImage(ValidationError):
    pass


class TooFewRecords(ValidationError):
    pass


class MissingImage(ValidationError, FileNotFoundError):
    pass


@dataclass(frozen=True)
class PoseRecord:
    image_ref: str
    translation: geo.Translation
    rotation: geo.EulerAngles

    def __post_init__(self):
        object.__setattr__(self, "rotation", self.rotation.canonical())


# ---------------------------------------------------------------- pose files

def parse_pose_lines(lines: Iterable[str], source="<lines>") -> list[PoseRecord]:
    records = []
    for no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ParseError(source, no, f"expected 7 fields, found {len(parts)}")
        try:
            vals = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise ParseError(source, no, str(exc)) from exc
        if not all(math.isfinite(v) for v in vals):
            raise ParseError(source, no, "non-finite value")
        records.append(PoseRecord(parts[0], geo.Translation(*vals[:3]), geo.EulerAngles(*vals[3:])))
    return records


def load_pose_file(path) -> list[PoseRecord]:
    with open(path, encoding="utf-8") as fh:
        return parse_pose_lines(fh, source=path)


def format_pose_file(records: Sequence[PoseRecord]) -> str:
    lines = ["# image_ref tx ty tz roll pitch yaw"]
    for r in records:
        t, e = r.translation, r.rotation
        lines.append(f"{r.image_ref} {t.x1!r} {t.x2!r} {t.x3!r} {e.roll!r} {e.pitch!r} {e.yaw!r}")
    return "\n".join(lines) + "\n"


def write_pose_file(records: Sequence[PoseRecord], path) -> None:
    Path(path).write_text(format_pose_file(records), encoding="utf-8")


# ------------------------------------------------------------ preprocessing

@dataclass(frozen=True)
class ImageStats:
    mean: np.ndarray
    std: np.ndarray


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers and edge clamping; (H, W, C) float."""
    h, w = img.shape[:2]

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    fy, fx = fy[:, None, None], fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def center_crop(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def _to_unit_hwc(raw) -> np.ndarray:
    a = np.asarray(raw)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3) or a.shape[0] < 1 or a.shape[1] < 1:
        raise UnsupportedImage(f"expected (H, W), (H, W, 1) or (H, W, 3), got {a.shape}")
    if np.issubdtype(a.dtype, np.integer):
        a = a.astype(float) / 255.0
    else:
        a = a.astype(float)
    if a.shape[2] == 1:
        a = np.repeat(a, 3, axis=2)
    return a


def resize_and_crop(raw) -> np.ndarray:
    """Resize to 260x260, center-crop 250x250; returns (3, 250, 250) in [0, 1]."""
    a = _to_unit_hwc(raw)
    if a.shape[:2] != (RESIZE_TO, RESIZE_TO):
        a = resize_bilinear(a, RESIZE_TO, RESIZE_TO)
    return np.ascontiguousarray(center_crop(a, CROP_TO).transpose(2, 0, 1))


def compute_image_stats(images: Iterable) -> ImageStats:
    """Per-channel mean and population std of cropped, [0, 1]-scaled training images."""
    # per-image mean and squared deviations, merged pairwise to avoid cancellation
    mean = np.zeros(3)
    m2 = np.zeros(3)
    count = 0
    for raw in images:
        x = resize_and_crop(raw)
        n = x.shape[1] * x.shape[2]
        pivot = x[:, :1, :1]
        shifted = x - pivot
        m = pivot[:, 0, 0] + shifted.mean(axis=(1, 2))
        d2 = ((shifted - shifted.mean(axis=(1, 2))[:, None, None]) ** 2).sum(axis=(1, 2))
        delta = m - mean
        total = count + n
        mean = mean + delta * (n / total)
        m2 = m2 + d2 + delta ** 2 * (count * n / total)
        count = total
    if count == 0:
        raise EmptyDataset("no images for statistics")
    return ImageStats(mean, np.sqrt(m2 / count))


def preprocess_image(raw, stats: ImageStats | None = None) -> np.ndarray:
    """Resize, center-crop, scale to [0, 1] and standardize per channel.

    Channels whose training std is zero are only mean-shifted.
    """
    x = resize_and_crop(raw)
    if stats is None:
        return x
    std = np.where(stats.std > 0, stats.std, 1.0)
    return (x - stats.mean[:, None, None]) / std[:, None, None]


# -------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormalizationStats:
    min: np.ndarray
    max: np.ndarray
    mean: np.ndarray
    std: np.ndarray

    @property
    def degenerate_axes(self) -> tuple[int, ...]:
        return tuple(int(i) for i in np.flatnonzero(self.std <= 0))

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("min", "max", "mean", "std")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(*(np.asarray(d[k], dtype=float) for k in ("min", "max", "mean", "std")))


def compute_normalization(train_records: Sequence[PoseRecord]) -> NormalizationStats:
    if len(train_records) == 0:
        raise EmptyDataset("cannot compute normalization of an empty training split")
    t = np.array([r.translation.as_array() for r in train_records])
    mean = t.mean(axis=0)
    std = np.sqrt(((t - mean) ** 2).mean(axis=0))
    return NormalizationStats(t.min(axis=0), t.max(axis=0), mean, std)


@dataclass(frozen=True)
class NormalizedPose:
    image_ref: str
    t: np.ndarray
    q: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.t, self.q])


def rotation_to_quaternion(e: geo.EulerAngles, convention: str = "zyx",
                           formula: str = "standard") -> np.ndarray:
    if formula == "paper":
        return geo.euler_to_quaternion_paper(e).as_array()
    if formula == "standard":
        return geo.euler_to_quaternion_standard(e, convention).as_array()
    raise ValidationError(f"rotation formula must be 'standard' or 'paper', got {formula!r}")


def _scale(stats: NormalizationStats) -> np.ndarray:
    return np.where(stats.std > 0, stats.std, 1.0)


def normalize_pose(record: PoseRecord, stats: NormalizationStats, convention: str = "zyx",
                   formula: str = "standard") -> NormalizedPose:
    t = (record.translation.as_array() - stats.mean) / _scale(stats)
    return NormalizedPose(record.image_ref, t, rotation_to_quaternion(record.rotation, convention, formula))


def denormalize_translation(t, stats: NormalizationStats) -> np.ndarray:
    return np.asarray(t, dtype=float) * _scale(stats) + stats.mean


def denormalize_pose(pose: NormalizedPose, stats: NormalizationStats,
                     convention: str = "zyx") -> PoseRecord:
    t = denormalize_translation(pose.t, stats)
    e = geo.quaternion_to_euler(pose.q, convention)
    return PoseRecord(pose.image_ref, geo.Translation.from_array(t), e)


def pose_targets(records: Sequence[PoseRecord], stats: NormalizationStats, convention: str = "zyx",
                 formula: str = "standard") -> np.ndarray:
    """(N, 7) regression targets: normalized translation + unit quaternion."""
    return np.array([normalize_pose(r, stats, convention, formula).as_array() for r in records])


def raw_poses(records: Sequence[PoseRecord], convention: str = "zyx") -> np.ndarray:
    """(N, 7) metric poses: translation in meters + standard-convention quaternion."""
    return np.array([np.concatenate([r.translation.as_array(),
                                     rotation_to_quaternion(r.rotation, convention)]) for r in records])


# --------------------------------------------------------------- splitting

@dataclass(frozen=True)
class DatasetSplit:
    train: list
    test: list
    seed: int


def split_dataset(records: Sequence[PoseRecord], seed: int) -> DatasetSplit:
    """Seeded shuffle, then a 3:1 train/test partition."""
    n = len(records)
    if n < 4:
        raise TooFewRecords(f"need at least 4 records to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = min(n - 1, (3 * n + 2) // 4)
    train = [records[i] for i in sorted(order[:n_train])]
    test = [records[i] for i in sorted(order[n_train:])]
    return DatasetSplit(train, test, seed)


# ------------------------------------------------------------ image sources

class ImageSource:
    """Lazily resolves image refs to raw arrays and remembers which refs were read."""

    def __init__(self, loader: Callable[[str], np.ndarray]):
        self._loader = loader
        self.accessed: set[str] = set()

    @classmethod
    def from_directory(cls, root) -> "ImageSource":
        root = Path(root)

        def load(ref):
            from PIL import Image

            p = root / ref
            if not p.exists():
                raise MissingImage(f"image not found: {p}")
            with Image.open(p) as im:
                return np.asarray(im.convert("RGB"))

        return cls(load)

    @classmethod
    def from_mapping(cls, images: dict) -> "ImageSource":
        def load(ref):
            if ref not in images:
                raise MissingImage(f"image not found: {ref}")
            return images[ref]

        return cls(load)

    def __call__(self, ref: str) -> np.ndarray:
        self.accessed.add(ref)
        return self._loader(ref)

    def batches(self, refs: Sequence[str], stats: ImageStats | None, chunk: int = 16):
        for i in range(0, len(refs), chunk):
            yield np.stack([preprocess_image(self(r), stats) for r in refs[i:i + chunk]])


# ----------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticWorld:
    radius: float = 40.0
    height: float = 1.6
    max_step: float = 2.0
    jitter: float = 0.3
    height_noise: float = 0.05
    tilt_noise: float = 0.03
    image_size: int = RESIZE_TO
    n_landmarks: int = 24
    fov_deg: float = 90.0
    pixel_noise: float = 2.0

    def to_dict(self) -> dict:
        return asdict(self)


def _figure_eight(radius: float, theta: np.ndarray):
    x = radius * np.sin(theta)
    z = radius * np.sin(theta) * np.cos(theta)
    dx = radius * np.cos(theta)
    dz = radius * np.cos(2.0 * theta)
    return x, z, dx, dz


def _arc_table(radius: float, samples: int = 20001):
    theta = np.linspace(0.0, 2.0 * np.pi, samples)
    _, _, dx, dz = _figure_eight(radius, theta)
    speed = np.hypot(dx, dz)
    arc = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(theta))])
    return theta, arc


def synthetic_poses(seed: int, n: int, world: SyntheticWorld = SyntheticWorld()) -> list[PoseRecord]:
    """Constant-speed walk along a figure-eight with lateral jitter and small tilt noise."""
    if n < MIN_SYNTHETIC:
        raise TooFewRecords(f"synthetic dataset needs n >= {MIN_SYNTHETIC}, got {n}")
    rng = np.random.default_rng([seed, 1])
    theta_tab, arc_tab = _arc_table(world.radius)
    perimeter = arc_tab[-1]
    step = min(perimeter / n, world.max_step - 2.0 * world.jitter)
    s = np.mod(np.arange(n) * step, perimeter)
    theta = np.interp(s, arc_tab, theta_tab)
    x, z, dx, dz = _figure_eight(world.radius, theta)
    heading = np.arctan2(dz, dx)
    offset = rng.uniform(-world.jitter, world.jitter, size=n)
    # lateral offset along the left normal of the heading
    x = x - np.sin(heading) * offset
    z = z + np.cos(heading) * offset
    y = world.height + rng.normal(0.0, world.height_noise, size=n)
    roll = rng.normal(0.0, world.tilt_noise, size=n)
    pitch = rng.normal(0.0, world.tilt_noise, size=n)
    width = len(str(n - 1))
    return [PoseRecord(f"img{i:0{width}d}.png", geo.Translation(x[i], y[i], z[i]),
                       geo.EulerAngles(roll[i], pitch[i], heading[i])) for i in range(n)]


def _landmarks(seed: int, world: SyntheticWorld):
    rng = np.random.default_rng([seed, 2])
    ang = rng.uniform(-np.pi, np.pi, world.n_landmarks)
    rad = world.radius * rng.uniform(0.6, 1.6, world.n_landmarks)
    pos = np.stack([rad * np.cos(ang), rad * np.sin(ang) * 0.8], axis=1)
    colors = rng.uniform(0.05, 0.95, size=(world.n_landmarks, 3))
    return pos, colors


def render_view(record: PoseRecord, world: SyntheticWorld, landmarks, rng) -> np.ndarray:
    """Procedural camera view as (S, S, 3) uint8."""
    size = world.image_size
    fov = math.radians(world.fov_deg)
    t, e = record.translation, record.rotation
    u = np.arange(size)[None, :] + 0.5
    v = np.arange(size)[:, None] + 0.5
    azimuth = e.yaw - (u - size / 2) / size * fov
    horizon = size / 2 + e.pitch / fov * size + math.tan(e.roll) * (u - size / 2)
    sky = v < horizon
    depth = np.clip((v - horizon) / (size / 2), 0.0, 1.0)

    nx = np.clip((t.x1 + world.radius) / (2 * world.radius), 0.0, 1.0)
    nz = np.clip((t.x3 + world.radius / 2) / world.radius, 0.0, 1.0)
    img = np.empty((size, size, 3))
    img[..., 0] = np.where(sky, 0.55 + 0.3 * np.cos(azimuth), 0.15 + 0.7 * nx)
    img[..., 1] = np.where(sky, 0.65 + 0.1 * np.sin(2 * azimuth), 0.15 + 0.7 * nz)
    img[..., 2] = np.where(sky, 0.55 + 0.3 * np.sin(azimuth), 0.25 + 0.3 * depth + 0.1 * np.cos(azimuth))

    pos, colors = landmarks
    rel = pos - np.array([t.x1, t.x3])
    dist = np.hypot(rel[:, 0], rel[:, 1])
    bearing = geo.wrap_angle(np.arctan2(rel[:, 1], rel[:, 0]) - e.yaw)
    for k in np.argsort(-dist):
        if abs(bearing[k]) > fov / 2 + 0.2 or dist[k] < 0.5:
            continue
        cu = size / 2 - bearing[k] / fov * size
        r = float(np.clip(300.0 / dist[k], 3.0, 60.0))
        cv = size / 2 + e.pitch / fov * size - 0.6 * r
        # the blob is negligible beyond 5 radii, so only that window is blended
        u0, u1 = max(int(cu - 5 * r), 0), min(int(cu + 5 * r) + 1, size)
        v0, v1 = max(int(cv - 5 * r), 0), min(int(cv + 5 * r) + 1, size)
        if u0 >= u1 or v0 >= v1:
            continue
        w = np.exp(-((u[:, u0:u1] - cu) ** 2 + (v[v0:v1] - cv) ** 2) / (2 * r * r))[..., None]
        img[v0:v1, u0:u1] = img[v0:v1, u0:u1] * (1 - w) + colors[k] * w

    img = img * 255.0 + rng.normal(0.0, world.pixel_noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_synthetic(seed: int, n: int, world: SyntheticWorld = SyntheticWorld()):
    """Return ``(records, images)`` with images keyed by ``image_ref``."""
    records = synthetic_poses(seed, n, world)
    landmarks = _landmarks(seed, world)
    rng = np.random.default_rng([seed, 3])
    images = {r.image_ref: render_view(r, world, landmarks, rng) for r in records}
    return records, images


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_synthetic_dataset(root, seed: int, n: int, world: SyntheticWorld = SyntheticWorld()) -> Path:
    """Write ``poses.txt``, ``images/*.png`` and ``manifest.json``; returns the manifest path."""
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records, images = generate_synthetic(seed, n, world)
    write_pose_file([PoseRecord(f"images/{r.image_ref}", r.translation, r.rotation) for r in records],
                    root / "poses.txt")
    image_sums = {}
    for ref, arr in images.items():
        Image.fromarray(arr).save(root / "images" / ref, format="PNG")
        image_sums[ref] = sha256_bytes(arr.tobytes())
    manifest = {
        "seed": seed,
        "n": n,
        "world": world.to_dict(),
        "checksums": {
            "poses.txt": sha256_bytes((root / "poses.txt").read_bytes()),
            "images": sha256_bytes(json.dumps(image_sums, sort_keys=True).encode()),
        },
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


@dataclass
class Dataset:
    records: list[PoseRecord]
    images: ImageSource
    source: str = ""
    extra: dict = field(default_factory=dict)


def load_dataset(root) -> Dataset:
    root = Path(root)
    pose_path = root / "poses.txt"
    if not pose_path.exists():
        raise MissingImage(f"no poses.txt in dataset directory {root}")
    return Dataset(load_pose_file(pose_path), ImageSource.from_directory(root), str(root))


def synthetic_dataset(seed: int, n: int, world: SyntheticWorld = SyntheticWorld()) -> Dataset:
    records, images = generate_synthetic(seed, n, world)
    return Dataset(records, ImageSource.from_mapping(images), f"synthetic:seed={seed},n={n}")

