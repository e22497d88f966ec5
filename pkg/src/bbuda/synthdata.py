"""Synthetic four-channel lesion images with a controllable domain shift.

Each lesion is three concentric, randomly rotated ellipses: the outer one is
edema (label 1), the middle one enhancing tumour (2) and the inner one the
core (3). Channels loosely play the roles of T1, T1ce, T2 and FLAIR.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

NUM_CLASSES = 4
NUM_CHANNELS = 4
BACKGROUND, EDEMA, ENHANCING, CORE = range(4)

RECORD_MAGIC = b"BBUD"
RECORD_VERSION = 1
UNLABELED = 255

# rows: background, edema, enhancing, core; columns: T1, T1ce, T2, FLAIR
SOURCE_INTENSITY = (
    (0.30, 0.30, 0.30, 0.30),
    (0.30, 0.32, 0.62, 0.70),
    (0.28, 0.78, 0.58, 0.62),
    (0.14, 0.42, 0.78, 0.52),
)


class DatasetError(Exception):
    pass


class DatasetVersionError(DatasetError):
    pass


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class DomainSpec:
    lesion_count: Tuple[int, int] = (1, 1)
    radius: Tuple[float, float] = (8.0, 14.0)
    center_offset: Tuple[float, float] = (0.0, 0.0)   # fraction of (H, W) from the image centre
    center_spread: float = 0.08                         # std of centre jitter, fraction of size
    intensity: Tuple[Tuple[float, ...], ...] = SOURCE_INTENSITY
    intensity_std: float = 0.02                         # per-lesion jitter of every class mean
    noise: float = 0.04                                 # per-pixel white noise std
    texture: float = 0.04                               # smooth background texture amplitude
    enhancing_frac: float = 0.65
    core_frac: float = 0.35
    smooth: float = 0.5
    halo_width: float = 0.0                             # unlabelled hyperintense rim outside the edema, pixels
    halo_level: float = 0.5                             # its intensity as a fraction of the edema contrast
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.lesion_count
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid lesion_count range {self.lesion_count}")
        if self.radius[0] < 1 or self.radius[1] < self.radius[0]:
            raise GeometryError(f"invalid radius range {self.radius}")
        arr = np.asarray(self.intensity, dtype=float)
        if arr.shape != (NUM_CLASSES, NUM_CHANNELS):
            raise ValueError(f"intensity must be {NUM_CLASSES}x{NUM_CHANNELS}, got {arr.shape}")
        if not 0 < self.core_frac < self.enhancing_frac < 1:
            raise ValueError("need 0 < core_frac < enhancing_frac < 1")
        if self.halo_width < 0 or not 0 <= self.halo_level <= 1:
            raise ValueError("need halo_width >= 0 and 0 <= halo_level <= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["intensity"] = [list(row) for row in self.intensity]
        d["lesion_count"] = list(self.lesion_count)
        d["radius"] = list(self.radius)
        d["center_offset"] = list(self.center_offset)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        for key in ("lesion_count", "radius", "center_offset"):
            if key in d:
                d[key] = tuple(d[key])
        if "intensity" in d:
            d["intensity"] = tuple(tuple(float(v) for v in row) for row in d["intensity"])
        return cls(**d)

    def replace(self, **changes) -> "DomainSpec":
        d = self.to_dict()
        d.update(changes)
        return DomainSpec.from_dict(d)

    def contrast(self) -> np.ndarray:
        """Per-class, per-channel mean offset from background."""
        arr = np.asarray(self.intensity, dtype=float)
        return arr[1:] - arr[0]


# Source: large, central, strongly enhancing lesions.
SOURCE_SPEC = DomainSpec(seed=1)

# Target: two or three small lesions scattered off-centre, somewhat weaker
# contrast, a noisier acquisition, and a faint hyperintense rim around each
# lesion that the annotations leave out (perilesional signal). A source-trained
# model partly includes that rim, so it over-segments.
TARGET_SPEC = DomainSpec(
    lesion_count=(2, 3),
    radius=(3.0, 6.0),
    center_offset=(0.0, 0.0),
    center_spread=0.22,
    intensity=(
        (0.30, 0.30, 0.30, 0.30),
        (0.30, 0.317, 0.572, 0.64),
        (0.283, 0.708, 0.538, 0.572),
        (0.164, 0.402, 0.708, 0.487),
    ),
    noise=0.06,
    texture=0.05,
    halo_width=1.5,
    halo_level=0.4,
    seed=2,
)

DEFAULT_SPECS = {"source": SOURCE_SPEC, "target": TARGET_SPEC}


@dataclass
class SegSample:
    image: np.ndarray                 # (4, H, W) float32 in [0, 1]
    label: Optional[np.ndarray]       # (H, W) uint8 or None
    id: str

    def unlabeled(self) -> "SegSample":
        return SegSample(self.image, None, self.id)


def _check_geometry(spec: DomainSpec, h: int, w: int) -> None:
    if spec.radius[1] > min(h, w) / 2:
        raise GeometryError(f"radius {spec.radius[1]} exceeds half the image size {min(h, w) / 2}")


def _render_lesion(label: np.ndarray, halo: np.ndarray, rng: np.random.Generator, spec: DomainSpec) -> None:
    h, w = label.shape
    r = rng.uniform(*spec.radius)
    aspect = rng.uniform(0.8, 1.25)
    theta = rng.uniform(0, np.pi)
    ra, rb = r * np.sqrt(aspect), r / np.sqrt(aspect)
    # keep the whole lesion inside the frame
    margin = max(ra, rb)
    cy = h / 2 + spec.center_offset[0] * h + rng.normal() * spec.center_spread * h
    cx = w / 2 + spec.center_offset[1] * w + rng.normal() * spec.center_spread * w
    cy = float(np.clip(cy, margin, h - 1 - margin))
    cx = float(np.clip(cx, margin, w - 1 - margin))

    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    rho = np.sqrt((u / ra) ** 2 + (v / rb) ** 2)
    for cls, scale in ((EDEMA, 1.0), (ENHANCING, spec.enhancing_frac), (CORE, spec.core_frac)):
        inside = rho <= scale
        if not inside.any() and cls == CORE:
            # tiny lesions still get a one-pixel core
            inside = np.zeros_like(inside)
            inside[int(round(cy)), int(round(cx))] = True
        np.maximum(label, np.where(inside, cls, 0).astype(label.dtype), out=label)
    if spec.halo_width > 0:
        np.maximum(halo, (rho <= 1 + spec.halo_width / r).astype(float), out=halo)


def generate_sample(spec: DomainSpec, index: int, h: int = 32, w: int = 32) -> SegSample:
    _check_geometry(spec, h, w)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    label = np.zeros((h, w), dtype=np.uint8)
    halo = np.zeros((h, w))
    n_lesions = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(n_lesions):
        _render_lesion(label, halo, rng, spec)

    means = np.asarray(spec.intensity, dtype=float)
    means = means + np.vstack([np.zeros((1, NUM_CHANNELS)),
                               rng.normal(0, spec.intensity_std, (NUM_CLASSES - 1, NUM_CHANNELS))])
    image = np.empty((NUM_CHANNELS, h, w), dtype=float)
    onehot = np.stack([(label == c).astype(float) for c in range(NUM_CLASSES)])
    # the rim is background in the label map but brighter in the image
    rim = np.where(label == BACKGROUND, halo, 0.0)
    if spec.smooth > 0:
        onehot = np.stack([gaussian_filter(m, spec.smooth, mode="nearest") for m in onehot])
        rim = gaussian_filter(rim, spec.smooth, mode="nearest")
    texture = gaussian_filter(rng.normal(size=(h, w)), 3.0, mode="wrap")
    texture *= spec.texture / (texture.std() + 1e-12)
    for ch in range(NUM_CHANNELS):
        image[ch] = np.tensordot(means[:, ch], onehot, axes=1)
        image[ch] += spec.halo_level * (means[EDEMA, ch] - means[BACKGROUND, ch]) * rim
    image += texture[None]
    image += rng.normal(0, spec.noise, image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SegSample(image=image, label=label, id=f"{spec.seed}-{index:05d}")


def generate_domain(spec: DomainSpec, n_samples: int, h: int = 32, w: int = 32, start: int = 0) -> List[SegSample]:
    """Deterministic list of samples; sample ``i`` depends only on (spec, i)."""
    _check_geometry(spec, h, w)
    return [generate_sample(spec, start + i, h, w) for i in range(n_samples)]


def make_splits(spec: DomainSpec, n_train: int = 200, n_test: int = 50, h: int = 32, w: int = 32):
    """Disjoint train/test lists (test indices follow the train indices)."""
    return (generate_domain(spec, n_train, h, w),
            generate_domain(spec, n_test, h, w, start=n_train))


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def encode_sample(sample: SegSample) -> bytes:
    c, h, w = sample.image.shape
    body = bytearray(RECORD_MAGIC)
    body += struct.pack("<HHHH", RECORD_VERSION, c, h, w)
    body += np.ascontiguousarray(sample.image, dtype="<f4").tobytes()
    if sample.label is None:
        body += bytes([UNLABELED]) * (h * w)
    else:
        body += np.ascontiguousarray(sample.label, dtype=np.uint8).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    return bytes(body)


def decode_sample(data: bytes, sample_id: str) -> SegSample:
    if len(data) < 16 or data[:4] != RECORD_MAGIC:
        raise DatasetError(f"{sample_id}: not a sample record")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != RECORD_VERSION:
        raise DatasetVersionError(f"{sample_id}: record version {version}, reader supports {RECORD_VERSION}")
    body, trailer = data[:-4], data[-4:]
    if zlib.crc32(body) != struct.unpack("<I", trailer)[0]:
        raise DatasetError(f"{sample_id}: checksum mismatch")
    c, h, w = struct.unpack_from("<HHH", data, 6)
    off = 12
    n_img = c * h * w * 4
    if len(body) != off + n_img + h * w:
        raise DatasetError(f"{sample_id}: record length does not match header")
    image = np.frombuffer(body, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w).astype(np.float32)
    label = np.frombuffer(body, dtype=np.uint8, count=h * w, offset=off + n_img).reshape(h, w).copy()
    if np.all(label == UNLABELED):
        label = None
    return SegSample(image, label, sample_id)


def save_dataset(samples: Sequence[SegSample], path, spec: Optional[DomainSpec] = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for s in samples:
        (root / f"{s.id}.bbud").write_bytes(encode_sample(s))
    manifest = {
        "version": RECORD_VERSION,
        "count": len(samples),
        "ids": [s.id for s in samples],
        "spec": spec.to_dict() if spec is not None else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_manifest(path) -> dict:
    try:
        return json.loads((Path(path) / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetError(f"{path}: no manifest.json") from None


def load_dataset(path) -> List[SegSample]:
    root = Path(path)
    manifest = load_manifest(root)
    if manifest.get("version") != RECORD_VERSION:
        raise DatasetVersionError(f"{path}: manifest version {manifest.get('version')}, reader supports {RECORD_VERSION}")
    if manifest["count"] != len(manifest["ids"]):
        raise DatasetError(f"{path}: manifest count disagrees with id list")
    out = []
    for sid in manifest["ids"]:
        f = root / f"{sid}.bbud"
        if not f.exists():
            raise DatasetError(f"{path}: missing record {sid}")
        out.append(decode_sample(f.read_bytes(), sid))
    return out


def dataset_digest(path) -> str:
    """Content hash over the manifest and every record, in manifest order."""
    root = Path(path)
    h = hashlib.sha1()
    h.update((root / "manifest.json").read_bytes())
    for sid in load_manifest(root)["ids"]:
        h.update((root / f"{sid}.bbud").read_bytes())
    return h.hexdigest()


def stack(samples: Sequence[SegSample]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    if any(s.label is None for s in samples):
        return images, None
    return images, np.stack([s.label for s in samples]).astype(np.int64)
