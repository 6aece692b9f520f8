"""Volume I/O, CT preprocessing, augmentation and the synthetic tube phantom.

Raw volume files (``.ltv``) are laid out as::

    b"LTV1" | dtype code u8 | rank u8 | extents u32 * rank | spacing f32 * rank | payload

with every field little-endian and the payload in row-major order. A label
volume lives next to its image as ``<stem>.label.ltv``.
"""
from __future__ import annotations

import json
import math
import os
import queue
import struct
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContractError, DataError, DimensionError, FormatError

MAGIC = b"LTV1"
DTYPE_CODES = {0: np.uint8, 1: np.int16, 2: np.int32, 3: np.float32, 4: np.float64}
_CODE_OF = {np.dtype(v): k for k, v in DTYPE_CODES.items()}
HU_RANGE = (-100.0, 250.0)
SIGMA_FLOOR = 1e-6


@dataclass
class VolumeSample:
    image: np.ndarray
    label: np.ndarray | None = None
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.image = np.asarray(self.image)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if self.image.ndim != 3:
            raise DimensionError(f"image must be [D,H,W], got shape {self.image.shape}")
        if self.label is not None:
            self.label = np.asarray(self.label)
            if self.label.shape != self.image.shape:
                raise DimensionError(f"label {self.label.shape} does not match image {self.image.shape}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ContractError(f"spacing must be 3 positive values, got {self.spacing_mm}")


# -- raw format ----------------------------------------------------------------

def write_raw(path, array, spacing):
    array = np.asarray(array)
    code = _CODE_OF.get(array.dtype)
    if code is None:
        raise ContractError(f"dtype {array.dtype} has no raw-format code")
    if len(spacing) != array.ndim:
        raise DimensionError(f"spacing {spacing} does not match rank {array.ndim}")
    header = MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack(f"<{array.ndim}f", *spacing)
    payload = np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header + payload)
    os.replace(tmp, path)


def parse_raw(buf):
    """Decode raw-format bytes into ``(array, spacing)``; raises FormatError on any defect."""
    if len(buf) < 6:
        raise FormatError("file too short for header", len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", 0)
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}", 4)
    if rank == 0:
        raise FormatError("rank must be positive", 5)
    pos = 6
    need = pos + 8 * rank
    if len(buf) < need:
        raise FormatError("truncated header", len(buf))
    extents = struct.unpack_from(f"<{rank}I", buf, pos)
    spacing = struct.unpack_from(f"<{rank}f", buf, pos + 4 * rank)
    pos = need
    if min(extents) == 0:
        raise FormatError(f"zero extent in {extents}", 6)
    dtype = np.dtype(DTYPE_CODES[code]).newbyteorder("<")
    expect = math.prod(extents) * dtype.itemsize
    if len(buf) - pos != expect:
        raise FormatError(f"payload holds {len(buf) - pos} bytes, header implies {expect}",
                          min(len(buf), pos + expect))
    arr = np.frombuffer(buf, dtype=dtype, offset=pos).reshape(extents)
    return arr.astype(dtype.newbyteorder("="), copy=True), tuple(float(s) for s in spacing)


def read_raw(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return parse_raw(buf)


def label_path(path):
    p = Path(path)
    stem = p.name[:-4] if p.name.endswith(".ltv") else p.name
    return p.with_name(stem + ".label.ltv")


def save_volume(sample, path, label_file=None):
    write_raw(path, sample.image, sample.spacing_mm)
    if sample.label is not None:
        write_raw(label_file or label_path(path), sample.label.astype(np.uint8), sample.spacing_mm)


def load_volume(path, label_file=None, require_label=False, sample_id=None):
    image, spacing = read_raw(path)
    lp = Path(label_file) if label_file else label_path(path)
    label = None
    if lp.exists():
        label, lspacing = read_raw(lp)
        if label.shape != image.shape:
            raise FormatError(f"label shape {label.shape} differs from image {image.shape}", 6)
    elif require_label or label_file:
        raise DataError(f"label file {lp} not found")
    return VolumeSample(image, label, spacing, sample_id or Path(path).name.removesuffix(".ltv"))


# -- manifests -------------------------------------------------------------------

def write_manifest(entries, path):
    with open(path, "w") as fh:
        json.dump(list(entries), fh, indent=1)


def read_manifest(path):
    """Entries ``{image, label, id, ...}`` with paths resolved against the manifest's folder."""
    try:
        with open(path) as fh:
            entries = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise DataError(f"manifest {path} must hold a JSON list")
    base = Path(path).parent
    out = []
    for e in entries:
        if "image" not in e or "id" not in e:
            raise DataError(f"manifest entry {e!r} lacks image or id")
        e = dict(e)
        e["image"] = str(base / e["image"])
        if e.get("label"):
            e["label"] = str(base / e["label"])
        out.append(e)
    return out


def load_manifest_samples(path, require_label=False):
    samples = []
    for e in read_manifest(path):
        if require_label and not e.get("label"):
            raise ContractError(f"case {e['id']} has no label")
        samples.append(load_volume(e["image"], e.get("label"), require_label, e["id"]))
    return samples


def split_cases(ids, test_fraction=1 / 8, seed=42):
    """Seeded shuffle-and-split; returns (train_ids, test_ids)."""
    ids = sorted(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_test = max(1, int(round(len(ids) * test_fraction)))
    test = sorted(ids[i] for i in order[:n_test])
    train = sorted(ids[i] for i in order[n_test:])
    return train, test


# -- preprocessing -----------------------------------------------------------------

def clip_hu(image, lo=HU_RANGE[0], hi=HU_RANGE[1]):
    return np.clip(image, lo, hi)


def preprocess(sample, hu_range=HU_RANGE):
    """Clip to the HU window, then z-score by foreground statistics.

    An empty (or absent) foreground falls back to whole-volume statistics.
    """
    x = clip_hu(np.asarray(sample.image, dtype=np.float64), *hu_range)
    fg = x[sample.label > 0] if sample.label is not None else x[:0]
    ref = fg if fg.size else x
    mu = ref.mean()
    sigma = max(float(ref.std()), SIGMA_FLOOR)
    out = ((x - mu) / sigma).astype(np.float32)
    return VolumeSample(out, sample.label, sample.spacing_mm, sample.id)


# -- augmentation ------------------------------------------------------------------

@dataclass
class AugmentConfig:
    max_rotation_deg: float = 15.0
    zoom_range: tuple = (0.9, 1.1)
    max_shift: int = 4  # crop-window jitter in voxels, in-plane
    out_shape: tuple | None = None

    def __post_init__(self):
        self.zoom_range = tuple(float(z) for z in self.zoom_range)
        if self.out_shape is not None:
            self.out_shape = tuple(int(s) for s in self.out_shape)
        if not 0 < self.zoom_range[0] <= self.zoom_range[1]:
            raise ContractError(f"bad zoom range {self.zoom_range}")


def augment_transform(sample_shape, rotation_deg, zoom, shift, out_shape=None):
    """Affine ``(matrix, offset)`` mapping output voxel coordinates to input coordinates.

    Rotation and zoom act in the (H, W) plane about the volume centre.
    """
    out_shape = tuple(out_shape or sample_shape)
    a = math.radians(rotation_deg)
    c, s = math.cos(a), math.sin(a)
    m = np.eye(3)
    m[1:, 1:] = np.array([[c, -s], [s, c]]) / zoom
    c_in = (np.asarray(sample_shape, dtype=np.float64) - 1) / 2
    c_out = (np.asarray(out_shape, dtype=np.float64) - 1) / 2
    offset = c_in + np.array([0.0, shift[0], shift[1]]) - m @ c_out
    return m, offset


def apply_transform(sample, matrix, offset, out_shape=None):
    out_shape = tuple(out_shape or sample.image.shape)
    img = ndimage.affine_transform(np.asarray(sample.image, dtype=np.float32), matrix, offset,
                                   output_shape=out_shape, order=1, mode="nearest")
    lab = None
    if sample.label is not None:
        lab = ndimage.affine_transform(sample.label.astype(np.uint8), matrix, offset,
                                       output_shape=out_shape, order=0, mode="constant", cval=0)
    return VolumeSample(img, lab, sample.spacing_mm, sample.id)


def augment(sample, seed, cfg=None):
    """Random rotation, zoom and crop jitter; identical geometry for image and label."""
    cfg = cfg or AugmentConfig()
    rng = np.random.default_rng(seed)
    rot = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    zoom = rng.uniform(*cfg.zoom_range)
    shift = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2) if cfg.max_shift else (0, 0)
    m, off = augment_transform(sample.image.shape, rot, zoom, shift, cfg.out_shape)
    return apply_transform(sample, m, off, cfg.out_shape)


# -- phantoms ------------------------------------------------------------------------

@dataclass
class PhantomSpec:
    shape: tuple = (16, 64, 64)  # (D, H, W)
    spacing_mm: tuple = (2.0, 1.0, 1.0)
    n_tubes: tuple = (1, 2)  # inclusive range
    radius_mm: tuple = (3.0, 4.5)
    curvature: tuple = (0.1, 0.5)  # control-point bend as a fraction of tube length
    background_hu: float = 40.0
    contrast_hu: float = 60.0
    noise_std: float = 15.0
    texture_std: float = 10.0  # smooth background variation
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.shape) != 3 or min(self.shape) < 4:
            raise ContractError(f"phantom shape must be 3 extents >= 4, got {self.shape}")
        if self.n_tubes[0] < 1 or self.n_tubes[1] < self.n_tubes[0]:
            raise ContractError(f"bad tube-count range {self.n_tubes}")
        if not 0 < self.radius_mm[0] <= self.radius_mm[1]:
            raise ContractError(f"bad radius range {self.radius_mm}")
        if self.noise_std < 0 or self.texture_std < 0:
            raise ContractError("noise levels must be non-negative")

    def to_dict(self):
        return asdict(self)


def _bezier(p0, p1, p2, t):
    t = t[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _tube_mask(spec, rng):
    """Rasterize one curved tube; coordinates are handled in mm so the radius is isotropic."""
    sp = np.asarray(spec.spacing_mm)
    ext_mm = (np.asarray(spec.shape) - 1) * sp
    margin = spec.radius_mm[1] + sp
    lo, hi = margin, np.maximum(ext_mm - margin, margin)
    # endpoints on opposite sides in-plane so the structure is elongated
    p0 = rng.uniform(lo, hi)
    p2 = rng.uniform(lo, hi)
    ax = rng.integers(1, 3)
    p0[ax] = lo[ax] + rng.uniform(0, 0.15) * (hi[ax] - lo[ax])
    p2[ax] = hi[ax] - rng.uniform(0, 0.15) * (hi[ax] - lo[ax])
    length = np.linalg.norm(p2 - p0)
    bend = rng.uniform(*spec.curvature) * length
    normal = rng.normal(size=3)
    normal -= normal.dot(p2 - p0) / length ** 2 * (p2 - p0)
    normal /= np.linalg.norm(normal) + 1e-12
    p1 = np.clip((p0 + p2) / 2 + bend * normal, lo, hi)
    t = np.linspace(0, 1, 160)
    centre = _bezier(p0, p1, p2, t)
    r0, r1 = rng.uniform(*spec.radius_mm, size=2)
    radius = r0 + (r1 - r0) * t

    inside = np.zeros(spec.shape, dtype=bool)
    axes = [np.arange(n) * s for n, s in zip(spec.shape, sp)]
    for c, r in zip(centre, radius):
        # only voxels in the ball's bounding box can be inside
        box = [slice(max(0, int(np.floor((ci - r) / si))), min(n, int(np.ceil((ci + r) / si)) + 1))
               for ci, si, n in zip(c, sp, spec.shape)]
        dz, dy, dx = (a[b] - ci for a, b, ci in zip(axes, box, c))
        d2 = dz[:, None, None] ** 2 + dy[None, :, None] ** 2 + dx[None, None, :] ** 2
        inside[tuple(box)] |= d2 <= r * r
    return inside


def generate_phantom(spec):
    """Low-contrast curved-tube volume with its exact label; deterministic per ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    label = np.zeros(spec.shape, dtype=bool)
    for _ in range(int(rng.integers(spec.n_tubes[0], spec.n_tubes[1] + 1))):
        label |= _tube_mask(spec, rng)
    image = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    if spec.texture_std > 0:
        tex = ndimage.gaussian_filter(rng.normal(size=spec.shape), sigma=(1.0, 6.0, 6.0))
        image += tex / (tex.std() + 1e-12) * spec.texture_std
    image[label] += spec.contrast_hu
    if spec.noise_std > 0:
        image += rng.normal(0.0, spec.noise_std, size=spec.shape)
    return VolumeSample(image.astype(np.float32), label.astype(np.uint8), spec.spacing_mm,
                        f"phantom_{spec.seed:05d}")


def phantom_seeds(n, seed):
    return [int(s) for s in np.random.default_rng(seed).integers(0, 2 ** 31 - 1, size=n)]


def write_phantom_dataset(out_dir, n, seed, base_spec=None):
    """Generate ``n`` phantoms into ``out_dir`` with a ``manifest.json``; returns the manifest path."""
    base = base_spec or PhantomSpec()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(phantom_seeds(n, seed)):
        spec = PhantomSpec(**{**base.to_dict(), "seed": s})
        sample = generate_phantom(spec)
        sample.id = f"case_{i:03d}"
        img = f"{sample.id}.ltv"
        save_volume(sample, out_dir / img)
        entries.append({"image": img, "label": label_path(img).name, "id": sample.id, "seed": s})
    path = out_dir / "manifest.json"
    write_manifest(entries, path)
    return path


# -- loading -------------------------------------------------------------------------

def prefetch(fn, items, depth=2):
    """Yield ``fn(item)`` in order, computed one step ahead on a worker thread."""
    q = queue.Queue(maxsize=max(1, depth))
    done = object()

    def worker():
        try:
            for it in items:
                q.put((True, fn(it)))
        except BaseException as exc:  # surfaced in the consumer thread
            q.put((False, exc))
        q.put((True, done))

    threading.Thread(target=worker, daemon=True).start()
    while True:
        ok, val = q.get()
        if not ok:
            raise val
        if val is done:
            return
        yield val
