"""Ground-truth phantoms, procedural pretraining textures, paired-dataset
storage and the two training augmentations."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.path import Path as PolyPath
from scipy import ndimage

from .errors import ConfigError, DataError

FORMAT_VERSION = 1
MIN_SIZE = 16


@dataclass(frozen=True)
class Ellipse:
    cx: float  # centre, fraction of canvas in [-0.5, 0.5]
    cy: float
    ax: float  # semi-axes, fraction of canvas
    ay: float
    angle: float  # radians
    intensity: float  # additive


@dataclass
class PhantomSpec:
    size: int
    ellipses: list
    background: float = 0.0
    oversample: int = 1
    # amplitude of smooth low-contrast texture added inside the support
    texture_amplitude: float = 0.0

    def validate(self):
        if self.size < 1:
            raise ConfigError("phantom canvas must be positive")
        if not self.ellipses:
            raise ConfigError("phantom needs at least one ellipse")
        if self.oversample < 1:
            raise ConfigError("oversample must be >= 1")


def random_phantom_spec(size, rng, n_ellipses=8, texture_amplitude=0.03, oversample=2):
    """A body ellipse with random inner structures, all inside the scan circle."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    body_a = rng.uniform(0.30, 0.40)
    body_b = rng.uniform(0.25, 0.36)
    ellipses = [Ellipse(0.0, 0.0, body_a, body_b, rng.uniform(-0.3, 0.3), rng.uniform(0.2, 0.4))]
    for _ in range(n_ellipses - 1):
        r = rng.uniform(0, 0.6)
        phi = rng.uniform(0, 2 * np.pi)
        ellipses.append(Ellipse(
            cx=r * body_a * np.cos(phi),
            cy=r * body_b * np.sin(phi),
            ax=rng.uniform(0.02, 0.12),
            ay=rng.uniform(0.02, 0.12),
            angle=rng.uniform(0, np.pi),
            intensity=rng.choice([-1, 1]) * rng.uniform(0.1, 0.5),
        ))
    return PhantomSpec(size=size, ellipses=ellipses, oversample=oversample,
                       texture_amplitude=texture_amplitude)


def generate_phantom(spec: PhantomSpec, rng_seed=0) -> np.ndarray:
    """Render superposed ellipses, clipped to [0, 1].

    ``rng_seed`` only drives the optional smooth texture, so a spec with
    ``texture_amplitude == 0`` renders identically for every seed.
    """
    spec.validate()
    m = spec.size * spec.oversample
    c = (np.arange(m) + 0.5) / m - 0.5
    y, x = np.meshgrid(c, c, indexing="ij")
    img = np.full((m, m), float(spec.background))
    support = np.zeros((m, m), dtype=bool)
    for e in spec.ellipses:
        cos, sin = np.cos(e.angle), np.sin(e.angle)
        dx, dy = x - e.cx, y - e.cy
        u = (dx * cos + dy * sin) / e.ax
        v = (-dx * sin + dy * cos) / e.ay
        inside = u * u + v * v <= 1.0
        img[inside] += e.intensity
        support |= inside
    img = img.reshape(spec.size, spec.oversample, spec.size, spec.oversample).mean(axis=(1, 3))
    if spec.texture_amplitude > 0:
        rng = np.random.default_rng(rng_seed)
        field_ = ndimage.gaussian_filter(rng.standard_normal((spec.size, spec.size)), spec.size / 16)
        field_ /= np.abs(field_).max() or 1.0
        mask = support.reshape(spec.size, spec.oversample, spec.size, spec.oversample).mean(axis=(1, 3))
        img += spec.texture_amplitude * field_ * mask
    return np.clip(img, 0.0, 1.0)


TEXTURE_COMPONENTS = ("smooth", "polygons", "gradient", "edges")


@dataclass
class TextureSpec:
    size: int
    seed: int
    weights: dict = field(default_factory=lambda: {"smooth": 1.0, "polygons": 1.0,
                                                   "gradient": 0.5, "edges": 0.5})

    def validate(self):
        if self.size < 1:
            raise ConfigError("texture canvas must be positive")
        unknown = set(self.weights) - set(TEXTURE_COMPONENTS)
        if unknown:
            raise ConfigError(f"unknown texture components {sorted(unknown)}")
        if any(w < 0 for w in self.weights.values()):
            raise ConfigError("texture weights must be non-negative")
        if sum(self.weights.values()) <= 0:
            raise ConfigError("at least one texture weight must be positive")


def _normalize(a):
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def _smooth_field(n, rng):
    sigma = rng.uniform(n / 32, n / 6)
    return _normalize(ndimage.gaussian_filter(rng.standard_normal((n, n)), sigma, mode="wrap"))


def _polygons(n, rng):
    img = np.full((n, n), rng.uniform())
    yy, xx = np.mgrid[0:n, 0:n]
    pts = np.column_stack([xx.ravel() + 0.5, yy.ravel() + 0.5])
    for _ in range(rng.integers(2, 7)):
        k = rng.integers(3, 8)
        centre = rng.uniform(0, n, size=2)
        radius = rng.uniform(n / 10, n / 2.5)
        ang = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        rad = radius * rng.uniform(0.5, 1.0, size=k)
        verts = centre + np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
        inside = PolyPath(verts).contains_points(pts).reshape(n, n)
        img[inside] = rng.uniform()
    return img


def _gradient(n, rng):
    phi = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    return _normalize(xx * np.cos(phi) + yy * np.sin(phi))


def _edges(n, rng):
    img = np.zeros((n, n))
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    for _ in range(rng.integers(1, 4)):
        phi = rng.uniform(0, 2 * np.pi)
        offset = rng.uniform(-n / 3, n / 3)
        side = (xx - n / 2) * np.cos(phi) + (yy - n / 2) * np.sin(phi) > offset
        img += side * rng.uniform(0.2, 1.0)
    return _normalize(img)


_GENERATORS = {"smooth": _smooth_field, "polygons": _polygons,
               "gradient": _gradient, "edges": _edges}


def generate_texture(spec: TextureSpec) -> np.ndarray:
    """Convex mix of normalised components, so values stay in [0, 1]."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    total = sum(spec.weights.values())
    img = np.zeros((spec.size, spec.size))
    # fixed draw order keeps the stream identical regardless of which weights are zero
    for name in TEXTURE_COMPONENTS:
        w = spec.weights.get(name, 0.0)
        sub = np.random.default_rng(rng.integers(2**63))
        if w > 0:
            img += (w / total) * _GENERATORS[name](spec.size, sub)
    return np.clip(img, 0.0, 1.0)


def augment_rotate(pair, k):
    a, b = (np.asarray(im) for im in pair)
    if a.shape != b.shape:
        raise DataError(f"pair shapes differ: {a.shape} vs {b.shape}")
    if k not in (0, 1, 2, 3):
        raise ConfigError("rotation index must be in {0, 1, 2, 3}")
    if k % 2 and a.shape[-1] != a.shape[-2]:
        raise DataError("odd quarter-turns need square images")
    return np.rot90(a, k, axes=(-2, -1)).copy(), np.rot90(b, k, axes=(-2, -1)).copy()


def augment_noise(image, sigma, rng_seed):
    if sigma < 0:
        raise ConfigError("noise sigma must be non-negative")
    image = np.asarray(image)
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(rng_seed)
    return image + rng.normal(0.0, sigma, size=image.shape)


def check_image(image, name="image"):
    image = np.asarray(image)
    if image.ndim != 2 or min(image.shape) < MIN_SIZE:
        raise DataError(f"{name} must be 2-D and at least {MIN_SIZE}x{MIN_SIZE}, got {image.shape}")
    if not np.all(np.isfinite(image)):
        raise DataError(f"{name} contains non-finite values")
    return image


@dataclass
class DatasetManifest:
    root: Path
    height: int
    width: int
    entries: list  # dicts with id, gt, input, crc32 (and optionally sinogram)
    value_range: tuple = (0.0, 1.0)
    version: int = FORMAT_VERSION

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return [e["id"] for e in self.entries]

    def to_json(self):
        return {"version": self.version, "height": self.height, "width": self.width,
                "range": list(self.value_range), "entries": self.entries}

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise DataError(f"manifest not found: {path}")
        meta = json.loads(path.read_text())
        if meta.get("version") != FORMAT_VERSION:
            raise DataError(f"unsupported dataset version {meta.get('version')}")
        ids = [e["id"] for e in meta["entries"]]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate ids in manifest")
        return cls(root=path.parent, height=meta["height"], width=meta["width"],
                   entries=meta["entries"], value_range=tuple(meta["range"]))


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_dataset(pairs, directory, ids=None, value_range=(0.0, 1.0), sinogram_files=None):
    """Write (ground truth, input) pairs as raw little-endian f32 files plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = list(pairs)
    if ids is None:
        ids = [f"{i:05d}" for i in range(len(pairs))]
    if len(set(ids)) != len(ids):
        raise DataError("dataset ids must be unique")
    shape = None
    entries = []
    for k, (pid, (gt, inp)) in enumerate(zip(ids, pairs)):
        gt, inp = check_image(gt, "ground truth"), check_image(inp, "input")
        if gt.shape != inp.shape or (shape is not None and gt.shape != shape):
            raise DataError("all images in a dataset must share one shape")
        shape = gt.shape
        gt_b, in_b = _f32(gt), _f32(inp)
        (directory / f"{pid}_gt.f32").write_bytes(gt_b)
        (directory / f"{pid}_in.f32").write_bytes(in_b)
        entry = {"id": pid, "gt": f"{pid}_gt.f32", "input": f"{pid}_in.f32",
                 "crc32": zlib.crc32(in_b, zlib.crc32(gt_b))}
        if sinogram_files is not None:
            entry["sinogram"] = sinogram_files[k]
        entries.append(entry)
    h, w = shape if shape else (0, 0)
    manifest = DatasetManifest(directory, h, w, entries, tuple(value_range))
    (directory / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2))
    return manifest


def _read_raw(path, manifest):
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    data = path.read_bytes()
    if len(data) != 4 * manifest.height * manifest.width:
        raise DataError(f"{path}: size does not match declared dims {manifest.height}x{manifest.width}")
    return data


def read_entry(manifest: DatasetManifest, entry):
    gt_b = _read_raw(manifest.root / entry["gt"], manifest)
    in_b = _read_raw(manifest.root / entry["input"], manifest)
    if zlib.crc32(in_b, zlib.crc32(gt_b)) != entry["crc32"]:
        raise DataError(f"checksum mismatch for entry {entry['id']}")
    shape = (manifest.height, manifest.width)
    gt = np.frombuffer(gt_b, dtype="<f4").reshape(shape).astype(np.float32)
    inp = np.frombuffer(in_b, dtype="<f4").reshape(shape).astype(np.float32)
    return gt, inp


def read_dataset(manifest):
    """Yield (ground truth, input) float32 pairs in manifest order."""
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    for entry in manifest.entries:
        yield read_entry(manifest, entry)


def load_arrays(manifest):
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    pairs = list(read_dataset(manifest))
    if not pairs:
        return np.zeros((0, manifest.height, manifest.width), np.float32), np.zeros(
            (0, manifest.height, manifest.width), np.float32)
    gts, inputs = zip(*pairs)
    return np.stack(gts), np.stack(inputs)


def ingest_images(paths, directory, size=None):
    """Build a texture manifest from user-supplied grayscale images (gt == input)."""
    from PIL import Image

    pairs = []
    for p in paths:
        im = Image.open(p).convert("L")
        if size is not None:
            im = im.resize((size, size), Image.BICUBIC)
        a = np.asarray(im, dtype=np.float64) / 255.0
        pairs.append((a, a))
    return write_dataset(pairs, directory, ids=[Path(p).stem for p in paths])
