"""Synthetic desk-scale datasets and point-cloud file ingestion.

Three families: shapes8 (8 parametric surfaces, per-cloud labels),
parts4 (a 4-part composite "lamp", per-point labels), and patches2d
(16x16 grayscale stroke/blob images for toy backbone pretraining).
Every generator is a pure function of its spec: per-sample rngs come
from SeedSequence(seed, spawn_key=(family, index)), so datasets are
bit-identical across runs and train/val splits partition the index
range disjointly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, PointFileError
from .geometry import PointCloud

SHAPES8_NAMES = ("sphere", "cube", "cylinder", "cone", "torus",
                 "plane", "helix", "two_sphere")
PARTS4_NAMES = ("base", "pole", "bulb", "shade")
PATCHES2D_NAMES = ("hstroke", "vstroke", "diag_down", "diag_up",
                   "blob", "ring", "corners", "cross")

_FAMILY_IDS = {"shapes8": 0, "parts4": 1, "patches2d": 2}


@dataclass
class SyntheticTaskSpec:
    family: str
    n_train: int
    n_val: int
    points: int = 256
    noise: float = 0.01
    seed: int = 0
    img_size: int = 16

    def __post_init__(self):
        if self.family not in _FAMILY_IDS:
            raise ConfigError(f"family must be one of {sorted(_FAMILY_IDS)}")
        if self.n_train < 0 or self.n_val < 0 or self.n_train + self.n_val < 1:
            raise ConfigError("need at least one sample across train+val")
        if self.family != "patches2d" and self.points < 32:
            raise ConfigError("points per cloud must be >= 32")
        if self.family == "patches2d" and self.img_size < 8:
            raise ConfigError("img_size must be >= 8")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


def _sample_rng(spec: SyntheticTaskSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(spec.seed, spawn_key=(_FAMILY_IDS[spec.family], index)))


def _unit_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _shape_points(label: int, n: int, rng: np.random.Generator) -> np.ndarray:
    name = SHAPES8_NAMES[label]
    if name == "sphere":
        return 0.5 * _unit_dirs(rng, n)
    if name == "cube":
        face = rng.integers(0, 6, size=n)
        uv = rng.uniform(-0.5, 0.5, size=(n, 2))
        pts = np.empty((n, 3))
        axis, sign = face // 2, np.where(face % 2 == 0, -0.5, 0.5)
        for i in range(n):
            others = [a for a in range(3) if a != axis[i]]
            pts[i, axis[i]] = sign[i]
            pts[i, others[0]], pts[i, others[1]] = uv[i]
        return pts
    if name == "cylinder":
        theta = rng.uniform(0, 2 * np.pi, size=n)
        z = rng.uniform(-0.5, 0.5, size=n)
        return np.stack([0.3 * np.cos(theta), 0.3 * np.sin(theta), z], axis=1)
    if name == "cone":
        u = np.sqrt(rng.uniform(0, 1, size=n))  # area-uniform along the slant
        theta = rng.uniform(0, 2 * np.pi, size=n)
        r = 0.4 * u
        return np.stack([r * np.cos(theta), r * np.sin(theta), 0.5 - u], axis=1)
    if name == "torus":
        big, small = 0.35, 0.15
        pts = np.empty((n, 3))
        filled = 0
        while filled < n:  # rejection keeps the surface density uniform
            u = rng.uniform(0, 2 * np.pi, size=2 * (n - filled))
            v = rng.uniform(0, 2 * np.pi, size=2 * (n - filled))
            keep = rng.uniform(0, 1, size=u.size) < (big + small * np.cos(v)) / (big + small)
            u, v = u[keep], v[keep]
            take = min(n - filled, u.size)
            rad = big + small * np.cos(v[:take])
            pts[filled:filled + take] = np.stack(
                [rad * np.cos(u[:take]), rad * np.sin(u[:take]),
                 small * np.sin(v[:take])], axis=1)
            filled += take
        return pts
    if name == "plane":
        uv = rng.uniform(-0.5, 0.5, size=(n, 2))
        return np.concatenate([uv, np.zeros((n, 1))], axis=1)
    if name == "helix":
        t = rng.uniform(0, 4 * np.pi, size=n)
        return np.stack([0.35 * np.cos(t), 0.35 * np.sin(t),
                         t / (4 * np.pi) - 0.5], axis=1)
    # two_sphere
    side = rng.integers(0, 2, size=n)
    pts = 0.25 * _unit_dirs(rng, n)
    pts[:, 0] += np.where(side == 0, -0.3, 0.3)
    return pts


def gen_shapes8(spec: SyntheticTaskSpec) -> tuple[list[PointCloud], list[PointCloud]]:
    """8-class surface classification set; labels assigned round-robin."""
    clouds = []
    for i in range(spec.n_train + spec.n_val):
        rng = _sample_rng(spec, i)
        label = i % len(SHAPES8_NAMES)
        pts = _shape_points(label, spec.points, rng)
        pts = pts + rng.normal(0.0, spec.noise, size=pts.shape)
        clouds.append(PointCloud(positions=pts, labels=label))
    return clouds[:spec.n_train], clouds[spec.n_train:]


def _lamp_points(n: int, rng: np.random.Generator):
    fractions = (0.3, 0.3, 0.15, 0.25)  # base, pole, bulb, shade
    counts = [int(f * n) for f in fractions]
    counts[0] += n - sum(counts)
    parts = []

    m = counts[0]  # base: flat disc at the bottom
    r = 0.3 * np.sqrt(rng.uniform(0, 1, size=m))
    th = rng.uniform(0, 2 * np.pi, size=m)
    parts.append(np.stack([r * np.cos(th), r * np.sin(th), np.full(m, -0.5)], axis=1))

    m = counts[1]  # pole: thin cylinder
    th = rng.uniform(0, 2 * np.pi, size=m)
    z = rng.uniform(-0.5, 0.2, size=m)
    parts.append(np.stack([0.05 * np.cos(th), 0.05 * np.sin(th), z], axis=1))

    m = counts[2]  # bulb: small sphere
    parts.append(0.12 * _unit_dirs(rng, m) + np.array([0.0, 0.0, 0.3]))

    m = counts[3]  # shade: truncated cone around the bulb
    u = rng.uniform(0, 1, size=m)
    th = rng.uniform(0, 2 * np.pi, size=m)
    rad = 0.3 - 0.2 * u
    parts.append(np.stack([rad * np.cos(th), rad * np.sin(th), 0.25 + 0.3 * u], axis=1))

    pts = np.concatenate(parts, axis=0)
    labels = np.repeat(np.arange(4), counts)
    return pts, labels


def gen_parts4(spec: SyntheticTaskSpec) -> tuple[list[PointCloud], list[PointCloud]]:
    """Composite lamp shapes with per-point part ids 0..3."""
    clouds = []
    for i in range(spec.n_train + spec.n_val):
        rng = _sample_rng(spec, i)
        pts, labels = _lamp_points(spec.points, rng)
        scale = rng.uniform(0.9, 1.1)
        pts = pts * scale + rng.normal(0.0, spec.noise, size=pts.shape)
        clouds.append(PointCloud(positions=pts, labels=labels))
    return clouds[:spec.n_train], clouds[spec.n_train:]


def _patch_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    name = PATCHES2D_NAMES[label]
    band = rng.uniform(0.06, 0.12)

    def stripe(d):
        return np.exp(-(d / band) ** 2)

    if name == "hstroke":
        img = stripe(yy - rng.uniform(0.25, 0.75))
    elif name == "vstroke":
        img = stripe(xx - rng.uniform(0.25, 0.75))
    elif name == "diag_down":
        img = stripe(yy - xx - rng.uniform(-0.2, 0.2))
    elif name == "diag_up":
        img = stripe(yy + xx - 1.0 - rng.uniform(-0.2, 0.2))
    elif name == "blob":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        img = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.15 ** 2)))
    elif name == "ring":
        cy, cx = rng.uniform(0.4, 0.6, size=2)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        img = stripe(d - rng.uniform(0.2, 0.3))
    elif name == "corners":
        img = np.zeros_like(yy)
        for cy, cx in ((0.15, 0.15), (0.85, 0.85)):
            img = np.maximum(img, np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2)
                                           / (2 * 0.1 ** 2))))
    else:  # cross
        img = np.maximum(stripe(yy - 0.5), stripe(xx - 0.5))
    return img


def gen_patches2d(spec: SyntheticTaskSpec):
    """(train_x, train_y, val_x, val_y); images (N, size, size, 1) float32."""
    total = spec.n_train + spec.n_val
    images = np.empty((total, spec.img_size, spec.img_size, 1), dtype=np.float32)
    labels = np.empty(total, dtype=np.int64)
    for i in range(total):
        rng = _sample_rng(spec, i)
        label = i % len(PATCHES2D_NAMES)
        img = _patch_image(label, spec.img_size, rng)
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
        images[i, :, :, 0] = np.clip(img, 0.0, 1.0).astype(np.float32)
        labels[i] = label
    return (images[:spec.n_train], labels[:spec.n_train],
            images[spec.n_train:], labels[spec.n_train:])


# ----------------------------------------------------------------- file I/O

_MAGIC = b"P4PC"


def write_points(cloud: PointCloud, path, fmt: str | None = None) -> None:
    """`xyz`: ASCII rows "x y z [f1 .. fC]". `bin`: P4PC header + f32 rows."""
    path = Path(path)
    fmt = fmt or ("bin" if path.suffix == ".bin" else "xyz")
    feat = cloud.features if cloud.features is not None else np.zeros((cloud.n, 0))
    rows = np.concatenate([cloud.positions, feat], axis=1)
    if fmt == "xyz":
        lines = [" ".join(repr(float(v)) for v in row) for row in rows]
        path.write_text("\n".join(lines) + "\n")
    elif fmt == "bin":
        body = rows.astype("<f4").tobytes()
        header = _MAGIC + struct.pack("<II", cloud.n, feat.shape[1])
        path.write_bytes(header + body)
    else:
        raise ConfigError(f"format must be xyz or bin, got {fmt!r}")


def read_points(path, fmt: str | None = None) -> PointCloud:
    path = Path(path)
    if not path.exists():
        raise PointFileError(f"{path}: no such file")
    fmt = fmt or ("bin" if path.suffix == ".bin" else "xyz")
    if fmt == "xyz":
        return _read_xyz(path)
    if fmt == "bin":
        return _read_bin(path)
    raise ConfigError(f"format must be xyz or bin, got {fmt!r}")


def _read_xyz(path: Path) -> PointCloud:
    rows = []
    width = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        cols = text.split()
        if len(cols) < 3:
            raise PointFileError(f"{path}:{lineno}: need at least 3 columns")
        if width is None:
            width = len(cols)
        elif len(cols) != width:
            raise PointFileError(
                f"{path}:{lineno}: {len(cols)} columns, expected {width}")
        try:
            rows.append([float(c) for c in cols])
        except ValueError as e:
            raise PointFileError(f"{path}:{lineno}: {e}") from e
    if not rows:
        raise PointFileError(f"{path}: no data rows")
    data = np.array(rows, dtype=np.float64)
    feats = data[:, 3:] if data.shape[1] > 3 else None
    return PointCloud(positions=data[:, :3], features=feats)


def _read_bin(path: Path) -> PointCloud:
    raw = path.read_bytes()
    if len(raw) < 12:
        raise PointFileError(f"{path}: short header at offset {len(raw)}")
    if raw[:4] != _MAGIC:
        raise PointFileError(f"{path}: bad magic {raw[:4]!r} at offset 0")
    n, c_in = struct.unpack("<II", raw[4:12])
    if n < 1:
        raise PointFileError(f"{path}: empty cloud in header")
    need = 12 + 4 * n * (3 + c_in)
    if len(raw) < need:
        raise PointFileError(
            f"{path}: short file, {len(raw)} bytes but header needs {need}")
    data = np.frombuffer(raw[12:need], dtype="<f4").reshape(n, 3 + c_in)
    feats = data[:, 3:].copy() if c_in else None
    return PointCloud(positions=data[:, :3].copy(), features=feats)
