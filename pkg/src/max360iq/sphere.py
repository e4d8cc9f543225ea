"""Equirectangular geometry: ERP images, gnomonic viewports, scanpath sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi


class GeometryError(Exception):
    pass


class ViewingCondition(Enum):
    GOOD_5S = "Good5s"
    BAD_5S = "Bad5s"
    GOOD_15S = "Good15s"
    BAD_15S = "Bad15s"


@dataclass(frozen=True)
class SphereCoord:
    """Longitude in [-pi, pi), latitude in [-pi/2, pi/2]; lon wraps at construction."""

    lon: float
    lat: float

    def __post_init__(self):
        lon = math.remainder(self.lon, TWO_PI)
        if lon >= math.pi:
            lon -= TWO_PI
        if lon < -math.pi:
            lon += TWO_PI
        object.__setattr__(self, "lon", lon)
        if not (-HALF_PI <= self.lat <= HALF_PI):
            raise GeometryError(f"latitude {self.lat} outside [-pi/2, pi/2]")

    def unit_vector(self) -> np.ndarray:
        cl = math.cos(self.lat)
        return np.array([cl * math.sin(self.lon), math.sin(self.lat),
                         cl * math.cos(self.lon)])


class ErpImage:
    """H x W x 3 panorama with values in [0, 1]; width = 2*height is typical."""

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise GeometryError(f"ERP image must be HxWx3, got {pixels.shape}")
        h, w, _ = pixels.shape
        if w < 2 or h < 1:
            raise GeometryError(f"ERP image too small: {w}x{h}")
        if not np.all(np.isfinite(pixels)):
            raise GeometryError("ERP image contains non-finite values")
        if pixels.min() < 0.0 or pixels.max() > 1.0:
            raise GeometryError("ERP image values must lie in [0, 1]")
        self.pixels = pixels

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def load(cls, path: str | Path) -> "ErpImage":
        path = Path(path)
        if path.suffix.lower() == ".ppm":
            return cls(_read_ppm(path))
        arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
        return cls(arr)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        arr = np.clip(np.round(self.pixels * 255.0), 0, 255).astype(np.uint8)
        if path.suffix.lower() == ".ppm":
            _write_ppm(path, arr)
        else:
            Image.fromarray(arr).save(path)


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise GeometryError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise GeometryError(f"{path}: only maxval 255 PPMs supported")
    pos += 1  # single whitespace after maxval
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def _write_ppm(path: Path, arr: np.ndarray) -> None:
    h, w, _ = arr.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.tobytes())


@dataclass(frozen=True)
class ViewportSpec:
    center: SphereCoord
    fov: float = HALF_PI
    out_size: int = 32

    def __post_init__(self):
        if not (0.0 < self.fov < math.pi):
            raise GeometryError(f"fov {self.fov} outside (0, pi)")
        if self.out_size < 2:
            raise GeometryError(f"out_size {self.out_size} < 2")


@dataclass
class Scanpath:
    coords: list[SphereCoord]
    condition: ViewingCondition

    def __post_init__(self):
        if len(self.coords) < 1:
            raise GeometryError("scanpath must have at least one coordinate")


@dataclass
class ViewportSequence:
    """K viewports (each 3 x S x S float array) in scanpath time order."""

    viewports: list[np.ndarray]
    specs: list[ViewportSpec]
    condition: ViewingCondition | None
    image_id: str = ""
    label: float | None = None

    def __post_init__(self):
        if len(self.viewports) < 1:
            raise GeometryError("viewport sequence must be non-empty")
        sizes = {vp.shape for vp in self.viewports}
        if len(sizes) != 1:
            raise GeometryError(f"inconsistent viewport shapes: {sizes}")

    @property
    def k(self) -> int:
        return len(self.viewports)


def sphere_to_erp(c: SphereCoord, w: int, h: int) -> tuple[float, float]:
    """Continuous ERP pixel coordinates; u wraps mod w, v clamps to [0, h)."""
    u = (c.lon + math.pi) / TWO_PI * w % w
    v = min(max((HALF_PI - c.lat) / math.pi * h, 0.0), np.nextafter(float(h), 0.0))
    return u, v


def bilinear_sample(pixels: np.ndarray, u, v) -> np.ndarray:
    """Sample at continuous (u, v); pixel centers at integer+0.5. Wraps in u,
    clamps in v."""
    h, w, _ = pixels.shape
    uf = np.asarray(u, dtype=np.float64) - 0.5
    vf = np.asarray(v, dtype=np.float64) - 0.5
    u0 = np.floor(uf).astype(np.int64)
    v0 = np.floor(vf).astype(np.int64)
    du = (uf - u0)[..., None]
    dv = (vf - v0)[..., None]
    u0w = u0 % w
    u1w = (u0 + 1) % w
    v0c = np.clip(v0, 0, h - 1)
    v1c = np.clip(v0 + 1, 0, h - 1)
    top = pixels[v0c, u0w] * (1.0 - du) + pixels[v0c, u1w] * du
    bot = pixels[v1c, u0w] * (1.0 - du) + pixels[v1c, u1w] * du
    return top * (1.0 - dv) + bot * dv


def gnomonic_project(img: ErpImage, spec: ViewportSpec) -> np.ndarray:
    """Render a perspective viewport (3 x S x S) by inverse gnomonic mapping.

    Y-up camera; tangent-plane extents span the fov, so for odd S the middle
    pixel rides the exact center ray.
    """
    s = spec.out_size
    half = math.tan(spec.fov / 2.0)
    coords = (2.0 * np.arange(s) / (s - 1) - 1.0) * half
    xx, yy = np.meshgrid(coords, -coords)  # row 0 is the top of the view
    zz = np.ones_like(xx)
    norm = np.sqrt(xx * xx + yy * yy + 1.0)
    d = np.stack([xx / norm, yy / norm, zz / norm], axis=-1)

    lat0, lon0 = spec.center.lat, spec.center.lon
    rx = np.array([[1, 0, 0],
                   [0, math.cos(lat0), math.sin(lat0)],
                   [0, -math.sin(lat0), math.cos(lat0)]])
    ry = np.array([[math.cos(lon0), 0, math.sin(lon0)],
                   [0, 1, 0],
                   [-math.sin(lon0), 0, math.cos(lon0)]])
    d = d @ (ry @ rx).T

    lon = np.arctan2(d[..., 0], d[..., 2])
    lat = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))
    w, h = img.width, img.height
    u = (lon + math.pi) / TWO_PI * w % w
    v = np.minimum((HALF_PI - lat) / math.pi * h, np.nextafter(float(h), 0.0))
    out = bilinear_sample(img.pixels, u, v)
    return out.transpose(2, 0, 1)


def sample_scanpath(sp: Scanpath, k: int) -> list[SphereCoord]:
    """Uniformly pick K coordinates from the path; round-half-up index rule."""
    if k < 1:
        raise GeometryError(f"K must be >= 1, got {k}")
    t = len(sp.coords)
    if k == 1:
        return [sp.coords[0]]
    if k >= t:
        return list(sp.coords) + [sp.coords[-1]] * (k - t)
    idx = [math.floor(i * (t - 1) / (k - 1) + 0.5) for i in range(k)]
    return [sp.coords[i] for i in idx]


def equator_viewports(k: int, fov: float = HALF_PI, out_size: int = 32) -> list[ViewportSpec]:
    """K equidistant equator centers starting at lon = -pi."""
    if k < 1:
        raise GeometryError(f"K must be >= 1, got {k}")
    return [ViewportSpec(SphereCoord(-math.pi + TWO_PI * i / k, 0.0), fov, out_size)
            for i in range(k)]


def extract_sequences(img: ErpImage, scanpaths: list[Scanpath] | None,
                      k: int = 7, fov: float = HALF_PI, out_size: int = 32,
                      image_id: str = "") -> list[ViewportSequence]:
    """One sequence per scanpath, or a single equator sequence when
    ``scanpaths`` is None (uniform mode)."""
    if scanpaths is None:
        specs = equator_viewports(k, fov, out_size)
        vps = [gnomonic_project(img, sp) for sp in specs]
        return [ViewportSequence(vps, specs, None, image_id)]
    sequences = []
    for sp in scanpaths:
        centers = sample_scanpath(sp, k)
        specs = [ViewportSpec(c, fov, out_size) for c in centers]
        vps = [gnomonic_project(img, s) for s in specs]
        sequences.append(ViewportSequence(vps, specs, sp.condition, image_id))
    return sequences


def save_sequence(seq: ViewportSequence, out_dir: str | Path, stem: str) -> list[Path]:
    """Write viewports as PNGs plus a JSON sidecar with centers and condition."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, vp in enumerate(seq.viewports):
        arr = np.clip(np.round(vp.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        p = out_dir / f"{stem}_vp{i:02d}.png"
        Image.fromarray(arr).save(p)
        paths.append(p)
    sidecar = {
        "image_id": seq.image_id,
        "condition": seq.condition.value if seq.condition else None,
        "k": seq.k,
        "centers": [[s.center.lon, s.center.lat] for s in seq.specs],
        "fov": seq.specs[0].fov,
        "out_size": seq.specs[0].out_size,
        "viewports": [p.name for p in paths],
    }
    side = out_dir / f"{stem}.json"
    tmp = side.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(sidecar, indent=2))
    tmp.replace(side)
    return paths
