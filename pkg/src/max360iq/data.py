"""Dataset ingestion, scene-grouped splitting, and the synthetic micro-dataset
generator (smooth procedural panoramas with blur/noise distortions)."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .sphere import (ErpImage, Scanpath, SphereCoord, ViewingCondition, TWO_PI)

MANIFEST_COLUMNS = ["image_id", "scene_id", "erp_path", "mos",
                    "distortion_tag", "scanpath_path"]


class ManifestError(Exception):
    pass


@dataclass
class ManifestEntry:
    image_id: str
    scene_id: str
    erp_path: Path
    mos: float
    distortion_tag: str
    scanpaths: dict[ViewingCondition, Scanpath] = field(default_factory=dict)
    condition_mos: dict[ViewingCondition, float] = field(default_factory=dict)


def load_manifest(path: str | Path) -> tuple[dict, list[ManifestEntry]]:
    """Parse a manifest: JSON header line, CSV column line, then entries.

    Scanpath sidecars referenced by the entries are loaded eagerly.
    Returns (header dict, entries)."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise ManifestError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}:1: bad JSON header: {e}") from e
    if "mos_scale" not in header:
        raise ManifestError(f"{path}:1: header missing mos_scale")
    body = "\n".join(lines[1:])
    reader = csv.DictReader(io.StringIO(body))
    if reader.fieldnames != MANIFEST_COLUMNS:
        raise ManifestError(f"{path}:2: expected columns {MANIFEST_COLUMNS}, "
                            f"got {reader.fieldnames}")
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    base = path.parent
    for lineno, row in enumerate(reader, start=3):
        try:
            if any(row[c] is None for c in MANIFEST_COLUMNS):
                raise ValueError("missing fields")
            image_id = row["image_id"]
            mos = float(row["mos"])
        except (ValueError, KeyError) as e:
            raise ManifestError(f"{path}:{lineno}: malformed entry: {e}") from e
        if not math.isfinite(mos):
            raise ManifestError(f"{path}:{lineno}: non-finite mos")
        if image_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        erp_path = base / row["erp_path"]
        if not erp_path.exists():
            raise ManifestError(f"{path}:{lineno}: missing image {erp_path}")
        entry = ManifestEntry(image_id, row["scene_id"], erp_path, mos,
                              row["distortion_tag"])
        if row["scanpath_path"]:
            sp_path = base / row["scanpath_path"]
            if not sp_path.exists():
                raise ManifestError(f"{path}:{lineno}: missing scanpaths {sp_path}")
            sidecar = json.loads(sp_path.read_text())
            for cond_name, rec in sidecar["conditions"].items():
                cond = ViewingCondition(cond_name)
                if cond in entry.scanpaths:
                    raise ManifestError(
                        f"{sp_path}: duplicate condition {cond_name}")
                coords = [SphereCoord(lon, lat) for lon, lat in rec["coords"]]
                entry.scanpaths[cond] = Scanpath(coords, cond)
                entry.condition_mos[cond] = float(rec["mos"])
        entries.append(entry)
    return header, entries


def split_train_test(entries: list[ManifestEntry], ratio: float = 0.8,
                     seed: int = 0) -> tuple[list[ManifestEntry], list[ManifestEntry]]:
    """Deterministic scene-grouped split; no scene straddles the boundary."""
    scenes = sorted({e.scene_id for e in entries})
    if len(scenes) < 2:
        raise ManifestError(f"need at least 2 scenes to split, got {len(scenes)}")
    rng = np.random.default_rng(seed)
    order = list(rng.permutation(len(scenes)))
    n_train = min(max(int(round(ratio * len(scenes))), 1), len(scenes) - 1)
    train_scenes = {scenes[i] for i in order[:n_train]}
    train = [e for e in entries if e.scene_id in train_scenes]
    test = [e for e in entries if e.scene_id not in train_scenes]
    return train, test


# ---------------------------------------------------------------------------
# synthetic generation

DISTORTIONS = ("gaussian_blur", "gaussian_noise")
MOS_SCALE = (1.0, 5.0)
BAND_WIDTH = math.pi / 2.0
SCANPATH_LEN = 300


@dataclass
class SynthSpec:
    n_scenes: int = 10
    erp_width: int = 128
    erp_height: int = 64
    levels: int = 3
    mode: str = "uniform"  # or "nonuniform"
    recency_lambda: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.levels < 0:
            raise ValueError("levels must be >= 0")
        if self.erp_width % 2 or self.erp_height % 2:
            raise ValueError("ERP dimensions must be even")
        if self.mode not in ("uniform", "nonuniform"):
            raise ValueError(f"unknown mode {self.mode!r}")


def _base_scene(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Smooth seeded random field with fine texture, wrap-continuous in lon."""
    lon = np.linspace(0.0, TWO_PI, w, endpoint=False)
    lat = np.linspace(0.0, math.pi, h)
    LON, LAT = np.meshgrid(lon, lat)
    img = np.zeros((h, w, 3))
    for c in range(3):
        fld = np.zeros((h, w))
        for _ in range(5):  # broad structure
            fl = rng.integers(1, 5)
            fp = rng.integers(0, 4)
            fld += rng.uniform(0.4, 1.0) * np.cos(fl * LON + fp * LAT
                                                  + rng.uniform(0, TWO_PI))
        for _ in range(6):  # fine texture the blur can erase
            fl = rng.integers(10, 28)
            fp = rng.integers(4, 14)
            fld += rng.uniform(0.15, 0.4) * np.cos(fl * LON + fp * LAT
                                                   + rng.uniform(0, TWO_PI))
        img[:, :, c] = 0.5 + 0.42 * np.tanh(fld)
    return np.clip(img, 0.0, 1.0)


def _distort(img: np.ndarray, kind: str, level: int,
             rng: np.random.Generator) -> np.ndarray:
    if level == 0:
        return img
    if kind == "gaussian_blur":
        sigma = 1.0 * level
        out = gaussian_filter(img, sigma=(sigma, sigma, 0.0),
                              mode=("nearest", "wrap", "nearest"))
    elif kind == "gaussian_noise":
        out = img + rng.normal(0.0, 0.07 * level, size=img.shape)
    else:
        raise ValueError(f"unknown distortion {kind!r}")
    return np.clip(out, 0.0, 1.0)


def _level_mos(level: int) -> float:
    # severity_norm = 1: level 0 -> 5, levels 1..3 -> 11/3, 7/3, 1
    return MOS_SCALE[1] - level * (4.0 / 3.0)


def _band_mask(w: int, band_center: float, feather: float = 0.06) -> np.ndarray:
    """Smooth 0..1 membership of each ERP column in the distorted lon band."""
    lon = np.linspace(-math.pi, math.pi, w, endpoint=False) + math.pi / w
    d = np.abs(np.angle(np.exp(1j * (lon - band_center))))
    half = BAND_WIDTH / 2.0
    return np.clip((half + feather - d) / (2.0 * feather), 0.0, 1.0)


def _in_band(lon: float, band_center: float) -> bool:
    d = abs(math.remainder(lon - band_center, TWO_PI))
    return d <= BAND_WIDTH / 2.0


def _condition_paths(band_center: float,
                     rng: np.random.Generator) -> dict[ViewingCondition, np.ndarray]:
    """Scanpath longitudes per condition. Good starts opposite the band, Bad
    inside it; 15s paths sweep twice the range, crossing between the clean and
    distorted hemispheres so viewing order carries label information."""
    t = np.linspace(0.0, 1.0, SCANPATH_LEN)
    short, long = math.pi / 2.0, math.pi
    sign = 1.0 if rng.random() < 0.5 else -1.0
    return {
        ViewingCondition.GOOD_5S: band_center + math.pi + sign * short * t,
        ViewingCondition.BAD_5S: band_center + sign * short * t,
        ViewingCondition.GOOD_15S: band_center + math.pi + sign * long * t,
        ViewingCondition.BAD_15S: band_center + sign * long * t,
    }


def _recency_label(lons: np.ndarray, lats: np.ndarray, band_center: float,
                   level: int, lam: float) -> float:
    q = np.array([_level_mos(level) if _in_band(l, band_center) else MOS_SCALE[1]
                  for l in lons])
    t = np.arange(len(lons)) / (len(lons) - 1)
    w = np.exp(lam * t)
    return float((w * q).sum() / w.sum())


def generate_synthetic(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write images (PPM), scanpath sidecars, and the manifest. Returns the
    manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    if spec.mode == "nonuniform":
        (out_dir / "scanpaths").mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(spec.seed)
    scene_seeds = root.spawn(spec.n_scenes)
    conditions = ([c.value for c in ViewingCondition]
                  if spec.mode == "nonuniform" else [])
    header = {"schema": 1, "mos_scale": list(MOS_SCALE), "conditions": conditions,
              "mode": spec.mode}
    rows = []
    levels = range(1, spec.levels + 1) if spec.levels > 0 else [0]
    for si in range(spec.n_scenes):
        rng = np.random.default_rng(scene_seeds[si])
        scene_id = f"scene{si:03d}"
        base = _base_scene(rng, spec.erp_width, spec.erp_height)
        band_center = float(rng.uniform(-math.pi, math.pi))
        lon_paths = _condition_paths(band_center, rng)
        lat_phase = rng.uniform(0.0, TWO_PI, size=4)
        for kind in DISTORTIONS:
            for level in levels:
                image_id = f"{scene_id}_{kind}_l{level}"
                if spec.mode == "uniform":
                    pixels = _distort(base, kind, level, rng)
                    mos = _level_mos(level)
                    sp_rel = ""
                else:
                    dist = _distort(base, kind, level, rng)
                    mask = _band_mask(spec.erp_width, band_center)[None, :, None]
                    pixels = base * (1.0 - mask) + dist * mask
                    sidecar = {"conditions": {}}
                    labels = []
                    for ci, (cond, lons) in enumerate(lon_paths.items()):
                        lats = 0.15 * np.sin(
                            2.0 * TWO_PI * np.arange(SCANPATH_LEN) / SCANPATH_LEN
                            + lat_phase[ci])
                        label = _recency_label(lons, lats, band_center, level,
                                               spec.recency_lambda)
                        labels.append(label)
                        coords = [[float(np.angle(np.exp(1j * lo))), float(la)]
                                  for lo, la in zip(lons, lats)]
                        sidecar["conditions"][cond.value] = {
                            "mos": label, "coords": coords}
                    sp_rel = f"scanpaths/{image_id}.json"
                    sp_path = out_dir / sp_rel
                    tmp = sp_path.with_suffix(".tmp")
                    tmp.write_text(json.dumps(sidecar))
                    tmp.replace(sp_path)
                    mos = float(np.mean(labels))
                img_rel = f"images/{image_id}.ppm"
                ErpImage(pixels).save(out_dir / img_rel)
                rows.append([image_id, scene_id, img_rel, repr(mos),
                             f"{kind}_l{level}", sp_rel])
                if spec.levels == 0:
                    break  # pristine-only: one image per scene per kind
    manifest = out_dir / "manifest.csv"
    tmp = manifest.with_suffix(".csv.tmp")
    with tmp.open("w", newline="") as f:
        f.write(json.dumps(header) + "\n")
        writer = csv.writer(f)
        writer.writerow(MANIFEST_COLUMNS)
        writer.writerows(rows)
    tmp.replace(manifest)
    return manifest
