"""Procedural paired (image, voxel) dataset of parametric desk-scale shape families.

Four families with continuous parameters, rasterized analytically into
occupancy grids (a voxel is solid iff its center lies in the solid) and
rendered as orthographic depth-shaded silhouettes against a blank background.
Family parameter ranges are chosen so the thinnest feature half-width is
0.10 (wider than one voxel at R=16) and typical exposed surface area stays
in the low units², keeping point-sampled surface metrics informative.

Every family carries a continuous center offset (cx, cy, cz) in addition to
its size parameters, with margins keeping the solid inside the frame. The
offsets matter beyond variety: size parameters alone alias heavily under
rasterization (a radius range spanning two voxels yields only a handful of
distinct grids), which would seed the dataset with exact duplicate shapes
and make image->shape retrieval ill-posed. Sub-voxel center shifts move the
lattice through the solid, so distinct draws rasterize to distinct grids,
and build_dataset additionally redraws any shape whose grid exactly repeats
an earlier one (or rasterizes empty).

Dataset layout on disk: voxels.cvx (all grids), images/<id>.pgm, and a
manifest of tab-separated lines

    id <TAB> family <TAB> image_path <TAB> voxel_index <TAB> azimuth <TAB> elevation

The train/test split is not stored: row i is a test row iff
crc32("idx:i") % 10 == 0, so any reader derives the same 90/10 split.
Re-rendering a manifest row's grid with its camera parameters reproduces
the stored PGM byte-for-byte.
"""

from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import voxelgeom as vg
from .errors import ConfigError, DataError, ShapeError
from .gradcore import rng

Array = np.ndarray

FAMILIES = ("box", "table", "cruciform", "sphere")
AZIMUTH_BINS = 8
ELEVATION_DEG = 30.0

# Continuous parameter ranges per family (world coordinates in [-1, 1]).
# Sizes are half-extents; cx/cy/cz are center offsets. Offsets span one voxel
# pitch at R=16: enough that sub-voxel lattice shifts rasterize distinct draws
# to distinct grids (see module docstring), small enough that position stays
# a nuisance variable rather than a third semantic factor for the encoders.
_OFF = (-0.125, 0.125)
RANGES = {
    "box": {"hx": (0.25, 0.50), "hy": (0.25, 0.50), "hz": (0.25, 0.50),
            "cx": _OFF, "cy": _OFF, "cz": _OFF},
    "sphere": {"r": (0.30, 0.55), "cx": _OFF, "cy": _OFF, "cz": _OFF},
    "table": {"span": (0.32, 0.50), "top": (0.10, 0.14),
              "leg": (0.10, 0.14), "height": (0.38, 0.60),
              "cx": _OFF, "cy": _OFF, "cz": _OFF},
    "cruciform": {"lx": (0.35, 0.60), "ly": (0.35, 0.60), "lz": (0.35, 0.60),
                  "w": (0.10, 0.15), "cx": _OFF, "cy": _OFF, "cz": _OFF},
}
OFFSET_KEYS = ("cx", "cy", "cz")


@dataclass
class ShapeSpec:
    family: str
    params: dict
    seed: int = 0


@dataclass
class RenderedImage:
    pixels: Array  # (R_img, R_img) float32 in [0, 1], background exactly 0
    azimuth: float
    elevation: float


def sample_spec(family: str, r: np.random.Generator, seed: int = 0) -> ShapeSpec:
    """Draw one spec with parameters uniform over the family's ranges."""
    if family not in RANGES:
        raise ConfigError(f"unknown family {family!r}, expected one of {FAMILIES}")
    params = {k: float(lo + (hi - lo) * r.random()) for k, (lo, hi) in RANGES[family].items()}
    return ShapeSpec(family, params, seed)


def _solid_mask(spec: ShapeSpec, x: Array, y: Array, z: Array) -> Array:
    p = spec.params
    # center offsets default to 0 so hand-built size-only specs stay valid
    x = x - p.get("cx", 0.0)
    y = y - p.get("cy", 0.0)
    z = z - p.get("cz", 0.0)
    if spec.family == "box":
        return (np.abs(x) <= p["hx"]) & (np.abs(y) <= p["hy"]) & (np.abs(z) <= p["hz"])
    if spec.family == "sphere":
        return x * x + y * y + z * z <= p["r"] ** 2
    if spec.family == "table":
        s, t, w, hh = p["span"], p["top"], p["leg"], p["height"]
        top = (np.abs(x) <= s) & (np.abs(y) <= s) & (z <= hh) & (z >= hh - 2 * t)
        c = s - w  # leg centers, outer faces flush with the top edge
        legx = np.minimum(np.abs(x - c), np.abs(x + c)) <= w
        legy = np.minimum(np.abs(y - c), np.abs(y + c)) <= w
        legs = legx & legy & (z >= -hh) & (z < hh - 2 * t)
        return top | legs
    if spec.family == "cruciform":
        w = p["w"]
        barx = (np.abs(x) <= p["lx"]) & (np.abs(y) <= w) & (np.abs(z) <= w)
        bary = (np.abs(y) <= p["ly"]) & (np.abs(x) <= w) & (np.abs(z) <= w)
        barz = (np.abs(z) <= p["lz"]) & (np.abs(x) <= w) & (np.abs(y) <= w)
        return barx | bary | barz
    raise ConfigError(f"unknown family {spec.family!r}")


def generate_shape(spec: ShapeSpec, R: int) -> vg.VoxelGrid:
    """Rasterize a spec into R^3 occupancy (voxel center in solid)."""
    for k, v in spec.params.items():
        if k in OFFSET_KEYS:
            if not (-1.0 < v < 1.0):
                raise ConfigError(f"{spec.family} offset {k}={v} outside (-1, 1)")
        elif not (0.0 < v <= 1.0):
            raise ConfigError(f"{spec.family} parameter {k}={v} outside (0, 1]")
    c = vg.voxel_centers(R)
    x = c[:, None, None]
    y = c[None, :, None]
    z = c[None, None, :]
    occ = _solid_mask(spec, x, y, z)
    if not occ.any():
        raise DataError(f"{spec.family} spec {spec.params} rasterizes to an empty grid at R={R}")
    return vg.VoxelGrid(occ)


# --------------------------------------------------------------------------
# rendering

def _camera_basis(azimuth: float, elevation: float):
    az = np.deg2rad(azimuth)
    el = np.deg2rad(elevation)
    d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    right = np.cross([0.0, 0.0, 1.0], d)
    nr = np.linalg.norm(right)
    if nr < 1e-9:  # looking straight down/up; pick a fixed in-plane basis
        right = np.array([0.0, 1.0, 0.0])
    else:
        right = right / nr
    up = np.cross(d, right)
    return d, right, up


def render_silhouette(grid, azimuth: float, elevation: float, R_img: int = 32) -> RenderedImage:
    """Orthographic depth-shaded silhouette of a voxel grid.

    The image plane spans [-1, 1]² (half-width exactly 1, so an axis-aligned
    full grid fills the frame). Each pixel marches a ray along the view axis;
    the nearest occupied voxel's normalized depth t in [0, 1) maps to pixel
    value 1 - 0.6 t (in (0.4, 1]); rays that hit nothing give exactly 0.
    """
    occ = grid.occ if isinstance(grid, vg.VoxelGrid) else np.asarray(grid, dtype=bool)
    R = occ.shape[0]
    S = int(R_img)
    d, right, up = _camera_basis(azimuth, elevation)

    u = (-1.0 + (np.arange(S) + 0.5) * (2.0 / S))          # columns, left to right
    v = (1.0 - (np.arange(S) + 0.5) * (2.0 / S))           # rows, top to bottom
    n = 6 * R                                              # step = 2*sqrt(3)/n < voxel size
    tmax = np.sqrt(3.0)
    s = tmax - (np.arange(n) + 0.5) * (2.0 * tmax / n)     # near (camera side) to far

    # p[i, j, k] = v_i * up + u_j * right + s_k * d
    p = (v[:, None, None, None] * up + u[None, :, None, None] * right
         + s[None, None, :, None] * d)
    idx = np.floor((p + 1.0) * (R / 2.0)).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < R), axis=-1)
    idxc = np.clip(idx, 0, R - 1)
    hit = inside & occ[idxc[..., 0], idxc[..., 1], idxc[..., 2]]

    first = np.argmax(hit, axis=-1)
    any_hit = hit.any(axis=-1)
    t_norm = (first + 0.5) / n
    pixels = np.where(any_hit, 1.0 - 0.6 * t_norm, 0.0).astype(np.float32)
    return RenderedImage(pixels, float(azimuth), float(elevation))


# --------------------------------------------------------------------------
# PGM (binary, maxval 255)

def save_pgm(path, image) -> None:
    px = image.pixels if isinstance(image, RenderedImage) else np.asarray(image)
    if px.ndim != 2:
        raise ShapeError(f"PGM image must be 2-D, got {px.shape}")
    if px.min() < 0.0 or px.max() > 1.0:
        raise DataError("PGM pixel values must lie in [0, 1]")
    h, w = px.shape
    data = np.round(px * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def load_pgm(path) -> Array:
    """Read a binary PGM; returns float32 (h, w) with values k/255."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise DataError(f"not a binary PGM (P5): {path}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"truncated PGM header: {path}")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(x) for x in fields)
    except ValueError:
        raise DataError(f"malformed PGM header: {path}") from None
    if maxval != 255:
        raise DataError(f"unsupported PGM maxval {maxval} (expected 255): {path}")
    need = w * h
    raw = blob[pos:]
    if len(raw) != need:
        raise DataError(f"PGM payload is {len(raw)} bytes, expected {need}: {path}")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w)
    return (img / 255.0).astype(np.float32)


# --------------------------------------------------------------------------
# dataset build

@dataclass
class Dataset:
    ids: list
    families: list
    azimuths: Array          # degrees
    elevations: Array        # degrees
    images: Array            # (N, R_img, R_img) float32, PGM-quantized
    voxels: Array            # (N, R, R, R) bool
    specs: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)

    @property
    def train_indices(self) -> Array:
        return np.array([i for i in range(len(self.ids)) if not is_test_row(i)], dtype=np.int64)

    @property
    def test_indices(self) -> Array:
        return np.array([i for i in range(len(self.ids)) if is_test_row(i)], dtype=np.int64)


def is_test_row(index: int) -> bool:
    """Stable 90/10 split rule: hash of the shape's seed index."""
    return zlib.crc32(b"idx:%d" % index) % 10 == 0


def _family_counts(count: int, weights: dict | None) -> list:
    """Largest-remainder allocation of count shapes over the families."""
    if weights is None:
        weights = {f: 1.0 for f in FAMILIES}
    for f in weights:
        if f not in FAMILIES:
            raise ConfigError(f"unknown family {f!r} in weights")
        if weights[f] < 0:
            raise ConfigError(f"negative weight for family {f!r}")
    total = sum(weights.get(f, 0.0) for f in FAMILIES)
    if total <= 0:
        raise ConfigError("family weights sum to zero")
    quota = [count * weights.get(f, 0.0) / total for f in FAMILIES]
    counts = [int(q) for q in quota]
    short = count - sum(counts)
    order = sorted(range(len(FAMILIES)), key=lambda i: (quota[i] - counts[i], -i), reverse=True)
    for i in order[:short]:
        counts[i] += 1
    return counts


def build_dataset(out_dir, count: int, R: int = 16, R_img: int = 32, seed: int = 0,
                  weights: dict | None = None) -> Dataset:
    """Generate the dataset; writes files when out_dir is not None.

    Deterministic in (count, R, R_img, seed, weights): per-shape parameter and
    camera draws come from substreams keyed by the shape index, and the family
    sequence is a seeded shuffle of an exact largest-remainder allocation.
    Draws whose grid rasterizes empty or exactly duplicates an earlier grid
    are redrawn from the same substream (bounded), so all grids are distinct.
    """
    if count < 1:
        raise ConfigError(f"dataset count must be >= 1, got {count}")
    counts = _family_counts(count, weights)
    fam_seq = [f for f, c in zip(FAMILIES, counts) for _ in range(c)]
    fam_seq = [fam_seq[j] for j in rng(seed, "family-order").permutation(count)]

    ids, families, specs = [], [], []
    azimuths = np.zeros(count, dtype=np.float64)
    elevations = np.full(count, ELEVATION_DEG, dtype=np.float64)
    images = np.zeros((count, R_img, R_img), dtype=np.float32)
    voxels = np.zeros((count, R, R, R), dtype=bool)

    seen = set()
    for i, fam in enumerate(fam_seq):
        r = rng(seed, "shape", i)
        for _ in range(64):
            spec = sample_spec(fam, r, seed=i)
            try:
                grid = generate_shape(spec, R)
            except DataError:
                continue  # rasterized empty at this R; redraw
            key = grid.occ.tobytes()
            if key not in seen:
                break
        else:
            raise DataError(f"no distinct nonempty {fam} grid for row {i} "
                            f"after 64 draws at R={R}")
        seen.add(key)
        azimuths[i] = float(rng(seed, "view", i).integers(AZIMUTH_BINS)) * (360.0 / AZIMUTH_BINS)
        rendered = render_silhouette(grid, azimuths[i], elevations[i], R_img)
        # quantize through the PGM byte representation so in-memory training
        # sees exactly what load_dataset reads back
        images[i] = (np.round(rendered.pixels * 255.0).astype(np.uint8) / 255.0).astype(np.float32)
        voxels[i] = grid.occ
        ids.append(f"{fam}_{i:05d}")
        families.append(fam)
        specs.append(spec)

    ds = Dataset(ids, families, azimuths, elevations, images, voxels, specs)
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: Dataset, out_dir) -> None:
    try:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
        vg.save_cvx(os.path.join(out_dir, "voxels.cvx"), ds.voxels)
        lines = []
        for i, sid in enumerate(ds.ids):
            rel = f"images/{sid}.pgm"
            save_pgm(os.path.join(out_dir, rel), ds.images[i])
            lines.append(f"{sid}\t{ds.families[i]}\t{rel}\t{i}\t{ds.azimuths[i]:g}\t{ds.elevations[i]:g}\n")
        with open(os.path.join(out_dir, "manifest.tsv"), "w", encoding="utf-8") as f:
            f.writelines(lines)
    except OSError as e:
        raise DataError(f"dataset write failed under {out_dir}: {e}") from e


def load_dataset(in_dir) -> Dataset:
    """Read a dataset directory written by save_dataset / build_dataset."""
    mpath = os.path.join(in_dir, "manifest.tsv")
    try:
        with open(mpath, encoding="utf-8") as f:
            rows = [line.rstrip("\n").split("\t") for line in f if line.strip()]
        voxels = vg.load_cvx(os.path.join(in_dir, "voxels.cvx"))
    except OSError as e:
        raise DataError(f"dataset read failed under {in_dir}: {e}") from e
    ids, families, azs, els, images = [], [], [], [], []
    for row in rows:
        if len(row) != 6:
            raise DataError(f"manifest row has {len(row)} fields, expected 6: {row!r}")
        sid, fam, rel, vidx, az, el = row
        if fam not in FAMILIES:
            raise DataError(f"manifest family {fam!r} unknown")
        if int(vidx) != len(ids):
            raise DataError(f"manifest voxel_index {vidx} out of order at row {len(ids)}")
        try:
            images.append(load_pgm(os.path.join(in_dir, rel)))
        except OSError as e:
            raise DataError(f"dataset image read failed: {e}") from e
        ids.append(sid)
        families.append(fam)
        azs.append(float(az))
        els.append(float(el))
    if len(ids) != voxels.shape[0]:
        raise DataError(f"manifest has {len(ids)} rows but CVX1 holds {voxels.shape[0]} grids")
    return Dataset(ids, families, np.array(azs), np.array(els),
                   np.stack(images).astype(np.float32), voxels)
