"""Organized point clouds, PCD/PGM I/O, ground-plane fitting and heightmaps.

Coordinates are metres in the sensor frame (x right, y down, z forward).
Invalid entries of an organized cloud are stored as NaN triples.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometry, InsufficientPoints, ParseError

EMPTY = 255
OCCUPIED_MAX = 254

DEFAULT_M = 128
DEFAULT_EXTENT = 4.0
DEFAULT_H_NORM = 2.0
DEFAULT_TAU = 0.02
DEFAULT_ITERS = 200


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Organized ``height x width`` grid of optional 3D points."""

    xyz: np.ndarray  # (height, width, 3) float64, NaN where invalid
    frame_id: str = "sensor"

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64)
        if xyz.ndim != 3 or xyz.shape[2] != 3:
            raise ValueError(f"expected (height, width, 3) array, got {xyz.shape}")
        if xyz.shape[0] < 1 or xyz.shape[1] < 1:
            raise ValueError("organized cloud needs width, height >= 1")
        # a triple with any non-finite coordinate is an invalid entry
        bad = ~np.isfinite(xyz).all(axis=2)
        if bad.any():
            xyz = xyz.copy()
            xyz[bad] = np.nan
        object.__setattr__(self, "xyz", _frozen(xyz))

    @classmethod
    def from_points(cls, width: int, height: int, points, frame_id: str = "sensor") -> "PointCloud":
        """Build from a row-major sequence of ``(x, y, z)`` tuples or ``None``."""
        points = list(points)
        if len(points) != width * height:
            raise ValueError(f"{len(points)} points for a {width}x{height} cloud")
        xyz = np.full((width * height, 3), np.nan)
        for i, p in enumerate(points):
            if p is not None:
                xyz[i] = p
        return cls(xyz.reshape(height, width, 3), frame_id)

    @property
    def width(self) -> int:
        return self.xyz.shape[1]

    @property
    def height(self) -> int:
        return self.xyz.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.xyz.reshape(-1, 3)

    @property
    def valid(self) -> np.ndarray:
        """Boolean (height, width) mask of valid entries."""
        return ~np.isnan(self.xyz[..., 0])

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @property
    def points(self) -> list:
        return [None if np.isnan(p[0]) else tuple(float(c) for c in p) for p in self.flat]

    def valid_points(self) -> np.ndarray:
        return self.flat[self.valid.ravel()]

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        return PointCloud(xyz, self.frame_id)

    def equals(self, other: "PointCloud") -> bool:
        """Bit-exact comparison (NaN entries compare equal)."""
        return (
            self.xyz.shape == other.xyz.shape
            and self.frame_id == other.frame_id
            and np.array_equal(self.xyz, other.xyz, equal_nan=True)
            and np.array_equal(np.signbit(self.xyz), np.signbit(other.xyz))
        )


@dataclass(frozen=True)
class Plane:
    """Plane ``{p : normal . p + offset = 0}`` with a fixed orientation.

    The normal is flipped so the sensor origin has non-negative signed
    distance. For planes through the origin the largest-magnitude normal
    component is made positive.
    """

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(n)
        if not np.isfinite(norm) or norm == 0:
            raise DegenerateGeometry("plane normal must be non-zero")
        n = n / norm
        d = float(self.offset) / norm
        if d < -1e-12 or (abs(d) <= 1e-12 and n[np.argmax(np.abs(n))] < 0):
            n, d = -n, -d
        object.__setattr__(self, "normal", tuple(float(c) for c in n))
        object.__setattr__(self, "offset", float(d))

    @property
    def n(self) -> np.ndarray:
        return np.array(self.normal)

    def distance(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts) @ self.n + self.offset


@dataclass(frozen=True)
class GroundFrame:
    """Plane-aligned 2D frame: forward axis = sensor optical axis projected on the plane."""

    foot: np.ndarray
    forward: np.ndarray
    lateral: np.ndarray

    @classmethod
    def from_plane(cls, plane: Plane) -> "GroundFrame":
        n = plane.n
        foot = -plane.offset * n
        fwd = np.array([0.0, 0.0, 1.0])
        fwd = fwd - (fwd @ n) * n
        if np.linalg.norm(fwd) < 1e-6:
            # looking straight at the plane; fall back to the sensor x axis
            fwd = np.array([1.0, 0.0, 0.0]) - n[0] * n
        fwd /= np.linalg.norm(fwd)
        lat = np.cross(n, fwd)
        return cls(foot, fwd, lat)

    def project(self, pts: np.ndarray) -> np.ndarray:
        """(N, 3) sensor-frame points -> (N, 2) ground coordinates (forward, lateral)."""
        rel = np.asarray(pts) - self.foot
        return np.stack([rel @ self.forward, rel @ self.lateral], axis=-1)


@dataclass(frozen=True, eq=False)
class Heightmap:
    """``m x m`` greyscale ground grid; 255 marks empty cells."""

    cells: np.ndarray  # (m, m) uint8
    extent: float = DEFAULT_EXTENT
    h_norm: float = DEFAULT_H_NORM
    origin: tuple = (0.0, -DEFAULT_EXTENT / 2)
    frame: GroundFrame | None = field(default=None, repr=False)

    def __post_init__(self):
        cells = np.asarray(self.cells)
        if cells.ndim != 2 or cells.shape[0] != cells.shape[1] or cells.shape[0] < 1:
            raise ValueError(f"heightmap cells must be a non-empty square grid, got {cells.shape}")
        if cells.min() < 0 or cells.max() > 255:
            raise ValueError("heightmap values must lie in [0, 255]")
        if self.extent <= 0 or self.h_norm <= 0:
            raise ValueError("extent and h_norm must be positive")
        object.__setattr__(self, "cells", _frozen(cells.astype(np.uint8)))

    @property
    def m(self) -> int:
        return self.cells.shape[0]

    @property
    def cell_size(self) -> float:
        return self.extent / self.m

    def with_cells(self, cells: np.ndarray) -> "Heightmap":
        return Heightmap(cells, self.extent, self.h_norm, self.origin, self.frame)

    def cell_of(self, ground_xy: np.ndarray) -> np.ndarray:
        """Ground coordinates -> integer (row, col); may fall outside the grid."""
        g = np.atleast_2d(ground_xy)
        rc = np.floor((g - np.asarray(self.origin)) / self.cell_size)
        return rc.astype(np.int64)


# --------------------------------------------------------------------------- PCD

_HEADER_KEYS = ("VERSION", "FIELDS", "SIZE", "TYPE", "COUNT", "WIDTH", "HEIGHT", "VIEWPOINT", "POINTS", "DATA")


def parse_pcd(data: bytes) -> PointCloud:
    """Parse an ASCII PCD v0.7 file with fields ``x y z``."""
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError(f"not an ASCII PCD file: {exc}") from None
    lines = text.splitlines()
    header = {}
    frame_id = "sensor"
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line.startswith("#"):
            m = re.search(r"frame_id=(\S+)", line)
            if m:
                frame_id = m.group(1)
            continue
        key, _, rest = line.partition(" ")
        if key not in _HEADER_KEYS:
            raise ParseError(f"unexpected header line {line!r}")
        header[key] = rest.split()
        if key == "DATA":
            break
    for key in ("FIELDS", "WIDTH", "HEIGHT", "POINTS", "DATA"):
        if key not in header:
            raise ParseError(f"missing {key} header")
    if header["FIELDS"] != ["x", "y", "z"]:
        raise ParseError(f"expected FIELDS x y z, got {' '.join(header['FIELDS'])}")
    if header["DATA"] != ["ascii"]:
        raise ParseError("only DATA ascii is supported")
    if "COUNT" in header and header["COUNT"] != ["1", "1", "1"]:
        raise ParseError("COUNT must be 1 1 1")
    try:
        width = int(header["WIDTH"][0])
        height = int(header["HEIGHT"][0])
        n_points = int(header["POINTS"][0])
    except (ValueError, IndexError):
        raise ParseError("WIDTH/HEIGHT/POINTS must be integers") from None
    if width < 1 or height < 1:
        raise ParseError("WIDTH and HEIGHT must be >= 1")
    if n_points != width * height:
        raise ParseError(f"POINTS {n_points} != WIDTH*HEIGHT {width * height}")

    rows = [ln.split() for ln in lines[i:] if ln.strip()]
    if len(rows) != n_points:
        raise ParseError(f"header declares {n_points} points, body has {len(rows)}")
    try:
        xyz = np.array(rows, dtype=np.float64)
    except ValueError:
        raise ParseError("malformed data row") from None
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ParseError("each data row must hold exactly 3 values")
    # TYPE F SIZE 4: values are single precision on disk
    xyz = xyz.astype(np.float32).astype(np.float64)
    return PointCloud(xyz.reshape(height, width, 3), frame_id)


def write_pcd(cloud: PointCloud) -> bytes:
    n = cloud.width * cloud.height
    head = [
        f"# .PCD v0.7 - Point Cloud Data file format frame_id={cloud.frame_id}",
        "VERSION 0.7",
        "FIELDS x y z",
        "SIZE 4 4 4",
        "TYPE F F F",
        "COUNT 1 1 1",
        f"WIDTH {cloud.width}",
        f"HEIGHT {cloud.height}",
        "VIEWPOINT 0 0 0 1 0 0 0",
        f"POINTS {n}",
        "DATA ascii",
    ]
    # float32 -> python float is exact, so %.9g still round-trips the stored value
    vals = cloud.flat.astype(np.float32).astype(np.float64)
    valid = ~np.isnan(vals[:, 0])
    body = ["nan nan nan"] * n
    for k, (x, y, z) in zip(np.flatnonzero(valid).tolist(), vals[valid].tolist()):
        body[k] = "%.9g %.9g %.9g" % (x, y, z)
    return ("\n".join(head + body) + "\n").encode("ascii")


def read_pcd(path) -> PointCloud:
    return parse_pcd(Path(path).read_bytes())


def save_pcd(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(write_pcd(cloud))


# --------------------------------------------------------------------------- PGM

def write_pgm(cells: np.ndarray) -> bytes:
    cells = np.asarray(cells, dtype=np.uint8)
    h, w = cells.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + cells.tobytes()


def parse_pgm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)").match(data, pos)
        if not m:
            raise ParseError("truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ParseError("expected binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ParseError("only maxval 255 is supported")
    pixels = data[pos + 1: pos + 1 + w * h]
    if len(pixels) != w * h:
        raise ParseError("PGM pixel data too short")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def save_pgm(cells: np.ndarray, path) -> None:
    Path(path).write_bytes(write_pgm(cells))


def load_pgm(path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


# --------------------------------------------------------------------------- ground plane

def _fit_plane_lsq(pts: np.ndarray) -> Plane:
    centroid = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    if len(s) < 2 or s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometry("inlier set is collinear")
    n = vt[-1]
    return Plane(tuple(n), float(-n @ centroid))


def estimate_ground_plane(
    cloud: PointCloud, iters: int = DEFAULT_ITERS, tau: float = DEFAULT_TAU, seed: int = 0
) -> Plane:
    """RANSAC over 3-point samples followed by a least-squares refit.

    Inliers are points within ``tau`` metres of a candidate plane. The
    candidate with the most inliers (first one on ties) is refit by total
    least squares on its inlier set.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    pts = cloud.valid_points()
    n = len(pts)
    if n < 3:
        raise InsufficientPoints(f"need >= 3 valid points, got {n}")
    rng = np.random.default_rng(seed)
    samples = np.stack([rng.choice(n, 3, replace=False) for _ in range(iters)])
    p0, p1, p2 = pts[samples[:, 0]], pts[samples[:, 1]], pts[samples[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    scale = np.maximum(np.linalg.norm(p1 - p0, axis=1) * np.linalg.norm(p2 - p0, axis=1), 1e-300)
    ok = norms > 1e-10 * scale
    if not ok.any():
        raise DegenerateGeometry("every minimal sample was collinear")
    normals = normals[ok] / norms[ok, None]
    offsets = -np.einsum("ij,ij->i", normals, p0[ok])

    best_count, best = -1, None
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, len(normals), chunk):
        nn = normals[start:start + chunk]
        dd = offsets[start:start + chunk]
        counts = (np.abs(pts @ nn.T + dd) <= tau).sum(axis=0)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count, best = int(counts[k]), start + k
    inliers = np.abs(pts @ normals[best] + offsets[best]) <= tau
    return _fit_plane_lsq(pts[inliers])


def signed_heights(cloud: PointCloud, plane: Plane) -> tuple[np.ndarray, np.ndarray]:
    """Return (flat point indices, heights above ``plane``) for valid points."""
    valid = cloud.valid.ravel()
    idx = np.flatnonzero(valid)
    return idx, plane.distance(cloud.flat[idx])


# --------------------------------------------------------------------------- heightmap

def grid_origin(extent: float, center_distance: float | None = None) -> tuple:
    """Ground coordinates of cell (0, 0) for a grid centred ``center_distance`` ahead."""
    if center_distance is None:
        center_distance = extent / 2
    return (center_distance - extent / 2, -extent / 2)


def height_samples(
    cloud: PointCloud,
    plane: Plane,
    m: int = DEFAULT_M,
    extent: float = DEFAULT_EXTENT,
    tau: float = DEFAULT_TAU,
    center_distance: float | None = None,
):
    """Bin above-ground points into grid cells.

    Returns ``(rows, cols, heights, stats)`` where ``stats`` counts the points
    dropped at each filter stage.
    """
    idx, h = signed_heights(cloud, plane)
    frame = GroundFrame.from_plane(plane)
    origin = np.asarray(grid_origin(extent, center_distance))
    below = h < 0
    ground = (h <= tau) & ~below
    keep = ~(below | ground)
    g = frame.project(cloud.flat[idx[keep]])
    rc = np.floor((g - origin) / (extent / m)).astype(np.int64)
    inside = (rc >= 0).all(axis=1) & (rc < m).all(axis=1)
    stats = {
        "valid": len(idx),
        "below": int(below.sum()),
        "ground": int(ground.sum()),
        "outside": int((~inside).sum()),
        "consumed": int(inside.sum()),
    }
    return rc[inside, 0], rc[inside, 1], h[keep][inside], stats


def height_to_grey(height, h_norm: float):
    v = np.floor(255.0 * np.minimum(height, h_norm) / h_norm + 0.5)
    return np.minimum(OCCUPIED_MAX, v).astype(np.uint8)


def rasterize_heightmap(
    cloud: PointCloud,
    plane: Plane,
    m: int = DEFAULT_M,
    extent: float = DEFAULT_EXTENT,
    h_norm: float = DEFAULT_H_NORM,
    tau: float = DEFAULT_TAU,
    center_distance: float | None = None,
) -> Heightmap:
    """Greyscale heightmap of the maximum point height per ground cell.

    Points at or below ``tau`` (ground inliers) and below the plane are
    ignored, so the background stays empty (255). Occupied cells hold
    ``min(254, round(255 * min(h, h_norm) / h_norm))``.
    """
    if m < 1 or extent <= 0 or h_norm <= 0:
        raise ValueError("need m >= 1, extent > 0, h_norm > 0")
    rows, cols, h, _ = height_samples(cloud, plane, m, extent, tau, center_distance)
    hmax = np.full(m * m, -np.inf)
    np.maximum.at(hmax, rows * m + cols, h)
    cells = np.full(m * m, EMPTY, dtype=np.uint8)
    occ = np.isfinite(hmax)
    cells[occ] = height_to_grey(hmax[occ], h_norm)
    return Heightmap(
        cells.reshape(m, m),
        extent,
        h_norm,
        grid_origin(extent, center_distance),
        GroundFrame.from_plane(plane),
    )


@dataclass(frozen=True)
class RasterConfig:
    """Plane fitting + rasterization settings used by the pipeline."""

    m: int = DEFAULT_M
    extent: float = DEFAULT_EXTENT
    h_norm: float = DEFAULT_H_NORM
    tau: float = DEFAULT_TAU
    iters: int = DEFAULT_ITERS
    center_distance: float | None = None
    plane_seed: int = 0


def heightmap_from_cloud(cloud: PointCloud, cfg: RasterConfig = RasterConfig()) -> Heightmap:
    plane = estimate_ground_plane(cloud, cfg.iters, cfg.tau, cfg.plane_seed)
    return rasterize_heightmap(cloud, plane, cfg.m, cfg.extent, cfg.h_norm, cfg.tau, cfg.center_distance)
