"""Heightmap-level and point-cloud-level augmentations, and plan-driven expansion.

Image-level ops accept a ``Heightmap`` or a plain uint8 array (e.g. an ROI
patch) and return the same kind. Cloud-level ops keep the organized layout
and mark removed points invalid.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cloudcore import Heightmap, PointCloud, RasterConfig, heightmap_from_cloud, save_pcd, save_pgm
from .errors import InvalidParams, UnorganizedCloud
from .synthgen import derive_seed

IMAGE_STRATEGIES = ("gaussian", "snp", "periodic")
CLOUD_STRATEGIES = ("sensor", "downsample", "segment")
STRATEGIES = IMAGE_STRATEGIES + CLOUD_STRATEGIES


def _unwrap(hmap):
    if isinstance(hmap, Heightmap):
        return hmap.cells, hmap.with_cells
    return np.asarray(hmap), lambda c: c


# --------------------------------------------------------------------------- image level

def gaussian_image_noise(hmap, mu: float, sigma: float, seed: int):
    if sigma < 0:
        raise InvalidParams("sigma must be >= 0")
    cells, wrap = _unwrap(hmap)
    rng = np.random.default_rng(seed)
    noisy = cells + rng.normal(mu, sigma, size=cells.shape)
    return wrap(np.clip(np.floor(noisy + 0.5), 0, 255).astype(np.uint8))


def salt_pepper_noise(hmap, ratio: float, amount: float, seed: int):
    """Force ``round(amount * N)`` distinct cells to 255 (salt) or 0 (pepper).

    ``round(ratio * k)`` of the ``k`` chosen cells become salt.
    """
    if not (0 <= ratio <= 1 and 0 <= amount <= 1):
        raise InvalidParams("ratio and amount must lie in [0, 1]")
    cells, wrap = _unwrap(hmap)
    rng = np.random.default_rng(seed)
    k = int(round(amount * cells.size))
    if k == 0:
        return hmap
    chosen = rng.choice(cells.size, size=k, replace=False)
    n_salt = int(round(ratio * k))
    out = cells.copy().ravel()
    out[chosen[:n_salt]] = 255
    out[chosen[n_salt:]] = 0
    return wrap(out.reshape(cells.shape))


def periodic_noise(hmap, period: int):
    if period < 1:
        raise InvalidParams("period must be >= 1")
    cells, wrap = _unwrap(hmap)
    out = cells.copy()
    out[::int(period)] = 255
    return wrap(out)


# --------------------------------------------------------------------------- cloud level

def sensor_noise(cloud: PointCloud, sigma: float, seed: int) -> PointCloud:
    """Displace each valid point along its viewing ray by N(0, sigma) metres."""
    if sigma < 0:
        raise InvalidParams("sigma must be >= 0")
    if sigma == 0:
        return cloud
    flat = cloud.flat.copy()
    valid = ~np.isnan(flat[:, 0])
    p = flat[valid]
    rng = np.random.default_rng(seed)
    delta = rng.normal(0.0, sigma, size=len(p))
    rng_len = np.linalg.norm(p, axis=1)
    unit = np.divide(p, rng_len[:, None], out=np.zeros_like(p), where=rng_len[:, None] > 0)
    flat[valid] = p + delta[:, None] * unit
    return cloud.with_xyz(flat.reshape(cloud.xyz.shape))


def downsample_cloud(cloud: PointCloud, scale: float, seed: int) -> PointCloud:
    """Keep ``floor(scale * n_valid)`` valid points chosen uniformly; invalidate the rest."""
    if not 0 < scale <= 1:
        raise InvalidParams("scale must lie in (0, 1]")
    if scale == 1:
        return cloud
    valid_idx = np.flatnonzero(cloud.valid.ravel())
    keep = int(math.floor(scale * len(valid_idx) + 1e-9))
    rng = np.random.default_rng(seed)
    kept = rng.choice(len(valid_idx), size=keep, replace=False)
    drop = np.ones(len(valid_idx), dtype=bool)
    drop[kept] = False
    flat = cloud.flat.copy()
    flat[valid_idx[drop]] = np.nan
    return cloud.with_xyz(flat.reshape(cloud.xyz.shape))


def segment_window(cloud: PointCloud, size: int, seed: int) -> tuple:
    """Top-left (row, col) of the window ``remove_segment`` would invalidate."""
    rng = np.random.default_rng(seed)
    r0 = int(rng.integers(cloud.height - size + 1))
    c0 = int(rng.integers(cloud.width - size + 1))
    return r0, c0


def remove_segment(cloud: PointCloud, size: int, seed: int) -> PointCloud:
    """Invalidate one ``size x size`` window at a uniformly random grid position."""
    if cloud.width == 1 or cloud.height == 1:
        raise UnorganizedCloud(f"{cloud.width}x{cloud.height} cloud is not organized")
    if not 0 <= size <= min(cloud.width, cloud.height):
        raise InvalidParams(f"segment size {size} outside [0, {min(cloud.width, cloud.height)}]")
    if size == 0:
        return cloud
    r0, c0 = segment_window(cloud, size, seed)
    xyz = cloud.xyz.copy()
    xyz[r0:r0 + size, c0:c0 + size] = np.nan
    return cloud.with_xyz(xyz)


# --------------------------------------------------------------------------- plans

@dataclass
class AugParams:
    """Per-strategy settings. A list value is a set drawn from uniformly in bulk mode.

    ``gaussian_spread`` selects whether the image-noise sigma values are
    standard deviations (default) or variances.
    """

    gaussian_img: dict = field(default_factory=lambda: {"mu": 0.2, "sigma": [10, 25, 50]})
    snp: dict = field(default_factory=lambda: {"ratio": 0.5, "amount": [0.01, 0.02, 0.03, 0.04, 0.05]})
    periodic: dict = field(default_factory=lambda: {"period": [3, 5, 10]})
    sensor: dict = field(default_factory=lambda: {"sigma": [0.1, 0.2, 0.25]})
    downsample: dict = field(default_factory=lambda: {"scale": [1 / 50, 1 / 20, 1 / 10]})
    segment: dict = field(default_factory=lambda: {"size": [50, 100, 150]})
    gaussian_spread: str = "std"

    def validate(self):
        def values(d, k):
            v = d[k]
            return v if isinstance(v, list) else [v]
        if any(not 0 <= a <= 1 for a in values(self.snp, "amount") + values(self.snp, "ratio")):
            raise InvalidParams("snp ratio/amount must lie in [0, 1]")
        if any(not 0 < s <= 1 for s in values(self.downsample, "scale")):
            raise InvalidParams("downsample scale must lie in (0, 1]")
        if any(p < 1 for p in values(self.periodic, "period")):
            raise InvalidParams("period must be >= 1")
        if any(s < 0 for s in values(self.segment, "size")):
            raise InvalidParams("segment size must be >= 0")
        if any(s < 0 for s in values(self.sensor, "sigma") + values(self.gaussian_img, "sigma")):
            raise InvalidParams("sigmas must be >= 0")
        if self.gaussian_spread not in ("std", "variance"):
            raise InvalidParams("gaussian_spread must be 'std' or 'variance'")
        return self

    def settings(self, strategy: str) -> dict:
        return {"gaussian": self.gaussian_img, "snp": self.snp, "periodic": self.periodic,
                "sensor": self.sensor, "downsample": self.downsample, "segment": self.segment}[strategy]

    def draw(self, strategy: str, rng: np.random.Generator) -> dict:
        out = {}
        for k, v in self.settings(strategy).items():
            out[k] = v[int(rng.integers(len(v)))] if isinstance(v, list) else v
        if strategy == "gaussian" and self.gaussian_spread == "variance":
            out["sigma"] = math.sqrt(out["sigma"])
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text) -> "AugParams":
        d = json.loads(text) if isinstance(text, str) else dict(text)
        return cls(**d).validate()


@dataclass
class AugPlan:
    counts: dict = field(default_factory=dict)  # strategy -> number of augmented samples

    def __post_init__(self):
        for k, v in self.counts.items():
            if k not in STRATEGIES:
                raise InvalidParams(f"unknown strategy {k!r}")
            if int(v) != v or v < 0:
                raise InvalidParams(f"count for {k} must be a non-negative integer")
        self.counts = {k: int(self.counts[k]) for k in STRATEGIES if k in self.counts}

    @property
    def budget(self) -> int:
        return sum(self.counts.values())

    def to_json(self) -> str:
        return json.dumps({"counts": self.counts, "budget": self.budget})

    @classmethod
    def from_json(cls, text) -> "AugPlan":
        d = json.loads(text) if isinstance(text, str) else dict(text)
        plan = cls(d.get("counts", {}))
        if "budget" in d and d["budget"] != plan.budget:
            raise InvalidParams(f"plan counts sum to {plan.budget}, budget says {d['budget']}")
        return plan


def apply_image_aug(hmap, strategy: str, params: dict, seed: int):
    if strategy == "gaussian":
        return gaussian_image_noise(hmap, params["mu"], params["sigma"], seed)
    if strategy == "snp":
        return salt_pepper_noise(hmap, params["ratio"], params["amount"], seed)
    if strategy == "periodic":
        return periodic_noise(hmap, params["period"])
    raise InvalidParams(f"{strategy!r} is not an image-level strategy")


def apply_cloud_aug(cloud: PointCloud, strategy: str, params: dict, seed: int) -> PointCloud:
    if strategy == "sensor":
        return sensor_noise(cloud, params["sigma"], seed)
    if strategy == "downsample":
        return downsample_cloud(cloud, params["scale"], seed)
    if strategy == "segment":
        size = min(int(params["size"]), cloud.width, cloud.height)
        return remove_segment(cloud, size, seed)
    raise InvalidParams(f"{strategy!r} is not a cloud-level strategy")


def apply_plan(dataset, plan: AugPlan, params: AugParams | None = None, seed: int = 0, out_dir=None,
               raster: RasterConfig = RasterConfig()):
    """Expand ``dataset`` (a ``Manifest``) with ``plan.counts[s]`` samples per strategy.

    Sources are cycled in manifest order. Cloud-level samples are written as
    PCD files under ``out_dir`` (default: ``<root>/aug``). Image-level samples
    are written as PGM heightmaps (rasterized with ``raster``) and have a
    null ``pcd_path``; their provenance names the source entry.
    """
    from .dataset import Manifest

    params = (params or AugParams()).validate()
    if not dataset.entries:
        raise InvalidParams("dataset is empty")
    if plan.budget == 0:
        return Manifest(dataset.root, list(dataset.entries), dataset.camera)
    out_dir = Path(out_dir) if out_dir else dataset.root / "aug"
    out_dir.mkdir(parents=True, exist_ok=True)
    sources = [e for e in dataset.entries if "provenance" not in e] or dataset.entries
    new = []
    for strategy, count in plan.counts.items():
        for j in range(count):
            src = sources[j % len(sources)]
            rng = np.random.default_rng(derive_seed(seed, "draw", strategy, j))
            p = params.draw(strategy, rng)
            s = derive_seed(seed, "apply", strategy, j)
            sid = f"{src['id']}+{strategy}{j:05d}"
            entry = {"id": sid, "label": src["label"], "seed": s, "params": src["params"],
                     "provenance": {"source": src["id"], "strategy": strategy, "params": p, "seed": s}}
            if strategy in CLOUD_STRATEGIES:
                cloud = apply_cloud_aug(dataset.load_cloud(src), strategy, p, s)
                path = out_dir / f"{sid}.pcd"
                save_pcd(cloud, path)
                entry["pcd_path"] = _rel(path, dataset.root)
            else:
                hmap = apply_image_aug(heightmap_from_cloud(dataset.load_cloud(src), raster), strategy, p, s)
                path = out_dir / f"{sid}.pgm"
                save_pgm(hmap.cells, path)
                entry["pcd_path"] = None
                entry["pgm_path"] = _rel(path, dataset.root)
            new.append(entry)
    return Manifest(dataset.root, list(dataset.entries) + new, dataset.camera)


def _rel(path: Path, root: Path) -> str:
    return os.path.relpath(Path(path).resolve(), Path(root).resolve())
