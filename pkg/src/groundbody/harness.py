"""Experiment orchestration: datasets, featurization, training, evaluation, sweeps.

A scene is classified as casualty when any of its ROI patches gets casualty
probability >= 0.5; scenes without ROIs are non-casualty.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import augment
from .augment import AugParams, AugPlan, apply_plan
from .bayesmix import SearchSpace, optimize_mix
from .cloudcore import RasterConfig, heightmap_from_cloud, load_pgm, read_pcd, save_pcd
from .dataset import Manifest, parallel_map, synthesize
from .errors import DegenerateGeometry, InsufficientPoints, StageError
from .nanocnn import CLASSES, CnnModel, Metrics, TrainConfig, compute_metrics, predict, train
from .roi import bbox_iou, crop_patch, propose_rois
from .synthgen import CameraModel, SampleSpec, Scene, derive_seed

log = logging.getLogger(__name__)

OUT_ENV = "GROUNDBODY_OUT"
DEFAULT_COUNTS = tuple(range(1000, 10001, 1000))

# Body-shape ranges disjoint from the training grid (stature 1500-2000 mm,
# BMI 20-30, SHS 0.4-0.6, age 20-80).
SHIFTED_SHAPES = {
    "stature": [[1200, 1450], [2050, 2200]],
    "bmi": [[15, 19], [31, 40]],
    "shs": [[0.31, 0.38], [0.62, 0.69]],
    "age": [[81, 95]],
    "orientation": [[-179.999, 180]],
}
SHIFTED_CORRUPTION = {"sensor_sigma": 0.2, "downsample_scale": 1 / 20, "segment_size": 100}


@dataclass
class ExperimentConfig:
    train_per_class: int = 200
    val_per_class: int = 100
    test_per_class: int = 100
    camera: dict = field(default_factory=dict)  # CameraModel.default kwargs
    scene: dict = field(default_factory=dict)  # SampleSpec overrides (training / clean test)
    shifted_scene: dict = field(default_factory=lambda: dict(SHIFTED_SHAPES))
    shifted_corruption: dict = field(default_factory=lambda: dict(SHIFTED_CORRUPTION))
    raster: dict = field(default_factory=dict)  # RasterConfig overrides
    fg_threshold: int = 250
    min_area: int = 30
    iou_threshold: float = 0.3
    plan: dict = field(default_factory=dict)  # strategy -> nominal augmented-sample count
    aug_params: dict = field(default_factory=dict)
    count_scale: float = 1.0  # nominal plan counts -> generated samples
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    domains: list = field(default_factory=lambda: ["clean", "shifted"])
    external_pcd_dir: str | None = None
    master_seed: int = 0
    out_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        for name in ("train_per_class", "val_per_class", "test_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.out_dir is None:
            self.out_dir = os.environ.get(OUT_ENV, "runs")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    # derived objects
    def camera_model(self) -> CameraModel:
        return CameraModel.default(**self.camera)

    def sample_spec(self, label: str, shifted: bool = False) -> SampleSpec:
        d = dict(self.shifted_scene if shifted else self.scene)
        return SampleSpec.from_json({**d, "label": label})

    def raster_config(self) -> RasterConfig:
        return RasterConfig(**self.raster)

    def train_config(self, seed_key: str = "train") -> TrainConfig:
        d = {"seed": derive_seed(self.master_seed, seed_key), **self.train}
        return TrainConfig(**d)

    def aug_plan(self) -> AugPlan:
        return AugPlan({k: int(round(v * self.count_scale)) for k, v in self.plan.items()})

    def data_key(self) -> str:
        keys = ("train_per_class", "val_per_class", "test_per_class", "camera", "scene", "shifted_scene",
                "shifted_corruption", "master_seed")
        return _digest({k: getattr(self, k) for k in keys})

    def run_key(self) -> str:
        d = self.to_dict()
        for k in ("out_dir", "workers", "domains", "external_pcd_dir"):
            d.pop(k)
        return _digest(d)


def _digest(obj) -> str:
    return hashlib.sha1(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        inner.__name__ = fn.__name__
        inner.__doc__ = fn.__doc__
        return inner
    return wrap


# --------------------------------------------------------------------------- datasets

def _both_labels(config: ExperimentConfig, n: int, shifted: bool = False) -> dict:
    return {label: (config.sample_spec(label, shifted), n) for label in CLASSES}


def _load_or_make(root: Path, make) -> Manifest:
    if (root / "manifest.json").exists():
        return Manifest.load(root)
    m = make()
    m.save()
    return m


@_stage("synth")
def make_datasets(config: ExperimentConfig) -> dict:
    """Clean train/val/test manifests, cached under ``<out>/data/<key>``."""
    base = Path(config.out_dir) / "data" / config.data_key()
    cam = config.camera_model()
    sizes = {"train": config.train_per_class, "val": config.val_per_class, "test": config.test_per_class}
    return {
        split: _load_or_make(base / split, lambda split=split, n=n: synthesize(
            base / split, _both_labels(config, n), config.master_seed, cam, prefix=f"{split}-",
            workers=config.workers))
        for split, n in sizes.items()
    }


def _corrupt_one(args):
    src_path, dst_path, corr, seed = args
    cloud = read_pcd(src_path)
    cloud = augment.sensor_noise(cloud, corr["sensor_sigma"], derive_seed(seed, "sensor"))
    cloud = augment.downsample_cloud(cloud, corr["downsample_scale"], derive_seed(seed, "downsample"))
    size = min(int(corr["segment_size"]), cloud.width, cloud.height)
    cloud = augment.remove_segment(cloud, size, derive_seed(seed, "segment"))
    save_pcd(cloud, dst_path)


@_stage("shift")
def make_shifted_domain(config: ExperimentConfig, seed: int | None = None, split: str = "test",
                        per_class: int | None = None) -> Manifest:
    """Held-out-shape scenes corrupted by sensor noise, down-sampling and segment removal.

    Clean renders live in ``<root>/clean`` (its own manifest); the corrupted
    clouds and the returned manifest live in ``<root>``.
    """
    seed = config.master_seed if seed is None else seed
    per_class = per_class or (config.test_per_class if split == "test" else config.val_per_class)
    root = Path(config.out_dir) / "data" / config.data_key() / f"shifted-{split}-{seed}"
    if (root / "manifest.json").exists():
        return Manifest.load(root)
    clean = _load_or_make(root / "clean", lambda: synthesize(
        root / "clean", _both_labels(config, per_class, shifted=True), derive_seed(seed, "shifted", split),
        config.camera_model(), prefix=f"shifted-{split}-", workers=config.workers))
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    entries, jobs = [], []
    for e in clean.entries:
        s = derive_seed(seed, "corrupt", e["id"])
        rel = f"clouds/{e['id']}.pcd"
        jobs.append((clean.path_of(e), root / rel, config.shifted_corruption, s))
        entries.append({**e, "pcd_path": rel,
                        "provenance": {"source": e["id"], "strategy": "shifted", "seed": s,
                                       "params": dict(config.shifted_corruption)}})
    parallel_map(_corrupt_one, jobs, config.workers)
    m = Manifest(root, entries, clean.camera)
    m.save()
    return m


def external_manifest(path) -> Manifest:
    """Labelled real clouds: a manifest.json, or ``casualty/`` and ``non-casualty/`` folders of PCDs."""
    path = Path(path)
    if (path / "manifest.json").exists():
        return Manifest.load(path)
    entries = []
    for label in CLASSES:
        for f in sorted((path / label).glob("*.pcd")):
            entries.append({"id": f"ext-{label}-{f.stem}", "pcd_path": str(f.relative_to(path)), "label": label,
                            "seed": 0, "params": {}})
    if not entries:
        raise FileNotFoundError(f"no labelled PCDs under {path}")
    return Manifest(path, entries, None)


# --------------------------------------------------------------------------- featurization

def body_cell_bbox(scene: Scene, camera: CameraModel, hmap) -> tuple | None:
    """Bounding box (row, col, h, w) of the body's ground footprint in heightmap cells."""
    if scene.body is None or hmap.frame is None:
        return None
    fr = hmap.frame
    foot_w = camera.to_world(fr.foot[None])[0]
    lo, hi = [], []
    for axis in (fr.forward, fr.lateral):
        u = camera.rotation @ axis
        sup = [p.support(u) for p in scene.body.primitives]
        hi.append(max(s[0] for s in sup) - foot_w @ u)
        lo.append(min(s[1] for s in sup) - foot_w @ u)
    r0, c0 = hmap.cell_of(np.array(lo))[0]
    r1, c1 = hmap.cell_of(np.array(hi))[0]
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r1, hmap.m - 1), min(c1, hmap.m - 1)
    if r1 < r0 or c1 < c0:
        return None
    return (int(r0), int(c0), int(r1 - r0 + 1), int(c1 - c0 + 1))


@dataclass
class Features:
    patches: np.ndarray  # (k, 28, 28) uint8
    roi_labels: list  # class name per ROI ("" when the scene is unknown)
    bboxes: list


def _featurize_entry(args):
    """Heightmap -> ROIs -> patches (+ IoU labels) for one manifest entry."""
    root, entry, camera_json, raster, fg, min_area, iou_thr, source = args
    camera = CameraModel.from_json(camera_json) if camera_json else CameraModel.default()
    scene = Scene.from_json(entry["params"]["scene"]) if entry.get("params", {}).get("scene") else None

    def clean_map(e):
        cloud = read_pcd(Path(root) / e["pcd_path"])
        try:
            return heightmap_from_cloud(cloud, raster)
        except (InsufficientPoints, DegenerateGeometry):
            return None

    if entry.get("pgm_path"):
        # image-level augmentation: boxes from the clean source map, pixels from the noisy map
        hmap = clean_map(source)
        noisy = load_pgm(Path(root) / entry["pgm_path"])
    else:
        hmap = clean_map(entry)
        noisy = None
    if hmap is None:
        return Features(np.zeros((0, 28, 28), np.uint8), [], [])
    rois = propose_rois(hmap, fg, min_area)
    body = body_cell_bbox(scene, camera, hmap) if scene is not None else None
    patches, labels = [], []
    for roi in rois:
        patches.append(roi.patch if noisy is None else crop_patch(noisy, roi.bbox))
        if scene is None:
            labels.append("")
        elif body is not None and bbox_iou(roi.bbox, body) >= iou_thr:
            labels.append("casualty")
        else:
            labels.append("non-casualty")
    arr = np.stack(patches) if patches else np.zeros((0, 28, 28), np.uint8)
    return Features(arr, labels, [r.bbox for r in rois])


_FEATURE_CACHE: dict = {}


def _cache_key(job) -> tuple:
    root, entry, _, raster, fg, min_area, iou_thr, source = job
    files = [entry.get("pgm_path") or entry["pcd_path"]] + ([source["pcd_path"]] if source else [])
    stamp = []
    for f in files:
        st = (Path(root) / f).stat()
        stamp.append((str((Path(root) / f).resolve()), st.st_size, st.st_mtime_ns))
    return (tuple(stamp), raster, fg, min_area, iou_thr, json.dumps(entry.get("params", {}).get("scene"),
                                                                   sort_keys=True))


@_stage("featurize")
def featurize(manifest: Manifest, config: ExperimentConfig) -> list:
    """Per-entry ROI features; memoised in-process on file identity and pipeline settings."""
    by_id = {e["id"]: e for e in manifest.entries}
    raster = config.raster_config()
    jobs = []
    for e in manifest.entries:
        src = by_id.get(e.get("provenance", {}).get("source")) if e.get("pgm_path") else None
        jobs.append((str(manifest.root), e, manifest.camera, raster, config.fg_threshold, config.min_area,
                     config.iou_threshold, src))
    keys = [_cache_key(j) for j in jobs]
    todo = [i for i, k in enumerate(keys) if k not in _FEATURE_CACHE]
    for i, f in zip(todo, parallel_map(_featurize_entry, [jobs[i] for i in todo], config.workers)):
        _FEATURE_CACHE[keys[i]] = f
    return [_FEATURE_CACHE[k] for k in keys]


def pipeline_header(config: ExperimentConfig) -> dict:
    """Featurization settings stored alongside model weights."""
    return {"train": asdict(config.train_config()), "raster": asdict(config.raster_config()),
            "fg_threshold": config.fg_threshold, "min_area": config.min_area}


@_stage("infer")
def infer_cloud(model: CnnModel, cloud, header: dict | None = None) -> tuple:
    """Single cloud -> (heightmap, rois, casualty probabilities)."""
    header = header or {}
    raster = RasterConfig(**header.get("raster", {}))
    hmap = heightmap_from_cloud(cloud, raster)
    rois = propose_rois(hmap, header.get("fg_threshold", 250), header.get("min_area", 30))
    if not rois:
        return hmap, rois, np.zeros(0)
    probs = predict(model, np.stack([r.patch for r in rois]).astype(np.float64) / 255.0)
    return hmap, rois, probs


def training_set(feats: list) -> tuple:
    patches = [f.patches for f in feats if len(f.patches)]
    labels = [lab for f in feats for lab in f.roi_labels]
    x = np.concatenate(patches) if patches else np.zeros((0, 28, 28), np.uint8)
    return x.astype(np.float64) / 255.0, labels


def classify_scenes(model: CnnModel, feats: list) -> list:
    preds = []
    for f in feats:
        if len(f.patches) == 0:
            preds.append("non-casualty")
            continue
        p = predict(model, f.patches.astype(np.float64) / 255.0)
        preds.append("casualty" if p.max() >= 0.5 else "non-casualty")
    return preds


@_stage("eval")
def evaluate(model: CnnModel, manifest: Manifest, config: ExperimentConfig) -> Metrics:
    feats = featurize(manifest, config)
    return compute_metrics(classify_scenes(model, feats), [e["label"] for e in manifest.entries])


# --------------------------------------------------------------------------- runs

@dataclass
class RunResult:
    metrics: dict  # domain -> Metrics
    model: CnnModel
    history: list
    run_dir: Path
    n_train_rois: int

    def summary(self) -> dict:
        return {d: m.to_json() for d, m in self.metrics.items()}


@_stage("augment")
def augmented_train_set(config: ExperimentConfig, train_manifest: Manifest) -> Manifest:
    plan = config.aug_plan()
    if plan.budget == 0:
        return train_manifest
    root = Path(config.out_dir) / "aug" / _digest([config.data_key(), plan.counts, config.aug_params,
                                                    config.raster, config.master_seed])
    if (root / "manifest.json").exists():
        return Manifest.load(root)
    params = AugParams(**config.aug_params).validate() if config.aug_params else AugParams()
    out = apply_plan(train_manifest, plan, params, derive_seed(config.master_seed, "augment"),
                     out_dir=root / "files", raster=config.raster_config())
    # re-root so augmented files and source references resolve from one manifest
    rebased = Manifest(root, [], out.camera).merged(out)
    rebased.save()
    return rebased


@_stage("train")
def train_model(config: ExperimentConfig, feats: list):
    x, y = training_set(feats)
    model = CnnModel.init(derive_seed(config.master_seed, "init"))
    return train(model, x, y, config.train_config()) + (len(y),)


def run_pipeline(config: ExperimentConfig, extra_domains: dict | None = None) -> RunResult:
    """Generate -> rasterize -> propose -> label -> train -> evaluate on every domain."""
    data = make_datasets(config)
    train_m = augmented_train_set(config, data["train"])
    model, history, n_rois = train_model(config, featurize(train_m, config))
    domains = {}
    if "clean" in config.domains:
        domains["clean"] = data["test"]
    if "shifted" in config.domains:
        domains["shifted"] = make_shifted_domain(config)
    if config.external_pcd_dir:
        domains["external"] = external_manifest(config.external_pcd_dir)
    domains.update(extra_domains or {})
    metrics = {name: evaluate(model, m, config) for name, m in domains.items()}

    run_dir = Path(config.out_dir) / "runs" / config.run_key()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "model.bin").write_bytes(model.to_bytes(pipeline_header(config)))
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    (run_dir / "metrics.json").write_text(json.dumps(
        {"metrics": {d: m.to_json() for d, m in metrics.items()}, "loss_history": history,
         "train_rois": n_rois}, indent=1))
    log.info("run %s: %s", run_dir.name, {d: round(m.accuracy, 4) for d, m in metrics.items()})
    return RunResult(metrics, model, history, run_dir, n_rois)


# --------------------------------------------------------------------------- sweeps

@dataclass
class SweepResult:
    rows: list  # dicts: strategy, count, clean_accuracy, shifted_accuracy, f1

    COLUMNS = ("strategy", "count", "clean_accuracy", "shifted_accuracy", "f1")

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in self.COLUMNS})
        return path

    @classmethod
    def read_csv(cls, path) -> "SweepResult":
        rows = []
        with Path(path).open() as fh:
            for r in csv.DictReader(fh):
                rows.append({"strategy": r["strategy"], "count": int(r["count"]),
                             "clean_accuracy": float(r["clean_accuracy"]),
                             "shifted_accuracy": float(r["shifted_accuracy"]), "f1": float(r["f1"])})
        return cls(rows)


def _row(strategy, count, result: RunResult) -> dict:
    clean = result.metrics.get("clean")
    shifted = result.metrics.get("shifted")
    return {"strategy": strategy, "count": count,
            "clean_accuracy": clean.accuracy if clean else float("nan"),
            "shifted_accuracy": shifted.accuracy if shifted else float("nan"),
            "f1": (shifted or clean).f1}


def run_sweep(config: ExperimentConfig, strategies=augment.STRATEGIES, counts=DEFAULT_COUNTS,
              csv_path=None, runner=run_pipeline) -> SweepResult:
    """Baseline plus one independent train/evaluate run per (strategy, count).

    Rows are appended to ``csv_path`` as they complete, so a failing cell
    leaves the finished ones on disk; the failure is re-raised afterwards.
    """
    counts = list(counts)
    if not counts:
        raise ValueError("counts must be non-empty")
    csv_path = Path(csv_path) if csv_path else Path(config.out_dir) / "sweep.csv"
    result = SweepResult([])
    cells = [("baseline", 0)] + [(s, c) for s in strategies for c in counts]
    failure = None
    for strategy, count in cells:
        cfg = replace(config, plan={} if strategy == "baseline" else {strategy: count})
        try:
            result.rows.append(_row(strategy, count, runner(cfg)))
        except Exception as exc:
            log.error("sweep cell %s/%s failed: %s", strategy, count, exc)
            failure = failure or exc
        result.write_csv(csv_path)
    if failure is not None:
        raise failure
    return result


def run_bo(config: ExperimentConfig, space: SearchSpace = SearchSpace(), iters: int = 25, seed: int | None = None,
           csv_path=None):
    """Bayesian optimisation of the augmentation mix; objective = shifted-validation accuracy."""
    val = make_shifted_domain(config, split="val")

    def objective(counts):
        cfg = replace(config, plan=dict(counts), domains=[])
        return run_pipeline(cfg, extra_domains={"shifted-val": val}).metrics["shifted-val"].accuracy

    res = optimize_mix(objective, space, iters, config.master_seed if seed is None else seed)
    res.write_csv(csv_path or Path(config.out_dir) / "bo_history.csv")
    return res
