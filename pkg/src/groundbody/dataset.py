"""Dataset manifests: JSON index of PCD files plus scene metadata.

Layout::

    <root>/manifest.json
    <root>/clouds/<id>.pcd

Every entry holds ``id``, ``pcd_path`` (relative to the manifest), ``label``,
``seed`` and ``params`` (the scene description). Augmented entries add a
``provenance`` record.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .cloudcore import read_pcd, save_pcd
from .synthgen import CameraModel, SampleSpec, Scene, derive_seed, generate_sample

MANIFEST_VERSION = 1


@dataclass
class Manifest:
    root: Path
    entries: list = field(default_factory=list)
    camera: dict | None = None

    def __len__(self):
        return len(self.entries)

    def path_of(self, entry) -> Path:
        return self.root / entry["pcd_path"]

    def load_cloud(self, entry):
        return read_pcd(self.path_of(entry))

    def scene_of(self, entry) -> Scene:
        return Scene.from_json(entry["params"]["scene"])

    def camera_model(self) -> CameraModel:
        return CameraModel.from_json(self.camera) if self.camera else CameraModel.default()

    def to_json(self) -> dict:
        return {"version": MANIFEST_VERSION, "camera": self.camera, "entries": self.entries}

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        d = json.loads(path.read_text())
        if d.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {d.get('version')}")
        return cls(path.parent, d["entries"], d.get("camera"))

    def merged(self, other: "Manifest") -> "Manifest":
        """Entries of both manifests, with ``other``'s paths rebased onto this root."""
        rebased = []
        for e in other.entries:
            e = dict(e)
            for key in ("pcd_path", "pgm_path"):
                if e.get(key):
                    e[key] = os.path.relpath((other.root / e[key]).resolve(), self.root.resolve())
            rebased.append(e)
        return Manifest(self.root, self.entries + rebased, self.camera)


def _make_one(args):
    spec, seed, camera, path = args
    cloud, scene = generate_sample(spec, seed, camera)
    save_pcd(cloud, path)
    return scene.to_json()


def synthesize(root, specs: dict, master_seed: int, camera: CameraModel | None = None,
               prefix: str = "", workers: int = 1) -> Manifest:
    """Generate ``{label: (SampleSpec, count)}`` samples into ``root``.

    Sample ``i`` of label ``L`` uses seed ``derive_seed(master, prefix, L, i)``,
    so output does not depend on ``workers``.
    """
    root = Path(root)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    camera = camera or CameraModel.default()
    jobs, entries = [], []
    for label, (spec, count) in specs.items():
        for i in range(count):
            seed = derive_seed(master_seed, prefix, label, i)
            sid = f"{prefix}{label}-{i:05d}"
            rel = f"clouds/{sid}.pcd"
            jobs.append((spec, seed, camera, root / rel))
            entries.append({"id": sid, "pcd_path": rel, "label": label, "seed": seed,
                            "params": {"spec": spec.to_json()}})
    scenes = parallel_map(_make_one, jobs, workers)
    for e, s in zip(entries, scenes):
        e["params"]["scene"] = s
    return Manifest(root, entries, camera.to_json())


def parallel_map(fn, items, workers: int = 1):
    """Ordered map; results are independent of the worker count."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
