"""Dataset I/O and the synthetic intra-variance dataset generator.

Directory layout per class::

    root/<class>/train/*.xyz     normal clouds only
    root/<class>/test/*.xyz      mixed normal/anomalous clouds
    root/<class>/gt/*.txt        per-point 0/1 masks, aligned to test files by stem

plus a manifest.json at the root. Cloud formats: ASCII XYZ (one "x y z" per
line) and ASCII PLY with x,y,z and optional nx,ny,nz vertex properties.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from cfad.dagen import DaGenParams, generate_anomalies
from cfad.geometry import PointCloud, normalize_cloud

GENERATOR_VERSION = 1


# -- cloud / mask files ----------------------------------------------------


def load_cloud(path) -> PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return _load_ply(path)
    return _load_xyz(path)


def _load_xyz(path: Path) -> PointCloud:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: unparseable coordinate") from None
    if not rows:
        raise ValueError(f"{path}: empty cloud file")
    return PointCloud(np.array(rows))


def _load_ply(path: Path) -> PointCloud:
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_vertices = None
        properties = []
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "ascii":
                raise ValueError(f"{path}: only ascii PLY is supported")
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n_vertices = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                properties.append(tok[2])
            elif tok[0] == "end_header":
                break
        if n_vertices is None:
            raise ValueError(f"{path}: PLY has no vertex element")
        for name in ("x", "y", "z"):
            if name not in properties:
                raise ValueError(f"{path}: PLY missing vertex property {name!r}")
        has_normals = all(p in properties for p in ("nx", "ny", "nz"))
        cols = {p: i for i, p in enumerate(properties)}
        data = np.empty((n_vertices, len(properties)))
        for i in range(n_vertices):
            line = f.readline()
            parts = line.split()
            if len(parts) != len(properties):
                raise ValueError(f"{path}: vertex row {i} malformed")
            data[i] = [float(v) for v in parts]
    points = data[:, [cols["x"], cols["y"], cols["z"]]]
    normals = data[:, [cols["nx"], cols["ny"], cols["nz"]]] if has_normals else None
    return PointCloud(points, normals)


def save_cloud(path, cloud: PointCloud):
    """Write XYZ or PLY (by extension) atomically, coordinates as float32 text."""
    path = Path(path)
    pts = cloud.points.astype(np.float32)
    lines = []
    if path.suffix.lower() == ".ply":
        has_normals = cloud.normals is not None
        lines += ["ply", "format ascii 1.0", f"element vertex {len(pts)}"]
        lines += [f"property float {p}" for p in ("x", "y", "z")]
        if has_normals:
            lines += [f"property float {p}" for p in ("nx", "ny", "nz")]
        lines.append("end_header")
        normals = cloud.normals.astype(np.float32) if has_normals else None
        for i, p in enumerate(pts):
            row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
            if has_normals:
                n = normals[i]
                row += f" {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}"
            lines.append(row)
    else:
        lines = [f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in pts]
    _atomic_write(path, "\n".join(lines) + "\n")


def load_mask(path, expected_n: int) -> np.ndarray:
    values = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if line not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: mask entries must be 0 or 1, got {line!r}")
            values.append(int(line))
    if len(values) != expected_n:
        raise ValueError(f"{path}: mask length {len(values)} != expected {expected_n}")
    return np.array(values, dtype=np.int64)


def save_mask(path, mask: np.ndarray):
    _atomic_write(Path(path), "\n".join(str(int(v)) for v in mask) + "\n")


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- synthetic dataset -----------------------------------------------------


@dataclass
class SynthConfig:
    classes: tuple[str, ...] = ("sphere", "cylinder", "box")
    subclasses_per_class: int = 2
    points_per_cloud: int = 2048
    train_per_class: int = 4
    test_normal_per_class: int = 12
    test_anomalous_per_class: int = 12
    noise_variance: float = 0.002
    defect_params: DaGenParams = field(default_factory=DaGenParams)
    seed: int = 0

    def validate(self):
        known = {"sphere", "cylinder", "box", "cone"}
        unknown = set(self.classes) - known
        if unknown:
            raise ValueError(f"unknown primitive classes {sorted(unknown)}")
        for name in ("subclasses_per_class", "points_per_cloud", "train_per_class",
                     "test_normal_per_class", "test_anomalous_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be >= 0")
        self.defect_params.validate()


def _sample_primitive(shape: str, n: int, aspect: float, rng: np.random.Generator) -> PointCloud:
    """Sample n points on a primitive surface; aspect perturbs proportions per subclass."""
    if shape == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        pts = v * np.array([1.0, 1.0, aspect])
    elif shape == "cylinder":
        theta = rng.uniform(0, 2 * np.pi, n)
        z = rng.uniform(-aspect, aspect, n)
        pts = np.stack([np.cos(theta), np.sin(theta), z], axis=1)
    elif shape == "box":
        # Pick faces proportionally to area for a [-1,1] x [-1,1] x [-a,a] box.
        areas = np.array([2 * aspect, 2 * aspect, 2 * aspect, 2 * aspect, 2.0, 2.0])
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1, 1, n)
        v = rng.uniform(-1, 1, n)
        pts = np.empty((n, 3))
        for i in range(n):
            a, b = u[i], v[i]
            f = face[i]
            if f < 2:
                pts[i] = [(-1) ** f, a, b * aspect]
            elif f < 4:
                pts[i] = [a, (-1) ** f, b * aspect]
            else:
                pts[i] = [a, b, (-1) ** f * aspect]
    elif shape == "cone":
        # Lateral surface of a cone with apex at +aspect, base radius 1.
        u = np.sqrt(rng.uniform(0, 1, n))      # radial density on the unrolled surface
        theta = rng.uniform(0, 2 * np.pi, n)
        r = u
        z = aspect * (1 - u)
        pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    else:
        raise ValueError(f"unknown primitive {shape!r}")
    return normalize_cloud(PointCloud(pts))


def _subclass_aspect(subclass: int, n_subclasses: int) -> float:
    # Spread aspect ratios over [0.6, 1.4] so subclasses are visibly distinct.
    if n_subclasses == 1:
        return 1.0
    return 0.6 + 0.8 * subclass / (n_subclasses - 1)


def synthesize_dataset(cfg: SynthConfig, root) -> dict:
    """Generate the dataset tree on disk; returns the manifest dict.

    Normal clouds are noisy primitives; anomalous test clouds carry injected
    displacement defects whose masks are exact by construction. Gaussian
    coordinate noise (the configured variance) is added after defect
    injection. Fully seeded and deterministic.
    """
    cfg.validate()
    root = Path(root)
    noise_std = math.sqrt(cfg.noise_variance)
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": cfg.seed,
        "noise_variance": cfg.noise_variance,
        "points_per_cloud": cfg.points_per_cloud,
        "classes": {},
    }
    for ci, cls in enumerate(cfg.classes):
        cls_dir = root / cls
        counts = {"train": 0, "test_normal": 0, "test_anomalous": 0}

        def make_clean(kind_code: int, index: int):
            sub = index % cfg.subclasses_per_class
            aspect = _subclass_aspect(sub, cfg.subclasses_per_class)
            rng = np.random.default_rng([cfg.seed, ci, kind_code, index])
            return _sample_primitive(cls, cfg.points_per_cloud, aspect, rng), rng

        for i in range(cfg.train_per_class):
            cloud, rng = make_clean(0, i)
            noisy = PointCloud(cloud.points + rng.normal(0, noise_std, cloud.points.shape))
            save_cloud(cls_dir / "train" / f"{cls}_train_{i:03d}.xyz", noisy)
            counts["train"] += 1

        for i in range(cfg.test_normal_per_class):
            cloud, rng = make_clean(1, i)
            noisy = PointCloud(cloud.points + rng.normal(0, noise_std, cloud.points.shape))
            stem = f"{cls}_good_{i:03d}"
            save_cloud(cls_dir / "test" / f"{stem}.xyz", noisy)
            save_mask(cls_dir / "gt" / f"{stem}.txt", np.zeros(len(noisy), dtype=np.int64))
            counts["test_normal"] += 1

        for i in range(cfg.test_anomalous_per_class):
            cloud, rng = make_clean(2, i)
            defect_seed = int(rng.integers(2**31))
            params = DaGenParams(**{**asdict(cfg.defect_params), "rng_seed": defect_seed})
            sample = generate_anomalies(cloud, params)
            noisy = PointCloud(
                sample.perturbed.points + rng.normal(0, noise_std, cloud.points.shape)
            )
            stem = f"{cls}_defect_{i:03d}"
            save_cloud(cls_dir / "test" / f"{stem}.xyz", noisy)
            save_mask(cls_dir / "gt" / f"{stem}.txt", sample.mask)
            counts["test_anomalous"] += 1

        manifest["classes"][cls] = {
            "subclasses": cfg.subclasses_per_class,
            **counts,
        }
    _atomic_write(root / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# -- dataset loading -------------------------------------------------------


def list_classes(root) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    return sorted(p.name for p in root.iterdir() if p.is_dir())


def load_train_clouds(root, cls: str, normalize: bool = True) -> list[PointCloud]:
    train_dir = Path(root) / cls / "train"
    clouds = []
    for path in sorted(train_dir.iterdir()):
        cloud = load_cloud(path)
        clouds.append(normalize_cloud(cloud) if normalize else cloud)
    if not clouds:
        raise ValueError(f"no training clouds under {train_dir}")
    return clouds


def load_test_set(root, classes=None, normalize: bool = True) -> dict:
    """Return {class: [(cloud, object_label, mask_or_None), ...]} for evaluate()."""
    root = Path(root)
    classes = classes or list_classes(root)
    test_set = {}
    for cls in classes:
        test_dir = root / cls / "test"
        gt_dir = root / cls / "gt"
        items = []
        for path in sorted(test_dir.iterdir()):
            cloud = load_cloud(path)
            mask_path = gt_dir / f"{path.stem}.txt"
            if mask_path.exists():
                mask = load_mask(mask_path, len(cloud))
                label = int(mask.max())
            else:
                mask, label = None, 0          # declared normal by absence
            if normalize:
                cloud = normalize_cloud(cloud)
            items.append((cloud, label, mask))
        if not items:
            raise ValueError(f"no test clouds under {test_dir}")
        test_set[cls] = items
    return test_set
