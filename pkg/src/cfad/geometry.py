"""Deterministic point-cloud primitives shared by every pipeline stage.

Normalization, PCA normal estimation, patch sampling, and sparse voxelization
with bidirectional point/voxel index maps. All functions are pure: same inputs
(including rng seed) give bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

# Orientation tie-break: prefer +z, then +y, then +x.
TIE_BREAK_AXES = np.array([[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])


@dataclass
class PointCloud:
    """n x 3 coordinates with optional unit normals and per-point 0/1 labels."""

    points: np.ndarray
    normals: np.ndarray | None = None
    point_labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {self.points.shape}")
        if len(self.points) < 1:
            raise ValueError("point cloud must contain at least one point")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals shape must match points")
        if self.point_labels is not None:
            self.point_labels = np.asarray(self.point_labels, dtype=np.int64)
            if self.point_labels.shape != (len(self.points),):
                raise ValueError("point_labels must be length n")

    def __len__(self):
        return len(self.points)

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.points.copy(),
            None if self.normals is None else self.normals.copy(),
            None if self.point_labels is None else self.point_labels.copy(),
        )


@dataclass
class VoxelGrid:
    """Sparse occupancy grid with point<->voxel index maps.

    voxel_coords are lexicographically sorted integer triples; every point
    index appears in exactly one voxel's member list.
    """

    voxel_size: float
    voxel_coords: np.ndarray          # (n_v, 3) int64
    point_to_voxel: np.ndarray        # (n,) int64
    voxel_to_points: list = field(default_factory=list)

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_coords)


@dataclass
class PatchIndex:
    """A seed point plus its K nearest neighbors (seed included)."""

    seed: int
    members: np.ndarray               # (K,) int64
    seed_normal: np.ndarray           # (3,) unit vector


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale so the max point radius is 1.

    A degenerate cloud whose points all coincide is centered but not scaled.
    Normals, if present, are carried through unchanged.
    """
    pts = cloud.points
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        raise ValueError(f"non-finite coordinate at point index {int(np.flatnonzero(bad)[0])}")
    centered = pts - pts.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius > 0:
        centered = centered / radius
    return PointCloud(
        centered,
        None if cloud.normals is None else cloud.normals.copy(),
        None if cloud.point_labels is None else cloud.point_labels.copy(),
    )


def _orient(normal: np.ndarray, outward: np.ndarray) -> np.ndarray:
    """Flip ``normal`` so it points along ``outward``; tie-break toward +z/+y/+x."""
    dot = float(normal @ outward)
    if abs(dot) > 1e-12:
        return normal if dot > 0 else -normal
    for axis in TIE_BREAK_AXES:
        comp = float(normal @ axis)
        if abs(comp) > 1e-12:
            return normal if comp > 0 else -normal
    return normal


def estimate_normals(cloud: PointCloud, k: int = 16, return_warnings: bool = False):
    """Per-point PCA normals from the k nearest neighbors.

    The normal is the smallest-eigenvalue eigenvector of the neighborhood
    covariance, oriented to have non-negative dot product with the radial
    direction (point minus centroid). Degenerate neighborhoods (covariance
    rank < 2) get the tie-break vector +z and are reported in the warning
    list when ``return_warnings`` is set.
    """
    n = len(cloud)
    if not (3 <= k <= n):
        raise ValueError(f"need 3 <= k <= n, got k={k}, n={n}")
    pts = cloud.points
    centroid = pts.mean(axis=0)
    tree = cKDTree(pts)
    _, nbr = tree.query(pts, k=k)
    normals = np.empty((n, 3))
    degenerate = []
    for i in range(n):
        local = pts[nbr[i]]
        local = local - local.mean(axis=0)
        cov = local.T @ local
        evals, evecs = np.linalg.eigh(cov)
        scale = max(float(evals[-1]), 1.0e-30)
        if evals[1] / scale < 1e-9:
            normals[i] = TIE_BREAK_AXES[0]
            degenerate.append(i)
            continue
        normals[i] = _orient(evecs[:, 0], pts[i] - centroid)
    out = PointCloud(pts.copy(), normals, None if cloud.point_labels is None else cloud.point_labels.copy())
    if return_warnings:
        return out, degenerate
    return out


def sample_patches(cloud: PointCloud, G: int, K: int, rng: np.random.Generator) -> list[PatchIndex]:
    """Draw G random seeds without replacement; each patch is the seed's K nearest neighbors.

    KNN ties are broken by lower point index so the result is deterministic.
    """
    n = len(cloud)
    if G < 1 or G > n:
        raise ValueError(f"need 1 <= G <= n, got G={G}, n={n}")
    if K < 1 or K > n:
        raise ValueError(f"need 1 <= K <= n, got K={K}, n={n}")
    if cloud.normals is None:
        raise ValueError("cloud normals required for patch sampling")
    pts = cloud.points
    seeds = np.sort(rng.choice(n, size=G, replace=False))
    patches = []
    for s in seeds:
        d = np.linalg.norm(pts - pts[s], axis=1)
        order = np.lexsort((np.arange(n), d))
        patches.append(PatchIndex(int(s), order[:K].astype(np.int64), cloud.normals[s].copy()))
    return patches


def voxelize(cloud: PointCloud, voxel_size: float = 0.03) -> VoxelGrid:
    """Quantize points to floor(coordinate / voxel_size) integer cells."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    coords = np.floor(cloud.points / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(coords, axis=0, return_inverse=True)
    inverse = inverse.ravel().astype(np.int64)
    members = [[] for _ in range(len(uniq))]
    for i, v in enumerate(inverse):
        members[v].append(i)
    return VoxelGrid(voxel_size, uniq, inverse, members)


def devoxelize(grid: VoxelGrid, voxel_features: np.ndarray) -> np.ndarray:
    """Broadcast one feature row per voxel back to its member points."""
    voxel_features = np.asarray(voxel_features)
    if len(voxel_features) != grid.n_voxels:
        raise ValueError(
            f"feature rows ({len(voxel_features)}) != voxel count ({grid.n_voxels})"
        )
    return voxel_features[grid.point_to_voxel]
