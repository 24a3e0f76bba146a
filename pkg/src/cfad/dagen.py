"""Diverse pseudo-anomaly generation on normal point clouds.

A subset of randomly seeded KNN patches is displaced along a direction that is
dominated by the seed normal with a small random deviation, attenuated away
from the patch center, and optionally stretched (narrowed) by the sigma term.
The per-point displacement field and its support mask are returned as exact
training supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from cfad.geometry import PointCloud, PatchIndex, estimate_normals, sample_patches


@dataclass
class DaGenParams:
    G: int = 64
    K: int | None = None                      # default ceil(n / G)
    gamma_range: tuple[float, float] = (0.06, 0.12)
    lambda_range: tuple[float, float] = (0.95, 1.0)
    sigma_range: tuple[float, float] = (0.0, 0.08)
    perturb_fraction: float = 0.10
    rng_seed: int = 0

    def validate(self):
        lo, hi = self.gamma_range
        if not (0 < lo <= hi < 1):
            raise ValueError(f"gamma_range must lie in (0, 1), got {self.gamma_range}")
        lo, hi = self.lambda_range
        if not (0 <= lo <= hi <= 1):
            raise ValueError(f"lambda_range must lie in [0, 1], got {self.lambda_range}")
        lo, hi = self.sigma_range
        if not (0 <= lo <= hi < 1):
            raise ValueError(f"sigma_range must lie in [0, 1), got {self.sigma_range}")
        if not (0 < self.perturb_fraction <= 1):
            raise ValueError("perturb_fraction must be in (0, 1]")
        if self.G < 1:
            raise ValueError("G must be >= 1")


@dataclass
class PatchPerturbation:
    """Record of one displaced patch: drawn parameters plus attenuation."""

    patch: PatchIndex
    beta: int
    gamma: float
    lam: float
    sigma: float
    eta: np.ndarray                           # random unit direction
    pi: np.ndarray                            # per-member attenuation in [0, 1]


@dataclass
class PseudoAnomalySample:
    perturbed: PointCloud
    displacement: np.ndarray                  # (n, 3), zero outside patches
    mask: np.ndarray                          # (n,) 0/1
    perturbations: list = field(default_factory=list)


def attenuation(patch: PatchIndex, cloud: PointCloud) -> np.ndarray:
    """Attenuation pi: 1 at the seed, decaying linearly in projected in-plane distance.

    The distance of each member from the seed is projected onto the seed's
    tangent plane; pi = 1 - rho / max(rho), so the farthest in-plane member
    gets zero. A patch whose members all project onto the seed gets all ones.
    """
    rel = cloud.points[patch.members] - cloud.points[patch.seed]
    nu = patch.seed_normal
    in_plane = rel - np.outer(rel @ nu, nu)
    rho = np.linalg.norm(in_plane, axis=1)
    rho_max = rho.max()
    if rho_max <= 0:
        return np.ones(len(rho))
    return 1.0 - rho / rho_max


def perturb_patch(
    patch: PatchIndex,
    pi: np.ndarray,
    beta: int,
    gamma: float,
    lam: float,
    sigma: float,
    eta: np.ndarray,
) -> np.ndarray:
    """Displacement rows for one patch's members.

    direction = beta * lam * nu + (1 - lam) * eta, scaled per member by
    gamma * pi * (1 - sigma * |pi|). pi is already normalized to max 1.
    """
    direction = beta * lam * patch.seed_normal + (1.0 - lam) * eta
    scale = gamma * pi * (1.0 - sigma * np.abs(pi))
    return scale[:, None] * direction[None, :]


def _unit_sphere_sample(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    norm = np.linalg.norm(v)
    while norm < 1e-12:
        v = rng.normal(size=3)
        norm = np.linalg.norm(v)
    return v / norm


def generate_anomalies(cloud: PointCloud, params: DaGenParams) -> PseudoAnomalySample:
    """Turn a normal cloud into a pseudo-anomaly sample with exact supervision.

    Samples G patches, displaces round(perturb_fraction * G) of them (at least
    one), sums overlapping displacements in ascending patch order, and returns
    the perturbed cloud, the displacement field, and its mask. Deterministic
    given (cloud, params).
    """
    params.validate()
    n = len(cloud)
    if cloud.normals is None:
        cloud = estimate_normals(cloud)
    K = params.K if params.K is not None else math.ceil(n / params.G)
    if params.G > n:
        raise ValueError(f"G={params.G} exceeds point count {n}")
    if K > n:
        raise ValueError(f"K={K} exceeds point count {n}")

    rng = np.random.default_rng(params.rng_seed)
    patches = sample_patches(cloud, params.G, K, rng)
    n_perturb = max(1, round(params.perturb_fraction * params.G))
    chosen = np.sort(rng.choice(params.G, size=n_perturb, replace=False))

    displacement = np.zeros((n, 3))
    records = []
    for idx in chosen:
        patch = patches[idx]
        beta = 1 if rng.random() < 0.5 else -1
        gamma = rng.uniform(*params.gamma_range)
        lam = rng.uniform(*params.lambda_range)
        sigma = rng.uniform(*params.sigma_range)
        eta = _unit_sphere_sample(rng)
        pi = attenuation(patch, cloud)
        displacement[patch.members] += perturb_patch(patch, pi, beta, gamma, lam, sigma, eta)
        records.append(PatchPerturbation(patch, beta, gamma, lam, sigma, eta, pi))

    mask = (np.linalg.norm(displacement, axis=1) > 0).astype(np.int64)
    perturbed = PointCloud(cloud.points + displacement, cloud.normals.copy(), mask.copy())
    return PseudoAnomalySample(perturbed, displacement, mask, records)
