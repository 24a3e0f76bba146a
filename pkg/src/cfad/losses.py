"""Combined training objective: symmetry + distance + direction terms.

All terms accept torch tensors (for autograd during training) or numpy arrays
(converted on the fly). Epsilon-regularized normalizations guard zero vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class LossConfig:
    epsilon: float = 1e-8
    # "corrective": supervision target is -F_D (the restoring field);
    # "damage": target is +F_D. Score magnitudes are identical either way.
    target_sign: str = "corrective"

    def validate(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.target_sign not in ("corrective", "damage"):
            raise ValueError(f"unknown target_sign {self.target_sign!r}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def sym_loss(external, internal, epsilon: float = 1e-8) -> torch.Tensor:
    """Anti-symmetry term between the internal and external force heads.

    Per point: L1 distance of the two forces normalized by the sum of their
    L2 norms, minus the epsilon-regularized cosine of their angle; averaged
    over points.
    """
    fe, fi = _as_tensor(external), _as_tensor(internal)
    if fe.shape != fi.shape:
        raise ValueError("external/internal shapes differ")
    ne = torch.linalg.norm(fe, dim=1)
    ni = torch.linalg.norm(fi, dim=1)
    ratio = torch.abs(fi - fe).sum(dim=1) / (ni + ne + epsilon)
    cos = (fi * fe).sum(dim=1) / ((ni + epsilon) * (ne + epsilon))
    return (ratio - cos).mean()


def dist_loss(resultant, target) -> torch.Tensor:
    """Mean per-point L2 distance between resultant force and supervision."""
    fc, t = _as_tensor(resultant), _as_tensor(target)
    if fc.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(fc.shape)} vs {tuple(t.shape)}")
    return torch.linalg.norm(t - fc, dim=1).mean()


def dir_loss(resultant, target, epsilon: float = 1e-8) -> torch.Tensor:
    """Negative mean of epsilon-regularized cosine similarities.

    Zero-target rows contribute ~0: their regularized unit vector vanishes.
    """
    fc, t = _as_tensor(resultant), _as_tensor(target)
    if fc.shape != t.shape:
        raise ValueError(f"shape mismatch: {tuple(fc.shape)} vs {tuple(t.shape)}")
    nt = torch.linalg.norm(t, dim=1)
    nc = torch.linalg.norm(fc, dim=1)
    cos = (t * fc).sum(dim=1) / ((nt + epsilon) * (nc + epsilon))
    return -cos.mean()


def supervision_target(displacement, cfg: LossConfig) -> torch.Tensor:
    """Apply the target-sign convention to a stored displacement field."""
    d = _as_tensor(displacement)
    return -d if cfg.target_sign == "corrective" else d


def combined_loss(external, internal, displacement, cfg: LossConfig | None = None):
    """Sum of the three terms; returns (total, breakdown dict) for logging."""
    cfg = cfg or LossConfig()
    cfg.validate()
    fe, fi = _as_tensor(external), _as_tensor(internal)
    fc = fe + fi
    target = supervision_target(displacement, cfg)
    terms = {
        "dist": dist_loss(fc, target),
        "dir": dir_loss(fc, target, cfg.epsilon),
        "sym": sym_loss(fe, fi, cfg.epsilon),
    }
    total = terms["dist"] + terms["dir"] + terms["sym"]
    return total, terms
