"""Training loop: online pseudo-anomaly augmentation, gradient accumulation,
Adam updates under a cosine-annealed learning rate, CSV loss logging, and
checkpointing."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from cfad.dagen import DaGenParams, generate_anomalies
from cfad.geometry import PointCloud
from cfad.losses import LossConfig, combined_loss
from cfad.network import CfpNet, NetworkConfig, save_checkpoint


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr_initial: float = 0.001                 # 0.0015 for the pruned variant
    lr_min: float = 0.0
    epochs: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    checkpoint_every: int = 50
    # None: each epoch is one shuffled pass over the training clouds.
    # Otherwise: each epoch draws this many clouds with replacement, which
    # decouples the update count from the (possibly tiny) training-set size.
    samples_per_epoch: int | None = None

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (self.lr_initial > self.lr_min >= 0):
            raise ValueError("need lr_initial > lr_min >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 1:
            raise ValueError("samples_per_epoch must be >= 1 when set")


def default_lr(variant: str) -> float:
    return 0.0015 if variant == "pruned" else 0.001


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Cosine annealing from lr_initial at epoch 0 down to lr_min at the last epoch."""
    if not (0 <= epoch <= config.epochs):
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    span = config.lr_initial - config.lr_min
    return config.lr_min + 0.5 * span * (1.0 + math.cos(math.pi * epoch / config.epochs))


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch, sample, lr, terms):
        self.epoch, self.sample, self.lr, self.terms = epoch, sample, lr, terms
        bad = [k for k, v in terms.items() if not math.isfinite(v)]
        super().__init__(
            f"non-finite loss at epoch {epoch}, sample {sample} (lr={lr:.6g}): "
            f"offending terms {bad}, values {terms}"
        )


def train(
    train_clouds: list[PointCloud],
    net_config: NetworkConfig,
    da_params: DaGenParams,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path | None = None,
    net: CfpNet | None = None,
    start_epoch: int = 0,
):
    """Train a corrective-force network on normal clouds.

    Each epoch walks the training clouds in a seeded shuffled order, generates
    fresh pseudo-anomalies, accumulates gradients over up to batch_size
    samples per optimizer step, and logs per-epoch mean loss terms. Returns
    (net, log_rows); when out_dir is given, also writes loss.csv and
    checkpoints there.
    """
    if not train_clouds:
        raise ValueError("empty training set")
    train_cfg.validate()
    loss_cfg.validate()

    if net is None:
        net = CfpNet(net_config, seed=train_cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    opt = torch.optim.Adam(
        net.parameters(), lr=train_cfg.lr_initial, betas=(train_cfg.beta1, train_cfg.beta2)
    )
    log_rows = []
    for epoch in range(start_epoch, train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        order_rng = np.random.default_rng([train_cfg.seed, 7919, epoch])
        if train_cfg.samples_per_epoch is None:
            order = order_rng.permutation(len(train_clouds))
        else:
            order = order_rng.integers(
                len(train_clouds), size=train_cfg.samples_per_epoch
            )

        t0 = time.perf_counter()
        sums = {"dist": 0.0, "dir": 0.0, "sym": 0.0, "comb": 0.0}
        n_samples = 0
        in_batch = 0
        opt.zero_grad()
        for pos, cloud_idx in enumerate(order):
            sample_seed = int(
                np.random.default_rng(
                    [train_cfg.seed, epoch, int(cloud_idx), pos]
                ).integers(2**31)
            )
            params = replace(da_params, rng_seed=sample_seed)
            sample = generate_anomalies(train_clouds[cloud_idx], params)
            ext, inte = net.forward_points(sample.perturbed)
            displacement = torch.as_tensor(sample.displacement, dtype=net.dtype)
            total, terms = combined_loss(ext, inte, displacement, loss_cfg)
            term_vals = {k: float(v.detach()) for k, v in terms.items()}
            term_vals["comb"] = float(total.detach())
            if not all(math.isfinite(v) for v in term_vals.values()):
                raise NonFiniteLossError(epoch, pos, lr, term_vals)
            (total / train_cfg.batch_size).backward()
            for k in sums:
                sums[k] += term_vals[k]
            n_samples += 1
            in_batch += 1
            if in_batch == train_cfg.batch_size or pos == len(order) - 1:
                opt.step()
                opt.zero_grad()
                in_batch = 0

        wall = time.perf_counter() - t0
        row = {
            "epoch": epoch,
            "lr": lr,
            "L_dist": sums["dist"] / n_samples,
            "L_dir": sums["dir"] / n_samples,
            "L_sym": sums["sym"] / n_samples,
            "L_comb": sums["comb"] / n_samples,
            "wall_seconds": wall,
        }
        log_rows.append(row)
        if out_dir is not None and (
            (epoch + 1) % train_cfg.checkpoint_every == 0 or epoch == train_cfg.epochs - 1
        ):
            save_checkpoint(out_dir / "checkpoint.npz", net, step=epoch + 1)

    if out_dir is not None:
        with open(out_dir / "loss.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(log_rows[0]))
            writer.writeheader()
            writer.writerows(log_rows)
        save_checkpoint(out_dir / "checkpoint.npz", net, step=train_cfg.epochs)
    return net, log_rows
