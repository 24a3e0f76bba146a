"""Corrective force prediction network on sparse voxels.

Encoder / bottleneck / decoder of 3x3x3 sparse convolutions at a single voxel
resolution, with sigmoid-gated complementary skip connections feeding each
decoder block, followed by a shared per-point MLP head that emits six force
channels (external + internal, summed into the resultant).

Convolutions operate on the occupied-voxel set only: each voxel gathers the
features of its (up to 27) occupied stencil neighbors, with absent neighbors
contributing zeros.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, asdict, field

import numpy as np
import torch
import torch.nn as nn

from cfad.geometry import PointCloud, voxelize

_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)

CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    variant: str = "full"                     # "full" or "pruned"
    base_channels: int = 32
    # None selects the variant default: (32, 32, 32, 16) full, (24, 16) pruned.
    decoder_channels: tuple[int, ...] | None = None
    head_hidden: tuple[int, ...] = (32, 16)
    voxel_size: float = 0.03
    kernel_size: int = 3

    @property
    def resolved_decoder_channels(self) -> tuple[int, ...]:
        if self.decoder_channels is not None:
            return tuple(self.decoder_channels)
        return (32, 32, 32, 16) if self.variant == "full" else (24, 16)

    def validate(self):
        if self.variant not in ("full", "pruned"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.kernel_size != 3:
            raise ValueError("only 3x3x3 kernels are supported")
        if self.voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if len(self.resolved_decoder_channels) < self.n_decoder_blocks:
            raise ValueError("decoder_channels shorter than decoder block count")

    @property
    def n_encoder_convs(self) -> int:
        return 2 if self.variant == "full" else 1

    @property
    def n_bottleneck_convs(self) -> int:
        return 4 if self.variant == "full" else 2

    @property
    def n_decoder_blocks(self) -> int:
        return 4 if self.variant == "full" else 2


@dataclass
class ForcePrediction:
    """Per-point external/internal corrective forces and their resultant."""

    external: np.ndarray                      # (n, 3)
    internal: np.ndarray                      # (n, 3)
    resultant: np.ndarray = field(default=None)

    def __post_init__(self):
        self.external = np.asarray(self.external, dtype=np.float64)
        self.internal = np.asarray(self.internal, dtype=np.float64)
        if self.external.shape != self.internal.shape:
            raise ValueError("external/internal shapes differ")
        if self.resultant is None:
            self.resultant = self.external + self.internal
        else:
            self.resultant = np.asarray(self.resultant, dtype=np.float64)
        if not (np.isfinite(self.external).all() and np.isfinite(self.internal).all()):
            raise ValueError("non-finite force prediction")


def neighbor_table(voxel_coords: np.ndarray) -> np.ndarray:
    """(n_v, 27) indices of each voxel's stencil neighbors; n_v marks absent cells."""
    n_v = len(voxel_coords)
    lookup = {tuple(c): i for i, c in enumerate(voxel_coords)}
    table = np.full((n_v, 27), n_v, dtype=np.int64)
    for k, off in enumerate(_OFFSETS):
        for i, c in enumerate(voxel_coords):
            j = lookup.get((c[0] + off[0], c[1] + off[1], c[2] + off[2]))
            if j is not None:
                table[i, k] = j
    return table


class SparseConv(nn.Module):
    """3x3x3 convolution over an occupied-voxel set via neighbor gather."""

    def __init__(self, in_channels: int, out_channels: int, generator: torch.Generator,
                 dtype=torch.float32):
        super().__init__()
        fan_in = 27 * in_channels
        bound = 1.0 / np.sqrt(fan_in)
        w = torch.empty(27, in_channels, out_channels, dtype=dtype)
        b = torch.empty(out_channels, dtype=dtype)
        w.uniform_(-bound, bound, generator=generator)
        b.uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(b)

    def forward(self, feats: torch.Tensor, nbr: torch.Tensor) -> torch.Tensor:
        # feats: (n_v, C_in); nbr: (n_v, 27) with value n_v for missing neighbors.
        zero = feats.new_zeros(1, feats.shape[1])
        padded = torch.cat([feats, zero], dim=0)
        gathered = padded[nbr]                                # (n_v, 27, C_in)
        out = torch.einsum("nkc,kcd->nd", gathered, self.weight)
        return out + self.bias


class MCSkipBlock(nn.Module):
    """Sigmoid-gated complementary fusion of decoder and skip features.

    fused = alpha * relu(proj_decoder(dec)) + (1 - alpha) * relu(proj_skip(skip))
    with alpha = sigmoid(gate(proj_skip(skip))), one gate channel per voxel.
    """

    def __init__(self, dec_channels: int, skip_channels: int, out_channels: int,
                 generator: torch.Generator, dtype=torch.float32):
        super().__init__()
        self.proj_decoder = SparseConv(dec_channels, out_channels, generator, dtype)
        self.proj_skip = SparseConv(skip_channels, out_channels, generator, dtype)
        self.gate = SparseConv(out_channels, 1, generator, dtype)

    def forward(self, dec: torch.Tensor, skip: torch.Tensor, nbr: torch.Tensor,
                gate_override: float | None = None) -> torch.Tensor:
        s = self.proj_skip(skip, nbr)
        d = self.proj_decoder(dec, nbr)
        if gate_override is None:
            alpha = torch.sigmoid(self.gate(s, nbr))
        else:
            alpha = torch.full_like(s[:, :1], float(gate_override))
        return alpha * torch.relu(d) + (1.0 - alpha) * torch.relu(s)

    def gate_values(self, skip: torch.Tensor, nbr: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.gate(self.proj_skip(skip, nbr), nbr))


class CfpNet(nn.Module):
    """Sparse voxel U-Net emitting 6 per-point force channels."""

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.seed = seed
        self.dtype = dtype
        gen = torch.Generator().manual_seed(seed)
        C = config.base_channels

        enc = [SparseConv(1, C, gen, dtype)]
        enc += [SparseConv(C, C, gen, dtype) for _ in range(config.n_encoder_convs - 1)]
        self.encoder = nn.ModuleList(enc)
        self.bottleneck = nn.ModuleList(
            SparseConv(C, C, gen, dtype) for _ in range(config.n_bottleneck_convs)
        )
        blocks, posts = [], []
        prev = C
        for j in range(config.n_decoder_blocks):
            width = config.resolved_decoder_channels[j]
            blocks.append(MCSkipBlock(prev, C, width, gen, dtype))
            posts.append(SparseConv(width, width, gen, dtype))
            prev = width
        self.skip_blocks = nn.ModuleList(blocks)
        self.post_convs = nn.ModuleList(posts)

        head = []
        h_prev = prev
        for h in config.head_hidden:
            head += [nn.Linear(h_prev, h, dtype=dtype), nn.ReLU()]
            h_prev = h
        head.append(nn.Linear(h_prev, 6, dtype=dtype))
        self.head = nn.Sequential(*head)
        for m in self.head:
            if isinstance(m, nn.Linear):
                bound = 1.0 / np.sqrt(m.in_features)
                with torch.no_grad():
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.uniform_(-bound, bound, generator=gen)

    # -- forward -----------------------------------------------------------

    def voxel_forward(self, nbr: torch.Tensor, n_voxels: int,
                      gate_override: float | None = None) -> torch.Tensor:
        """Run the conv stack on constant-1 occupancy features; returns voxel features."""
        x = torch.ones(n_voxels, 1, dtype=self.dtype, device=nbr.device)
        for conv in self.encoder:
            x = torch.relu(conv(x, nbr))
        skips = [x]                                            # encoder output
        for conv in self.bottleneck:
            x = torch.relu(conv(x, nbr))
            skips.append(x)
        # Decoder block j consumes skip features in reverse depth order,
        # starting from the next-to-last bottleneck output down to the encoder.
        for j, (block, post) in enumerate(zip(self.skip_blocks, self.post_convs)):
            skip = skips[-2 - j]
            x = block(x, skip, nbr, gate_override)
            x = torch.relu(post(x, nbr))
        return x

    def forward_points(self, cloud: PointCloud,
                       gate_override: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Forward pass on one cloud; returns (external, internal) force tensors."""
        if len(cloud) < 1:
            raise ValueError("empty cloud")
        grid = voxelize(cloud, self.config.voxel_size)
        nbr = torch.from_numpy(neighbor_table(grid.voxel_coords))
        voxel_feats = self.voxel_forward(nbr, grid.n_voxels, gate_override)
        point_feats = voxel_feats[torch.from_numpy(grid.point_to_voxel)]
        forces = self.head(point_feats)                        # (n, 6)
        return forces[:, :3], forces[:, 3:]

    def predict(self, cloud: PointCloud) -> ForcePrediction:
        with torch.no_grad():
            ext, inte = self.forward_points(cloud)
        return ForcePrediction(ext.numpy(), inte.numpy())


def parameter_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(path, net: CfpNet, step: int = 0):
    """Write (format version, config JSON, float32 parameter arrays, seed, step)."""
    arrays = {
        f"param/{name}": p.detach().numpy().astype(np.float32)
        for name, p in net.named_parameters()
    }
    np.savez(
        path,
        format_version=np.int64(CHECKPOINT_VERSION),
        config_json=np.frombuffer(
            json.dumps(asdict(net.config)).encode(), dtype=np.uint8
        ),
        rng_seed=np.int64(net.seed),
        step=np.int64(step),
        **arrays,
    )


def load_checkpoint(path, dtype=torch.float32) -> tuple[CfpNet, int]:
    """Rebuild a network from a checkpoint; returns (net, step)."""
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        cfg_dict = json.loads(bytes(data["config_json"]).decode())
        if cfg_dict["decoder_channels"] is not None:
            cfg_dict["decoder_channels"] = tuple(cfg_dict["decoder_channels"])
        cfg_dict["head_hidden"] = tuple(cfg_dict["head_hidden"])
        config = NetworkConfig(**cfg_dict)
        net = CfpNet(config, seed=int(data["rng_seed"]), dtype=dtype)
        state = {}
        for key in data.files:
            if key.startswith("param/"):
                state[key[len("param/"):]] = torch.tensor(data[key], dtype=dtype)
        missing = set(dict(net.named_parameters())) - set(state)
        if missing:
            raise ValueError(f"checkpoint missing parameters: {sorted(missing)}")
        net.load_state_dict(state, strict=True)
        return net, int(data["step"])
