import numpy as np
import pytest
import torch

from cfad.geometry import PointCloud, normalize_cloud, voxelize
from cfad.network import (
    CfpNet,
    NetworkConfig,
    SparseConv,
    load_checkpoint,
    neighbor_table,
    parameter_count,
    save_checkpoint,
)

TINY = dict(base_channels=8, voxel_size=0.1)


def sphere_cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return normalize_cloud(PointCloud(pts))


class TestStructure:
    def test_block_counts(self):
        full = CfpNet(NetworkConfig(**TINY))
        pruned = CfpNet(NetworkConfig(variant="pruned", **TINY))
        assert len(full.skip_blocks) == 4 and len(pruned.skip_blocks) == 2
        assert len(full.encoder) == 2 and len(pruned.encoder) == 1
        assert len(full.bottleneck) == 4 and len(pruned.bottleneck) == 2

    def test_pruning_ratio_default_config(self):
        full = parameter_count(CfpNet(NetworkConfig()))
        pruned = parameter_count(CfpNet(NetworkConfig(variant="pruned")))
        assert 0.25 <= pruned / full <= 0.45

    def test_seed_determinism(self):
        a = CfpNet(NetworkConfig(**TINY), seed=5)
        b = CfpNet(NetworkConfig(**TINY), seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_single_conv_param_count(self):
        conv = SparseConv(1, 1, torch.Generator().manual_seed(0))
        assert parameter_count(conv) == 28

    def test_count_pure(self):
        net = CfpNet(NetworkConfig(**TINY))
        assert parameter_count(net) == parameter_count(net)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            NetworkConfig(variant="tiny").validate()
        with pytest.raises(ValueError):
            NetworkConfig(base_channels=0).validate()
        with pytest.raises(ValueError):
            NetworkConfig(decoder_channels=(8,)).validate()


class TestForward:
    def test_shapes_and_resultant(self):
        net = CfpNet(NetworkConfig(**TINY))
        pred = net.predict(sphere_cloud(10))
        assert pred.external.shape == pred.internal.shape == (10, 3)
        np.testing.assert_array_equal(pred.resultant, pred.external + pred.internal)

    def test_same_voxel_same_output(self):
        net = CfpNet(NetworkConfig(**TINY))
        pts = np.array([[0.01, 0.01, 0.01], [0.02, 0.02, 0.02], [0.5, 0.5, 0.5]])
        pred = net.predict(PointCloud(pts))
        np.testing.assert_array_equal(pred.resultant[0], pred.resultant[1])

    def test_permutation_consistency(self):
        net = CfpNet(NetworkConfig(**TINY))
        cloud = sphere_cloud(64, seed=2)
        perm = np.random.default_rng(0).permutation(64)
        a = net.predict(cloud)
        b = net.predict(PointCloud(cloud.points[perm]))
        np.testing.assert_allclose(b.resultant, a.resultant[perm], atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)))

    def test_gradient_flow_all_parameters(self):
        net = CfpNet(NetworkConfig(**TINY), seed=1)
        cloud = sphere_cloud(128, seed=3)
        ext, inte = net.forward_points(cloud)
        # rich scalar touching both heads
        loss = (ext ** 2).sum() + (inte ** 2).sum()
        loss.backward()
        for name, p in net.named_parameters():
            assert p.grad is not None and p.grad.abs().max() > 0, f"dead parameter {name}"


class TestGate:
    def test_alpha_strictly_inside_unit_interval(self):
        net = CfpNet(NetworkConfig(**TINY), seed=4)
        for seed in range(5):
            cloud = sphere_cloud(64, seed=seed)
            grid = voxelize(cloud, net.config.voxel_size)
            nbr = torch.from_numpy(neighbor_table(grid.voxel_coords))
            x = torch.ones(grid.n_voxels, 1)
            for conv in net.encoder:
                x = torch.relu(conv(x, nbr))
            alpha = net.skip_blocks[0].gate_values(x, nbr)
            assert (alpha > 0).all() and (alpha < 1).all()

    def test_gate_injection_selects_paths(self):
        net = CfpNet(NetworkConfig(**TINY), seed=5)
        block = net.skip_blocks[0]
        cloud = sphere_cloud(32, seed=6)
        grid = voxelize(cloud, net.config.voxel_size)
        nbr = torch.from_numpy(neighbor_table(grid.voxel_coords))
        rng = torch.Generator().manual_seed(0)
        dec = torch.rand(grid.n_voxels, 8, generator=rng)
        skip = torch.rand(grid.n_voxels, 8, generator=rng)
        with torch.no_grad():
            dec_only = block(dec, skip, nbr, gate_override=1.0)
            skip_only = block(dec, skip, nbr, gate_override=0.0)
            assert torch.equal(dec_only, torch.relu(block.proj_decoder(dec, nbr)))
            assert torch.equal(skip_only, torch.relu(block.proj_skip(skip, nbr)))


class TestNeighborTable:
    def test_self_neighbor_center_offset(self):
        coords = np.array([[0, 0, 0], [0, 0, 1], [5, 5, 5]])
        table = neighbor_table(coords)
        # offset index 13 is (0,0,0)
        np.testing.assert_array_equal(table[:, 13], [0, 1, 2])
        # voxel 0 sees voxel 1 at offset (0,0,+1) = index 14
        assert table[0, 14] == 1 and table[1, 12] == 0
        assert (table[2] == np.where(np.arange(27) == 13, 2, 3)).all()


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        net = CfpNet(NetworkConfig(**TINY), seed=7)
        path = tmp_path / "ck.npz"
        save_checkpoint(path, net, step=12)
        loaded, step = load_checkpoint(path)
        assert step == 12
        assert loaded.config == net.config
        cloud = sphere_cloud(32, seed=8)
        a, b = net.predict(cloud), loaded.predict(cloud)
        np.testing.assert_array_equal(
            a.resultant.astype(np.float32), b.resultant.astype(np.float32)
        )

    def test_bad_version(self, tmp_path):
        net = CfpNet(NetworkConfig(**TINY))
        path = tmp_path / "ck.npz"
        save_checkpoint(path, net)
        data = dict(np.load(path))
        data["format_version"] = np.int64(99)
        np.savez(path, **data)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)


class TestFiniteDifference:
    def test_parameter_gradients(self):
        torch.manual_seed(0)
        net = CfpNet(NetworkConfig(base_channels=8, voxel_size=0.15), seed=9,
                     dtype=torch.float64)
        cloud = sphere_cloud(64, seed=10)
        rng = np.random.default_rng(11)

        def loss_value():
            ext, inte = net.forward_points(cloud)
            return (ext.sum() + inte.sum())

        loss = loss_value()
        loss.backward()
        params = list(net.named_parameters())
        h = 1e-6
        for _ in range(8):
            name, p = params[rng.integers(len(params))]
            idx = tuple(rng.integers(s) for s in p.shape)
            analytic = p.grad[idx].item()
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + h
                up = loss_value().item()
                p[idx] = orig - h
                dn = loss_value().item()
                p[idx] = orig
            fd = (up - dn) / (2 * h)
            assert analytic == pytest.approx(fd, rel=1e-3, abs=1e-7), name
