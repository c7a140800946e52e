import numpy as np
import pytest

from sparsedet import autodiff as ad
from sparsedet import encoder, nn
from sparsedet.errors import ContractViolationError

from oracles import central_fd


def make_store(rng, in_channels=4, vfe_hidden=8, channels=12):
    store = nn.ParamStore()
    encoder.init_params(store, rng, in_channels, vfe_hidden, channels)
    return store


def forward(store, coords, intensity=None, voxel_size=0.25, rounds=2):
    grid = encoder.voxelize(coords, voxel_size)
    tp = nn.TapeParams(store)
    return encoder.encode(grid, coords, intensity, tp, rounds=rounds), grid, tp


class TestVoxelize:
    def test_same_cell(self):
        grid = encoder.voxelize(np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]]), 1.0)
        assert grid.num_voxels == 1
        assert grid.point_to_voxel.tolist() == [0, 0]

    def test_floor_boundary(self):
        grid = encoder.voxelize(np.array([[0.999, 0, 0], [1.001, 0, 0]]), 1.0)
        assert grid.num_voxels == 2
        assert grid.point_to_voxel.tolist() == [0, 1]

    def test_empty_cloud(self):
        grid = encoder.voxelize(np.zeros((0, 3)), 0.5)
        assert grid.num_voxels == 0 and grid.point_to_voxel.size == 0

    def test_random_cloud_matches_hashset_oracle(self):
        rng = np.random.default_rng(0)
        coords = rng.uniform(-20, 20, size=(500, 3))
        grid = encoder.voxelize(coords, 0.8)
        # oracle: distinct floor keys collected in a python set
        keys = {tuple(np.floor(c / 0.8).astype(int)) for c in coords}
        assert grid.num_voxels == len(keys)
        # ids contiguous and consistent with keys
        assert set(grid.point_to_voxel.tolist()) == set(range(grid.num_voxels))
        for p, v in zip(coords, grid.point_to_voxel):
            assert tuple(np.floor(p / 0.8).astype(int)) == tuple(grid.keys[v])

    def test_no_point_dropped(self):
        rng = np.random.default_rng(1)
        coords = rng.uniform(-5, 5, size=(123, 3))
        grid = encoder.voxelize(coords, 0.25)
        assert grid.point_to_voxel.shape == (123,)
        assert np.all(grid.point_to_voxel >= 0)

    def test_rejects_bad_voxel_size(self):
        with pytest.raises(ContractViolationError):
            encoder.voxelize(np.zeros((1, 3)), 0.0)


class TestNeighborPairs:
    def test_isolated_voxel_self_edge(self):
        src, dst = encoder.neighbor_pairs(np.array([[0, 0, 0]]))
        assert src.tolist() == [0] and dst.tolist() == [0]

    def test_adjacent_voxels(self):
        src, dst = encoder.neighbor_pairs(np.array([[0, 0, 0], [1, 0, 0], [5, 5, 5]]))
        edges = set(zip(src.tolist(), dst.tolist()))
        assert (0, 1) in edges and (1, 0) in edges
        assert (0, 0) in edges and (2, 2) in edges
        assert (2, 0) not in edges and (0, 2) not in edges


class TestEncode:
    def test_zero_weights_finite(self):
        store = make_store(np.random.default_rng(2))
        for k in store.names():
            if k.endswith(".w") or k.endswith(".b") or k.endswith(".beta"):
                store[k] = np.zeros_like(store[k])
        out, _, _ = forward(store, np.array([[0.3, 0.4, 0.1]]), np.array([0.5]))
        assert np.all(np.isfinite(out.data))

    def test_duplicate_points_identical_rows(self):
        store = make_store(np.random.default_rng(3))
        coords = np.array([[1.0, 2.0, 0.5], [1.0, 2.0, 0.5], [4.0, 4.0, 0.0]])
        out, _, _ = forward(store, coords, np.array([0.7, 0.7, 0.1]))
        np.testing.assert_array_equal(out.data[0], out.data[1])

    def test_permutation_invariance_within_voxel(self):
        store = make_store(np.random.default_rng(4))
        rng = np.random.default_rng(5)
        coords = rng.uniform(0, 0.25, size=(6, 3))  # all in one voxel
        inten = rng.uniform(0, 1, size=6)
        out1, grid1, _ = forward(store, coords, inten)
        perm = rng.permutation(6)
        out2, _, _ = forward(store, coords[perm], inten[perm])
        assert grid1.num_voxels == 1
        np.testing.assert_allclose(out2.data, out1.data[perm], atol=1e-12)

    def test_translation_covariance(self):
        store = make_store(np.random.default_rng(6))
        rng = np.random.default_rng(7)
        coords = rng.uniform(-3, 3, size=(40, 3))
        inten = rng.uniform(0, 1, size=40)
        out1, grid1, _ = forward(store, coords, inten, voxel_size=0.5)
        shift = np.array([3.0, -2.0, 1.0])  # integer multiples of 0.5
        out2, grid2, _ = forward(store, coords + shift, inten, voxel_size=0.5)
        np.testing.assert_array_equal(grid2.keys, grid1.keys + (shift / 0.5).astype(np.int64))
        np.testing.assert_allclose(out2.data, out1.data, atol=1e-9)

    def test_neighbor_rounds_mix_features(self):
        store = make_store(np.random.default_rng(8))
        coords = np.array([[0.1, 0.1, 0.1], [0.3, 0.1, 0.1], [10.0, 10.0, 10.0]])
        out0, _, _ = forward(store, coords, None, rounds=0)
        out2, _, _ = forward(store, coords, None, rounds=2)
        # far-away voxel has no neighbors: rounds change nothing there
        np.testing.assert_allclose(out0.data[2], out2.data[2], atol=1e-12)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        store = make_store(rng, channels=8, vfe_hidden=6)
        coords = rng.uniform(-2, 2, size=(15, 3))
        inten = rng.uniform(0, 1, size=15)
        target = rng.standard_normal((15, 8))

        def loss_of(st):
            out, _, _ = forward(st, coords, inten, voxel_size=1.0)
            return float(np.abs(out.data - target).sum())

        out, _, tp = forward(store, coords, inten, voxel_size=1.0)
        loss = ad.sum_all(ad.abs_(ad.sub(out, ad.const(target))))
        ad.backward(loss)
        grads = tp.grads()

        for name in ["enc.vfe1.w", "enc.vfe2.w", "enc.point.w", "enc.vfe1.gamma"]:
            an = grads[name]
            probe = store.copy()

            def scalar(x, name=name, probe=probe):
                probe[name] = x
                return loss_of(probe)

            fd = central_fd(scalar, store[name].copy(), h=1e-6)
            rel = np.abs(an - fd) / np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-8)
            assert rel.max() < 1e-4, f"{name}: max rel err {rel.max():.2e}"

    def test_channel_mismatch_raises(self):
        store = make_store(np.random.default_rng(10), in_channels=7)
        with pytest.raises(ContractViolationError):
            forward(store, np.zeros((2, 3)), None)
