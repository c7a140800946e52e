import numpy as np
import pytest

from sparsedet import autodiff as ad
from sparsedet import dense_baseline as dense
from sparsedet import geometry as geo
from sparsedet import nn, synth
from sparsedet.errors import CapacityError

from oracles import central_fd, grad_rel_err


def make_store(rng, spec):
    store = nn.ParamStore()
    dense.init_params(store, rng, spec)
    return store


def scene_with(boxes, classes, points, range_m=20.0):
    return synth.Scene(
        pc=synth.PointCloud(coords=np.asarray(points, dtype=np.float64),
                            intensity=np.zeros(len(points))),
        gt_boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 7),
        gt_classes=np.asarray(classes, dtype=np.int64),
        range_m=range_m,
        seed=0,
    )


class TestGridAllocation:
    def test_grid_side_from_range_and_cell(self):
        spec = dense.DenseGridSpec(cell=0.5)
        assert spec.grid_side(50.0) == 200

    def test_doubling_range_quadruples_cells(self):
        spec = dense.DenseGridSpec(cell=0.5)
        a = spec.grid_side(50.0) ** 2
        b = spec.grid_side(100.0) ** 2
        assert b == 4 * a

    def test_dense_allocation_independent_of_occupancy(self):
        rng = np.random.default_rng(40)
        spec = dense.DenseGridSpec(cell=1.0, channels=4, layers=1)
        store = make_store(rng, spec)
        out1 = dense.forward(store, spec, synth.PointCloud(np.zeros((1, 3))), 10.0)
        out2 = dense.forward(
            store, spec, synth.PointCloud(rng.uniform(-9, 9, size=(500, 3))), 10.0
        )
        assert out1.heatmap.data.shape == out2.heatmap.data.shape == (20, 20, synth.NUM_CLASSES)

    def test_memory_cap(self):
        spec = dense.DenseGridSpec(cell=0.1, channels=64, memory_cap_mb=1.0)
        store = make_store(np.random.default_rng(41), spec)
        with pytest.raises(CapacityError):
            dense.forward(store, spec, synth.PointCloud(np.zeros((1, 3))), 100.0)


class TestTargetsAndLoss:
    def test_center_cell_marked(self):
        box = geo.make_box(3.2, -1.7, 0.8, 4.0, 2.0, 1.6, 0.3)
        hm, reg, mask = dense.build_targets(np.stack([box]), np.array([0]), 40, 0.5, 10.0)
        ix = int((box[0] + 10.0) / 0.5)
        iy = int((box[1] + 10.0) / 0.5)
        assert mask[ix, iy]
        assert hm[ix, iy, 0] == 1.0
        assert abs(reg[ix, iy, 3] - np.log(4.0)) < 1e-12
        # gaussian decays away from the center
        assert hm[ix + 2, iy, 0] < 1.0

    def test_gaussian_focal_gradient(self):
        rng = np.random.default_rng(42)
        z = rng.standard_normal((10, 3)) * 2
        y = np.zeros((10, 3))
        y[2, 1] = 1.0
        y[5, 0] = 0.6  # near-center damped negative

        def build(z):
            return ad.sum_all(ad.gaussian_focal(z, y))

        t = ad.param(z.copy())
        out = build(t)
        ad.backward(out)
        fd = central_fd(lambda x: float(build(ad.param(x)).data), z.copy())
        np.testing.assert_allclose(t.grad, fd, rtol=1e-5, atol=1e-8)

    def test_loss_finite_and_positive(self):
        rng = np.random.default_rng(43)
        spec = dense.DenseGridSpec(cell=1.0, channels=4, layers=2)
        store = make_store(rng, spec)
        box = geo.make_box(2, 3, 0.8, 4.0, 2.0, 1.6, 0.0)
        scene = scene_with([box], [0], rng.uniform(-9, 9, size=(80, 3)), range_m=10.0)
        out = dense.forward(store, spec, scene.pc, scene.range_m)
        parts, total = dense.loss(out, scene, spec)
        assert np.isfinite(parts["total"]) and parts["total"] > 0

    def test_end_to_end_gradient_matches_fd(self):
        rng = np.random.default_rng(44)
        spec = dense.DenseGridSpec(cell=2.0, channels=3, layers=1)
        store = make_store(rng, spec)
        box = geo.make_box(1, 1, 0.8, 4.0, 2.0, 1.6, 0.2)
        scene = scene_with([box], [0], rng.uniform(-5, 5, size=(30, 3)), range_m=6.0)

        def loss_of(st):
            out = dense.forward(st, spec, scene.pc, scene.range_m)
            return float(dense.loss(out, scene, spec)[1].data)

        tp = nn.TapeParams(store)
        out = dense.forward(store, spec, scene.pc, scene.range_m, tp=tp)
        _, total = dense.loss(out, scene, spec)
        ad.backward(total)
        grads = tp.grads()
        for name in ["dense.conv0.w", "dense.hm.w", "dense.reg.w", "dense.point.w"]:
            probe = store.copy()

            def scalar(x, name=name, probe=probe):
                probe[name] = x
                return loss_of(probe)

            fd = central_fd(scalar, store[name].copy(), h=1e-5)
            rel = grad_rel_err(grads[name], fd)
            assert rel < 1e-4, f"{name}: {rel:.2e}"


class TestDecode:
    def test_crafted_heatmap_decodes_to_box(self):
        spec = dense.DenseGridSpec(cell=0.5, channels=4, layers=1)
        store = make_store(np.random.default_rng(45), spec)
        out = dense.forward(store, spec, synth.PointCloud(np.zeros((1, 3))), 10.0)
        box = geo.make_box(3.2, -1.7, 0.8, 4.0, 2.0, 1.6, 0.3)
        hm, reg, _ = dense.build_targets(np.stack([box]), np.array([0]), out.side, 0.5, 10.0)
        # overwrite network output with ideal logits/regression
        out.heatmap.data[:] = -10.0
        ix = int((box[0] + 10.0) / 0.5)
        iy = int((box[1] + 10.0) / 0.5)
        out.heatmap.data[ix, iy, 0] = 10.0
        out.reg.data[:] = reg.astype(out.reg.data.dtype)
        dets = dense.decode(out, spec, score_threshold=0.3)
        assert dets.boxes.shape[0] == 1
        np.testing.assert_allclose(dets.boxes[0], box, atol=1e-5)
        assert dets.classes[0] == 0

    def test_empty_heatmap_no_detections(self):
        spec = dense.DenseGridSpec(cell=1.0, channels=4, layers=1)
        store = make_store(np.random.default_rng(46), spec)
        out = dense.forward(store, spec, synth.PointCloud(np.zeros((1, 3))), 8.0)
        out.heatmap.data[:] = -10.0
        dets = dense.decode(out, spec, score_threshold=0.3)
        assert dets.boxes.shape[0] == 0
