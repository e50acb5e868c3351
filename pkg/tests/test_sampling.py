import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from golo import tensor as T
from golo.oracles import (naive_bidirectional, naive_bilinear, naive_fpn_level,
                          naive_level_weights, naive_roi_align)
from golo.sampling import (FeaturePyramid, SamplingSpec, bidirectional_sample, bilinear_sample,
                           fpn_level, level_weights, roi_align)
from golo.tensor import Tensor, finite_diff_check, precision


def random_pyramid(rng, c=5, size=32, batch=1, requires_grad=False):
    levels = [Tensor(rng.normal(size=(batch, c, size // s, size // s)), requires_grad=requires_grad)
              for s in (4, 8, 16, 32)]
    return FeaturePyramid(levels)


class TestLevelWeights:
    def test_worked_example(self):
        w = level_weights(Tensor(2.0), Tensor(2.0)).data
        np.testing.assert_allclose(w, [1.1408, 0.6920, 0.1544, 0.0127], atol=1e-3)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        zw, zh = rng.uniform(0, 7, 50), rng.uniform(0, 7, 50)
        with precision("float64"):
            w = level_weights(Tensor(zw), Tensor(zh)).data
        for k in range(50):
            np.testing.assert_allclose(w[k], naive_level_weights(zw[k], zh[k]), atol=1e-12)

    def test_equal_z_terms_are_equal(self):
        with precision("float64"):
            both = level_weights(Tensor(3.3), Tensor(3.3)).data
            one = level_weights(Tensor(3.3), Tensor(100.0)).data - level_weights(
                Tensor(100.0), Tensor(100.0)).data / 2
        np.testing.assert_allclose(both, 2 * one, atol=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0, 7), st.floats(0, 7))
    def test_sum_is_two_and_peak_nearest(self, zw, zh):
        w = level_weights(Tensor(zw), Tensor(zh)).data
        assert abs(w.sum() - 2.0) < 1e-6
        with precision("float64"):
            single = level_weights(Tensor(zw), Tensor(zw)).data / 2
        nearest = np.argmin(np.abs(np.array([2, 3, 4, 5]) - zw))
        assert np.isclose(single[nearest], single.max())


class TestBilinear:
    def test_matches_oracle_including_borders(self):
        rng = np.random.default_rng(3)
        fmap = rng.normal(size=(1, 4, 6, 5))
        pts = rng.uniform(-0.1, 1.1, size=(200, 2))
        with precision("float64"):
            out = bilinear_sample(Tensor(fmap), np.zeros(200), Tensor(pts[:, 0]), Tensor(pts[:, 1])).data
        for k, (x, y) in enumerate(pts):
            np.testing.assert_allclose(out[k], naive_bilinear(fmap[0], x, y), atol=1e-12)

    def test_pixel_centre_returns_pixel(self):
        fmap = np.arange(12.0).reshape(1, 1, 3, 4)
        out = bilinear_sample(Tensor(fmap), [0], Tensor([(2 + 0.5) / 4]), Tensor([(1 + 0.5) / 3])).data
        assert out[0, 0] == pytest.approx(fmap[0, 0, 1, 2])

    def test_gradients(self):
        rng = np.random.default_rng(4)
        with precision("float64"):
            fmap = Tensor(rng.normal(size=(2, 3, 5, 5)), requires_grad=True)
            # interpolation kinks sit at texel centres; keep the fractional offset inside (0.1, 0.9)
            cells = rng.integers(0, 4, size=(2, 6))
            x = Tensor((cells[0] + 0.5 + rng.uniform(0.1, 0.9, 6)) / 5, requires_grad=True)
            y = Tensor((cells[1] + 0.5 + rng.uniform(0.1, 0.9, 6)) / 5, requires_grad=True)
            bidx = np.array([0, 1, 0, 1, 1, 0])
            w = Tensor(rng.normal(size=(6, 3)))
            err = finite_diff_check(lambda: (bilinear_sample(fmap, bidx, x, y) * w).sum(),
                                    [fmap, x, y], eps=1e-5)
        assert err < 1e-6


class TestBidirectionalSample:
    def test_constant_pyramid_gives_twice_value(self):
        levels = [Tensor(np.full((1, 3, 16 // s * 2, 16 // s * 2), 1.5)) for s in (1, 2, 4, 8)]
        pyr = FeaturePyramid(levels)
        rng = np.random.default_rng(0)
        spec = SamplingSpec(*(Tensor(rng.uniform(0.2, 0.8, (1, 4, 3))) for _ in range(2)),
                            *(Tensor(rng.uniform(2, 5, (1, 4, 3))) for _ in range(2)))
        out = bidirectional_sample(pyr, spec).data
        assert out.shape == (1, 4, 3, 3)
        np.testing.assert_allclose(out, 3.0, atol=1e-5)

    def test_grid_centre_single_level(self):
        rng = np.random.default_rng(1)
        pyr = random_pyramid(rng, c=4, size=64)
        p3 = pyr.levels[1].data[0]  # 8x8
        x, y = (3 + 0.5) / 8, (5 + 0.5) / 8
        spec = SamplingSpec(Tensor([[x]]), Tensor([[y]]), Tensor([[3.0]]), Tensor([[3.0]]))
        with precision("float64"):
            out = bidirectional_sample(pyr, spec).data[0, 0]
        levels = [lv.data[0] for lv in pyr.levels]
        np.testing.assert_allclose(out, naive_bidirectional(levels, x, y, 3.0, 3.0), atol=1e-5)
        # unit-variance Gaussians never saturate to one level, so isolate P3 by zeroing the rest
        hot = FeaturePyramid([Tensor(np.zeros_like(lv.data)) if j != 1 else lv
                              for j, lv in enumerate(pyr.levels)])
        w3 = naive_level_weights(3.0, 3.0)[1]
        out_hot = bidirectional_sample(hot, spec).data[0, 0] / w3
        np.testing.assert_allclose(out_hot, p3[:, 5, 3], atol=1e-3)

    def test_matches_oracle_on_random_pyramids(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            pyr = random_pyramid(rng, c=3, size=64, batch=2)
            shape = (2, 3, 4)
            xs, ys = rng.uniform(0, 1, shape), rng.uniform(0, 1, shape)
            zw, zh = rng.uniform(2, 5, shape), rng.uniform(2, 5, shape)
            with precision("float64"):
                out = bidirectional_sample(pyr, SamplingSpec(Tensor(xs), Tensor(ys), Tensor(zw), Tensor(zh))).data
            for idx in np.ndindex(*shape):
                levels = [lv.data[idx[0]] for lv in pyr.levels]
                ref = naive_bidirectional(levels, xs[idx], ys[idx], zw[idx], zh[idx])
                np.testing.assert_allclose(out[idx], ref, atol=1e-5)

    def test_gradient_wrt_coordinates(self):
        rng = np.random.default_rng(9)
        with precision("float64"):
            pyr = random_pyramid(rng, c=3, size=64)
            x = Tensor([[0.31, 0.62]], requires_grad=True)
            y = Tensor([[0.44, 0.27]], requires_grad=True)
            zw = Tensor([[2.7, 4.1]], requires_grad=True)
            zh = Tensor([[3.3, 2.2]], requires_grad=True)
            w = Tensor(rng.normal(size=(1, 2, 3)))
            err = finite_diff_check(
                lambda: (bidirectional_sample(pyr, SamplingSpec(x, y, zw, zh)) * w).sum(),
                [x, y, zw, zh], eps=1e-6)
        assert err < 1e-5


class TestRoiAlign:
    def test_constant_level(self):
        levels = [Tensor(np.full((1, 2, 64 // s, 64 // s), 0.7)) for s in (4, 8, 16, 32)]
        out = roi_align(FeaturePyramid(levels), Tensor([[[0.5, 0.5, 0.4, 0.3]]]), size=7).data
        assert out.shape == (1, 1, 49, 2)
        np.testing.assert_allclose(out, 0.7, atol=1e-6)

    def test_level_aligned_region_bins_are_texel_means(self):
        rng = np.random.default_rng(5)
        pyr = random_pyramid(rng, c=3, size=256)
        s = 2
        # box covering a 2S x 2S texel block of P2 (64x64), top-left texel (10, 20)
        fm = pyr.levels[0].data[0]
        hw = fm.shape[1]
        x1, y1 = 20 / hw, 10 / hw
        box = [x1 + 2 * s / hw / 2, y1 + 2 * s / hw / 2, 2 * s / hw, 2 * s / hw]
        assert fpn_level(np.array(box), (256, 256)) == 2
        with precision("float64"):
            out = roi_align(pyr, Tensor([[box]]), size=s).data[0, 0]
        for i in range(s):
            for j in range(s):
                block = fm[:, 10 + 2 * i:12 + 2 * i, 20 + 2 * j:22 + 2 * j]
                np.testing.assert_allclose(out[i * s + j], block.mean(axis=(1, 2)), atol=1e-5)

    def test_matches_oracle_random_boxes(self):
        rng = np.random.default_rng(6)
        pyr = random_pyramid(rng, c=4, size=128, batch=2)
        cxcy = rng.uniform(0.2, 0.8, (2, 5, 2))
        wh = rng.uniform(0.05, 0.9, (2, 5, 2))
        boxes = np.concatenate([cxcy, wh], axis=-1)
        with precision("float64"):
            out = roi_align(pyr, Tensor(boxes), size=3).data
        for b in range(2):
            for k in range(5):
                lvl = naive_fpn_level(boxes[b, k], (128, 128))
                ref = naive_roi_align(pyr.levels[lvl - 2].data[b], boxes[b, k], 3)
                np.testing.assert_allclose(out[b, k], ref, atol=1e-5)

    def test_degenerate_box_is_clamped(self):
        levels = [Tensor(np.ones((1, 2, 64 // s, 64 // s))) for s in (4, 8, 16, 32)]
        out = roi_align(FeaturePyramid(levels), Tensor([[[0.5, 0.5, 0.0, 0.0]]]), size=2)
        assert np.all(np.isfinite(out.data))

    def test_gradient_wrt_box(self):
        rng = np.random.default_rng(8)
        with precision("float64"):
            pyr = random_pyramid(rng, c=2, size=64)
            box = Tensor([[[0.43, 0.51, 0.37, 0.29]]], requires_grad=True)
            w = Tensor(rng.normal(size=(1, 1, 9, 2)))
            err = finite_diff_check(lambda: (roi_align(pyr, box, size=3) * w).sum(), [box], eps=1e-7)
        assert err < 1e-4
