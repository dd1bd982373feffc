import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from drrpose.geometry import DTYPE, Pose, RenderGeometry
from drrpose.render import render_drr
from drrpose.scene import (ConfigurationError, DenseGrid, DensityMLP, Mask3D, MNeRFField, NeTTField,
                           build_mask, encode_density, encode_position, mlp_forward, mm_to_extent_units,
                           mnerf_sample, nett_sample, sample_grid)

from oracles import dilate_brute, trilinear

coords = st.floats(-1.2, 1.2)
points = st.tuples(coords, coords, coords)


def _random_grid(seed, shape=(5, 6, 7)):
    rng = np.random.default_rng(seed)
    return DenseGrid(rng.uniform(0, 1, shape).astype(np.float32))


def _ball_grid(n=16, radius=0.5):
    c = (np.arange(n) + 0.5) / n * 2 - 1
    zz, yy, xx = np.meshgrid(c, c, c, indexing="ij")
    return DenseGrid(((xx ** 2 + yy ** 2 + zz ** 2) <= radius ** 2).astype(np.float32) * 0.8)


class TestDenseGrid:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            DenseGrid(np.full((2, 2, 2), 1.5))
        with pytest.raises(ValueError):
            DenseGrid(np.full((2, 2, 2), np.nan))

    def test_rejects_bad_extent(self):
        with pytest.raises(ValueError):
            DenseGrid(np.zeros((2, 2, 2)), extent=(1.0, -1.0))

    def test_dims_are_xyz(self):
        assert DenseGrid(np.zeros((2, 3, 4))).dims == (4, 3, 2)


class TestSampleGrid:
    def test_voxel_center_returns_voxel(self):
        g = _random_grid(0)
        centres = g.voxel_centers()
        for iz, iy, ix in [(0, 0, 0), (2, 3, 4), (4, 5, 6), (1, 2, 3)]:
            assert sample_grid(g, centres[iz, iy, ix]) == pytest.approx(float(g.data[iz, iy, ix]),
                                                                        abs=1e-12)

    def test_midpoint_of_zero_and_one(self):
        data = np.zeros((4, 4, 4), dtype=np.float32)
        data[:, :, 2:] = 1.0  # x >= 0 is one, x < 0 is zero
        g = DenseGrid(data)
        # x = 0 lies midway between voxel centres at -0.25 and 0.25
        assert sample_grid(g, [0.0, 0.1, -0.3]) == pytest.approx(0.5, abs=1e-12)

    @given(points)
    def test_matches_nested_lerp_oracle(self, p):
        g = _random_grid(1)
        assert sample_grid(g, p) == pytest.approx(trilinear(g.data, g.extent, p), abs=1e-12)

    def test_anisotropic_extent(self):
        g = DenseGrid(np.random.default_rng(2).uniform(0, 1, (3, 4, 5)),
                      extent=((-2, 1), (0, 4), (-1, -0.5)))
        for p in [(-1.0, 1.0, -0.7), (0.9, 3.9, -0.55), (-1.95, 0.2, -0.99)]:
            assert sample_grid(g, p) == pytest.approx(trilinear(g.data, g.extent, p), abs=1e-12)

    @given(points)
    def test_zero_outside_extent(self, p):
        if max(abs(c) for c in p) > 1:
            assert sample_grid(_random_grid(3), p) == 0.0

    @given(st.integers(0, 5), st.floats(-0.9, 0.9), st.floats(-0.9, 0.9), st.integers(0, 2))
    def test_continuous_across_voxel_faces(self, k, a, b, axis):
        g = _random_grid(4, (7, 7, 7))
        face = -1 + (k + 1) * 2 / 7  # boundary between voxels k and k+1
        eps = 1e-13
        p_lo, p_hi = [a, b, a], [a, b, a]
        p_lo[axis], p_hi[axis] = face - eps, face + eps
        assert abs(sample_grid(g, p_lo) - sample_grid(g, p_hi)) < 1e-12

    @given(points)
    def test_densities_stay_in_unit_range(self, p):
        v = sample_grid(_random_grid(5), p)
        assert 0.0 <= v <= 1.0


class TestEncodings:
    def test_density_at_zero(self):
        np.testing.assert_array_equal(encode_density(0.0).numpy(), [0] + [0, 1] * 6)

    def test_widths(self):
        assert encode_density(0.3).shape == (13,)
        assert encode_position(torch.zeros(3, dtype=DTYPE)).shape == (39,)
        assert encode_position(torch.zeros(5, 7, 3, dtype=DTYPE)).shape == (5, 7, 39)

    def test_density_at_one_matches_scalar_trig(self):
        expected = [1.0]
        for i in range(6):
            expected += [math.sin(2 ** i), math.cos(2 ** i)]
        np.testing.assert_allclose(encode_density(1.0).numpy(), expected, atol=1e-15)

    def test_position_at_origin(self):
        expected = [0.0] * 3 + ([0.0] * 3 + [1.0] * 3) * 6
        np.testing.assert_array_equal(encode_position(torch.zeros(3, dtype=DTYPE)).numpy(), expected)

    def test_position_matches_scalar_trig(self):
        p = (1.0, -1.0, 0.5)
        expected = list(p)
        for i in range(6):
            expected += [math.sin(2 ** i * c) for c in p] + [math.cos(2 ** i * c) for c in p]
        got = encode_position(torch.tensor(p, dtype=DTYPE)).numpy()
        np.testing.assert_allclose(got, expected, atol=1e-15)

    @given(st.floats(0, 1), points)
    def test_sin_cos_pairs_are_unit(self, s, p):
        d = encode_density(s).numpy()
        np.testing.assert_allclose(d[1::2] ** 2 + d[2::2] ** 2, 1.0, atol=1e-12)
        e = encode_position(torch.tensor(p, dtype=DTYPE)).numpy()[3:].reshape(6, 2, 3)
        np.testing.assert_allclose(e[:, 0] ** 2 + e[:, 1] ** 2, 1.0, atol=1e-12)


class TestMlp:
    def test_identity_network(self):
        net = DensityMLP.identity()
        x = encode_density(torch.tensor([0.0, 0.25, 0.9], dtype=DTYPE))
        np.testing.assert_array_equal(mlp_forward(net, x).detach().numpy(), [0.0, 0.25, 0.9])

    @pytest.mark.parametrize("hidden", [(), (8, 8)])
    @pytest.mark.parametrize("bias", [0.3, -0.2])
    def test_zero_weights_give_activation_of_bias(self, hidden, bias):
        net = DensityMLP(13, hidden=hidden, skips=(), norm=False)
        with torch.no_grad():
            for p in net.parameters():
                p.zero_()
            net.head.bias.fill_(bias)
        x = torch.randn(5, 13, dtype=DTYPE)
        np.testing.assert_array_equal(mlp_forward(net, x).detach().numpy(), max(bias, 0.0))

    def test_two_layer_matches_matrix_arithmetic(self):
        torch.manual_seed(0)
        net = DensityMLP(3, hidden=(4,), skips=(), norm=False)
        x = [0.2, -0.7, 1.1]
        w1, b1 = net.layers[0].weight.tolist(), net.layers[0].bias.tolist()
        w2, b2 = net.head.weight.tolist()[0], float(net.head.bias.detach())
        h = [max(0.0, sum(w1[i][j] * x[j] for j in range(3)) + b1[i]) for i in range(4)]
        expected = max(0.0, sum(w2[i] * h[i] for i in range(4)) + b2)
        got = float(mlp_forward(net, torch.tensor([x], dtype=DTYPE))[0].detach())
        assert got == pytest.approx(expected, abs=1e-14)

    def test_skip_concatenates_encoding(self):
        net = DensityMLP(13, hidden=(6, 5, 4), skips=(2,))
        assert net.layers[2].in_features == 5 + 13

    def test_width_mismatch(self):
        with pytest.raises(ConfigurationError):
            DensityMLP.nett()(torch.zeros(2, 39, dtype=DTYPE))

    def test_bad_skip(self):
        with pytest.raises(ConfigurationError):
            DensityMLP(13, hidden=(4, 4), skips=(0,))

    def test_inference_is_deterministic_and_batch_independent(self):
        torch.manual_seed(1)
        net = DensityMLP.nett()
        x = encode_density(torch.rand(50, dtype=DTYPE))
        mlp_forward(net, x, "train")  # update running statistics
        full = mlp_forward(net, x, "infer").detach()
        part = mlp_forward(net, x[:7], "infer").detach()
        assert torch.equal(full[:7], part)
        assert torch.equal(full, mlp_forward(net, x, "infer").detach())

    @given(st.integers(0, 2 ** 31))
    def test_output_non_negative(self, seed):
        torch.manual_seed(seed)
        net = DensityMLP.mnerf(hidden=(16, 16, 16), skips=(2,))
        x = encode_position(torch.rand(20, 3, dtype=DTYPE) * 2 - 1)
        assert torch.all(mlp_forward(net, x, "train") >= 0)
        assert torch.all(mlp_forward(net, x, "infer") >= 0)

    def test_flat_parameter_round_trip(self):
        torch.manual_seed(2)
        a, b = DensityMLP.nett(hidden=(8, 8), skips=(1,)), DensityMLP.nett(hidden=(8, 8), skips=(1,))
        b.set_flat_parameters(a.flat_parameters())
        assert torch.equal(a.flat_parameters(), b.flat_parameters())

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            mlp_forward(DensityMLP.identity(), torch.zeros(1, 13, dtype=DTYPE), "eval")


class TestNeTT:
    def test_outside_volume_is_zero_without_calling_network(self):
        class Exploding(DensityMLP):
            def forward(self, x):
                raise AssertionError("network invoked")

        net = Exploding(13, hidden=(), skips=())
        assert nett_sample(_random_grid(6), net, [1.5, 0.0, 0.0]) == 0.0

    def test_identity_network_returns_grid_density(self):
        g = _random_grid(7)
        for p in [(0.1, 0.2, 0.3), (-0.5, 0.6, -0.1)]:
            assert nett_sample(g, DensityMLP.identity(), p) == pytest.approx(sample_grid(g, p), abs=1e-12)

    def test_composition(self):
        torch.manual_seed(3)
        net = DensityMLP.nett().eval()
        with torch.no_grad():
            net.head.bias.fill_(0.5)  # keep the head active
        g = DenseGrid(np.full((4, 4, 4), 0.7))
        stored = float(np.float32(0.7))  # grids hold float32
        expected = float(mlp_forward(net, encode_density(torch.tensor([stored], dtype=DTYPE)))[0].detach())
        assert nett_sample(g, net, [0.0, 0.0, 0.0]) == pytest.approx(expected, abs=1e-12)

    @given(st.integers(0, 2 ** 31), points)
    def test_zero_bypass_for_any_weights(self, seed, p):
        torch.manual_seed(seed)
        net = DensityMLP.nett(hidden=(8, 8), skips=(1,))
        with torch.no_grad():
            net.head.bias.fill_(1.0)
        g = _ball_grid()
        if sample_grid(g, p) == 0.0:
            assert nett_sample(g, net, p) == 0.0

    def test_rejects_positional_network(self):
        with pytest.raises(ConfigurationError):
            NeTTField(_random_grid(8), DensityMLP.mnerf())


class TestMNeRF:
    @staticmethod
    def _net(seed=4):
        torch.manual_seed(seed)
        net = DensityMLP.mnerf(hidden=(16, 16, 16), skips=(2,)).eval()
        with torch.no_grad():
            net.head.bias.fill_(1.0)
        return net

    def test_outside_mask_is_zero(self):
        mask = build_mask(_ball_grid(), threshold=0.5)
        assert mnerf_sample(self._net(), mask, [0.9, 0.9, 0.9]) == 0.0

    def test_inside_mask_equals_unmasked(self):
        mask = build_mask(_ball_grid(), threshold=0.5)
        net = self._net()
        p = [0.05, -0.1, 0.1]
        assert mnerf_sample(net, mask, p) == mnerf_sample(net, None, p)
        assert mnerf_sample(net, mask, p) > 0

    def test_exterior_lattice_integrates_to_zero(self):
        g = _ball_grid()
        mask = build_mask(g, threshold=0.5)
        field = MNeRFField(self._net(), mask)
        c = torch.linspace(-1, 1, 21, dtype=DTYPE)
        pts = torch.stack(torch.meshgrid(c, c, c, indexing="ij"), -1).reshape(-1, 3)
        outside = ~mask.lookup(pts)
        assert outside.sum() > 1000
        with torch.no_grad():
            assert float(field.sample(pts[outside]).sum()) == 0.0

    def test_masked_samples_contribute_no_gradient(self):
        mask = build_mask(_ball_grid(), threshold=0.5)
        net = self._net()
        pts = torch.rand(200, 3, dtype=DTYPE) * 2 - 1
        inside = mask.lookup(pts)
        assert 0 < inside.sum() < 200

        def grads(p):
            net.zero_grad()
            MNeRFField(net, mask).sample(p).pow(2).sum().backward()
            return torch.cat([q.grad.reshape(-1) for q in net.parameters()]).clone()

        np.testing.assert_array_equal(grads(pts).numpy(), grads(pts[inside]).numpy())


class TestBuildMask:
    def test_empty_grid(self):
        assert not build_mask(DenseGrid(np.zeros((6, 6, 6))), dilation=0.3).data.any()

    def test_single_voxel_one_voxel_dilation(self):
        data = np.zeros((5, 5, 5))
        data[2, 2, 2] = 1.0
        g = DenseGrid(data)
        mask = build_mask(g, threshold=0.5, dilation=float(g.spacing[0]))
        expected = dilate_brute(data > 0.5, g.spacing, g.spacing[0])
        np.testing.assert_array_equal(mask.data, expected)
        assert mask.data.sum() == 7  # the centre and its six face neighbours

    @pytest.mark.parametrize("radius_vox", [1.5, 2.0])
    def test_larger_dilation_matches_brute_force(self, radius_vox):
        rng = np.random.default_rng(9)
        data = (rng.uniform(size=(5, 5, 5)) > 0.93).astype(float)
        g = DenseGrid(data)
        r = radius_vox * float(g.spacing[0])
        np.testing.assert_array_equal(build_mask(g, 0.5, r).data, dilate_brute(data > 0.5, g.spacing, r))

    def test_zero_dilation_is_thresholding(self):
        g = _random_grid(10)
        np.testing.assert_array_equal(build_mask(g, 0.4, 0.0).data, g.data > 0.4)

    def test_superset_of_thresholded_anatomy(self):
        g = _random_grid(11, (8, 8, 8))
        m = build_mask(g, 0.7, 0.3)
        assert np.all(m.data[g.data > 0.7])

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            build_mask(_random_grid(12), threshold=1.0)

    def test_lookup_uses_containing_voxel(self):
        data = np.zeros((2, 2, 2), dtype=bool)
        data[1, 0, 1] = True  # z > 0, y < 0, x > 0
        m = Mask3D(data)
        pts = torch.tensor([[0.5, -0.5, 0.5], [-0.5, -0.5, 0.5], [1.0, -1.0, 1.0], [1.01, -0.5, 0.5]],
                           dtype=DTYPE)
        assert m.lookup(pts).tolist() == [True, False, True, False]

    def test_three_millimetres_in_extent_units(self):
        assert mm_to_extent_units(3.0, 256.0) == pytest.approx(3.0 * 2 / 256)


class TestInterchangeableFields:
    def test_renderer_accepts_every_variant(self):
        g = _ball_grid()
        torch.manual_seed(5)
        fields = [g, NeTTField(g, DensityMLP.identity()),
                  MNeRFField(DensityMLP.mnerf(hidden=(8, 8), skips=(1,)).eval(), build_mask(g, 0.5)),
                  MNeRFField(DensityMLP.mnerf(hidden=(8, 8), skips=(1,)).eval(), None)]
        geom = RenderGeometry(7.8125, 48.0, 8, 8, n_samples=32)
        for f in fields:
            img = render_drr(f, Pose((10, 0, 0)), geom)
            assert img.shape == (8, 8) and torch.all(torch.isfinite(img)) and torch.all(img >= 0)

    def test_identity_nett_renders_like_grid(self):
        g = _ball_grid()
        geom = RenderGeometry(7.8125, 48.0, 8, 8, n_samples=32)
        with torch.no_grad():
            a = render_drr(g, Pose((10, 0, 0)), geom)
            b = render_drr(NeTTField(g, DensityMLP.identity()), Pose((10, 0, 0)), geom)
        np.testing.assert_allclose(b.numpy(), a.numpy(), atol=1e-14)
