import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from drrpose.diffmath import (NonFiniteError, UnsupportedPrimitiveError, check_gradient, evaluate,
                              maximum, minimum, record_and_grad, relative_error)
from drrpose.geometry import RenderGeometry
from drrpose.losses import pixel_loss
from drrpose.render import drr_image, render_drr


class TestRecordAndGrad:
    def test_square(self):
        value, grad = record_and_grad(lambda x: x[0] ** 2, [3.0])
        assert value == 9.0
        np.testing.assert_array_equal(grad, [6.0])

    def test_exp_sin(self):
        value, grad = record_and_grad(lambda x: torch.exp(x[0]) * torch.sin(x[1]), [0.0, math.pi / 2])
        assert value == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(grad, [1.0, 0.0], atol=1e-15)

    def test_constant_has_exactly_zero_gradient(self):
        _, grad = record_and_grad(lambda x: torch.tensor(4.2, dtype=torch.float64), [1.0, 2.0])
        np.testing.assert_array_equal(grad, [0.0, 0.0])
        _, grad = record_and_grad(lambda x: 0.0 * x[0] + 7.0, [5.0])
        np.testing.assert_array_equal(grad, [0.0])

    def test_unused_parameter_is_zero(self):
        _, grad = record_and_grad(lambda x: x[0] * 3, [1.0, 2.0])
        np.testing.assert_array_equal(grad, [3.0, 0.0])

    @given(st.lists(st.floats(-3, 3), min_size=3, max_size=3))
    def test_gradient_of_sum_is_sum_of_gradients(self, p):
        f = lambda x: torch.sin(x[0]) * x[1]
        g = lambda x: torch.exp(x[2]) * x[0] ** 2
        _, gf = record_and_grad(f, p)
        _, gg = record_and_grad(g, p)
        _, gs = record_and_grad(lambda x: f(x) + g(x), p)
        np.testing.assert_allclose(gs, gf + gg, rtol=1e-14, atol=1e-14)

    def test_nan_names_the_offending_primitive(self):
        with pytest.raises(NonFiniteError) as err:
            record_and_grad(lambda x: torch.log(x[0] - 2.0) * x[1], [1.0, 1.0])
        assert "log" in err.value.primitive

    def test_nan_check_can_be_disabled(self):
        value, _ = record_and_grad(lambda x: torch.log(x[0]), [-1.0], check_nan=False)
        assert math.isnan(value)

    def test_leaving_the_graph_is_rejected(self):
        with pytest.raises(UnsupportedPrimitiveError):
            record_and_grad(lambda x: float(np.sin(x.detach().numpy()[0])), [1.0])
        with pytest.raises(UnsupportedPrimitiveError):
            record_and_grad(lambda x: np.cos(x.numpy()[0]), [1.0])

    def test_vector_output_rejected(self):
        with pytest.raises(ValueError):
            record_and_grad(lambda x: x * 2, [1.0, 2.0])


class TestMinMax:
    def test_values(self):
        a, b = torch.tensor([1.0, 5.0]), torch.tensor([3.0, 2.0])
        np.testing.assert_array_equal(maximum(a, b), [3.0, 5.0])
        np.testing.assert_array_equal(minimum(a, b), [1.0, 2.0])

    @pytest.mark.parametrize("op", [maximum, minimum])
    def test_tie_sends_gradient_to_first_argument(self, op):
        _, grad = record_and_grad(lambda x: op(x[0], x[1]), [2.0, 2.0])
        np.testing.assert_array_equal(grad, [1.0, 0.0])

    def test_gradient_goes_to_attained_argument(self):
        _, grad = record_and_grad(lambda x: maximum(x[0], x[1]), [1.0, 2.0])
        np.testing.assert_array_equal(grad, [0.0, 1.0])
        _, grad = record_and_grad(lambda x: minimum(x[0], x[1]), [1.0, 2.0])
        np.testing.assert_array_equal(grad, [1.0, 0.0])


class TestForwardValues:
    def test_recording_does_not_change_values(self, small_phantom):
        geom = RenderGeometry(7.8125, 96.0, 16, 16, n_samples=48)

        def f(x):
            return render_drr(small_phantom, x, geom).sum()

        p = [12.0, -7.0, 3.0, 0.02, -0.05, 0.1]
        recorded, _ = record_and_grad(f, p, check_nan=False)
        assert recorded == evaluate(f, p)

    def test_recorded_and_unrecorded_images_bitwise_equal(self, small_phantom):
        geom = RenderGeometry(7.8125, 96.0, 16, 16, n_samples=48)
        theta = torch.tensor([20.0, 5.0, -3.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        with torch.no_grad():
            plain = render_drr(small_phantom, theta, geom)
        recorded = render_drr(small_phantom, theta.clone().requires_grad_(True), geom)
        assert torch.equal(plain, recorded.detach())


class TestCheckGradient:
    def test_linear_function_has_zero_error(self):
        w = torch.tensor([2.0, -1.0, 0.5], dtype=torch.float64)
        rep = check_gradient(lambda x: (w * x).sum() + 3.0, [0.3, 0.1, -0.2], step=0.5)
        assert rep.ok
        assert rep.max_rel_error < 1e-15

    def test_abs_at_zero_is_flagged(self):
        rep = check_gradient(lambda x: torch.abs(x[0]), [0.0], step=1e-4)
        assert rep.kink[0]
        assert rep.ok

    def test_abs_away_from_zero_is_checked(self):
        rep = check_gradient(lambda x: torch.abs(x[0]), [0.5], step=1e-4)
        assert not rep.kink[0] and rep.ok

    def test_kink_inside_step_is_stepped_around(self):
        # the kink at 0.7 lies between h/2 and h from the evaluation point
        f = lambda x: 100 * torch.relu(x[0] - 0.7) + x[0]
        rep = check_gradient(f, [0.7 - 0.8e-3], step=1e-3)
        assert not rep.kink[0] and rep.ok
        assert rep.step[0] == pytest.approx(1e-4)

    def test_unresolved_kink_is_flagged(self):
        f = lambda x: 100 * torch.relu(x[0] - 0.7) + x[0]
        rep = check_gradient(f, [0.7 - 0.8e-3], step=1e-2, refinements=1)
        assert rep.kink[0] and rep.ok

    def test_wrong_gradient_fails(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return x ** 2

            @staticmethod
            def backward(ctx, g):
                return g * 3.0

        rep = check_gradient(lambda x: Wrong.apply(x[0]), [1.0], step=1e-5)
        assert not rep.ok
        assert rep.max_rel_error == pytest.approx(1 / 3, rel=1e-6)

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            check_gradient(lambda x: x[0], [1.0], step=0.0)

    def test_relative_error_floor(self):
        assert relative_error(0.0, 0.0) == 0.0
        assert relative_error(1e-9, 0.0) == pytest.approx(1e-9 / 1e-8)

    def test_pose_mse_gradient_matches_central_differences(self, phantom, geom32):
        geom = geom32.with_(width=16, height=16, sid=96.0)
        target = drr_image(phantom, [0.0] * 6, geom).detach()

        def loss(x):
            return pixel_loss("mse", drr_image(phantom, x, geom), target)

        steps = [1e-3] * 3 + [1e-4] * 3
        rep = check_gradient(loss, [8.0, -5.0, 4.0, 0.03, -0.02, 0.04], step=steps)
        assert not rep.kink.any()
        assert rep.max_rel_error < 1e-3
        assert np.all(rep.step <= steps)
