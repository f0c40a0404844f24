import numpy as np
import pytest

from relax.baselines import (
    MODE_ANALYTIC,
    MODE_FD,
    SaliencySpec,
    SmoothgradParams,
    linear_gradient_matrix,
    saliency,
    smoothgrad,
)
from relax.core import Image
from relax.extractors import DownsampleFlattenExtractor, LinearProjectionExtractor


def random_image(rng, shape=(8, 8, 1)):
    return Image(rng.random(shape).astype(np.float32))


class TestAnalytic:
    def test_matrix_equals_projection_rows(self):
        ex = LinearProjectionExtractor(6, seed=2)
        grad = linear_gradient_matrix(ex, 4, 4, 1)
        assert np.allclose(grad, ex.matrix(4, 4, 1), atol=1e-12)

    def test_saliency_is_column_mean_of_matrix(self):
        ex = LinearProjectionExtractor(6, seed=2)
        image = random_image(np.random.default_rng(0), (4, 4, 1))
        grid = saliency(image, ex, SaliencySpec(mode=MODE_ANALYTIC))
        expected = ex.matrix(4, 4, 1).mean(axis=0).reshape(4, 4)
        assert np.allclose(grid, expected, atol=1e-12)

    def test_analytic_ignores_image_content(self):
        ex = LinearProjectionExtractor(5, seed=1)
        rng = np.random.default_rng(3)
        spec = SaliencySpec(mode=MODE_ANALYTIC)
        a = saliency(random_image(rng), ex, spec)
        b = saliency(random_image(rng), ex, spec)
        assert np.array_equal(a, b)

    def test_channels_averaged(self):
        ex = DownsampleFlattenExtractor(2, 2)
        grid = saliency(Image(np.zeros((4, 4, 3), dtype=np.float32)), ex, SaliencySpec(mode=MODE_ANALYTIC))
        # each pixel feeds one pooling cell: d g / d pixel = 1 / (cell area * D)
        assert np.allclose(grid, 1.0 / (4 * 12), atol=1e-12)

    def test_nonlinear_extractor_rejected(self):
        class NotLinear(LinearProjectionExtractor):
            is_linear = False

        with pytest.raises(ValueError, match="linear"):
            saliency(
                random_image(np.random.default_rng(0)),
                NotLinear(4),
                SaliencySpec(mode=MODE_ANALYTIC),
            )


class TestFiniteDifferences:
    def test_matches_analytic_on_linear_extractors(self):
        rng = np.random.default_rng(5)
        for trial in range(10):
            ex = LinearProjectionExtractor(8, seed=trial)
            image = Image(rng.random((16, 16, 1)).astype(np.float32))
            fd = saliency(image, ex, SaliencySpec(mode=MODE_FD))
            exact = saliency(image, ex, SaliencySpec(mode=MODE_ANALYTIC))
            assert np.max(np.abs(fd - exact)) <= 1e-4

    def test_halving_step_shrinks_error(self):
        class Quadratic:
            """f(X) = (sum X)^2 with known derivative 2 * sum X per pixel."""

            is_linear = False

            def batch(self, data):
                data = np.asarray(data, dtype=np.float64)
                s = data.reshape(data.shape[0], -1).sum(axis=1)
                return (s**2)[:, np.newaxis]

            def out_dim(self, h, w, c):
                return 1

            def __call__(self, data):
                return self.batch(np.asarray(data)[np.newaxis])[0]

            def descriptor(self):
                return "quad"

        # central differences on a quadratic are exact up to rounding, so use
        # a cubic term to expose the O(step^2) truncation error
        class Cubic(Quadratic):
            def batch(self, data):
                data = np.asarray(data, dtype=np.float64)
                s = data.reshape(data.shape[0], -1).sum(axis=1)
                return (s**3)[:, np.newaxis]

        rng = np.random.default_rng(0)
        image = Image(rng.random((4, 4, 1)).astype(np.float32))
        truth = 3.0 * image.data.astype(np.float64).sum() ** 2
        coarse = saliency(image, Cubic(), SaliencySpec(fd_step=0.2))
        fine = saliency(image, Cubic(), SaliencySpec(fd_step=0.1))
        err_coarse = np.max(np.abs(coarse - truth))
        err_fine = np.max(np.abs(fine - truth))
        assert err_fine <= err_coarse / 3.0  # O(step^2): expect ~4x

    def test_constant_extractor_zero_gradient(self):
        class Const:
            is_linear = False

            def batch(self, data):
                return np.ones((np.asarray(data).shape[0], 3))

            def out_dim(self, h, w, c):
                return 3

            def __call__(self, data):
                return self.batch(np.asarray(data)[np.newaxis])[0]

            def descriptor(self):
                return "const"

        grid = saliency(random_image(np.random.default_rng(1)), Const(), SaliencySpec())
        assert np.array_equal(grid, np.zeros((8, 8)))

    def test_cost_guard(self):
        image = Image(np.zeros((200, 200, 1), dtype=np.float32))
        with pytest.raises(ValueError, match="cost guard"):
            saliency(image, LinearProjectionExtractor(4), SaliencySpec(mode=MODE_FD))

    def test_spec_validation(self):
        with pytest.raises(ValueError, match="mode"):
            SaliencySpec(mode="exact")
        with pytest.raises(ValueError, match="fd_step"):
            SaliencySpec(fd_step=0.0)


class TestSmoothgrad:
    def test_sigma_zero_equals_saliency_bitwise(self):
        rng = np.random.default_rng(2)
        ex = LinearProjectionExtractor(8, seed=0)
        image = random_image(rng)
        spec = SaliencySpec(smoothgrad=SmoothgradParams(n_samples=5, sigma=0.0))
        assert np.array_equal(smoothgrad(image, ex, spec), saliency(image, ex, spec))

    def test_single_sample_works(self):
        ex = LinearProjectionExtractor(8, seed=0)
        image = random_image(np.random.default_rng(3))
        spec = SaliencySpec(smoothgrad=SmoothgradParams(n_samples=1, sigma=0.05))
        grid = smoothgrad(image, ex, spec)
        assert grid.shape == (8, 8)
        assert np.isfinite(grid).all()

    def test_linear_extractor_noise_has_no_effect_in_analytic_mode(self):
        # the analytic gradient of a linear map is input-independent, so
        # averaging over noisy copies changes nothing
        ex = LinearProjectionExtractor(8, seed=4)
        image = random_image(np.random.default_rng(4))
        spec = SaliencySpec(
            mode=MODE_ANALYTIC, smoothgrad=SmoothgradParams(n_samples=7, sigma=0.3)
        )
        assert np.allclose(
            smoothgrad(image, ex, spec),
            saliency(image, ex, SaliencySpec(mode=MODE_ANALYTIC)),
            atol=1e-12,
        )

    def test_fd_on_linear_extractor_close_to_analytic(self):
        # clipping at [0, 1] can bend a few samples; keep sigma small
        ex = LinearProjectionExtractor(8, seed=5)
        data = 0.5 + 0.2 * np.random.default_rng(5).random((8, 8, 1))
        image = Image(data.astype(np.float32))
        spec = SaliencySpec(smoothgrad=SmoothgradParams(n_samples=4, sigma=0.05))
        exact = saliency(image, ex, SaliencySpec(mode=MODE_ANALYTIC))
        assert np.max(np.abs(smoothgrad(image, ex, spec) - exact)) <= 1e-4

    def test_deterministic_by_seed(self):
        class Quadratic:
            """Gradient depends on the input, so the noise draws matter."""

            is_linear = False

            def batch(self, data):
                data = np.asarray(data, dtype=np.float64)
                s = data.reshape(data.shape[0], -1).sum(axis=1)
                return (s**2)[:, np.newaxis]

            def out_dim(self, h, w, c):
                return 1

            def __call__(self, data):
                return self.batch(np.asarray(data)[np.newaxis])[0]

            def descriptor(self):
                return "quad"

        image = random_image(np.random.default_rng(6))
        spec = SaliencySpec(smoothgrad=SmoothgradParams(n_samples=3, sigma=0.2, seed=9))
        a = smoothgrad(image, Quadratic(), spec)
        b = smoothgrad(image, Quadratic(), spec)
        assert np.array_equal(a, b)
        other = SaliencySpec(smoothgrad=SmoothgradParams(n_samples=3, sigma=0.2, seed=10))
        assert not np.array_equal(a, smoothgrad(image, Quadratic(), other))

    def test_params_validation(self):
        with pytest.raises(ValueError, match="n_samples"):
            SmoothgradParams(n_samples=0)
        with pytest.raises(ValueError, match="sigma"):
            SmoothgradParams(sigma=-0.1)
