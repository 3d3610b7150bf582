"""
Tests for compositing, its backward pass, the loss, Adam and PSNR.
"""
import numpy as np
import pytest

from src.core.errors import RenderError
from src.core.radiance_field import ParamStore
from src.core.renderer import adam_step, composite, composite_backward, loss_mse, psnr


def _random_ray(rng, samples: int = 16):
    return rng.random((samples, 3)), rng.uniform(0.01, 3.0, samples), rng.uniform(0.05, 0.3, samples)


def test_transparent_ray():
    """Zero density renders black with full transmittance."""
    result = composite(np.ones((5, 3)), np.zeros(5), np.full(5, 0.1))
    np.testing.assert_array_equal(result.rgb, [0.0, 0.0, 0.0])
    assert result.final_transmittance == 1.0


def test_single_sample_half_opacity():
    """sigma * delta = ln 2 gives half the sample color."""
    result = composite([[1.0, 0.0, 0.0]], [np.log(2.0)], [1.0])
    np.testing.assert_allclose(result.rgb, [0.5, 0.0, 0.0])


def test_two_samples_opaque_behind():
    """A half-transparent red sample in front of an opaque green one."""
    result = composite([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [np.log(2.0), 20.0], [1.0, 1.0])
    np.testing.assert_allclose(result.rgb, [0.5, 0.5 * (1.0 - np.exp(-20.0)), 0.0], atol=1e-12)
    assert result.transmittance[0] == 1.0
    assert result.transmittance[1] == pytest.approx(0.5)


def test_partition_of_unity():
    """Weights plus final transmittance sum to one on random rays."""
    rng = np.random.default_rng(0)
    rgb = rng.random((1000, 32, 3))
    sigma = rng.exponential(2.0, (1000, 32))
    delta = rng.uniform(0.01, 0.5, (1000, 32))
    result = composite(rgb, sigma, delta)
    total = result.weights.sum(axis=-1) + result.final_transmittance
    np.testing.assert_allclose(total, 1.0, atol=1e-9)
    assert (np.diff(result.transmittance, axis=-1) <= 0).all()
    assert ((result.alpha >= 0) & (result.alpha < 1)).all()
    assert ((result.rgb >= 0) & (result.rgb <= 1)).all()


def test_zero_density_samples_do_not_matter():
    """Inserting transparent samples leaves the color unchanged."""
    rng = np.random.default_rng(1)
    rgb, sigma, delta = _random_ray(rng, 8)
    base = composite(rgb, sigma, delta).rgb
    padded = composite(np.insert(rgb, 3, [0.3, 0.9, 0.1], axis=0), np.insert(sigma, 3, 0.0),
                       np.insert(delta, 3, 0.2)).rgb
    np.testing.assert_allclose(padded, base, atol=1e-9)


def test_composite_validation():
    """Empty lists, negative densities, bad spacings and shape mismatches are errors."""
    with pytest.raises(RenderError):
        composite(np.zeros((0, 3)), np.zeros(0), np.zeros(0))
    with pytest.raises(RenderError):
        composite(np.zeros((2, 3)), [-1.0, 0.0], [0.1, 0.1])
    with pytest.raises(RenderError):
        composite(np.zeros((2, 3)), [1.0, 0.0], [0.1, 0.0])
    with pytest.raises(RenderError):
        composite(np.zeros((2, 3)), [1.0, 0.0, 0.0], [0.1, 0.1, 0.1])


def test_backward_single_sample():
    """d/dc of a single sample is upstream * alpha."""
    upstream = np.array([0.3, -1.0, 2.0])
    d_rgb, _ = composite_backward([[0.2, 0.4, 0.6]], [1.5], [0.4], upstream)
    np.testing.assert_allclose(d_rgb[0], upstream * (1.0 - np.exp(-0.6)))


def test_backward_zero_density():
    """Color gradients vanish when every alpha does."""
    d_rgb, _ = composite_backward(np.ones((4, 3)), np.zeros(4), np.full(4, 0.1), [1.0, 1.0, 1.0])
    assert not d_rgb.any()


def test_backward_matches_finite_differences():
    """Analytic gradients match central differences on 100 random 16-sample rays."""
    rng = np.random.default_rng(2)
    h = 1e-5
    for _ in range(100):
        rgb, sigma, delta = _random_ray(rng)
        upstream = rng.normal(size=3)
        d_rgb, d_sigma = composite_backward(rgb, sigma, delta, upstream)

        def f(rgb_, sigma_):
            return composite(rgb_, sigma_, delta).rgb @ upstream

        num_sigma = np.empty(16)
        for i in range(16):
            up, down = sigma.copy(), sigma.copy()
            up[i] += h
            down[i] -= h
            num_sigma[i] = (f(rgb, up) - f(rgb, down)) / (2 * h)
        num_rgb = np.empty((16, 3))
        for i in range(16):
            for c in range(3):
                up, down = rgb.copy(), rgb.copy()
                up[i, c] += h
                down[i, c] -= h
                num_rgb[i, c] = (f(up, sigma) - f(down, sigma)) / (2 * h)
        np.testing.assert_allclose(d_sigma, num_sigma, rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(d_rgb, num_rgb, rtol=1e-4, atol=1e-8)


def test_batched_backward_matches_single():
    """Leading batch axes are independent rays."""
    rng = np.random.default_rng(3)
    rays = [_random_ray(rng, 6) for _ in range(4)]
    rgb = np.stack([r[0] for r in rays])
    sigma = np.stack([r[1] for r in rays])
    delta = np.stack([r[2] for r in rays])
    upstream = rng.normal(size=(4, 3))
    d_rgb, d_sigma = composite_backward(rgb, sigma, delta, upstream)
    for i in range(4):
        single = composite_backward(rgb[i], sigma[i], delta[i], upstream[i])
        np.testing.assert_allclose(d_rgb[i], single[0], atol=1e-12)
        np.testing.assert_allclose(d_sigma[i], single[1], atol=1e-12)


def test_loss_examples():
    """Loss and gradient of hand-checked cases."""
    assert loss_mse([[0.2, 0.3, 0.4]], [[0.2, 0.3, 0.4]])[0] == 0.0
    loss, grad = loss_mse([[0.5, 0.0, 0.0]], [[0.0, 0.0, 0.0]])
    assert loss == pytest.approx(0.25)
    np.testing.assert_allclose(grad, [[1.0, 0.0, 0.0]])
    loss, _ = loss_mse([[0.1, 0.0, 0.0], [0.0, 0.2, 0.0]], np.zeros((2, 3)))
    assert loss == pytest.approx(0.025)


def test_loss_length_mismatch():
    """Rendered and true colors must pair up."""
    with pytest.raises(RenderError):
        loss_mse(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(RenderError):
        loss_mse(np.zeros((0, 3)), np.zeros((0, 3)))


def test_adam_first_step():
    """The bias-corrected first step moves by about lr."""
    store = ParamStore(np.array([1.0]))
    store.grad[:] = 4.0
    adam_step(store, 0.1)
    assert store.params[0] == pytest.approx(1.0 - 0.1 * 4.0 / (4.0 + 1e-8))
    assert store.step == 1
    assert not store.grad.any()


def test_adam_zero_gradient():
    """A zero gradient leaves parameters in place."""
    store = ParamStore(np.array([0.5, -2.0]))
    adam_step(store, 0.1)
    np.testing.assert_array_equal(store.params, [0.5, -2.0])


def test_adam_constant_gradient_steps():
    """Two steps with the same gradient have nearly equal size."""
    store = ParamStore(np.zeros(1))
    store.grad[:] = 0.7
    adam_step(store, 0.01)
    first = -store.params[0]
    store.grad[:] = 0.7
    adam_step(store, 0.01)
    second = -store.params[0] - first
    assert second == pytest.approx(first, rel=0.05)


def test_psnr_examples():
    """Cap on identical images and closed-form values."""
    img = np.full((4, 5, 3), 0.3)
    assert psnr(img, img) == 99.0
    assert psnr(np.zeros((4, 5, 3)), np.full((4, 5, 3), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    assert psnr(np.zeros((4, 5, 3)), np.full((4, 5, 3), 0.1)) == pytest.approx(20.0)
    with pytest.raises(RenderError):
        psnr(np.zeros((4, 5, 3)), np.zeros((5, 4, 3)))
