"""
GNPP forward/backward behavior and the algebraic properties the layer must satisfy.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from src.core.exceptions import ShapeError
from src.schemas.gnpp import GnppConfig, NeighborhoodType
from src.services.gnpp_service import (
    EMPTY_SIDE_SET,
    gaussian_blur_backward,
    gaussian_blur_forward,
    gaussian_kernel,
    gnpp_backward,
    gnpp_forward,
)
from src.services.gradcheck_service import layer_gradcheck
from src.services.layer_service import GaussianBlurLayer, GnppLayer

T1 = GnppConfig(nb_type=NeighborhoodType.TYPE1, sigma=1.0)
T2 = GnppConfig(nb_type=NeighborhoodType.TYPE2, sigma=1.0)

CONFIGS = [
    GnppConfig(nb_type=t, sigma=s) for t in NeighborhoodType for s in (1.0, 0.8)
]


def naive_gnpp(x, cfg):
    n, c, h, w = x.shape
    z = np.zeros_like(x)
    for i in range(n):
        for d in range(c):
            for y in range(h):
                for xx in range(w):
                    best = None
                    for dy, dx, weight in cfg.offsets:
                        yy, xs = y + dy, xx + dx
                        if 0 <= yy < h and 0 <= xs < w:
                            value = weight * x[i, d, yy, xs]
                            best = value if best is None else max(best, value)
                    z[i, d, y, xx] = 0.5 * (x[i, d, y, xx] + (0.0 if best is None else best))
    return z


def test_offsets_and_weights():
    cfg = GnppConfig(nb_type=NeighborhoodType.TYPE2, sigma=0.5)
    assert cfg.k == 8
    weights = [w for _, _, w in cfg.offsets]
    assert weights[:4] == [0.5] * 4
    assert weights[4:] == [0.25] * 4
    assert GnppConfig(nb_type=NeighborhoodType.TYPE1, sigma=0.5).k == 4


@pytest.mark.parametrize("sigma", [0.0, -0.1, 1.5])
def test_sigma_outside_unit_interval_is_rejected(sigma):
    with pytest.raises(ValidationError):
        GnppConfig(sigma=sigma)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_forward_matches_naive_loops(cfg):
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 6))
    z, _ = gnpp_forward(x, cfg)
    np.testing.assert_allclose(z, naive_gnpp(x, cfg), rtol=1e-12)


@pytest.mark.parametrize("cfg", [T1, T2])
def test_constant_map_is_a_fixed_point(cfg):
    x = np.full((1, 2, 6, 6), 3.25, dtype=np.float64)
    z, _ = gnpp_forward(x, cfg)
    np.testing.assert_array_equal(z, x)


def test_isolated_spike_is_halved_and_spreads_sigma_weighted():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 2, 2] = 4.0
    z, _ = gnpp_forward(x, GnppConfig(nb_type=NeighborhoodType.TYPE2, sigma=0.5))
    assert z[0, 0, 2, 2] == 2.0
    assert z[0, 0, 1, 2] == 0.5 * 0.5 * 4.0
    assert z[0, 0, 1, 1] == 0.5 * 0.25 * 4.0
    assert z[0, 0, 0, 0] == 0.0


def test_clustered_responses_are_preserved():
    x = np.zeros((1, 1, 5, 5))
    x[0, 0, 1:4, 1:4] = 1.0
    z, _ = gnpp_forward(x, T1)
    np.testing.assert_array_equal(z[0, 0, 1:4, 1:4], np.ones((3, 3)))


def test_one_by_one_map_uses_the_empty_side_set():
    x = np.array([[[[-3.0]], [[5.0]]]])
    z, cache = gnpp_forward(x, T2)
    np.testing.assert_array_equal(z.ravel(), [-1.5, 2.5])
    assert np.all(cache.argmax == EMPTY_SIDE_SET)
    grad = gnpp_backward(np.ones_like(z), cache, T2)
    np.testing.assert_array_equal(grad, np.full_like(x, 0.5))


def test_ties_route_to_the_first_offset():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 1] = 1.0  # up of the center
    x[0, 0, 2, 1] = 1.0  # down of the center
    _, cache = gnpp_forward(x, T1)
    assert cache.argmax[0, 0, 1, 1] == 0
    grad_z = np.zeros((1, 1, 3, 3))
    grad_z[0, 0, 1, 1] = 1.0
    grad = gnpp_backward(grad_z, cache, T1)
    assert grad[0, 0, 0, 1] == 0.5
    assert grad[0, 0, 2, 1] == 0.0
    assert grad[0, 0, 1, 1] == 0.5


def test_backward_rejects_mismatched_gradient():
    x = np.zeros((1, 1, 3, 3))
    _, cache = gnpp_forward(x, T1)
    with pytest.raises(ShapeError):
        gnpp_backward(np.zeros((1, 1, 4, 4)), cache, T1)


# ---------------------------------------------------------------------------
# Algebra on 200 random 7x7 instances
# ---------------------------------------------------------------------------

def random_instances(count=200):
    rng = np.random.default_rng(42)
    for _ in range(count):
        yield rng, rng.standard_normal((1, 2, 7, 7))


@pytest.mark.parametrize("cfg", CONFIGS)
def test_monotonicity(cfg):
    for rng, x in random_instances():
        y = x + rng.random(x.shape)
        zx, _ = gnpp_forward(x, cfg)
        zy, _ = gnpp_forward(y, cfg)
        assert np.all(zx <= zy + 1e-12)


@pytest.mark.parametrize("cfg", CONFIGS)
def test_positive_homogeneity(cfg):
    for rng, x in random_instances():
        alpha = rng.uniform(0.1, 10.0)
        zx, cx = gnpp_forward(x, cfg)
        zax, cax = gnpp_forward(alpha * x, cfg)
        np.testing.assert_allclose(zax, alpha * zx, rtol=1e-10, atol=1e-12)
        np.testing.assert_array_equal(cax.argmax, cx.argmax)


def test_channel_permutation_equivariance():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 5, 7, 7))
    perm = rng.permutation(5)
    for cfg in CONFIGS:
        z, _ = gnpp_forward(x, cfg)
        zp, _ = gnpp_forward(x[:, perm], cfg)
        np.testing.assert_array_equal(zp, z[:, perm])


def test_gnpp_is_not_additive():
    x = np.zeros((1, 1, 3, 3))
    y = np.zeros((1, 1, 3, 3))
    x[0, 0, 0, 1] = 1.0
    y[0, 0, 2, 1] = 1.0
    zx, _ = gnpp_forward(x, T1)
    zy, _ = gnpp_forward(y, T1)
    zxy, _ = gnpp_forward(x + y, T1)
    # the center sees max(1, 1) = 1, not 1 + 1
    assert zxy[0, 0, 1, 1] == 0.5
    assert zx[0, 0, 1, 1] + zy[0, 0, 1, 1] == 1.0


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("cfg", CONFIGS)
def test_gnpp_backward_matches_central_differences(cfg):
    x = np.random.default_rng(3).standard_normal((2, 2, 5, 5))
    report = layer_gradcheck(GnppLayer(cfg), x, seed=1, samples=40)
    assert report["passed"].all(), report


def test_gradient_routes_to_argmax_side_word():
    x = np.zeros((1, 1, 1, 3))
    x[0, 0, 0, 2] = 2.0
    cfg = GnppConfig(nb_type=NeighborhoodType.TYPE1, sigma=0.5)
    z, cache = gnpp_forward(x, cfg)
    grad_z = np.zeros_like(z)
    grad_z[0, 0, 0, 1] = 1.0
    grad = gnpp_backward(grad_z, cache, cfg)
    np.testing.assert_allclose(grad[0, 0, 0], [0.0, 0.5, 0.25])


def test_backward_on_constant_map_counts_selections():
    x = np.ones((1, 1, 3, 3))
    z, cache = gnpp_forward(x, T1)
    grad_z = np.ones_like(z)
    grad = gnpp_backward(grad_z, cache, T1)

    selections = np.zeros((3, 3))
    for y in range(3):
        for xx in range(3):
            dy, dx, _ = T1.offsets[cache.argmax[0, 0, y, xx]]
            selections[y + dy, xx + dx] += 1
    np.testing.assert_allclose(grad[0, 0], 0.5 + 0.5 * selections)
    # ties go to the first offset: up, or down on the top row
    np.testing.assert_allclose(grad[0, 0], [[1.0, 1.0, 1.0], [1.5, 1.5, 1.5], [0.5, 0.5, 0.5]])
    assert grad.sum() == pytest.approx(grad_z.sum())


# ---------------------------------------------------------------------------
# Gaussian blur control
# ---------------------------------------------------------------------------

def test_gaussian_kernel_is_normalized_with_three_sigma_radius():
    kernel = gaussian_kernel(1.0)
    assert len(kernel) == 7
    assert kernel.sum() == pytest.approx(1.0)
    assert len(gaussian_kernel(0.5)) == 5
    with pytest.raises(ShapeError):
        gaussian_kernel(0.0)


def test_blur_preserves_constant_interior_and_is_self_adjoint():
    x = np.ones((1, 1, 12, 12))
    blurred = gaussian_blur_forward(x, 1.0)
    np.testing.assert_allclose(blurred[0, 0, 3:9, 3:9], 1.0)
    assert blurred[0, 0, 0, 0] < 1.0

    rng = np.random.default_rng(0)
    a = rng.standard_normal((2, 3, 6, 7))
    b = rng.standard_normal((2, 3, 6, 7))
    lhs = np.sum(gaussian_blur_forward(a, 0.8) * b)
    rhs = np.sum(a * gaussian_blur_backward(b, 0.8))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_blur_backward_matches_central_differences():
    x = np.random.default_rng(5).standard_normal((1, 2, 6, 6))
    report = layer_gradcheck(GaussianBlurLayer(0.7), x, samples=30)
    assert report["passed"].all(), report
