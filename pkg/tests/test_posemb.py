import numpy as np
import pytest

from navit.errors import ConfigError, DimensionError, RangeError
from navit.numerics import Tensor, grad_check, make_rng, ops
from navit.packing import grid_coords
from navit.posemb import (
    FRACTIONAL,
    VARIANTS,
    add_posemb,
    eval_posemb,
    init_posemb,
    sinusoid_frequencies,
)


def table(variant, width=16, maxdim=8, seed=0):
    return init_posemb(variant, width, maxdim, make_rng(seed, "posemb"))


@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_emits_width_columns(variant, double):
    t = table(variant)
    out = eval_posemb(t, grid_coords(3, 5), 3, 5)
    assert out.shape == (15, 16)
    assert np.isfinite(out.data).all()


def test_sum_with_zero_x_table_equals_y_embedding(double):
    t = table("fact-abs-sum")
    t.params["x"].data[:] = 0
    coords = grid_coords(4, 4)
    out = eval_posemb(t, coords, 4, 4).data
    np.testing.assert_array_equal(out, t.params["y"].data[coords[:, 1]])


def test_stack_widths():
    t = table("fact-abs-stack", width=64)
    assert t.params["x"].shape[1] == 32 and t.params["y"].shape[1] == 32
    assert eval_posemb(t, grid_coords(2, 2), 2, 2).shape == (4, 64)


def test_product_is_elementwise(double):
    t = table("fact-abs-prod")
    coords = np.array([[1, 2], [3, 0]])
    out = eval_posemb(t, coords, 4, 4).data
    expected = t.params["x"].data[[1, 3]] * t.params["y"].data[[2, 0]]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_learned2d_is_direct_lookup(double):
    t = table("learned2d")
    out = eval_posemb(t, [[2, 5]], 6, 6).data
    np.testing.assert_array_equal(out[0], t.params["table"].data[5 * 8 + 2])


def test_learned1d_on_training_grid_is_lookup(double):
    t = table("learned1d")
    out = eval_posemb(t, grid_coords(8, 8), 8, 8).data
    np.testing.assert_allclose(out, t.params["table"].data, rtol=0, atol=1e-15)


def test_learned1d_interpolation_matches_bilinear_resize(double):
    t = table("learned1d", maxdim=4)
    grid = t.params["table"].data.reshape(4, 4, -1)
    # oracle: explicit separable bilinear resize of the 4x4 table to 2x6
    def axis(n_out, n_in):
        w = np.zeros((n_out, n_in))
        for o in range(n_out):
            p = min(max((o + 0.5) * n_in / n_out - 0.5, 0), n_in - 1)
            lo = int(np.floor(p))
            hi = min(lo + 1, n_in - 1)
            w[o, lo] += 1 - (p - lo)
            w[o, hi] += p - lo
        return w
    resized = np.einsum("ri,cj,ijd->rcd", axis(2, 4), axis(6, 4), grid)
    out = eval_posemb(t, grid_coords(2, 6), 2, 6).data.reshape(2, 6, -1)
    np.testing.assert_allclose(out, resized, rtol=0, atol=1e-12)


def test_fractional_sinusoid_matches_closed_form(double):
    maxdim, width = 16, 16
    t = table("sinus-frac", width=width, maxdim=maxdim)
    out = eval_posemb(t, [[2, 0]], 1, 8).data[0]
    # x = 2 of 8 columns -> virtual position 0.25 * maxdim = 4, an exact grid point
    omega = (1e4 * maxdim) ** (-np.arange(width // 4) / (width // 4 - 1))
    expected_x = np.concatenate([np.sin(omega * 4), np.cos(omega * 4)])
    np.testing.assert_allclose(out[: width // 2], expected_x, rtol=0, atol=1e-6)
    # off-grid positions interpolate linearly between neighbouring integer positions
    out = eval_posemb(t, [[1, 0]], 1, 3).data[0]
    pos = 16 / 3
    lo, frac = int(np.floor(pos)), pos - np.floor(pos)
    expected = (1 - frac) * np.concatenate([np.sin(omega * lo), np.cos(omega * lo)]) + \
        frac * np.concatenate([np.sin(omega * (lo + 1)), np.cos(omega * (lo + 1))])
    np.testing.assert_allclose(out[: width // 2], expected, rtol=0, atol=1e-6)


def test_sinusoid_frequency_ladder_endpoints():
    f = sinusoid_frequencies(32, 16)
    assert f[0] == 1.0
    assert f[-1] == pytest.approx(1 / (1e4 * 16))


@pytest.mark.parametrize("variant", FRACTIONAL)
def test_fractional_variants_extrapolate(variant):
    t = table(variant)
    out = eval_posemb(t, grid_coords(16, 32), 16, 32)
    assert np.isfinite(out.data).all()


@pytest.mark.parametrize("variant", ["learned2d", "fact-abs-sum", "fact-abs-stack", "fact-abs-prod"])
def test_absolute_tables_raise_beyond_maxdim(variant):
    t = table(variant)
    with pytest.raises(RangeError, match="maxdim=8"):
        eval_posemb(t, [[8, 0]], 1, 9)
    with pytest.raises(RangeError, match="maxdim=8"):
        eval_posemb(t, [[0, 9]], 10, 1)


@pytest.mark.parametrize("variant", VARIANTS)
def test_embedding_is_local_to_the_example(variant, double):
    t = table(variant)
    a = grid_coords(3, 4)
    b = grid_coords(5, 2)
    alone = eval_posemb(t, a, 3, 4).data
    together = eval_posemb(t, np.concatenate([b, a]), np.r_[[5] * 10, [3] * 12],
                           np.r_[[2] * 10, [4] * 12]).data
    np.testing.assert_array_equal(together[10:], alone)


@pytest.mark.parametrize("variant", ["learned1d", "learned2d", "fact-abs-stack", "fact-frac-sum",
                                     "fourier-abs", "fourier-frac"])
def test_learned_parameters_get_correct_gradients(variant, double):
    t = table(variant, width=8, maxdim=4)
    coords = grid_coords(3, 3)
    w = Tensor(np.random.default_rng(1).normal(size=(9, 8)))
    params = list(t.params.values())
    assert grad_check(lambda: ops.sum(ops.mul(eval_posemb(t, coords, 3, 3), w)), params) <= 1e-6


def test_add_posemb():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 6)))
    assert np.array_equal(add_posemb(x, Tensor(np.zeros((4, 6)))).data, x.data)
    with pytest.raises(DimensionError):
        add_posemb(x, Tensor(np.zeros((4, 5))))


def test_add_posemb_additivity(double):
    r = np.random.default_rng(3)
    t, a, b = (Tensor(r.normal(size=(5, 4))) for _ in range(3))
    left = add_posemb(add_posemb(t, a), b).data
    right = add_posemb(t, Tensor(a.data + b.data)).data
    np.testing.assert_allclose(left, right, rtol=0, atol=1e-12)
    np.testing.assert_allclose(add_posemb(t, a).data, t.data + a.data, rtol=0, atol=0)


def test_bad_variant_and_width():
    with pytest.raises(ConfigError):
        table("bogus")
    with pytest.raises(ConfigError):
        table("sinus-abs", width=10)
