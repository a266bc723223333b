import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omniepi import geometry as geo
from omniepi.autodiff import Tensor, grad_check, ops, precision
from omniepi.errors import ContractError, ShapeError


def make_lf(shape, U, V, data=None):
    B, C, H, W = shape
    arr = np.arange(B * C * U * V * H * W, dtype=np.float64) if data is None else data
    return geo.LightField(Tensor(arr.reshape(B, C, U * V, H, W)), U, V)


# -- nested-loop oracles written straight from the index formulas ----------------

def horizontal_oracle(x, U, V):
    B, C, A, H, W = x.shape
    out = np.empty((B, C, V * W, U, H))
    for b, c, u, v, h, w in np.ndindex(B, C, U, V, H, W):
        out[b, c, v * W + w, u, h] = x[b, c, u * V + v, h, w]
    return out


def vertical_oracle(x, U, V):
    B, C, A, H, W = x.shape
    out = np.empty((B, C, U * H, V, W))
    for b, c, u, v, h, w in np.ndindex(B, C, U, V, H, W):
        out[b, c, u * H + h, v, w] = x[b, c, u * V + v, h, w]
    return out


def macpi_oracle(x, U, V):
    B, C, A, H, W = x.shape
    out = np.empty((B, C, H * U, W * V))
    for b, c, u, v, h, w in np.ndindex(B, C, U, V, H, W):
        out[b, c, h * U + u, w * V + v] = x[b, c, u * V + v, h, w]
    return out


def diagonal_oracle(x, U):
    B, C, A, H, W = x.shape
    d45 = np.empty((B, C, W, U, H))
    d135 = np.empty((B, C, W, U, H))
    for b, c, i, h, w in np.ndindex(B, C, U, H, W):
        d45[b, c, w, i, h] = x[b, c, i * U + i, h, w]
        d135[b, c, w, i, h] = x[b, c, i * U + (U - 1 - i), h, w]
    return d45, d135


def scatter_oracle(d45, d135, U, H, W):
    B, C = d45.shape[:2]
    out = np.zeros((B, C, U * U, H, W))
    for b, c, i, h, w in np.ndindex(B, C, U, H, W):
        out[b, c, i * U + i, h, w] += d45[b, c, w, i, h]
        out[b, c, i * U + (U - 1 - i), h, w] += d135[b, c, w, i, h]
    return out


# -- horizontal / vertical -----------------------------------------------------------

def test_horizontal_shape_default_grid():
    view = geo.to_horizontal_epi(make_lf((1, 2, 4, 4), 5, 5))
    assert view.tensor.shape == (1, 2, 20, 5, 4)
    assert view.grid == (5, 4)


def test_vertical_shape_default_grid():
    view = geo.to_vertical_epi(make_lf((1, 2, 4, 4), 5, 5))
    assert view.tensor.shape == (1, 2, 20, 5, 4)
    assert view.grid == (5, 4)


def test_single_view_horizontal_is_spatial_transpose(rng):
    x = rng.standard_normal((2, 3, 1, 4, 6))
    out = geo.to_horizontal_epi(geo.LightField(Tensor(x), 1, 1)).tensor.data
    assert out.shape == (2, 3, 6, 1, 4)
    np.testing.assert_array_equal(out[:, :, :, 0, :], np.swapaxes(x[:, :, 0], -1, -2))


def test_single_view_vertical_is_identity_layout(rng):
    x = rng.standard_normal((2, 3, 1, 4, 6))
    out = geo.to_vertical_epi(geo.LightField(Tensor(x), 1, 1)).tensor.data
    np.testing.assert_array_equal(out.reshape(x.shape), x)


def test_index_tables_match_enumeration_u2():
    lf = make_lf((1, 1, 2, 2), 2, 2)
    x = lf.tensor.data
    np.testing.assert_array_equal(geo.to_horizontal_epi(lf).tensor.data, horizontal_oracle(x, 2, 2))
    np.testing.assert_array_equal(geo.to_vertical_epi(lf).tensor.data, vertical_oracle(x, 2, 2))
    np.testing.assert_array_equal(geo.to_macpi(lf).tensor.data, macpi_oracle(x, 2, 2))


@pytest.mark.parametrize("U,V,H,W", [(3, 2, 2, 3), (1, 4, 3, 2), (5, 5, 2, 3)])
def test_index_tables_match_enumeration_rectangular(U, V, H, W):
    lf = make_lf((2, 2, H, W), U, V)
    x = lf.tensor.data
    np.testing.assert_array_equal(geo.to_horizontal_epi(lf).tensor.data, horizontal_oracle(x, U, V))
    np.testing.assert_array_equal(geo.to_vertical_epi(lf).tensor.data, vertical_oracle(x, U, V))
    np.testing.assert_array_equal(geo.to_macpi(lf).tensor.data, macpi_oracle(x, U, V))


def test_vertical_of_transposed_field_is_horizontal_transposed(rng):
    # swapping (u, v) and (h, w) maps the vertical layout onto the horizontal one
    U = V = 3
    x = rng.standard_normal((1, 2, U * V, 4, 5))
    xt = x.reshape(1, 2, U, V, 4, 5).transpose(0, 1, 3, 2, 5, 4).reshape(1, 2, U * V, 5, 4)
    vert = geo.to_vertical_epi(geo.LightField(Tensor(xt), V, U)).tensor.data   # b c (v w) u h
    horiz = geo.to_horizontal_epi(geo.LightField(Tensor(x), U, V)).tensor.data
    np.testing.assert_array_equal(vert, horiz)


@settings(max_examples=200, deadline=None)
@given(B=st.integers(1, 2), C=st.integers(1, 3), U=st.integers(1, 5), V=st.integers(1, 5),
       H=st.integers(1, 8), W=st.integers(1, 8), seed=st.integers(0, 2**31 - 1))
def test_round_trips_are_bit_exact(B, C, U, V, H, W, seed):
    x = np.random.default_rng(seed).standard_normal((B, C, U * V, H, W))
    with precision("f64"):
        lf = geo.LightField(Tensor(x), U, V)
        for to in (geo.to_horizontal_epi, geo.to_vertical_epi, geo.to_macpi):
            view = to(lf)
            np.testing.assert_array_equal(geo.from_epi(view).tensor.data, x)
            np.testing.assert_array_equal(view.tensor.data.reshape(-1)[view.inverse_map], x.reshape(-1))


def test_inverse_map_absent_for_diagonals():
    e45, _ = geo.extract_diagonals(make_lf((1, 1, 2, 2), 3, 3))
    with pytest.raises(ContractError):
        e45.inverse_map
    with pytest.raises(ContractError):
        geo.from_epi(e45)


def test_light_field_validates_angular_extent():
    with pytest.raises(ShapeError):
        geo.LightField(Tensor(np.zeros((1, 1, 8, 2, 2))), 3, 3)


@pytest.mark.parametrize("to", [geo.to_horizontal_epi, geo.to_vertical_epi, geo.to_macpi])
def test_round_trip_gradient_is_identity(rng, to):
    x = Tensor(rng.standard_normal((1, 2, 6, 3, 2)))
    w = Tensor(rng.standard_normal((1, 2, 6, 3, 2)))

    def f(t):
        return geo.from_epi(to(geo.LightField(t, 2, 3))).tensor * w

    assert grad_check(f, x) < 1e-10


# -- diagonals -------------------------------------------------------------------------

@pytest.mark.parametrize("U,e45,e135", [
    (1, [0], [0]),
    (2, [0, 3], [1, 2]),
    (3, [0, 4, 8], [2, 4, 6]),
    (5, [0, 6, 12, 18, 24], [4, 8, 12, 16, 20]),
])
def test_diagonal_indices(U, e45, e135):
    i45, i135 = geo.diagonal_indices(U)
    assert i45.tolist() == e45 and i135.tolist() == e135


def test_diagonals_need_square_grid():
    with pytest.raises(ContractError):
        geo.extract_diagonals(make_lf((1, 1, 2, 2), 2, 3))


@pytest.mark.parametrize("U", [1, 2, 3, 5])
def test_extract_and_scatter_match_oracle(rng, U):
    H, W = 3, 4
    x = rng.standard_normal((2, 2, U * U, H, W))
    lf = geo.LightField(Tensor(x), U, U)
    e45, e135 = geo.extract_diagonals(lf)
    o45, o135 = diagonal_oracle(x, U)
    np.testing.assert_array_equal(e45.tensor.data, o45)
    np.testing.assert_array_equal(e135.tensor.data, o135)
    assert e45.grid == (U, H)

    p45, p135 = rng.standard_normal(o45.shape), rng.standard_normal(o135.shape)
    out = geo.scatter_diagonals(Tensor(p45), Tensor(p135), lf).tensor.data
    np.testing.assert_array_equal(out, scatter_oracle(p45, p135, U, H, W))

    on_diag = np.union1d(*geo.diagonal_indices(U))
    off = np.setdiff1d(np.arange(U * U), on_diag)
    assert np.all(out[:, :, off] == 0.0)


def test_scatter_extract_doubles_centre_for_odd_u(rng):
    U = 3
    x = rng.standard_normal((1, 2, 9, 2, 2))
    lf = geo.LightField(Tensor(x), U, U)
    e45, e135 = geo.extract_diagonals(lf)
    out = geo.scatter_diagonals(e45.tensor, e135.tensor, lf).tensor.data
    np.testing.assert_array_equal(out[:, :, [0, 2, 6, 8]], x[:, :, [0, 2, 6, 8]])
    np.testing.assert_array_equal(out[:, :, 4], 2 * x[:, :, 4])
    assert np.all(out[:, :, [1, 3, 5, 7]] == 0.0)


def test_scatter_extract_identity_on_diagonals_for_even_u(rng):
    x = rng.standard_normal((1, 2, 4, 3, 3))
    lf = geo.LightField(Tensor(x), 2, 2)
    e45, e135 = geo.extract_diagonals(lf)
    out = geo.scatter_diagonals(e45.tensor, e135.tensor, lf).tensor.data
    np.testing.assert_array_equal(out, x)


def test_scatter_of_zeros_is_zero():
    lf = make_lf((1, 2, 3, 3), 3, 3)
    z = Tensor(np.zeros((1, 2, 3, 3, 3)))
    assert np.all(geo.scatter_diagonals(z, z, lf).tensor.data == 0.0)


def test_scatter_layout_mismatch():
    lf = make_lf((1, 2, 3, 4), 3, 3)
    bad = Tensor(np.zeros((1, 2, 3, 3, 4)))
    with pytest.raises(ShapeError):
        geo.scatter_diagonals(bad, bad, lf)


def test_diagonal_gather_scatter_gradients(rng):
    lf_shape = (1, 2, 9, 2, 3)
    x = Tensor(rng.standard_normal(lf_shape))

    def f(t):
        lf = geo.LightField(t, 3, 3)
        e45, e135 = geo.extract_diagonals(lf)
        return geo.scatter_diagonals(e45.tensor * 1.5, e135.tensor, lf).tensor

    assert grad_check(f, x) < 1e-8


# -- MacPI -----------------------------------------------------------------------------

def test_macpi_single_site_is_angular_patch():
    lf = make_lf((1, 1, 1, 1), 2, 2)
    np.testing.assert_array_equal(geo.to_macpi(lf).tensor.data[0, 0], [[0, 1], [2, 3]])


def test_macpi_default_size():
    lf = geo.LightField(Tensor(np.zeros((1, 1, 25, 32, 32))), 5, 5)
    assert geo.to_macpi(lf).tensor.shape == (1, 1, 160, 160)


def test_from_macpi_rejects_indivisible():
    view = geo.EpiView(Tensor(np.zeros((1, 1, 7, 6))), "macpi", (1, 1, 2, 2, 3, 3))
    with pytest.raises(ShapeError):
        geo.from_macpi(view)


def test_dilated_macpi_conv_stays_within_view():
    # an impulse at view (u, v) spreads only to the same view of neighbouring sites
    U = V = 5
    H = W = 6
    x = np.zeros((1, 1, U * V, H, W))
    u0, v0, h0, w0 = 1, 3, 2, 4
    x[0, 0, u0 * V + v0, h0, w0] = 1.0
    lf = geo.LightField(Tensor(x), U, V)
    mac = geo.to_macpi(lf)
    out = ops.conv(mac.tensor, Tensor(np.ones((1, 1, 3, 3))), dilation=(U, V))
    back = geo.from_macpi(geo.EpiView(out, "macpi", mac.source)).tensor.data[0, 0]
    touched = {tuple(i) for i in np.argwhere(back != 0)}
    expected = {(u0 * V + v0, h0 + dh, w0 + dw) for dh in (-1, 0, 1) for dw in (-1, 0, 1)
                if 0 <= h0 + dh < H and 0 <= w0 + dw < W}
    assert touched == expected


def test_tokens_round_trip(rng):
    lf = geo.LightField(Tensor(rng.standard_normal((2, 3, 4, 3, 5))), 2, 2)
    view = geo.to_horizontal_epi(lf)
    tok = geo.to_tokens(view)
    assert tok.shape == (2 * 2 * 5, 2 * 3, 3)
    np.testing.assert_array_equal(geo.from_tokens(tok, view).tensor.data, view.tensor.data)
