from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from waveir.dwt import (
    ImageStack,
    Layout,
    WaveletCoeffs,
    WaveletSpec,
    dwt,
    dwt_stack,
    idwt,
    idwt_rows,
    next_pow2,
    pad_to_pow2,
    stack_layout,
)
from waveir.filters import filter_pair

from oracles import matrix_dwt


# --- filters --------------------------------------------------------------------------


@pytest.mark.parametrize("family,vm", [("daubechies-least-asymmetric", 10), ("haar", 1)])
def test_filter_bank_is_orthonormal(family, vm):
    h, g = filter_pair(family, vm)
    assert abs(h.sum() - np.sqrt(2)) < 1e-12
    assert abs(np.sum(h * h) - 1) < 1e-12
    assert abs(g.sum()) < 1e-12
    for s in range(2, len(h), 2):
        assert abs(h[:-s] @ h[s:]) < 1e-12
        assert abs(g[:-s] @ g[s:]) < 1e-12
    L = len(h)
    assert np.allclose(g, [(-1) ** m * h[L - 1 - m] for m in range(L)])


def test_sym10_has_ten_vanishing_moments():
    _, g = filter_pair("daubechies-least-asymmetric", 10)
    m = np.arange(len(g)) / len(g)
    for p in range(10):
        assert abs(np.sum(g * m ** p)) < 1e-9


def test_unknown_family_and_bad_spec_rejected():
    with pytest.raises(ValueError):
        WaveletSpec(family="coiflet")
    with pytest.raises(ValueError):
        WaveletSpec(boundary="symmetric")
    with pytest.raises(ValueError):
        WaveletSpec(j0=-1)


def test_filters_are_read_only():
    h, _ = filter_pair("haar", 1)
    with pytest.raises(ValueError):
        h[0] = 0.0


# --- padding --------------------------------------------------------------------------


def test_pad_60_to_64_is_centered():
    img = np.ones((60, 60))
    out, rec = pad_to_pow2(img)
    assert out.shape == (64, 64)
    assert rec.widths == ((2, 2), (2, 2))
    assert np.all(out[:2] == 0) and np.all(out[-2:] == 0)
    assert np.all(out[2:62, 2:62] == 1)


def test_power_of_two_grid_is_unchanged():
    img = np.arange(64 * 64, dtype=float).reshape(64, 64)
    out, rec = pad_to_pow2(img)
    assert rec.is_empty
    assert np.array_equal(out, img)


def test_pad_odd_split_puts_extra_zero_last():
    out, rec = pad_to_pow2(np.array([1.0, 2, 3, 4, 5]))
    assert out.tolist() == [0, 1, 2, 3, 4, 5, 0, 0]
    assert rec.widths == ((1, 2),)
    assert np.array_equal(rec.crop(out), [1, 2, 3, 4, 5])


@given(st.lists(st.integers(1, 40), min_size=1, max_size=3))
def test_padding_properties(shape):
    img = np.random.default_rng(len(shape)).standard_normal(shape)
    out, rec = pad_to_pow2(img)
    for s, p, (b, a) in zip(shape, out.shape, rec.widths):
        assert p == next_pow2(s) and p >= s and p < 2 * s + (s == 1)
        assert b + a == p - s and a - b in (0, 1)
    assert np.array_equal(rec.crop(out), img)
    assert np.sum(out ** 2) == pytest.approx(np.sum(img ** 2))


def test_empty_grid_rejected():
    with pytest.raises(ValueError):
        pad_to_pow2(np.zeros((0, 4)))


# --- forward transform ----------------------------------------------------------------


def test_zero_image_gives_zero_coefficients():
    c = dwt(np.zeros((16, 16)), WaveletSpec(j0=2))
    assert np.all(c.values == 0)


@pytest.mark.parametrize("shape,j0", [((32, 32), 2), ((16, 16, 16), 1), ((64,), 3), ((8, 8), 0)])
def test_constant_image_closed_form(shape, j0):
    c = 3.5
    spec = WaveletSpec(j0=j0)
    coeffs = dwt(np.full(shape, c), spec)
    d = len(shape)
    n_scaling = 2 ** (d * j0)
    N = int(np.prod(shape))
    assert np.allclose(coeffs.values[:n_scaling], c * np.sqrt(N / n_scaling), rtol=1e-12)
    assert np.max(np.abs(coeffs.values[n_scaling:])) < 1e-10


def test_haar_one_level_by_hand():
    x = np.array([1.0, 3.0, 2.0, 6.0])
    c = dwt(x, WaveletSpec.haar(j0=1)).values
    s = 2 ** -0.5
    # g = (s, -s): details are s * (x[2k] - x[2k+1])
    assert np.allclose(c, [s * 4, s * 8, -s * 2, -s * 4])
    c0 = dwt(x, WaveletSpec.haar(j0=0)).values
    assert np.allclose(c0, [6.0, -2.0, -s * 2, -s * 4])


def _impulse_matrix(shape, spec):
    N = int(np.prod(shape))
    W = np.empty((N, N))
    for k in range(N):
        e = np.zeros(N)
        e[k] = 1.0
        W[:, k] = dwt(e.reshape(shape), spec).values
    return W


@pytest.mark.parametrize("spec", [WaveletSpec(j0=1), WaveletSpec(j0=3), WaveletSpec.haar(j0=0)])
def test_16x16_matches_impulse_matrix(spec):
    x = np.random.default_rng(0).standard_normal((16, 16))
    W = _impulse_matrix((16, 16), spec)
    assert np.max(np.abs(W @ x.ravel() - dwt(x, spec).values)) < 1e-10
    assert np.max(np.abs(W @ W.T - np.eye(256))) < 1e-10


@pytest.mark.parametrize("shape,j0", [((16, 16), 2), ((8, 16), 1), ((16, 4), 0), ((8, 4, 16), 1),
                                      ((32,), 2), ((4, 4, 4), 0)])
def test_matches_explicit_filter_matrices(shape, j0):
    x = np.random.default_rng(1).standard_normal(shape)
    for spec in (WaveletSpec(j0=j0), WaveletSpec.haar(j0=j0)):
        ref = matrix_dwt(x, *spec.filters, j0)
        assert np.max(np.abs(ref - dwt(x, spec).values)) < 1e-10


def test_inadmissible_level_rejected():
    with pytest.raises(ValueError, match="not admissible"):
        dwt(np.zeros((16, 16)), WaveletSpec(j0=4))
    with pytest.raises(ValueError, match="power of 2"):
        dwt(np.zeros((12, 16)), WaveletSpec(j0=1))


# --- inverse --------------------------------------------------------------------------


def test_inverse_of_zero_is_zero():
    layout = Layout.build((16, 16), WaveletSpec(j0=2))
    assert np.all(idwt(WaveletCoeffs(np.zeros(256), layout)) == 0)


def test_round_trip_32x32():
    x = np.random.default_rng(2).standard_normal((32, 32))
    back = idwt(dwt(x, WaveletSpec(j0=2)))
    assert np.max(np.abs(back - x)) / np.max(np.abs(x)) < 1e-9


@pytest.mark.parametrize("index", [16, 100, 255])
def test_unit_coefficient_is_a_unit_basis_image(index):
    layout = Layout.build((16, 16), WaveletSpec(j0=2))
    v = np.zeros(256)
    v[index] = 1.0
    img = idwt(WaveletCoeffs(v, layout))
    assert abs(np.linalg.norm(img) - 1) < 1e-10
    assert np.allclose(dwt(img, layout.spec).values, v, atol=1e-12)


def test_inverse_rejects_wrong_length():
    layout = Layout.build((16, 16), WaveletSpec(j0=2))
    with pytest.raises(ValueError):
        idwt(WaveletCoeffs(np.zeros(100), layout))


# --- properties -----------------------------------------------------------------------

shapes = st.lists(st.sampled_from([2, 4, 8, 16, 32]), min_size=1, max_size=3).filter(
    lambda s: np.prod(s) <= 4096)


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 4), st.booleans(), st.integers(0, 2 ** 31))
def test_reconstruction_parseval_linearity(shape, j0, haar, seed):
    J = min(int(np.log2(s)) for s in shape)
    spec = WaveletSpec.haar(j0=min(j0, J - 1)) if haar else WaveletSpec(j0=min(j0, J - 1))
    rng = np.random.default_rng(seed)
    x, z = rng.standard_normal(shape), rng.standard_normal(shape)
    cx, cz = dwt(x, spec), dwt(z, spec)
    assert np.linalg.norm(idwt(cx) - x) <= 1e-9 * np.linalg.norm(x)
    assert abs(np.linalg.norm(cx.values) - np.linalg.norm(x)) <= 1e-10 * np.linalg.norm(x)
    lin = dwt(2.5 * x - 0.5 * z, spec).values
    ref = 2.5 * cx.values - 0.5 * cz.values
    assert np.linalg.norm(lin - ref) <= 1e-10 * np.linalg.norm(ref)


@pytest.mark.parametrize("degree", range(10))
def test_vanishing_moments_kill_interior_finest_details(degree):
    L = 256
    t = (np.arange(L) - L / 2) / L
    coefs = np.random.default_rng(degree).standard_normal(degree + 1)
    x = np.polynomial.polynomial.polyval(t, coefs)
    spec = WaveletSpec(j0=4)
    c = dwt(x, spec)
    d = c.block(7, "d")
    F = len(spec.filters[0])
    interior = [k for k in range(L // 2) if 2 * k + F - 1 < L]
    assert np.max(np.abs(d[interior])) <= 1e-8


def test_vanishing_moments_in_2d_interior():
    n = 64
    s1, s2 = np.meshgrid((np.arange(n) - 32) / n, (np.arange(n) - 32) / n, indexing="ij")
    x = 1 + s1 - 2 * s2 + 3 * s1 * s2 ** 2 + s1 ** 4
    c = dwt(x, WaveletSpec(j0=3))
    inner = slice(0, (n - 20) // 2 + 1)
    for orient in ("ad", "da", "dd"):
        assert np.max(np.abs(c.block(5, orient)[inner, inner])) <= 1e-8


# --- layout ---------------------------------------------------------------------------


@pytest.mark.parametrize("shape,j0", [((16, 16), 2), ((8, 32), 1), ((4, 8, 16), 0), ((64,), 5)])
def test_layout_partitions_indices(shape, j0):
    layout = Layout.build(shape, WaveletSpec(j0=j0))
    d = len(shape)
    assert layout.blocks[0].length == 2 ** (d * j0)
    assert layout.blocks[0].orientation == "a" * d
    pos = 0
    for b in layout.blocks:
        assert b.offset == pos
        pos += b.length
    assert pos == layout.size == int(np.prod(shape))
    square = len(set(shape)) == 1
    if square:
        for j in range(j0, int(np.log2(shape[0]))):
            assert len(layout.level_blocks(j)) == 2 ** d - 1


def test_layout_locate_and_json_round_trip():
    layout = stack_layout((12, 16), WaveletSpec(j0=1))
    assert layout.locate(0) == (1, "aa", (0, 0))
    level, orient, shift = layout.locate(255)
    assert level == 3 and orient == "dd" and shift == (7, 7)
    again = Layout.from_json(layout.to_json())
    assert again == layout
    bad = json.loads(layout.to_json())
    bad["blocks"][1]["offset"] += 1
    with pytest.raises(ValueError):
        Layout.from_dict(bad)
    with pytest.raises(ValueError):
        Layout.from_dict({**json.loads(layout.to_json()), "schema": "other"})


def test_layout_matches_json_schema():
    pytest.importorskip("jsonschema")
    from schemas import validate
    for shape in ((16, 16), (8, 8, 8), (32,)):
        validate(stack_layout(shape, WaveletSpec(j0=1)).to_dict(), "layout")


def test_unequal_sides_mark_inactive_axes():
    layout = Layout.build((4, 16), WaveletSpec(j0=1))
    orients = {b.level: set() for b in layout.blocks}
    for b in layout.blocks:
        orients[b.level].add(b.orientation)
    assert orients[3] == {"xd"}
    assert orients[1] >= {"ad", "da", "dd"}


# --- stacks ---------------------------------------------------------------------------


def test_stack_rows_equal_single_transforms():
    rng = np.random.default_rng(3)
    imgs = rng.standard_normal((3, 12, 10))
    spec = WaveletSpec(j0=1)
    Xt, layout = dwt_stack(ImageStack(imgs), spec)
    assert Xt.shape == (3, 256)
    for i in range(3):
        padded, _ = pad_to_pow2(imgs[i])
        assert np.allclose(Xt[i], dwt(padded, spec).values, atol=1e-13)
    assert abs(np.linalg.norm(Xt) - np.linalg.norm(imgs)) <= 1e-9 * np.linalg.norm(imgs)
    assert np.allclose(idwt_rows(Xt, layout), imgs, atol=1e-12)


def test_single_and_duplicate_rows():
    img = np.random.default_rng(4).standard_normal((8, 8))
    spec = WaveletSpec(j0=1)
    one, _ = dwt_stack(img[None], spec)
    assert np.array_equal(one[0], dwt(img, spec).values)
    two, _ = dwt_stack(np.stack([img, img]), spec)
    assert np.array_equal(two[0], two[1])


def test_mask_zeroes_outside_voxels():
    rng = np.random.default_rng(5)
    data = rng.standard_normal((2, 8, 8))
    mask = np.zeros((8, 8), bool)
    mask[2:6, 2:6] = True
    data[:, 0, 0] = np.nan
    stack = ImageStack(data, mask)
    Xt, layout = dwt_stack(stack, WaveletSpec(j0=1))
    back = idwt_rows(Xt, layout)
    assert np.allclose(back[:, ~mask], 0, atol=1e-12)
    assert np.allclose(back[:, mask], data[:, mask])


def test_image_stack_validation():
    with pytest.raises(ValueError):
        ImageStack(np.zeros(5))
    with pytest.raises(ValueError):
        ImageStack(np.full((2, 4, 4), np.nan))
    with pytest.raises(ValueError):
        ImageStack(np.zeros((2, 4, 4)), np.ones((3, 3), bool))
