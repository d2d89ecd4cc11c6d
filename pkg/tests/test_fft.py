"""DFT correctness against the brute-force oracle and closed forms."""
import numpy as np
import pytest

from helpers import naive_dft2, naive_idft2

from moepot import fftcore
from moepot.errors import NumericError
from moepot.spectral import ComplexSpectrum, dft2_forward, dft2_inverse
from moepot.tensor import Tensor


def test_constant_field_has_only_dc():
    a = 0.73
    field = Tensor(np.full((4, 4, 1), a))
    spec = dft2_forward(field)
    assert abs(spec.real_part.data[0, 0, 0] - 16 * a) < 1e-12
    off = spec.real_part.data.copy()
    off[0, 0, 0] = 0.0
    assert np.max(np.abs(off)) < 1e-12
    assert np.max(np.abs(spec.imag_part.data)) < 1e-12


def test_cosine_row_mode():
    # f[x, y] = cos(2*pi*x/8): energy lands in bins (1, 0) and (7, 0), each 32.
    x = np.arange(8)
    field = np.cos(2 * np.pi * x / 8)[:, None] * np.ones((1, 8))
    spec = dft2_forward(Tensor(field[..., None]))
    oracle = naive_dft2(field)
    got = spec.real_part.data[..., 0] + 1j * spec.imag_part.data[..., 0]
    assert np.max(np.abs(got - oracle)) < 1e-10
    assert abs(got[1, 0] - 32) < 1e-10
    assert abs(got[7, 0] - 32) < 1e-10
    mask = np.ones((8, 8), dtype=bool)
    mask[1, 0] = mask[7, 0] = False
    assert np.max(np.abs(got[mask])) < 1e-10


def test_matches_naive_oracle_16x16():
    rng = np.random.default_rng(11)
    field = rng.standard_normal((16, 16))
    spec = fftcore.dft2(field.astype(np.float64))
    oracle = naive_dft2(field)
    assert np.max(np.abs(spec - oracle)) < 1e-10


def test_non_pow2_extent_matches_oracle():
    rng = np.random.default_rng(12)
    field = rng.standard_normal((6, 10))
    spec = fftcore.dft2(field)
    oracle = naive_dft2(field)
    assert np.max(np.abs(spec - oracle)) < 1e-10


def test_round_trip_identity():
    rng = np.random.default_rng(3)
    f = rng.standard_normal((8, 8, 2))
    back = dft2_inverse(dft2_forward(Tensor(f)))
    assert np.max(np.abs(back.data - f)) < 1e-12 * (1 + np.max(np.abs(f)))


def test_zero_spectrum_inverts_to_zero():
    z = Tensor(np.zeros((4, 4, 1)))
    spec = ComplexSpectrum(z, Tensor(np.zeros((4, 4, 1))))
    out = dft2_inverse(spec)
    assert np.all(out.data == 0)


def test_dc_bin_inverts_to_ones():
    re = np.zeros((4, 4, 1))
    re[0, 0, 0] = 16.0
    out = dft2_inverse(ComplexSpectrum(Tensor(re), Tensor(np.zeros((4, 4, 1)))))
    oracle = naive_idft2(re[..., 0]).real
    assert np.max(np.abs(out.data[..., 0] - oracle)) < 1e-12
    assert np.max(np.abs(out.data - 1.0)) < 1e-12


def test_parseval():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((8, 8))
    spec = fftcore.dft2(f)
    lhs = np.sum(f ** 2)
    rhs = np.sum(np.abs(spec) ** 2) / (8 * 8)
    assert abs(lhs - rhs) < 1e-10 * abs(lhs)


def test_asymmetric_spectrum_rejected():
    rng = np.random.default_rng(5)
    re = Tensor(rng.standard_normal((4, 4, 1)))
    im = Tensor(rng.standard_normal((4, 4, 1)))
    with pytest.raises(NumericError):
        dft2_inverse(ComplexSpectrum(re, im))


def test_non_finite_input_rejected():
    bad = np.zeros((4, 4, 1))
    bad[1, 1, 0] = np.inf
    t = Tensor.__new__(Tensor)  # bypass constructor validation to hit the op check
    t.data = bad
    t.requires_grad = False
    with pytest.raises(NumericError):
        dft2_forward(t)


def test_random_round_trips_many_shapes():
    rng = np.random.default_rng(6)
    for shape in [(2, 2), (4, 8), (16, 16), (3, 5), (8, 12)]:
        f = rng.standard_normal(shape)
        spec = fftcore.dft2(f)
        back = fftcore.dft2(spec, inverse=True) / (shape[0] * shape[1])
        assert np.max(np.abs(back.real - f)) < 1e-11
        assert np.max(np.abs(back.imag)) < 1e-11
