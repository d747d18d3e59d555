import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clsr.config import ConfigError
from clsr.kspace import decimate, kspace_truncate, lowpass_equivalent, retained_energy


def kept_frequencies(m):
    """Signed frequencies of a centered length-m block: ceil(-m/2) .. ceil(m/2) - 1."""
    return np.arange(-(m // 2), m - m // 2)


def dft_oracle(vol, factors):
    """Truncation by explicit DFT matrices along each axis (no FFT)."""
    out = np.asarray(vol, dtype=complex)
    for ax, f in enumerate(factors):
        n = out.shape[ax]
        m = n // f
        k = kept_frequencies(m)
        fwd = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)      # (m, n)
        inv = np.exp(2j * np.pi * np.outer(np.arange(m), k) / m) / m   # (m, m)
        op = (m / n) * inv @ fwd
        out = np.moveaxis(np.tensordot(op, np.moveaxis(out, ax, 0), axes=1), 0, ax)
    return out.real


def cosine_volume(n, freq, axis=2):
    x = np.arange(n)
    shape = [1, 1, 1]
    shape[axis] = n
    return np.broadcast_to(np.cos(2 * np.pi * freq * x / n).reshape(shape), (n, n, n)).copy()


def test_constant_volume_preserved():
    out = kspace_truncate(np.full((8, 8, 8), 3.25), (2, 2, 2))
    assert out.shape == (4, 4, 4)
    np.testing.assert_allclose(out, 3.25, atol=1e-12)


def test_cosine_decimation():
    out = kspace_truncate(cosine_volume(8, 1), (2, 2, 2))
    np.testing.assert_allclose(out[0, 0], [1, 0, -1, 0], atol=1e-9)
    np.testing.assert_allclose(out, np.broadcast_to(out[0, 0], out.shape), atol=1e-12)


def test_linearity():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(2, 8, 12, 16))
    lhs = kspace_truncate(2.5 * A - 0.75 * B, (2, 2, 4))
    rhs = 2.5 * kspace_truncate(A, (2, 2, 4)) - 0.75 * kspace_truncate(B, (2, 2, 4))
    np.testing.assert_allclose(lhs, rhs, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("shape,factors", [
    ((8, 8, 8), (2, 2, 2)),
    ((16, 16, 16), (2, 2, 2)),
    ((8, 16, 16), (1, 2, 2)),
    ((12, 10, 9), (3, 2, 3)),
    ((10, 14, 6), (2, 2, 2)),
])
def test_matches_dft_oracle(shape, factors):
    vol = np.random.default_rng(sum(shape)).normal(size=shape)
    np.testing.assert_allclose(kspace_truncate(vol, factors), dft_oracle(vol, factors), atol=1e-9)


def test_shape_contract_and_named_axis():
    assert kspace_truncate(np.zeros((16, 32, 32)), (1, 2, 2)).shape == (16, 16, 16)
    with pytest.raises(ConfigError, match="axis 1"):
        kspace_truncate(np.zeros((8, 9, 8)), (2, 2, 2))


def test_rejects_non_finite():
    v = np.zeros((8, 8, 8))
    v[1, 2, 3] = np.nan
    with pytest.raises(ValueError):
        kspace_truncate(v)


class TestLowpass:
    def test_constant_unchanged(self):
        np.testing.assert_allclose(lowpass_equivalent(np.full((8, 8, 8), -2.0)), -2.0, atol=1e-12)

    def test_out_of_band_cosine_vanishes(self):
        # frequency 3 lies outside the kept block -2..1 of an 8 -> 4 truncation
        np.testing.assert_allclose(lowpass_equivalent(cosine_volume(8, 3)), 0.0, atol=1e-10)

    def test_decimation_identity(self):
        vol = np.random.default_rng(11).normal(size=(8, 8, 8))
        np.testing.assert_allclose(decimate(lowpass_equivalent(vol), (2, 2, 2)), kspace_truncate(vol), atol=1e-9)

    def test_decimation_identity_mixed_factors(self):
        vol = np.random.default_rng(12).normal(size=(8, 12, 16))
        f = (1, 2, 4)
        np.testing.assert_allclose(decimate(lowpass_equivalent(vol, f), f), kspace_truncate(vol, f), atol=1e-9)


volume_shapes = st.tuples(*[st.sampled_from([4, 6, 8, 10, 12]) for _ in range(3)])


@settings(max_examples=30, deadline=None)
@given(volume_shapes, st.integers(0, 2**31 - 1))
def test_dc_preserved(shape, seed):
    vol = np.random.default_rng(seed).uniform(-3, 7, size=shape)
    out = kspace_truncate(vol, (2, 2, 2))
    assert out.mean() == pytest.approx(vol.mean(), rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(volume_shapes, st.integers(0, 2**31 - 1))
def test_energy_contraction(shape, seed):
    vol = np.random.default_rng(seed).normal(size=shape)
    kept, total = retained_energy(vol, (2, 2, 2))
    assert kept <= total * (1 + 1e-12)


def test_imaginary_residue_below_bound():
    from clsr.kspace import IMAG_TOL, _block, _hermitian_part

    vol = np.random.default_rng(5).normal(size=(10, 8, 12))
    spec = np.fft.fftshift(np.fft.fftn(vol))
    block = np.fft.ifftshift(spec[tuple(_block(n, n // 2) for n in vol.shape)])
    raw = np.fft.ifftn(block)
    # the asymmetric block alone leaves a visible imaginary part ...
    assert np.abs(raw.imag).max() > 1e-6
    # ... which the Hermitian projection removes without touching the real part
    sym = np.fft.ifftn(_hermitian_part(block))
    assert np.abs(sym.imag).max() <= IMAG_TOL * np.abs(vol).max()
    np.testing.assert_allclose(sym.real, raw.real, atol=1e-12)
