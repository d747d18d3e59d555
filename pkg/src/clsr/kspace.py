"""Low-resolution acquisition simulated by k-space truncation.

The HR volume is Fourier transformed, the centered low-frequency block of the
LR size is kept, and the block is transformed back on the smaller grid. For an
even output length ``m`` the block spans frequencies ``-m/2 .. m/2 - 1``
(the negative Nyquist bin is kept, the positive one dropped), which is the
fftshift layout of a length-``m`` spectrum.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .config import ConfigError

# imaginary residue allowed before discarding, relative to max |input|
IMAG_TOL = 1e-9


def check_factors(shape: Sequence[int], factors: Sequence[int]) -> tuple[int, ...]:
    factors = tuple(int(f) for f in factors)
    if len(factors) != len(shape):
        raise ConfigError(f"{len(factors)} factors for a {len(shape)}-axis volume")
    for ax, (n, f) in enumerate(zip(shape, factors)):
        if f < 1:
            raise ConfigError(f"axis {ax}: factor must be >= 1, got {f}")
        if n % f:
            raise ConfigError(f"axis {ax}: length {n} is not divisible by factor {f}")
    return factors


def _block(n: int, m: int) -> slice:
    """Indices of the kept block inside a fftshifted length-``n`` spectrum."""
    c = n // 2
    return slice(c - m // 2, c - m // 2 + m)


def _hermitian_part(spec: np.ndarray) -> np.ndarray:
    # spec[-k] for every k, then average with the conjugate; the unpaired
    # negative-Nyquist bins are what make this differ from spec
    flipped = np.roll(np.flip(spec), 1, axis=tuple(range(spec.ndim)))
    return 0.5 * (spec + np.conj(flipped))


def _to_real(x: np.ndarray, scale_ref: float) -> np.ndarray:
    imag = np.max(np.abs(x.imag)) if x.size else 0.0
    if imag > IMAG_TOL * max(scale_ref, 1e-300):
        raise FloatingPointError(f"imaginary residue {imag:.3e} exceeds tolerance")
    return x.real


def _validate(vol) -> np.ndarray:
    v = np.asarray(vol, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("volume contains non-finite intensities")
    return v


def kspace_truncate(hr, factors: Sequence[int] = (2, 2, 2)) -> np.ndarray:
    """Downsample ``hr`` by integer ``factors`` per axis via centered k-space cropping.

    The spectrum is rescaled by the size ratio so a constant volume keeps its
    value. Returns a float64 array of shape ``hr.shape // factors``.
    """
    hr = _validate(hr)
    factors = check_factors(hr.shape, factors)
    out_shape = tuple(n // f for n, f in zip(hr.shape, factors))
    spec = np.fft.fftshift(np.fft.fftn(hr))
    block = spec[tuple(_block(n, m) for n, m in zip(hr.shape, out_shape))]
    block = np.fft.ifftshift(block) * (np.prod(out_shape) / hr.size)
    out = np.fft.ifftn(_hermitian_part(block))
    return _to_real(out, np.max(np.abs(hr), initial=0.0))


def lowpass_equivalent(hr, factors: Sequence[int] = (2, 2, 2)) -> np.ndarray:
    """Ideal low-pass at the original size, keeping exactly the truncation block.

    ``lowpass_equivalent(v, f)[::f0, ::f1, ::f2] == kspace_truncate(v, f)``.
    """
    hr = _validate(hr)
    factors = check_factors(hr.shape, factors)
    out_shape = tuple(n // f for n, f in zip(hr.shape, factors))
    spec = np.fft.fftshift(np.fft.fftn(hr))
    mask = np.zeros(hr.shape, dtype=bool)
    mask[tuple(_block(n, m) for n, m in zip(hr.shape, out_shape))] = True
    kept = np.fft.ifftshift(np.where(mask, spec, 0))
    out = np.fft.ifftn(_hermitian_part(kept))
    return _to_real(out, np.max(np.abs(hr), initial=0.0))


def retained_energy(hr, factors: Sequence[int] = (2, 2, 2)) -> tuple[float, float]:
    """(retained, total) squared k-space magnitude of the truncation."""
    hr = _validate(hr)
    factors = check_factors(hr.shape, factors)
    out_shape = tuple(n // f for n, f in zip(hr.shape, factors))
    mag2 = np.abs(np.fft.fftshift(np.fft.fftn(hr))) ** 2
    kept = mag2[tuple(_block(n, m) for n, m in zip(hr.shape, out_shape))]
    return float(kept.sum()), float(mag2.sum())


def decimate(vol, factors: Sequence[int]) -> np.ndarray:
    vol = np.asarray(vol)
    factors = check_factors(vol.shape, factors)
    return vol[tuple(slice(None, None, f) for f in factors)]
