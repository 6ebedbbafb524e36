"""Morlet filter bank: dilated/rotated complex wavelets, their phase-shifted
real parts, and the Gaussian low-pass.

Filters are sampled from closed-form expressions at every (j, theta), never
resampled from a coarser grid. The base wavelet is a Gaussian envelope times
``exp(i xi x) - kappa`` where ``kappa`` zeroes the continuous mean. The small
residual mean left by sampling is removed with a correction term shaped like
``envelope * quadratic form``, which vanishes at the origin, so every filter
sums to zero while its centre value obeys the dilation law exactly.
"""

from __future__ import annotations

import struct
from functools import lru_cache
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

FILTER_MAGIC = b"SCATFLT1"


@dataclass(frozen=True)
class MorletParams:
    """Shape constants of the base (j = 0) wavelet.

    ``sigma`` is the envelope width in pixels, ``xi`` the centre frequency in
    radians per pixel, ``slant`` the envelope ellipticity (< 1 elongates the
    envelope across the oscillation) and ``support`` the odd side length of the
    base filter.
    """

    sigma: float = 0.8
    xi: float = 3 * np.pi / 4
    slant: float = 0.5
    support: int = 9

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not 0 < self.xi <= np.pi:
            raise ConfigError(f"xi must lie in (0, pi], got {self.xi}")
        if not self.slant > 0:
            raise ConfigError(f"slant must be positive, got {self.slant}")
        if self.support < 3 or self.support % 2 == 0:
            raise ConfigError(f"support must be odd and >= 3, got {self.support}")


def filter_support(j: int, side: int | None = None) -> int:
    """Odd filter side for scale ``j``: ``8 * 2**j + 1`` clipped to the image."""
    support = 8 * 2 ** j + 1
    if side is not None:
        odd_side = side if side % 2 else side - 1
        support = min(support, max(odd_side, 3))
    return support


def _grid(support: int) -> tuple[np.ndarray, np.ndarray]:
    h = support // 2
    y, x = np.mgrid[-h:h + 1, -h:h + 1]
    return x.astype(np.float64), y.astype(np.float64)


def _base_terms(x, y, params: MorletParams):
    """Envelope, quadratic form and oscillation of the unnormalized base wavelet."""
    quad = (x * x + (params.slant * y) ** 2) / (2 * params.sigma ** 2)
    envelope = np.exp(-quad)
    kappa = np.exp(-(params.sigma * params.xi) ** 2 / 2)
    wave = envelope * (np.exp(1j * params.xi * x) - kappa)
    return envelope, quad, wave


@lru_cache(maxsize=64)
def _l1_scale(params: MorletParams) -> float:
    x, y = _grid(params.support)
    _, _, wave = _base_terms(x, y, params)
    return 1.0 / np.abs(wave).sum()


def _transform(x, y, j: int, theta: float):
    """Coordinates ``2**-j r_{-theta} u`` for grid points ``u = (x, y)``."""
    c, s = np.cos(theta), np.sin(theta)
    scale = 2.0 ** -j
    return scale * (c * x + s * y), scale * (-s * x + c * y)


def evaluate_morlet(x, y, params: MorletParams, j: int = 0, theta: float = 0.0) -> np.ndarray:
    """Closed-form ``psi_{j,theta}(u) = 2**-2j psi(2**-j r_{-theta} u)`` at arbitrary points.

    This is the continuous wavelet before the discrete zero-mean correction.
    """
    xs, ys = _transform(np.asarray(x, float), np.asarray(y, float), j, theta)
    _, _, wave = _base_terms(xs, ys, params)
    return (2.0 ** (-2 * j)) * _l1_scale(params) * wave


def dilate_rotate(params: MorletParams, j: int, theta: float, support: int | None = None) -> np.ndarray:
    """Sampled, zero-mean ``psi_{j,theta}`` on an odd ``support`` grid.

    The base formula is re-evaluated at transformed coordinates; the grid is
    never interpolated.
    """
    if j < 0:
        raise ConfigError(f"scale index must be non-negative, got {j}")
    if support is None:
        support = params.support if j == 0 else filter_support(j)
    if support < 3 or support % 2 == 0:
        raise ConfigError(f"support must be odd and >= 3, got {support}")
    x, y = _grid(support)
    xs, ys = _transform(x, y, j, theta)
    envelope, quad, wave = _base_terms(xs, ys, params)
    amplitude = (2.0 ** (-2 * j)) * _l1_scale(params)
    psi = amplitude * wave
    correction = amplitude * envelope * quad
    psi = psi - (psi.sum() / correction.sum()) * correction
    return psi


def build_base_morlet(params: MorletParams) -> np.ndarray:
    """The j = 0, theta = 0 wavelet sampled on ``params.support``."""
    return dilate_rotate(params, 0, 0.0, params.support)


def phase_shift(psi: np.ndarray, alpha: float) -> np.ndarray:
    """``Real(exp(-i alpha) psi)``."""
    return psi.real * np.cos(alpha) + psi.imag * np.sin(alpha)


def build_gaussian_lowpass(J: int, support: int, sigma0: float = 0.8) -> np.ndarray:
    """Isotropic Gaussian of width ``sigma0 * 2**J``, normalized to unit sum."""
    if J < 1:
        raise ConfigError(f"J must be >= 1, got {J}")
    if support % 2 == 0 or support < 2 ** J + 1:
        raise ConfigError(f"low-pass support must be odd and >= 2**J + 1 = {2 ** J + 1}, got {support}")
    x, y = _grid(support)
    sigma = sigma0 * 2.0 ** J
    phi = np.exp(-(x * x + y * y) / (2 * sigma ** 2))
    return phi / phi.sum()


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class WaveletFilterBank:
    J: int
    L: int
    A: int
    params: MorletParams
    thetas: tuple
    alphas: tuple
    psi: tuple = field(repr=False)
    psi_real: tuple = field(repr=False)
    phi: np.ndarray = field(repr=False)

    @property
    def n_complex(self) -> int:
        return self.J * self.L

    @property
    def n_real(self) -> int:
        return self.J * self.L * self.A


def build_filter_bank(J: int, L: int = 8, A: int = 4, params: MorletParams | None = None,
                      side: int | None = None) -> WaveletFilterBank:
    """Filters ``psi[j][l]`` at ``theta_l = l pi / L`` and ``psi_real[j][l][k]``
    at ``alpha_k = k pi / A``, plus the low-pass ``phi``.

    ``side`` (the image side) clips filter supports for small images.
    """
    if J < 1 or L < 1 or A < 1:
        raise ConfigError(f"J, L, A must all be >= 1, got J={J}, L={L}, A={A}")
    params = params or MorletParams()
    thetas = tuple(l * np.pi / L for l in range(L))
    alphas = tuple(k * np.pi / A for k in range(A))
    psi, psi_real = [], []
    for j in range(J):
        support = filter_support(j, side)
        row = [_frozen(dilate_rotate(params, j, th, support)) for th in thetas]
        psi.append(tuple(row))
        psi_real.append(tuple(tuple(_frozen(phase_shift(p, a)) for a in alphas) for p in row))
    phi = _frozen(build_gaussian_lowpass(J, filter_support(J, side), params.sigma))
    return WaveletFilterBank(J, L, A, params, thetas, alphas, tuple(psi), tuple(psi_real), phi)


def write_filter(path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f8")
    rows, cols = values.shape
    Path(path).write_bytes(FILTER_MAGIC + struct.pack("<II", rows, cols) + values.tobytes())


def read_filter(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != FILTER_MAGIC:
        raise ValueError(f"{path}: bad filter magic")
    rows, cols = struct.unpack_from("<II", blob, 8)
    return np.frombuffer(blob, dtype="<f8", offset=16, count=rows * cols).reshape(rows, cols).copy()


def dump_filter_bank(bank: WaveletFilterBank, directory) -> Path:
    """Write every real filter and the low-pass, plus ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["# j theta_index alpha_index filename"]
    for j in range(bank.J):
        for l in range(bank.L):
            for k in range(bank.A):
                name = f"psi_j{j}_t{l}_a{k}.bin"
                write_filter(directory / name, bank.psi_real[j][l][k])
                lines.append(f"{j} {l} {k} {name}")
    write_filter(directory / "phi.bin", bank.phi)
    lines.append("phi - - phi.bin")
    manifest = directory / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
