"""First-order scattering with phase-shifted rectification.

For every input channel, complex wavelet ``psi_{j,theta}`` and phase
``alpha`` the path coefficient is::

    | Real(exp(-i alpha) (x * psi_{j,theta})) | * phi_J, sampled every 2**J pixels

and the optional order-0 path is ``x * phi_J`` sampled the same way.
Everything runs in float64.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, ShapeError
from .wavelets import WaveletFilterBank


@dataclass(frozen=True)
class ScatteringConfig:
    J: int
    L: int = 8
    A: int = 4
    order: int = 1
    include_order0: bool = True

    def __post_init__(self):
        if self.order != 1:
            raise ConfigError(f"only first-order scattering is supported, got order={self.order}")
        if self.J < 1 or self.L < 1 or self.A < 1:
            raise ConfigError(f"J, L, A must all be >= 1, got J={self.J}, L={self.L}, A={self.A}")


class ScatteringPath(NamedTuple):
    channel: int
    order: int
    j: int | None = None
    theta: int | None = None
    alpha: int | None = None


@dataclass
class ScatteringOutput:
    coefficients: np.ndarray
    path_index: list

    def manifest(self) -> str:
        lines = ["# out_channel in_channel order j theta_index alpha_index"]
        for i, p in enumerate(self.path_index):
            fields = ["-" if v is None else str(v) for v in (p.j, p.theta, p.alpha)]
            lines.append(f"{i} {p.channel} {p.order} " + " ".join(fields))
        return "\n".join(lines) + "\n"


def scattering_channel_count(cfg: ScatteringConfig, input_channels: int) -> int:
    return input_channels * (cfg.J * cfg.L * cfg.A + int(cfg.include_order0))


def path_index(cfg: ScatteringConfig, input_channels: int) -> list:
    paths = []
    for c in range(input_channels):
        if cfg.include_order0:
            paths.append(ScatteringPath(c, 0))
        for j in range(cfg.J):
            for l in range(cfg.L):
                for k in range(cfg.A):
                    paths.append(ScatteringPath(c, 1, j, l, k))
    return paths


def _wrap_filter(f: np.ndarray, h: int, w: int) -> np.ndarray:
    """Periodize a centred filter onto an ``h x w`` torus with its centre at (0, 0)."""
    k = f.shape[0]
    half = k // 2
    rows = (np.arange(k) - half) % h
    cols = (np.arange(k) - half) % w
    out = np.zeros((h, w), dtype=f.dtype)
    np.add.at(out, (rows[:, None], cols[None, :]), f)
    return out


def _convolve(images: np.ndarray, filters: np.ndarray, padding: str) -> np.ndarray:
    """Convolve ``(B, H, W)`` images with ``(F, k, k)`` filters -> ``(B, F, H, W)``."""
    b, h, w = images.shape
    k = filters.shape[-1]
    if padding == "circular":
        spectrum = np.fft.fft2(images)[:, None]
        kernels = np.fft.fft2(np.stack([_wrap_filter(f, h, w) for f in filters]))[None]
        out = np.fft.ifft2(spectrum * kernels)
        return out if np.iscomplexobj(filters) else out.real
    if padding != "reflect":
        raise ConfigError(f"padding must be 'reflect' or 'circular', got {padding!r}")
    p = k // 2
    padded = np.pad(images, ((0, 0), (p, p), (p, p)), mode="reflect")
    return fftconvolve(padded[:, None], filters[None], mode="valid", axes=(-2, -1))


def _lowpass_operator(phi: np.ndarray, side: int, stride: int, padding: str) -> np.ndarray:
    """Matrix ``R`` with ``R @ X @ R.T`` = pad, convolve with ``phi``, subsample.

    ``phi`` is a normalized isotropic Gaussian, hence the outer product of its
    marginal with itself; the 2-D filter is applied as two 1-D passes and only
    the retained output samples are evaluated.
    """
    g = phi.sum(axis=0)
    k = g.size
    half = k // 2
    offsets = np.arange(k) - half
    out_rows = np.arange(0, side, stride)
    R = np.zeros((out_rows.size, side))
    for i, r in enumerate(out_rows):
        src = r - offsets  # convolution flips the (symmetric) kernel
        if padding == "circular":
            src = src % side
        else:
            src = _reflect_index(src, side)
        np.add.at(R[i], src, g)
    return R


def _reflect_index(idx: np.ndarray, side: int) -> np.ndarray:
    """Map indices onto ``[0, side)`` by reflection about the edge samples."""
    period = 2 * (side - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= side, period - idx, idx)


def scatter(x, bank: WaveletFilterBank, cfg: ScatteringConfig, padding: str = "reflect") -> ScatteringOutput:
    """Scattering coefficients of an ``(N, C, H, W)`` batch.

    Output shape is ``(N, C * (J*L*A + include_order0), H / 2**J, W / 2**J)``;
    within each input channel the order-0 path comes first, then paths in
    (j, theta, alpha) order.
    """
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"scatter expects (N, C, H, W), got shape {x.shape}")
    if (bank.J, bank.L, bank.A) != (cfg.J, cfg.L, cfg.A):
        raise ConfigError(f"filter bank (J={bank.J}, L={bank.L}, A={bank.A}) does not match "
                          f"config (J={cfg.J}, L={cfg.L}, A={cfg.A})")
    n, c, h, w = x.shape
    stride = 2 ** cfg.J
    if h % stride or w % stride:
        raise ShapeError(f"input sides {h}x{w} must be divisible by 2**J = {stride}")

    if padding not in ("reflect", "circular"):
        raise ConfigError(f"padding must be 'reflect' or 'circular', got {padding!r}")
    images = x.reshape(n * c, h, w)
    rows = _lowpass_operator(np.asarray(bank.phi), h, stride, padding)
    cols = rows if w == h else _lowpass_operator(np.asarray(bank.phi), w, stride, padding)

    def lowpass(maps):
        return rows @ maps @ cols.T

    blocks = []
    if cfg.include_order0:
        blocks.append(lowpass(images)[:, None])
    for j in range(cfg.J):
        responses = _convolve(images, np.stack(bank.psi[j]), padding)  # (B, L, H, W) complex
        rect = np.stack([np.abs(responses.real * np.cos(a) + responses.imag * np.sin(a))
                         for a in bank.alphas], axis=2)                  # (B, L, A, H, W)
        rect = rect.reshape(n * c * cfg.L * cfg.A, h, w)
        low = lowpass(rect)
        blocks.append(low.reshape(n * c, cfg.L * cfg.A, h // stride, w // stride))
    coeffs = np.concatenate(blocks, axis=1).reshape(n, -1, h // stride, w // stride)
    return ScatteringOutput(np.ascontiguousarray(coeffs), path_index(cfg, c))


class ScatteringCache:
    """Thread-safe memo of scattering outputs keyed on ``(batch key, J)``.

    Callers choose the batch key; it must identify the exact images (e.g. a
    dataset fingerprint plus sample indices), otherwise entries could be
    reused for the wrong batch.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict = {}

    def get_or_compute(self, key, J: int, compute: Callable[[], np.ndarray]) -> np.ndarray:
        with self._lock:
            hit = self._entries.get((key, J))
        if hit is not None:
            return hit
        value = compute()
        with self._lock:
            return self._entries.setdefault((key, J), value)

    def __len__(self) -> int:
        return len(self._entries)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()
