"""
A look at the Morlet filter bank
================================

Builds the default bank (8 orientations, 4 phases) for J=2 and prints a few
facts about it: filter sizes, zero averages, where the energy lives in the
frequency plane, and what the phase shift does to a filter.
"""

import numpy as np

from ehybrid.wavelets import build_filter_bank

bank = build_filter_bank(2, L=8, A=4, side=32)
print(f"J={bank.J}: {len(bank.psi)} scales x {bank.L} orientations x {bank.A} phases")

# supports grow with the scale and stop at the image side
for j, per_scale in enumerate(bank.psi):
    psi = per_scale[0]
    print(f"  j={j}: support {psi.shape}, |sum| / max = {abs(psi.sum()) / np.abs(psi).max():.1e}")

# the low-pass is a normalized Gaussian
print(f"low-pass {bank.phi.shape}, sum = {bank.phi.sum():.15f}")

# the peak of |FFT| moves along the orientation angle
for l in (0, 2, 4, 6):
    psi = bank.psi[1][l]
    spec = np.abs(np.fft.fftshift(np.fft.fft2(psi, (64, 64))))
    ky, kx = np.unravel_index(spec.argmax(), spec.shape)
    angle = np.degrees(np.arctan2(ky - 32, kx - 32))
    print(f"  theta_{l} = {np.degrees(bank.thetas[l]):5.1f} deg, spectral peak at {angle:6.1f} deg")

# phases are alpha_k = k*pi/A: alpha = 0 keeps Re(psi), alpha = pi/2 keeps Im(psi)
psi = bank.psi[1][0]
print("alphas:", np.round(bank.alphas, 4).tolist())
print("alpha=0 is Re(psi):", np.allclose(bank.psi_real[1][0][0], psi.real))
print("alpha=pi/2 is Im(psi):", np.allclose(bank.psi_real[1][0][2], psi.imag))
