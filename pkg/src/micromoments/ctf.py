"""Point-spread convolution and moment-domain deconvolution.

A measurement seen through the microscope optics is ``y = h * M`` (circular
convolution) with transfer function ``h_hat``. The first three moment
transforms of ``M`` survive whenever ``h_hat`` never vanishes:

    M_hat[0]     = y_hat[0] / h_hat[0]
    P_M[k]       = P_y[k] / |h_hat[k]|^2
    B_M[k1, k2]  = B_y[k1, k2] / (h_hat[k1] conj(h_hat[k2]) h_hat[k2 - k1])

with the bispectrum convention ``B[k1, k2] = z_hat[k1] conj(z_hat[k2])
z_hat[k2 - k1]``. Deconvolution acts on these transforms only, never on the
raw grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_CTF_MAGIC = b"MMCTFG01"


class InadmissibleCtfError(ValueError):
    """The transfer function vanishes somewhere; moments cannot be restored."""

    def __init__(self, offenders, threshold):
        self.offenders = offenders
        super().__init__(
            f"{len(offenders)} frequencies with |h_hat| <= {threshold:.3e}; "
            f"first offenders: {offenders[:5]}"
        )


@dataclass(frozen=True)
class CtfSpec:
    """Transfer function sampled on the measurement's DFT lattice."""

    h_hat: np.ndarray  # (N, N) complex, natural FFT order

    @property
    def N(self):
        return self.h_hat.shape[0]

    @property
    def kernel(self):
        """Real-space point-spread kernel (inverse DFT of the CTF)."""
        k = np.fft.ifft2(self.h_hat)
        return k.real

    def hermitian_defect(self):
        """Max deviation from conj-symmetry (zero iff the kernel is real)."""
        n = self.N
        idx = (-np.arange(n)) % n
        return float(np.max(np.abs(self.h_hat
                                   - np.conj(self.h_hat[np.ix_(idx, idx)]))))

    def admissible(self, threshold_ratio=1e-6):
        peak = float(np.max(np.abs(self.h_hat)))
        return bool(np.min(np.abs(self.h_hat)) > threshold_ratio * peak)


def ctf_from_kernel(kernel):
    """CTF of a real spatial kernel (same-shape grid)."""
    return CtfSpec(h_hat=np.fft.fft2(np.asarray(kernel, dtype=float)))


def ctf_from_radial_profile(radii, values, N):
    """Interpolate a radial profile onto the (N, N) frequency lattice.

    ``radii`` are frequency magnitudes in DFT bins; values outside the
    profile range take the nearest endpoint value.
    """
    radii = np.asarray(radii, dtype=float)
    values = np.asarray(values, dtype=float)
    if radii.ndim != 1 or radii.shape != values.shape:
        raise ValueError("radial profile must be two equal-length columns")
    if np.any(np.diff(radii) <= 0):
        order = np.argsort(radii)
        radii, values = radii[order], values[order]
    freq = np.fft.fftfreq(N) * N
    rr = np.hypot(freq[:, None], freq[None, :])
    return CtfSpec(h_hat=np.interp(rr, radii, values).astype(complex))


def load_radial_profile(path, N):
    data = np.loadtxt(path)
    if data.ndim != 2 or data.shape[1] != 2:
        raise ValueError(f"{path}: expected two columns (radius, value)")
    return ctf_from_radial_profile(data[:, 0], data[:, 1], N)


def save_ctf_grid(spec, path):
    with open(path, "wb") as fh:
        fh.write(_CTF_MAGIC)
        fh.write(struct.pack("<I", spec.N))
        fh.write(np.ascontiguousarray(spec.h_hat, dtype="<c16").tobytes())


def load_ctf_grid(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _CTF_MAGIC:
            raise ValueError(f"{path}: not a CTF grid file")
        (N,) = struct.unpack("<I", fh.read(4))
        h = np.frombuffer(fh.read(N * N * 16), dtype="<c16").reshape(N, N)
    return CtfSpec(h_hat=h.astype(complex))


def apply_ctf(grid, spec):
    """Circular convolution with the point-spread kernel, via the DFT."""
    grid = np.asarray(grid, dtype=float)
    if grid.shape != spec.h_hat.shape:
        raise ValueError(
            f"grid {grid.shape} does not match CTF lattice {spec.h_hat.shape}"
        )
    out = np.fft.ifft2(np.fft.fft2(grid) * spec.h_hat)
    return out.real


@dataclass
class MomentTransforms:
    """Mean, power spectrum, and windowed bispectrum of one grid.

    The bispectrum is evaluated for frequencies in the centered square
    window ``{-B..B}^2`` (flattened row-major); full-lattice bispectra are
    quartic in N and never needed here.
    """

    mean_hat: complex
    power: np.ndarray          # (N, N) natural order
    bispectrum: np.ndarray     # (W, W) complex over the window
    window: np.ndarray         # (W, 2) signed frequency pairs

    @property
    def mean(self):
        return self.mean_hat


def bispectrum_window(halfwidth):
    r = np.arange(-halfwidth, halfwidth + 1)
    return np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)


def measurement_transforms(grid, bis_halfwidth=3):
    """Moment transforms of a grid: DC, power spectrum, windowed bispectrum."""
    grid = np.asarray(grid, dtype=float)
    N = grid.shape[0]
    z = np.fft.fft2(grid)
    power = np.abs(z) ** 2
    win = bispectrum_window(bis_halfwidth)
    zw = z[win[:, 0] % N, win[:, 1] % N]
    dif = win[None, :, :] - win[:, None, :]  # k2 - k1
    zd = z[dif[..., 0] % N, dif[..., 1] % N]
    bis = zw[:, None] * np.conj(zw[None, :]) * zd
    return MomentTransforms(mean_hat=complex(z[0, 0]), power=power,
                            bispectrum=bis, window=win)


def _ctf_at(spec, pairs):
    N = spec.N
    return spec.h_hat[pairs[..., 0] % N, pairs[..., 1] % N]


def deconvolve_moments(transforms, spec, threshold_ratio=1e-6):
    """Restore the pre-convolution moment transforms.

    Raises
    ------
    InadmissibleCtfError
        If ``|h_hat|`` dips to ``threshold_ratio`` of its peak anywhere
        (near-zeros amplify noise without bound).
    """
    h = spec.h_hat
    peak = float(np.max(np.abs(h)))
    threshold = threshold_ratio * peak
    bad = np.argwhere(np.abs(h) <= threshold)
    if len(bad):
        freq = (np.fft.fftfreq(spec.N) * spec.N).astype(int)
        offenders = [(int(freq[i]), int(freq[j])) for i, j in bad[:16]]
        raise InadmissibleCtfError(offenders, threshold)
    win = transforms.window
    hw = _ctf_at(spec, win)
    dif = win[None, :, :] - win[:, None, :]
    hd = _ctf_at(spec, dif)
    denom = hw[:, None] * np.conj(hw[None, :]) * hd
    return MomentTransforms(
        mean_hat=transforms.mean_hat / h[0, 0],
        power=transforms.power / np.abs(h) ** 2,
        bispectrum=transforms.bispectrum / denom,
        window=win.copy(),
    )
