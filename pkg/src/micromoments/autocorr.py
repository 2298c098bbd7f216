"""Empirical autocorrelations of a measurement over the shift window.

The first three autocorrelations are plain grid averages with zero-padded
out-of-range indexing, normalized by ``1/N^2``:

    a1           = mean of the grid
    a2[l1]       = (1/N^2) sum_i M[i] M[i+l1]
    a3[l1, l2]   = (1/N^2) sum_i M[i] M[i+l1] M[i+l2]

restricted to the window ``L = {0..2n-1}^2`` where, for well-separated
measurements, each occurrence only ever correlates with itself. The default
path computes each third-order slice as an FFT cross-correlation of the
measurement with a pointwise product of itself, reducing the cost from
``O(N^2 L^4)`` to ``O(L^2 N^2 log N)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

_MOMENT_MAGIC = b"MMMOMS01"
_WORKERS = 2


@dataclass
class MomentSet:
    """Empirical (or averaged) autocorrelations of one or more measurements."""

    a1: float
    a2: np.ndarray
    a3: np.ndarray
    N: int
    radius: float
    nsources: int = 1

    @property
    def window(self):
        return self.a2.shape[0]


def shift_window(radius):
    """Side length of the shift window, ``2n``."""
    L = 2 * radius
    if abs(L - round(L)) > 1e-9:
        raise ValueError(f"2n must be integral, got n={radius}")
    return int(round(L))


def _product_shifted(M, dy, dx):
    """M * M(. + (dy, dx)) with zero padding, same shape as M."""
    N = M.shape[0]
    out = np.zeros_like(M)
    out[: N - dy, : N - dx] = M[: N - dy, : N - dx] * M[dy:, dx:]
    return out


def _empirical_fft(M, L):
    N = M.shape[0]
    P = sfft.next_fast_len(N + L, real=True)
    mhat = sfft.rfft2(M, s=(P, P), workers=_WORKERS)
    corr = sfft.irfft2(np.conj(mhat) * mhat, s=(P, P), workers=_WORKERS)
    a2 = corr[:L, :L].copy()
    a3 = np.empty((L, L, L, L))
    for dy in range(L):
        for dx in range(L):
            g = _product_shifted(M, dy, dx)
            ghat = sfft.rfft2(g, s=(P, P), workers=_WORKERS)
            cc = sfft.irfft2(np.conj(ghat) * mhat, s=(P, P), workers=_WORKERS)
            a3[dy, dx] = cc[:L, :L]
    return a2, a3


def _empirical_direct(M, L):
    N = M.shape[0]
    a2 = np.empty((L, L))
    a3 = np.empty((L, L, L, L))
    for dy in range(L):
        for dx in range(L):
            g = _product_shifted(M, dy, dx)
            a2[dy, dx] = g.sum()
            for ey in range(L):
                for ex in range(L):
                    a3[dy, dx, ey, ex] = (
                        g[: N - ey, : N - ex] * M[ey:, ex:]
                    ).sum()
    return a2, a3


def empirical_ac(meas, radius=None, method="fft"):
    """Compute ``(a1, a2, a3)`` over the shift window of radius ``n``.

    ``meas`` is a :class:`micromoments.simulate.Measurement` or a bare 2-D
    array (then ``radius`` is required). The third-order tensor is
    symmetrized in its two shifts, which it satisfies mathematically.
    """
    if hasattr(meas, "grid"):
        grid = meas.grid
        radius = meas.radius if radius is None else radius
    else:
        grid = np.asarray(meas, dtype=float)
    if radius is None:
        raise ValueError("radius required for a bare grid")
    L = shift_window(radius)
    N = grid.shape[0]
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ValueError("measurement grid must be square")
    if N <= 2 * L:
        raise ValueError(f"grid side {N} must exceed 4n = {2 * L}")
    if method == "fft":
        a2, a3 = _empirical_fft(grid, L)
    elif method == "direct":
        a2, a3 = _empirical_direct(grid, L)
    else:
        raise ValueError(f"unknown method {method!r}")
    a3 = 0.5 * (a3 + a3.transpose(2, 3, 0, 1))
    scale = 1.0 / N ** 2
    return MomentSet(a1=float(grid.sum() * scale), a2=a2 * scale,
                     a3=a3 * scale, N=N, radius=float(radius), nsources=1)


class MomentAccumulator:
    """Streaming equal-weight average of moment sets from many measurements."""

    def __init__(self):
        self._sum1 = 0.0
        self._sum2 = None
        self._sum3 = None
        self._count = 0
        self._N = None
        self._radius = None

    def add(self, ms):
        if self._count and (ms.N != self._N or ms.radius != self._radius):
            raise ValueError(
                f"inconsistent sources: ({ms.N}, {ms.radius}) vs "
                f"({self._N}, {self._radius})"
            )
        if self._count == 0:
            self._N, self._radius = ms.N, ms.radius
            self._sum2 = np.zeros_like(ms.a2)
            self._sum3 = np.zeros_like(ms.a3)
        self._sum1 += ms.a1
        self._sum2 += ms.a2
        self._sum3 += ms.a3
        self._count += 1

    def mean(self):
        if self._count == 0:
            raise ValueError("no moment sets accumulated")
        c = self._count
        return MomentSet(a1=self._sum1 / c, a2=self._sum2 / c,
                         a3=self._sum3 / c, N=self._N, radius=self._radius,
                         nsources=c)


@dataclass
class NoiseFloorDiagnostics:
    """Residuals of the noise-generated terms in the low moments.

    Meaningful in simulation settings where ``sigma``, ``gamma`` and ``s1``
    are known; the signal contributions are not subtracted, so interpret the
    spike residuals against the signal floor (they are exact for a
    zero-signal measurement).
    """

    a2_dc_residual: float
    a2_offdc_max: float
    a3_spike_residuals: np.ndarray  # (3,) one per delta family


def noise_floor_check(ms, sigma, gamma, s1, s2_zero=0.0):
    """Compare the delta-spike entries against their predicted amplitudes.

    ``a2[0]`` should carry ``gamma * s2_zero + sigma^2``; the three
    third-order spike families (l1 = 0, l2 = 0, l1 = l2) should each carry
    ``gamma * s1 * sigma^2`` on top of the signal terms.
    """
    L = ms.window
    dc = ms.a2[0, 0] - (gamma * s2_zero + sigma ** 2)
    off = ms.a2.copy()
    off[0, 0] = 0.0
    spike = gamma * s1 * sigma ** 2
    fam1 = [ms.a3[0, 0, ey, ex] for ey in range(L) for ex in range(L)
            if (ey, ex) != (0, 0)]
    fam2 = [ms.a3[dy, dx, 0, 0] for dy in range(L) for dx in range(L)
            if (dy, dx) != (0, 0)]
    fam3 = [ms.a3[dy, dx, dy, dx] for dy in range(L) for dx in range(L)
            if (dy, dx) != (0, 0)]
    res = np.array([np.mean(fam1) - spike,
                    np.mean(fam2) - spike,
                    np.mean(fam3) - spike])
    return NoiseFloorDiagnostics(
        a2_dc_residual=float(dc),
        a2_offdc_max=float(np.max(np.abs(off))),
        a3_spike_residuals=res,
    )


def save_moments(ms, path):
    with open(path, "wb") as fh:
        fh.write(_MOMENT_MAGIC)
        fh.write(struct.pack("<IdIQd", ms.N, ms.radius, ms.window,
                             ms.nsources, ms.a1))
        fh.write(np.ascontiguousarray(ms.a2, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ms.a3, dtype="<f8").tobytes())


def load_moments(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _MOMENT_MAGIC:
            raise ValueError(f"{path}: not a moment file")
        N, radius, L, nsources, a1 = struct.unpack("<IdIQd", fh.read(32))
        a2 = np.frombuffer(fh.read(L * L * 8), dtype="<f8").reshape(L, L)
        a3 = np.frombuffer(fh.read(L ** 4 * 8), dtype="<f8").reshape(L, L, L, L)
    return MomentSet(a1=a1, a2=a2.astype(float), a3=a3.astype(float),
                     N=N, radius=radius, nsources=nsources)
