"""Pair and triplet separation statistics of occurrence placements.

The pair separation function ``xi[d]`` is the per-occurrence histogram of
center offsets between ordered pairs, ``(1/p) sum_i sum_{j != i}
delta[l_i - l_j - d]``; the triplet function ``zeta[d1, d2]`` the analogous
``1/p^2``-normalized double histogram over two neighbors of the same center
(the ``j1 = j2`` diagonal included). Both are nuisance statistics: the
recovery never needs them to high accuracy.

Stored window: the neighbor window ``{-4n+2 .. 4n-1}^2``. Offsets at
Chebyshev distance exactly ``4n-1`` cannot influence any autocorrelation
(every image-moment factor vanishes there), so they are accounted in the
out-of-window mass rather than the grids; this keeps ``xi`` symmetric and
makes well-separated placements yield exactly zero grids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from micromoments import simulate

_SEP_MAGIC = b"MMSEPF01"


@dataclass
class SeparationFunctions:
    """PSF/TSF histograms over the neighbor window plus mass accounting."""

    xi: np.ndarray          # (w, w)
    zeta: np.ndarray        # (w, w, w, w)
    count: int              # p
    radius: float
    pair_mass_out: float    # ordered pairs outside the window, xi units
    trip_mass_out: float    # ordered neighbor pairs outside, zeta units

    @property
    def window_lo(self):
        return -(2 * simulate.separation_threshold(self.radius, "arbitrary") - 2)

    @property
    def window_side(self):
        return self.xi.shape[0]

    def index(self, offset):
        return (int(offset[0]) - self.window_lo,
                int(offset[1]) - self.window_lo)


def neighbor_window(radius):
    """(lo, hi, side) of the stored window ``{-4n+2 .. 4n-1}``."""
    L = simulate.separation_threshold(radius, "arbitrary")  # 2n
    return -(2 * L - 2), 2 * L - 1, 4 * L - 2


def _in_window_offsets(locations, radius):
    """Ordered in-window offsets grouped by center index.

    In-window means every component's magnitude is <= 4n-2 (the largest
    offset with any effect on the moments).
    """
    locations = np.asarray(locations, dtype=int)
    p = len(locations)
    L = simulate.separation_threshold(radius, "arbitrary")
    cut = 2 * L - 2
    if p < 2:
        return [np.empty((0, 2), dtype=int) for _ in range(p)], 0
    tree = cKDTree(locations)
    pairs = tree.query_pairs(r=cut, p=np.inf, output_type="ndarray")
    per_center = [[] for _ in range(p)]
    for i, j in pairs:
        d = locations[i] - locations[j]
        per_center[i].append(d)
        per_center[j].append(-d)
    grouped = [np.asarray(g, dtype=int).reshape(-1, 2) for g in per_center]
    n_in = int(sum(len(g) for g in grouped))
    return grouped, n_in


def psf(locations, radius):
    """Exact pair separation histogram; returns (xi, out_of_window_mass)."""
    lo, hi, w = neighbor_window(radius)
    p = max(len(locations), 1)
    xi = np.zeros((w, w))
    grouped, n_in = _in_window_offsets(locations, radius)
    for g in grouped:
        for d in g:
            xi[d[0] - lo, d[1] - lo] += 1.0
    xi /= p
    total_pairs = len(locations) * (len(locations) - 1)
    return xi, (total_pairs - n_in) / p


def tsf(locations, radius):
    """Exact triplet separation histogram; returns (zeta, out_of_window_mass)."""
    lo, hi, w = neighbor_window(radius)
    p = max(len(locations), 1)
    zeta = np.zeros((w, w, w, w))
    grouped, _ = _in_window_offsets(locations, radius)
    n_in = 0
    for g in grouped:
        if len(g) == 0:
            continue
        idx = g - lo
        flat = idx[:, 0] * w + idx[:, 1]
        sub = zeta.reshape(w * w, w * w)
        np.add.at(sub, (flat[:, None], flat[None, :]), 1.0)
        n_in += len(g) ** 2
    zeta /= p ** 2
    q = len(locations)
    total = q * (q - 1) ** 2
    return zeta, (total - n_in) / p ** 2


def separation_from_locations(locations, radius):
    """Bundle :func:`psf` and :func:`tsf` of one placement list."""
    xi, pair_out = psf(locations, radius)
    zeta, trip_out = tsf(locations, radius)
    return SeparationFunctions(xi=xi, zeta=zeta, count=len(locations),
                               radius=float(radius), pair_mass_out=pair_out,
                               trip_mass_out=trip_out)


def approximate_separation(gamma, N, radius, seed=0):
    """Surrogate separation statistics for a disk density ``gamma``.

    Places ``count_for_density(gamma, N, n)`` occurrences with the
    arbitrary-spacing policy (no rendering needed, only the locations) and
    histograms them. Deterministic per seed.
    """
    count = simulate.count_for_density(gamma, N, radius)
    locations = simulate.place_occurrences(N, radius, count, "arbitrary", seed)
    return separation_from_locations(locations, radius)


def save_separation(sep, path):
    """Sparse coordinate serialization (little-endian)."""
    xi_nz = np.nonzero(sep.xi.ravel())[0]
    zeta_nz = np.nonzero(sep.zeta.ravel())[0]
    with open(path, "wb") as fh:
        fh.write(_SEP_MAGIC)
        fh.write(struct.pack("<dIQddQQ", sep.radius, sep.window_side,
                             sep.count, sep.pair_mass_out, sep.trip_mass_out,
                             len(xi_nz), len(zeta_nz)))
        fh.write(xi_nz.astype("<u4").tobytes())
        fh.write(sep.xi.ravel()[xi_nz].astype("<f8").tobytes())
        fh.write(zeta_nz.astype("<u8").tobytes())
        fh.write(sep.zeta.ravel()[zeta_nz].astype("<f8").tobytes())


def load_separation(path):
    with open(path, "rb") as fh:
        if fh.read(8) != _SEP_MAGIC:
            raise ValueError(f"{path}: not a separation file")
        radius, w, count, pair_out, trip_out, nxi, nzeta = struct.unpack(
            "<dIQddQQ", fh.read(struct.calcsize("<dIQddQQ")))
        xi = np.zeros(w * w)
        idx = np.frombuffer(fh.read(4 * nxi), dtype="<u4")
        xi[idx] = np.frombuffer(fh.read(8 * nxi), dtype="<f8")
        zeta = np.zeros(w ** 4)
        idx = np.frombuffer(fh.read(8 * nzeta), dtype="<u8")
        zeta[idx] = np.frombuffer(fh.read(8 * nzeta), dtype="<f8")
    return SeparationFunctions(
        xi=xi.reshape(w, w), zeta=zeta.reshape(w, w, w, w), count=int(count),
        radius=radius, pair_mass_out=pair_out, trip_mass_out=trip_out)
