"""Measurement synthesis: placements, rotated copies, noise.

A measurement is an ``N x N`` grid holding ``p`` non-overlapping, randomly
rotated copies of the target image plus i.i.d. Gaussian noise. Two placement
policies are supported: ``"arbitrary"`` (occurrences merely must not overlap,
center separation >= 2n in Chebyshev distance) and ``"well_separated"``
(separation >= 4n - 1, a full image diameter, which kills every cross term
in the autocorrelations).

Density conventions: the user-facing density ``gamma`` is the fraction of
area covered by the support disks, ``gamma = p.pi.n^2/N^2``. The
autocorrelation model is linear in the bounding-box occupancy
``4n^2 p/N^2`` instead; :func:`box_density` / :func:`disk_density` convert.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from micromoments import basis as _basis

_MEAS_MAGIC = b"MMMEAS01"

_STREAM_PLACE = 0
_STREAM_ANGLE = 1
_STREAM_NOISE = 2


class PlacementError(RuntimeError):
    """Placement saturated before reaching the requested count."""

    def __init__(self, requested, achieved):
        super().__init__(
            f"placed {achieved} of {requested} occurrences before saturating"
        )
        self.requested = requested
        self.achieved = achieved


def _rng(seed, stream):
    # counter-based generator; streams keyed by purpose so rendering stays
    # deterministic regardless of evaluation order
    return np.random.Generator(np.random.Philox(key=[int(seed), int(stream)]))


def count_for_density(gamma, N, n):
    """Occurrence count for a disk-density ``gamma``: ``round(gamma N^2 / (pi n^2))``."""
    if not 0 < gamma < 1:
        raise ValueError(f"density must lie in (0, 1), got {gamma}")
    p = int(round(gamma * N ** 2 / (np.pi * n ** 2)))
    if p < 1:
        raise ValueError(f"density {gamma} too small: no occurrence fits")
    return p


def disk_density(p, N, n):
    """Fraction of area covered by the support disks, ``p pi n^2 / N^2``."""
    return p * np.pi * n ** 2 / N ** 2


def box_density(p, N, n):
    """Bounding-box occupancy ``4 n^2 p / N^2``, the coefficient that makes
    the autocorrelation relations exact."""
    return 4.0 * n ** 2 * p / N ** 2


def box_to_disk(gamma_box):
    return gamma_box * np.pi / 4.0


def disk_to_box(gamma_disk):
    return gamma_disk * 4.0 / np.pi


def separation_threshold(n, mode):
    if mode == "arbitrary":
        return int(round(2 * n))
    if mode == "well_separated":
        return int(round(4 * n - 1))
    raise ValueError(f"unknown placement mode {mode!r}")


def place_occurrences(N, n, count, mode="arbitrary", seed=0,
                      max_attempt_factor=100):
    """Rejection-sample ``count`` in-bounds centers with the policy's minimum
    Chebyshev separation. Deterministic for a fixed seed.

    Returns an integer array of shape (count, 2) in (row, col) order.

    Raises
    ------
    PlacementError
        After ``max_attempt_factor * count`` failed draws; reports how many
        occurrences were achieved.
    """
    n = float(n)
    sep = separation_threshold(n, mode)
    nb = int(np.floor(n))
    lo, hi = nb, N - 1 - nb
    if hi < lo:
        raise ValueError(f"grid N={N} cannot hold an image of radius {n}")
    rng = _rng(seed, _STREAM_PLACE)
    # cell grid for O(1) neighborhood lookups; cell size = separation
    cells = {}
    placed = np.empty((count, 2), dtype=int)
    got = 0
    budget = max_attempt_factor * count
    while got < count and budget > 0:
        budget -= 1
        cand = rng.integers(lo, hi + 1, size=2)
        cy, cx = int(cand[0]) // sep, int(cand[1]) // sep
        ok = True
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                for other in cells.get((cy + dy, cx + dx), ()):
                    if max(abs(cand[0] - other[0]), abs(cand[1] - other[1])) < sep:
                        ok = False
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            placed[got] = cand
            cells.setdefault((cy, cx), []).append((int(cand[0]), int(cand[1])))
            got += 1
    if got < count:
        raise PlacementError(count, got)
    return placed


def draw_angles(count, seed=0):
    return _rng(seed, _STREAM_ANGLE).uniform(0.0, 2 * np.pi, size=count)


@dataclass
class Measurement:
    """An ``N x N`` measurement grid with optional ground truth."""

    grid: np.ndarray
    radius: float
    sigma: float
    seed: int
    locations: np.ndarray = None
    angles: np.ndarray = None

    @property
    def N(self):
        return self.grid.shape[0]

    @property
    def count(self):
        return 0 if self.locations is None else len(self.locations)


def render_measurement(tables, alpha, locations, angles, N, sigma=0.0, seed=0):
    """Sum rotated copies at the given centers and add Gaussian noise.

    Copies are synthesized through the steerable basis (phase modulation),
    so the render is exact for in-span images. Boxes must lie fully inside
    the grid.
    """
    spec = tables.spec
    nb = spec.box_halfwidth
    locations = np.asarray(locations, dtype=int)
    angles = np.asarray(angles, dtype=float)
    if len(locations) != len(angles):
        raise ValueError("locations and angles must have equal length")
    if len(locations) and (
        locations.min() < nb or locations.max() > N - 1 - nb
    ):
        raise ValueError("an occurrence box overlaps the grid boundary")
    grid = np.zeros((N, N))
    if len(locations):
        alpha = np.asarray(alpha, dtype=complex)
        # batch-synthesize all rotations: (pixels, p) = psi-matrix @ coeffs
        psi_mat = tables.psi.reshape(spec.size, -1)
        coeffs = alpha[:, None] * np.exp(1j * np.outer(spec.nu_array, angles))
        patches = (psi_mat.T @ coeffs).real.T.reshape(-1, spec.box_side,
                                                      spec.box_side)
        flat = grid.ravel()
        offs = np.arange(-nb, nb + 1)
        cell = (offs[:, None] * N + offs[None, :]).ravel()
        base = locations[:, 0] * N + locations[:, 1]
        np.add.at(flat, (base[:, None] + cell[None, :]).ravel(),
                  patches.reshape(len(locations), -1).ravel())
    if sigma > 0:
        grid += sigma * _rng(seed, _STREAM_NOISE).standard_normal((N, N))
    return Measurement(grid=grid, radius=spec.radius, sigma=float(sigma),
                       seed=int(seed), locations=locations, angles=angles)


def simulate_measurement(tables, alpha, N, gamma=None, count=None,
                         mode="arbitrary", sigma=None, snr=None, seed=0):
    """Place, rotate, render, and optionally add noise, in one call."""
    if (gamma is None) == (count is None):
        raise ValueError("pass exactly one of gamma, count")
    if count is None:
        count = count_for_density(gamma, N, tables.spec.radius)
    if snr is not None:
        if sigma is not None:
            raise ValueError("pass at most one of sigma, snr")
        sigma = snr_to_sigma(tables, alpha, snr)
    sigma = 0.0 if sigma is None else float(sigma)
    locations = place_occurrences(N, tables.spec.radius, count, mode, seed)
    angles = draw_angles(count, seed)
    return render_measurement(tables, alpha, locations, angles, N, sigma, seed)


def snr_to_sigma(tables, alpha, snr):
    """Noise level for a target SNR, ``sigma = sqrt(|F|_F^2 / (A snr))``
    with A the pixel count of the support disk."""
    if not snr > 0:
        raise ValueError(f"snr must be positive, got {snr}")
    if np.isinf(snr):
        return 0.0
    F = _basis.synthesize_image(tables, alpha, 0.0)
    energy = float(np.sum(F ** 2))
    if energy == 0:
        raise ValueError("zero-energy image has no finite SNR")
    return float(np.sqrt(energy / (tables.disk_area * snr)))


def sigma_to_snr(tables, alpha, sigma):
    F = _basis.synthesize_image(tables, alpha, 0.0)
    return float(np.sum(F ** 2) / (tables.disk_area * sigma ** 2))


# ---------------------------------------------------------------------------
# file formats

def save_measurement(meas, path, manifest=True, extra=None):
    """Binary grid file plus an optional JSON sidecar with the ground truth."""
    path = str(path)
    with open(path, "wb") as fh:
        fh.write(_MEAS_MAGIC)
        fh.write(struct.pack("<IdQdI", meas.N, meas.radius, meas.seed,
                             meas.sigma, meas.count))
        fh.write(np.ascontiguousarray(meas.grid, dtype="<f8").tobytes())
    if manifest and meas.locations is not None:
        doc = {
            "N": meas.N,
            "radius": meas.radius,
            "sigma": meas.sigma,
            "seed": meas.seed,
            "count": meas.count,
            "locations": np.asarray(meas.locations).tolist(),
            "angles": np.asarray(meas.angles).tolist(),
        }
        if extra:
            doc.update(extra)
        with open(path + ".manifest.json", "w") as fh:
            json.dump(doc, fh)


def load_measurement(path, manifest=True):
    path = str(path)
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MEAS_MAGIC:
            raise ValueError(f"{path}: not a measurement file")
        N, radius, seed, sigma, count = struct.unpack("<IdQdI", fh.read(32))
        grid = np.frombuffer(fh.read(N * N * 8), dtype="<f8").reshape(N, N)
    locations = angles = None
    if manifest:
        try:
            with open(path + ".manifest.json") as fh:
                doc = json.load(fh)
            locations = np.asarray(doc["locations"], dtype=int)
            angles = np.asarray(doc["angles"], dtype=float)
        except FileNotFoundError:
            pass
    return Measurement(grid=grid.astype(float), radius=radius, sigma=sigma,
                       seed=int(seed), locations=locations, angles=angles)
