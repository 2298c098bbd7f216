"""Predicted measurement autocorrelations from image + spacing statistics.

Implements both spacing models:

* well-separated: ``a1 = g s1``, ``a2 = g S2 + sigma^2 delta``,
  ``a3 = g S3 + g s1 sigma^2 (three delta spikes)``;
* arbitrary spacing: adds cross terms contracting the pair histogram ``xi``
  with ``S2_pair`` (second order); at third order, three ``xi``-weighted
  regions where one neighbor interacts with a same-rotation factor pair
  (``S3_pair``), plus the all-distinct-triple region where a center and two
  different neighbors each carry an independent rotation (``S3_trip``,
  weighted by ``p zeta`` off its coincident-neighbor diagonal).

``g`` throughout is the bounding-box occupancy ``4 n^2 p / N^2``
(:func:`micromoments.simulate.box_density`), the coefficient for which these
relations are exact identities in expectation.

The neighbor-region index windows all coincide with the support of the
image-moment factor being summed, so each region is a fixed linear map from
the flattened ``S3_pair``/``S3_trip`` lookup tables; those maps depend only
on the separation functions and are precomputed once per solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from micromoments import imagemoments as im


@dataclass
class SeparationOperators:
    """Linear maps contracting fixed separation histograms with moment lookups."""

    L: int
    radius: float
    m2: np.ndarray        # (L^2, d^2) acting on the S2_pair lookup
    t_pair: np.ndarray    # (L^4, d^4) acting on the S3_pair lookup
    t_trip: np.ndarray    # (L^4, d^4) acting on the S3_trip lookup

    @property
    def d(self):
        return 2 * self.L - 1


def _offsets(lo, hi):
    r = np.arange(lo, hi + 1)
    return r


def build_separation_operators(sep, spec):
    """Precompute the region-sum operators for one separation-function pair.

    Every region window in the third-order cross term is exactly the support
    window of its summand, so the sums become gathers of ``xi``/``zeta`` at
    shifted indices; the gathers are materialized as dense matrices (desk
    sizes: L=5 gives 625 x 6561 per map).
    """
    if abs(sep.radius - spec.radius) > 1e-12:
        raise ValueError(
            f"separation functions for n={sep.radius} used with basis n={spec.radius}"
        )
    L = spec.diameter
    d = 2 * L - 1
    wlo = sep.window_lo
    w = sep.window_side
    if w != 4 * L - 2:
        raise ValueError(f"separation window side {w} does not match n={spec.radius}")

    ells = np.stack(np.meshgrid(np.arange(L), np.arange(L), indexing="ij"),
                    axis=-1).reshape(-1, 2)            # (L^2, 2)
    doffs = np.stack(np.meshgrid(_offsets(-(L - 1), L - 1),
                                 _offsets(-(L - 1), L - 1), indexing="ij"),
                     axis=-1).reshape(-1, 2)           # (d^2, 2)

    xi_flat = sep.xi.ravel()
    zeta_flat = sep.zeta.ravel()

    def xi_at(off):
        # off: (..., 2) integer offsets, guaranteed inside the window
        return xi_flat[(off[..., 0] - wlo) * w + (off[..., 1] - wlo)]

    # second order: S2_asd[l1] = sum_b xi[l1 + b] S2_pair[b]
    m2 = xi_at(ells[:, None, :] + doffs[None, :, :])

    n_rows = L ** 2 * L ** 2
    l1 = np.repeat(ells, L ** 2, axis=0)               # (L^4, 2)
    l2 = np.tile(ells, (L ** 2, 1))
    d4a = np.repeat(doffs, d * d, axis=0)              # (d^4, 2) first argument
    d4b = np.tile(doffs, (d * d, 1))

    a_idx = ((d4a[:, 0] + L - 1) * d + (d4a[:, 1] + L - 1))
    col_of = a_idx * (d * d) + ((d4b[:, 0] + L - 1) * d + (d4b[:, 1] + L - 1))
    assert np.array_equal(col_of, np.arange(d ** 4))

    t_pair = np.zeros((n_rows, d ** 4))
    # region: both shifted factors from the center, xi-weighted neighbor;
    # fixed first argument a = l2 - l1
    a = l2 - l1
    acol = (a[:, 0] + L - 1) * d + (a[:, 1] + L - 1)
    rows = np.arange(n_rows)
    w_a = xi_at(l1[:, None, :] + d4b[None, : d * d, :])    # (L^4, d^2)
    bcols = np.arange(d * d)
    t_pair[rows[:, None], acol[:, None] * (d * d) + bcols[None, :]] += w_a

    # region: center + l1-shifted neighbor pair; a = l2 fixed
    acol = (l2[:, 0] + L - 1) * d + (l2[:, 1] + L - 1)
    w_b = xi_at(l1[:, None, :] - d4b[None, : d * d, :])
    t_pair[rows[:, None], acol[:, None] * (d * d) + bcols[None, :]] += w_b

    # region: center + l2-shifted neighbor pair; a = l1 fixed
    acol = (l1[:, 0] + L - 1) * d + (l1[:, 1] + L - 1)
    w_c = xi_at(l2[:, None, :] - d4b[None, : d * d, :])
    t_pair[rows[:, None], acol[:, None] * (d * d) + bcols[None, :]] += w_c

    # all-distinct-triple region: two different neighbors of one center,
    # weighted by the triplet histogram scaled to a per-center count with
    # its coincident-neighbor diagonal removed (p zeta[u, u] - xi[u] = 0,
    # so the diagonal cancels identically for consistent histograms)
    def weight_at(off1, off2):
        i1 = (off1[..., 0] - wlo) * w + (off1[..., 1] - wlo)
        i2 = (off2[..., 0] - wlo) * w + (off2[..., 1] - wlo)
        vals = sep.count * zeta_flat[i1 * (w * w) + i2]
        diag = np.all(off1 == off2, axis=-1)
        if np.any(diag):
            vals = vals - diag * xi_flat[i1]
        return vals

    chunk = 512  # rows per block to bound the (rows, d^4) temporaries
    t_trip = np.zeros((n_rows, d ** 4))
    for lo in range(0, n_rows, chunk):
        hi = min(lo + chunk, n_rows)
        t_trip[lo:hi] = weight_at(
            d4a[None, :, :] - l1[lo:hi, None, :],
            d4b[None, :, :] - l2[lo:hi, None, :])
    return SeparationOperators(L=L, radius=spec.radius, m2=m2,
                               t_pair=t_pair, t_trip=t_trip)


def _crop_window(centered, L, order):
    """Crop a centered spatial array to the moment windows.

    ``order=2``: the prediction window {0..L-1}; ``order=-2``: the lookup
    support {-(L-1)..L-1}; 4-D variants act per axis pair.
    """
    c = L  # center index in a 2L-wide fftshifted array
    if order == 2:
        return centered[c:, c:]
    if order == -2:
        return centered[1:, 1:]
    if order == 4:
        return centered[c:, c:, c:, c:]
    if order == -4:
        return centered[1:, 1:, 1:, 1:]
    raise ValueError(order)


@dataclass
class MomentTables:
    """Spatial image-moment lookups (and optional gradients) for one alpha."""

    s1: float
    s2: np.ndarray          # (L, L) on the prediction window
    s2pair: np.ndarray      # (d^2,) lookup
    s3: np.ndarray          # (L^4,)
    s3pair: np.ndarray      # (d^4,)
    s3trip: np.ndarray      # (d^4,)
    g_s1: np.ndarray = None         # (V,)
    g_s2: np.ndarray = None         # (V, L, L)
    g_s2pair: np.ndarray = None     # (V, d^2)
    g_s3: np.ndarray = None         # (V, L^4)
    g_s3pair: np.ndarray = None     # (V, d^4)
    g_s3trip: np.ndarray = None     # (V, d^4)


def moment_tables(kernel, alpha, grads=False, pair=True):
    """Spatial lookups for one alpha; ``pair=False`` skips the neighbor
    moments (sufficient for the well-separated model)."""
    spec = kernel.spec
    L = spec.diameter
    alpha = np.asarray(alpha, dtype=complex)
    s2c = im.hat_to_spatial_2d(im.s2_hat(kernel, alpha))
    s3c = im.hat_to_spatial_4d(im.s3_hat(kernel, alpha))
    if pair:
        s2pc = im.hat_to_spatial_2d(im.s2pair_hat(kernel, alpha))
        s3pc = im.hat_to_spatial_4d(im.s3pair_hat(kernel, alpha))
        s3tc = im.hat_to_spatial_4d(im.s3trip_hat(kernel, alpha))
    out = MomentTables(
        s1=im.s1(kernel, alpha),
        s2=_crop_window(s2c, L, 2).copy(),
        s2pair=_crop_window(s2pc, L, -2).ravel().copy() if pair else None,
        s3=_crop_window(s3c, L, 4).ravel().copy(),
        s3pair=_crop_window(s3pc, L, -4).ravel().copy() if pair else None,
        s3trip=_crop_window(s3tc, L, -4).ravel().copy() if pair else None,
    )
    if grads:
        g2 = im.hat_to_spatial_2d_batch(im.grad_s2_hat(kernel, alpha))
        g2p = im.hat_to_spatial_2d_batch(im.grad_s2pair_hat(kernel, alpha))
        g3 = im.hat_to_spatial_4d_batch(im.grad_s3_hat(kernel, alpha))
        g3p = im.hat_to_spatial_4d_batch(im.grad_s3pair_hat(kernel, alpha))
        g3t = im.hat_to_spatial_4d_batch(im.grad_s3trip_hat(kernel, alpha))
        V = spec.size
        out.g_s1 = im.grad_s1(kernel)
        out.g_s2 = g2[:, L:, L:].copy()
        out.g_s2pair = g2p[:, 1:, 1:].reshape(V, -1).copy()
        out.g_s3 = g3[:, L:, L:, L:, L:].reshape(V, -1).copy()
        out.g_s3pair = g3p[:, 1:, 1:, 1:, 1:].reshape(V, -1).copy()
        out.g_s3trip = g3t[:, 1:, 1:, 1:, 1:].reshape(V, -1).copy()
    return out


def _spike_pattern(L):
    """delta[l1] + delta[l2] + delta[l1 - l2] over the flattened pair window."""
    ells = np.stack(np.meshgrid(np.arange(L), np.arange(L), indexing="ij"),
                    axis=-1).reshape(-1, 2)
    l1 = np.repeat(ells, L ** 2, axis=0)
    l2 = np.tile(ells, (L ** 2, 1))
    return ((np.all(l1 == 0, axis=1)).astype(float)
            + (np.all(l2 == 0, axis=1)).astype(float)
            + (np.all(l1 == l2, axis=1)).astype(float))


@dataclass
class ForwardPrediction:
    a1: float
    a2: np.ndarray
    a3: np.ndarray


def predict_ac(kernel, alpha, gamma, sigma, ops=None, tables=None):
    """Predicted autocorrelations for box density ``gamma`` and noise ``sigma``.

    ``ops=None`` selects the well-separated model (all cross terms zero).
    """
    spec = kernel.spec
    L = spec.diameter
    t = tables if tables is not None else moment_tables(kernel, alpha)
    a1 = gamma * t.s1
    a2 = gamma * t.s2.copy()
    a3 = gamma * t.s3.copy()
    if ops is not None:
        if ops.L != L or abs(ops.radius - spec.radius) > 1e-12:
            raise ValueError("separation operators built for a different basis")
        a2 += gamma * (ops.m2 @ t.s2pair).reshape(L, L)
        a3 += gamma * (ops.t_pair @ t.s3pair + ops.t_trip @ t.s3trip)
    if sigma:
        a2[0, 0] += sigma ** 2
        a3 += gamma * t.s1 * sigma ** 2 * _spike_pattern(L)
    return ForwardPrediction(a1=a1, a2=a2, a3=a3.reshape(L, L, L, L))


@dataclass
class ForwardGradient:
    """Partials of each predicted entry with respect to alpha and gamma."""

    da1_alpha: np.ndarray   # (V,)
    da1_gamma: float
    da2_alpha: np.ndarray   # (V, L, L)
    da2_gamma: np.ndarray   # (L, L)
    da3_alpha: np.ndarray   # (V, L, L, L, L)
    da3_gamma: np.ndarray   # (L, L, L, L)


def grad_predict(kernel, alpha, gamma, sigma, ops=None, tables=None):
    """Chain-rule partials of :func:`predict_ac` (holomorphic in alpha)."""
    spec = kernel.spec
    L = spec.diameter
    V = spec.size
    t = tables if tables is not None else moment_tables(kernel, alpha, grads=True)
    da2_g = t.s2.copy()
    da3_g = t.s3.copy()
    da2_a = t.g_s2.copy()
    da3_a = t.g_s3.copy()
    if ops is not None:
        da2_g += (ops.m2 @ t.s2pair).reshape(L, L)
        da3_g += ops.t_pair @ t.s3pair + ops.t_trip @ t.s3trip
        da2_a += (ops.m2 @ t.g_s2pair.T).T.reshape(V, L, L)
        da3_a += (ops.t_pair @ t.g_s3pair.T).T
        da3_a += (ops.t_trip @ t.g_s3trip.T).T
    if sigma:
        spikes = _spike_pattern(L)
        da3_g += t.s1 * sigma ** 2 * spikes
        da3_a += sigma ** 2 * t.g_s1[:, None] * spikes[None, :]
    return ForwardGradient(
        da1_alpha=gamma * t.g_s1,
        da1_gamma=t.s1,
        da2_alpha=gamma * da2_a,
        da2_gamma=da2_g,
        da3_alpha=(gamma * da3_a).reshape(V, L, L, L, L),
        da3_gamma=da3_g.reshape(L, L, L, L),
    )
