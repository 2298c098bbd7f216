"""Bandlimited Fourier-Bessel basis on a pixel disk.

The target image is modeled as a finite expansion in the Dirichlet-Laplacian
eigenfunctions of the unit disk, ``J_nu(lambda_{nu,q} r) * exp(i nu theta)``,
sampled on a square pixel grid of radius ``n``. The basis is steerable:
rotating the image multiplies coefficient ``(nu, q)`` by ``exp(i nu phi)``.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import jv

_CACHE_ENV = "MICROMOMENTS_CACHE_DIR"
_GRID_CONVENTION = 1  # pixel centers at integer offsets, disk test |l| <= n
_BASIS_MAGIC = b"MMBASIS1"


class EmptyBasisError(ValueError):
    """Raised when the bandlimit admits no basis function."""


class RealityError(ValueError):
    """Raised when coefficients violate the conjugate-symmetry constraint."""


@dataclass(frozen=True)
class BesselRootTable:
    """Roots ``lambda_{nu,q} <= bandlimit`` of the Bessel functions ``J_nu``.

    ``orders[i] >= 0`` is the Bessel order, ``qindex[i] >= 1`` the root index
    for that order, ``roots[i]`` the root value. Entries are sorted by
    ascending root value.
    """

    orders: np.ndarray
    qindex: np.ndarray
    roots: np.ndarray
    bandlimit: float

    def __len__(self):
        return len(self.roots)


def _bisect_root(nu, lo, hi, tol=1e-13):
    flo = jv(nu, lo)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if hi - lo < tol:
            return mid
        fmid = jv(nu, mid)
        if fmid == 0.0:
            return mid
        if (flo < 0) != (fmid < 0):
            hi = mid
        else:
            lo, flo = mid, fmid
    return 0.5 * (lo + hi)


def compute_bessel_roots(bandlimit, step=0.01, tol=1e-13):
    """Find all Bessel roots ``lambda_{nu,q} <= bandlimit``.

    Scans ``J_nu`` on a grid of spacing ``step``, brackets sign changes and
    refines each bracket by bisection to width ``tol``. Deterministic and
    independent of library root tables.

    Raises
    ------
    EmptyBasisError
        If the bandlimit lies below the first root of ``J_0``.
    """
    if not np.isfinite(bandlimit) or bandlimit <= 0:
        raise EmptyBasisError(f"bandlimit must be positive, got {bandlimit}")
    xs = np.arange(step, bandlimit + step, step)
    xs = xs[xs <= bandlimit]
    orders, qindex, roots = [], [], []
    nu = 0
    while True:
        vals = jv(nu, xs)
        sign = np.sign(vals)
        flips = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
        found = [_bisect_root(nu, xs[i], xs[i + 1], tol) for i in flips]
        found = [r for r in found if r <= bandlimit]
        if not found:
            break
        for q, r in enumerate(found, start=1):
            orders.append(nu)
            qindex.append(q)
            roots.append(r)
        nu += 1
    if not roots:
        raise EmptyBasisError(
            f"bandlimit {bandlimit} lies below the first root of J0 (~2.4048)"
        )
    order = np.argsort(roots, kind="stable")
    return BesselRootTable(
        orders=np.asarray(orders, dtype=int)[order],
        qindex=np.asarray(qindex, dtype=int)[order],
        roots=np.asarray(roots, dtype=float)[order],
        bandlimit=float(bandlimit),
    )


def bandlimit_for_count(count, step=0.01):
    """Bandlimit whose basis has exactly ``count`` coefficients.

    Counts include the negative-order mirrors: each ``nu = 0`` root adds one
    coefficient, each ``nu > 0`` root adds two. Raises if ``count`` is not
    attainable (e.g. 2 is skipped because the second entry is a +-1 pair).
    """
    # Scan a generous range and grow until enough roots are available.
    limit = 8.0
    while True:
        table = compute_bessel_roots(limit, step=step)
        counts = np.where(table.orders == 0, 1, 2).cumsum()
        if counts[-1] >= count + 2:
            break
        limit *= 1.5
    hit = np.nonzero(counts == count)[0]
    if len(hit) == 0:
        reachable = sorted(set(int(c) for c in counts[counts <= count + 4]))
        raise ValueError(
            f"coefficient count {count} not attainable; nearby counts: {reachable}"
        )
    i = hit[0]
    return 0.5 * (table.roots[i] + table.roots[i + 1])


@dataclass(frozen=True)
class BasisSpec:
    """Index set of a bandlimited disk basis.

    ``nu`` holds signed angular orders (negative mirrors included), ``q`` the
    root indices and ``roots`` the corresponding Bessel roots, in canonical
    order (ascending root, negative order first within a pair).
    """

    radius: float
    bandlimit: float
    nu: tuple
    q: tuple
    roots: tuple

    def __post_init__(self):
        two_n = 2 * self.radius
        if abs(two_n - round(two_n)) > 1e-9:
            raise ValueError(f"2n must be integral, got n={self.radius}")

    @property
    def size(self):
        return len(self.nu)

    @property
    def nu_max(self):
        return int(max(abs(v) for v in self.nu))

    @property
    def diameter(self):
        """Side length of the shift window, ``2n`` as an integer."""
        return int(round(2 * self.radius))

    @property
    def box_halfwidth(self):
        return int(np.floor(self.radius))

    @property
    def box_side(self):
        return 2 * self.box_halfwidth + 1

    @property
    def dft_size(self):
        return int(round(4 * self.radius))

    @property
    def nu_array(self):
        return np.asarray(self.nu, dtype=int)

    @property
    def v0_indices(self):
        """Positions of the nu = 0 entries."""
        return np.nonzero(self.nu_array == 0)[0]

    @property
    def free_indices(self):
        """Positions of the free (nu >= 0) entries."""
        return np.nonzero(self.nu_array >= 0)[0]

    @property
    def mirror_permutation(self):
        """Index map m with ``alpha[m[j]] = (-1)^nu_j * conj(alpha[j])``."""
        lookup = {(v, k): i for i, (v, k) in enumerate(zip(self.nu, self.q))}
        return np.asarray([lookup[(-v, k)] for v, k in zip(self.nu, self.q)])

    @property
    def n_real_params(self):
        nus = self.nu_array
        return int(np.sum(nus == 0) + 2 * np.sum(nus > 0))


def basis_spec(radius, bandlimit=None, coeff_count=None):
    """Build a :class:`BasisSpec` from a bandlimit or a coefficient count."""
    if (bandlimit is None) == (coeff_count is None):
        raise ValueError("pass exactly one of bandlimit, coeff_count")
    if bandlimit is None:
        bandlimit = bandlimit_for_count(coeff_count)
    table = compute_bessel_roots(bandlimit)
    nu, q, roots = [], [], []
    for v, k, r in zip(table.orders, table.qindex, table.roots):
        if v == 0:
            nu.append(0)
            q.append(int(k))
            roots.append(float(r))
        else:
            nu.extend([-int(v), int(v)])
            q.extend([int(k), int(k)])
            roots.extend([float(r), float(r)])
    return BasisSpec(
        radius=float(radius),
        bandlimit=float(bandlimit),
        nu=tuple(nu),
        q=tuple(q),
        roots=tuple(roots),
    )


@dataclass(frozen=True)
class BasisTables:
    """Sampled basis functions and their DFTs.

    ``psi[j]`` is the complex grid of basis function j on the bounding box
    ``{-nb..nb}^2`` (zero outside the disk ``|l| <= n``); ``psi_hat[j]`` is
    its DFT over the ``4n x 4n`` lattice with the convention
    ``sum_l psi[l] exp(-2 pi i l.k / 4n)``, frequencies in natural FFT order.
    """

    spec: BasisSpec
    psi: np.ndarray
    psi_hat: np.ndarray
    disk_mask: np.ndarray = field(repr=False, default=None)

    @property
    def disk_area(self):
        """Pixel count of the support disk (the SNR area A)."""
        return int(self.disk_mask.sum())


def box_coords(spec):
    """Row/column offsets of the bounding box, ``{-nb..nb}``."""
    nb = spec.box_halfwidth
    return np.arange(-nb, nb + 1)


def build_basis(spec):
    """Sample every basis function on the pixel grid and take its DFT."""
    coords = box_coords(spec)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    r = np.hypot(yy, xx)
    mask = r <= spec.radius + 1e-12
    theta = np.arctan2(xx, yy)  # angle measured from the row axis
    m = spec.dft_size
    V = spec.size
    B = spec.box_side
    psi = np.zeros((V, B, B), dtype=complex)
    rr = r / spec.radius
    for j in range(V):
        vals = jv(spec.nu[j], spec.roots[j] * rr) * np.exp(1j * spec.nu[j] * theta)
        psi[j] = np.where(mask, vals, 0.0)
    # Embed the box at wrapped positions so the FFT realizes the stated
    # convention with signed pixel offsets.
    psi_hat = np.zeros((V, m, m), dtype=complex)
    idx = coords % m
    embed = np.zeros((m, m), dtype=complex)
    for j in range(V):
        embed[:] = 0.0
        embed[np.ix_(idx, idx)] = psi[j]
        psi_hat[j] = np.fft.fft2(embed)
    return BasisTables(spec=spec, psi=psi, psi_hat=psi_hat, disk_mask=mask)


def steer(alpha, spec, phi):
    """Rotate by ``phi``: multiply coefficient ``(nu, q)`` by ``exp(i nu phi)``."""
    return np.asarray(alpha) * np.exp(1j * spec.nu_array * phi)


def reality_violation(alpha, spec):
    """Max magnitude of ``alpha[-nu,q] - (-1)^nu conj(alpha[nu,q])``."""
    alpha = np.asarray(alpha)
    signs = (-1.0) ** np.abs(spec.nu_array)
    mirrored = signs * np.conj(alpha)
    return float(np.max(np.abs(alpha[spec.mirror_permutation] - mirrored)))


def enforce_reality(alpha, spec):
    """Project coefficients onto the conjugate-symmetry constraint."""
    alpha = np.asarray(alpha, dtype=complex)
    perm = spec.mirror_permutation
    signs = (-1.0) ** np.abs(spec.nu_array)
    return 0.5 * (alpha + signs * np.conj(alpha[perm]))


def synthesize_image(tables, alpha, phi=0.0, tol=1e-9):
    """Render the real image ``F_phi`` on the bounding box.

    Raises
    ------
    RealityError
        If the synthesized grid has imaginary residue above ``tol``.
    """
    spec = tables.spec
    coeffs = steer(np.asarray(alpha, dtype=complex), spec, phi)
    img = np.tensordot(coeffs, tables.psi, axes=(0, 0))
    resid = float(np.max(np.abs(img.imag))) if img.size else 0.0
    if resid > tol:
        raise RealityError(
            f"synthesized image has imaginary residue {resid:.3e} > {tol:.1e}"
        )
    return img.real.copy()


def _real_design_matrix(tables):
    """Design matrix over disk pixels for the free real parameters."""
    spec = tables.spec
    mask = tables.disk_mask
    cols = []
    for j in spec.free_indices:
        col = tables.psi[j][mask]
        if spec.nu[j] == 0:
            cols.append(col.real)
        else:
            cols.append(2.0 * col.real)
            cols.append(-2.0 * col.imag)
    return np.column_stack(cols)


def params_to_alpha(params, spec):
    """Assemble constrained complex coefficients from free real parameters."""
    params = np.asarray(params, dtype=float)
    alpha = np.zeros(spec.size, dtype=complex)
    pos = 0
    for j in spec.free_indices:
        if spec.nu[j] == 0:
            alpha[j] = params[pos]
            pos += 1
        else:
            alpha[j] = params[pos] + 1j * params[pos + 1]
            pos += 2
    perm = spec.mirror_permutation
    signs = (-1.0) ** np.abs(spec.nu_array)
    for j in spec.free_indices:
        if spec.nu[j] > 0:
            alpha[perm[j]] = signs[j] * np.conj(alpha[j])
    return alpha


def alpha_to_params(alpha, spec):
    """Extract the free real parameters (inverse of :func:`params_to_alpha`)."""
    alpha = np.asarray(alpha)
    out = []
    for j in spec.free_indices:
        if spec.nu[j] == 0:
            out.append(alpha[j].real)
        else:
            out.extend([alpha[j].real, alpha[j].imag])
    return np.asarray(out, dtype=float)


def realify_gradient(grad, spec):
    """Chain-rule a holomorphic gradient onto the free real parameters.

    ``grad`` has shape (V, ...) holding partials with respect to each complex
    coefficient (no conjugate dependence); the result has shape
    (n_real_params, ...) with the mirror constraint folded in. Imaginary
    residue is discarded (the underlying quantity is real on the constraint
    manifold).
    """
    grad = np.asarray(grad)
    perm = spec.mirror_permutation
    signs = (-1.0) ** np.abs(spec.nu_array)
    rows = []
    for j in spec.free_indices:
        if spec.nu[j] == 0:
            rows.append(grad[j].real)
        else:
            gj = grad[j]
            gm = grad[perm[j]]
            rows.append((gj + signs[j] * gm).real)
            rows.append((1j * (gj - signs[j] * gm)).real)
    return np.stack(rows, axis=0)


def expand_image(img, tables, rcond=1e-10):
    """Least-squares projection of a real grid onto the basis span.

    The solve runs in the free real parameterization, so the returned
    coefficients satisfy the reality constraint exactly. Singular values
    below ``rcond * sigma_max`` are cut (pseudo-inverse).
    """
    spec = tables.spec
    img = np.asarray(img, dtype=float)
    if img.shape != (spec.box_side, spec.box_side):
        raise ValueError(
            f"image must be {spec.box_side}x{spec.box_side}, got {img.shape}"
        )
    E = _real_design_matrix(tables)
    b = img[tables.disk_mask]
    sol, _, rank, _ = np.linalg.lstsq(E, b, rcond=rcond)
    if rank < spec.n_real_params:
        raise np.linalg.LinAlgError(
            f"rank-deficient basis design: rank {rank} < {spec.n_real_params}"
        )
    return params_to_alpha(sol, spec)


def random_coefficients(spec, rng, scale=1.0):
    """Draw random coefficients satisfying the reality constraint."""
    params = rng.standard_normal(spec.n_real_params) * scale
    return params_to_alpha(params, spec)


# ---------------------------------------------------------------------------
# binary cache

def save_basis(tables, path):
    """Write tables to a binary cache file (little-endian float64)."""
    spec = tables.spec
    with open(path, "wb") as fh:
        fh.write(_BASIS_MAGIC)
        fh.write(struct.pack("<ddIIII", spec.radius, spec.bandlimit,
                             _GRID_CONVENTION, spec.box_halfwidth,
                             spec.dft_size, spec.size))
        for v, k, r in zip(spec.nu, spec.q, spec.roots):
            fh.write(struct.pack("<iid", v, k, r))
        fh.write(np.ascontiguousarray(tables.psi, dtype="<c16").tobytes())
        fh.write(np.ascontiguousarray(tables.psi_hat, dtype="<c16").tobytes())


def load_basis(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _BASIS_MAGIC:
            raise ValueError(f"{path}: not a basis cache file")
        radius, bandlimit, conv, nb, m, V = struct.unpack("<ddIIII", fh.read(32))
        if conv != _GRID_CONVENTION:
            raise ValueError(f"{path}: unknown grid convention {conv}")
        nu, q, roots = [], [], []
        for _ in range(V):
            v, k, r = struct.unpack("<iid", fh.read(16))
            nu.append(v)
            q.append(k)
            roots.append(r)
        spec = BasisSpec(radius=radius, bandlimit=bandlimit,
                         nu=tuple(nu), q=tuple(q), roots=tuple(roots))
        B = spec.box_side
        psi = np.frombuffer(fh.read(V * B * B * 16), dtype="<c16").reshape(V, B, B)
        psi_hat = np.frombuffer(fh.read(V * m * m * 16), dtype="<c16").reshape(V, m, m)
    coords = box_coords(spec)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    mask = np.hypot(yy, xx) <= spec.radius + 1e-12
    return BasisTables(spec=spec, psi=psi.astype(complex),
                       psi_hat=psi_hat.astype(complex), disk_mask=mask)


_MEMORY_CACHE = {}


def cached_basis(spec, cache_dir=None):
    """Build (or fetch) tables, memoized in-process and optionally on disk.

    The disk cache directory comes from ``cache_dir`` or the
    ``MICROMOMENTS_CACHE_DIR`` environment variable; files are keyed by
    ``(n, bandlimit, grid convention)``.
    """
    key = (spec.radius, spec.bandlimit, _GRID_CONVENTION)
    if key in _MEMORY_CACHE:
        return _MEMORY_CACHE[key]
    cache_dir = cache_dir or os.environ.get(_CACHE_ENV)
    path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(
            cache_dir, f"basis_n{spec.radius:g}_lam{spec.bandlimit:.9f}_c1.bin"
        )
        if os.path.exists(path):
            tables = load_basis(path)
            if tables.spec == spec:
                _MEMORY_CACHE[key] = tables
                return tables
    tables = build_basis(spec)
    if path:
        save_basis(tables, path)
    _MEMORY_CACHE[key] = tables
    return tables
