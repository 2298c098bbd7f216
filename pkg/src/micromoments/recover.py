"""Least-squares recovery of the target image from autocorrelations.

The objective is the weighted squared mismatch between empirical
autocorrelations and the forward model, with weights ``1/2``, ``1/(2 L^2)``
and ``1/(2 L^4)`` equalizing the three moment orders. It is a degree-6
polynomial in the free parameters (real/imaginary coefficient parts plus the
density), minimized by BFGS with Armijo backtracking from several random
starts; the spacing statistics stay fixed during a solve.

The two-stage scheme: fit with surrogate spacing statistics synthesized at
an initial density guess until the density estimate stabilizes, re-synthesize
the statistics at the estimated density, then re-fit for the coefficients.

Density units: the optimizer's density variable is the bounding-box
occupancy (``simulate.box_density``); results carry both conventions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from micromoments import basis as _basis
from micromoments import forward, separation, simulate
from micromoments import imagemoments as im


@dataclass
class Objective:
    """Weighted least-squares mismatch for fixed targets and spacing."""

    kernel: object
    targets: object            # autocorr.MomentSet
    sigma: float
    ops: object = None         # forward.SeparationOperators or None

    def __post_init__(self):
        for arr in (self.targets.a1, self.targets.a2, self.targets.a3):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite moment entries in targets")
        L = self.kernel.spec.diameter
        if self.targets.window != L:
            raise ValueError(
                f"targets window {self.targets.window} != basis window {L}"
            )
        self.w1 = 0.5
        self.w2 = 0.5 / L ** 2
        self.w3 = 0.5 / L ** 4

    @property
    def n_params(self):
        return self.kernel.spec.n_real_params + 1

    def pack(self, alpha, gamma):
        return np.concatenate([_basis.alpha_to_params(alpha, self.kernel.spec),
                               [gamma]])

    def unpack(self, params):
        return (_basis.params_to_alpha(params[:-1], self.kernel.spec),
                float(params[-1]))

    def _bases(self, tables):
        """Per-unit-density prediction pieces: pred2 = g*base2 + sigma^2 d,
        pred3 = g*base3."""
        L = self.kernel.spec.diameter
        base2 = tables.s2.copy()
        base3 = tables.s3.copy()
        if self.ops is not None:
            base2 += (self.ops.m2 @ tables.s2pair).reshape(L, L)
            base3 = base3 + (self.ops.t_pair @ tables.s3pair
                             + self.ops.t_trip @ tables.s3trip)
        if self.sigma:
            base3 = base3 + tables.s1 * self.sigma ** 2 * forward._spike_pattern(L)
        return base2, base3

    def _residuals(self, gamma, tables, bases):
        base2, base3 = bases
        r1 = self.targets.a1 - gamma * tables.s1
        r2 = self.targets.a2 - gamma * base2
        if self.sigma:
            r2 = r2.copy()
            r2[0, 0] -= self.sigma ** 2
        r3 = self.targets.a3.ravel() - gamma * base3
        return r1, r2, r3

    def _value_of(self, r1, r2, r3):
        return float(self.w1 * r1 ** 2 + self.w2 * np.sum(r2 ** 2)
                     + self.w3 * np.sum(r3 ** 2))

    def value(self, params):
        alpha, gamma = self.unpack(params)
        tables = forward.moment_tables(self.kernel, alpha,
                                       pair=self.ops is not None)
        r1, r2, r3 = self._residuals(gamma, tables, self._bases(tables))
        return self._value_of(r1, r2, r3)

    def value_grad(self, params):
        """Objective value and gradient over the free real parameters.

        The alpha gradient contracts the residuals against the moment
        gradients in the frequency domain (adjoint of the inverse DFT and
        window crops), so no per-coefficient gradient tensor is formed.
        """
        kernel = self.kernel
        spec = kernel.spec
        L = spec.diameter
        m = kernel.m
        alpha, gamma = self.unpack(params)
        tables = forward.moment_tables(kernel, alpha,
                                       pair=self.ops is not None)
        base2, base3 = self._bases(tables)
        r1, r2, r3 = self._residuals(gamma, tables, (base2, base3))
        val = self._value_of(r1, r2, r3)

        gg = (self.w1 * r1 * tables.s1 + self.w2 * np.sum(r2 * base2)
              + self.w3 * np.sum(r3 * base3))

        # adjoint weights: embed residual contractions in centered spatial
        # arrays, pull back through the inverse DFT
        c2 = np.zeros((m, m))
        c2[L:, L:] = self.w2 * gamma * r2
        w2_hat = im.spatial_weights_to_hat_2d(c2)
        c3 = np.zeros((m, m, m, m))
        c3[L:, L:, L:, L:] = (self.w3 * gamma * r3).reshape(L, L, L, L)
        w3_hat = im.spatial_weights_to_hat_4d(c3)
        ga = im.grad_s2_contracted(kernel, alpha, w2_hat)
        ga += im.grad_s3_contracted(kernel, alpha, w3_hat)
        s1_weight = self.w1 * r1 * gamma
        if self.ops is not None:
            d = 2 * L - 1
            cp2 = np.zeros((m, m))
            cp2[1:, 1:] = (self.w2 * gamma * (self.ops.m2.T @ r2.ravel())
                           ).reshape(d, d)
            ga += im.grad_s2pair_contracted(
                kernel, alpha, im.spatial_weights_to_hat_2d(cp2))
            cp3 = np.zeros((m, m, m, m))
            cp3[1:, 1:, 1:, 1:] = (self.w3 * gamma
                                   * (self.ops.t_pair.T @ r3)).reshape(
                                       d, d, d, d)
            ga += im.grad_s3pair_contracted(
                kernel, alpha, im.spatial_weights_to_hat_4d(cp3))
            ct3 = np.zeros((m, m, m, m))
            ct3[1:, 1:, 1:, 1:] = (self.w3 * gamma
                                   * (self.ops.t_trip.T @ r3)).reshape(
                                       d, d, d, d)
            ga += im.grad_s3trip_contracted(
                kernel, alpha, im.spatial_weights_to_hat_4d(ct3))
        if self.sigma:
            spikes = forward._spike_pattern(L)
            s1_weight += self.w3 * gamma * self.sigma ** 2 * float(r3 @ spikes)
        ga += s1_weight * im.grad_s1(kernel)

        grad = np.empty(self.n_params)
        grad[:-1] = -2.0 * _basis.realify_gradient(ga, spec)
        grad[-1] = -2.0 * gg
        if not np.isfinite(val) or not np.all(np.isfinite(grad)):
            raise FloatingPointError("non-finite objective evaluation")
        return val, grad


@dataclass
class MinimizeResult:
    alpha: np.ndarray
    gamma: float               # box-density units
    value: float
    grad_norm: float
    iterations: int
    converged: bool
    degraded: bool
    stop_reason: str
    gamma_trace: list = field(default_factory=list)


def minimize(objective, alpha0, gamma0, max_iters=400, gtol=1e-9,
             callback=None):
    """BFGS with Armijo backtracking (c = 1e-4, halving).

    The inverse-Hessian approximation resets to identity on curvature
    violations. A failed line search returns the best iterate seen with
    ``degraded=True``. ``callback(iteration, gamma, value)`` may return True
    to stop early (used for the density-stabilization stage).
    """
    x = objective.pack(alpha0, gamma0)
    n = len(x)
    f, g = objective.value_grad(x)
    H = np.eye(n)
    best_x, best_f = x.copy(), f
    trace = [float(x[-1])]
    converged = False
    degraded = False
    reason = "max_iters"
    it = 0
    for it in range(1, max_iters + 1):
        gnorm = float(np.linalg.norm(g))
        if gnorm <= gtol:
            converged = True
            reason = "gtol"
            it -= 1
            break
        d = -H @ g
        slope = float(d @ g)
        if slope >= 0:
            H = np.eye(n)
            d = -g
            slope = -float(g @ g)
        # Armijo backtracking
        t = 1.0
        f_new = None
        while t > 1e-14:
            cand = x + t * d
            fc = objective.value(cand)
            if fc <= f + 1e-4 * t * slope:
                f_new = fc
                break
            t *= 0.5
        if f_new is None:
            degraded = True
            reason = "line_search_failure"
            break
        x_new = x + t * d
        _, g_new = objective.value_grad(x_new)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            rho = 1.0 / sy
            Hy = H @ y
            H = (H - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                 + rho * (1.0 + rho * float(y @ Hy)) * np.outer(s, s))
        else:
            H = np.eye(n)
        x, f, g = x_new, f_new, g_new
        trace.append(float(x[-1]))
        if f < best_f:
            best_f, best_x = f, x.copy()
        if callback is not None and callback(it, float(x[-1]), f):
            reason = "callback"
            break
    if best_f <= f:
        x, f = best_x, best_f
        _, g = objective.value_grad(x)
    alpha, gamma = objective.unpack(x)
    return MinimizeResult(alpha=alpha, gamma=gamma, value=f,
                          grad_norm=float(np.linalg.norm(g)),
                          iterations=it, converged=converged,
                          degraded=degraded, stop_reason=reason,
                          gamma_trace=trace)


def initial_coefficients(objective, rng, gamma0):
    """Random start scaled so the synthesized image energy matches the
    second-moment DC estimate ``(a2[0] - sigma^2) L^2 / gamma``."""
    kernel = objective.kernel
    spec = kernel.spec
    alpha = _basis.random_coefficients(spec, rng)
    F = _basis.synthesize_image(kernel.tables, alpha, 0.0)
    energy = float(np.sum(F ** 2))
    target = (objective.targets.a2[0, 0] - objective.sigma ** 2)
    target = max(target, 1e-12) * spec.diameter ** 2 / max(gamma0, 1e-3)
    return alpha * np.sqrt(target / max(energy, 1e-12))


def multistart_minimize(objective, gamma0, n_starts=10, seed=0,
                        max_iters=400, gtol=1e-9, callback=None):
    """Independent random starts; keep the result with minimal objective."""
    results = []
    for k in range(n_starts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        alpha0 = initial_coefficients(objective, rng, gamma0)
        results.append(minimize(objective, alpha0, gamma0,
                                max_iters=max_iters, gtol=gtol,
                                callback=callback))
    best = min(results, key=lambda r: r.value)
    return best, results


def gamma_stabilized(rel_tol=1e-3, window=10):
    """Stop condition: density changed by < rel_tol over the last ``window``
    iterations."""
    history = []

    def cb(iteration, gamma, value):
        history.append(gamma)
        if len(history) <= window:
            return False
        ref = history[-window - 1]
        if ref == 0:
            return False
        return all(abs(h - ref) <= rel_tol * abs(ref)
                   for h in history[-window:])

    return cb


@dataclass
class RecoveryResult:
    """Outcome of a full recovery: coefficients, density, diagnostics."""

    alpha: np.ndarray
    gamma_box: float
    gamma_disk: float
    value: float
    iterations: int
    converged: bool
    degraded: bool
    failure: str | None
    gamma_trace_stages: list      # one gamma-trace list per stage, box units
    n_starts: int

    def to_json_dict(self, config=None):
        doc = {
            "alpha_real": np.real(self.alpha).tolist(),
            "alpha_imag": np.imag(self.alpha).tolist(),
            "gamma_box": self.gamma_box,
            "gamma_disk": self.gamma_disk,
            "objective_value": self.value,
            "iterations": self.iterations,
            "converged": self.converged,
            "degraded": self.degraded,
            "failure": self.failure,
            "gamma_trace_stages": self.gamma_trace_stages,
            "n_starts": self.n_starts,
        }
        if config is not None:
            doc["config"] = config
        return doc


def recover_known_separation(kernel, targets, sigma, sep=None, gamma_init=0.09,
                             n_starts=10, seed=0, max_iters=400, gtol=1e-9):
    """Single-stage recovery with fixed (known or absent) spacing statistics.

    ``sep=None`` treats the measurement as well separated. ``gamma_init`` is
    in disk units.
    """
    ops = None
    if sep is not None:
        ops = forward.build_separation_operators(sep, kernel.spec)
    obj = Objective(kernel=kernel, targets=targets, sigma=sigma, ops=ops)
    g0 = simulate.disk_to_box(gamma_init)
    best, results = multistart_minimize(obj, g0, n_starts=n_starts, seed=seed,
                                        max_iters=max_iters, gtol=gtol)
    return RecoveryResult(
        alpha=best.alpha, gamma_box=best.gamma,
        gamma_disk=simulate.box_to_disk(best.gamma), value=best.value,
        iterations=sum(r.iterations for r in results),
        converged=best.converged, degraded=best.degraded, failure=None,
        gamma_trace_stages=[best.gamma_trace], n_starts=n_starts)


def algorithm_two_stage(kernel, targets, sigma, gamma_init=0.09, seed=0,
                        n_starts=10, max_iters=400, gtol=1e-9,
                        known_sep=None, gamma_range=(0.0, 0.5),
                        stage1_rel_tol=1e-3, stage1_window=10):
    """Two-stage recovery with surrogate spacing statistics.

    Stage 1 fixes statistics synthesized at ``gamma_init`` (disk units) and
    minimizes until the density estimate stabilizes; stage 2 re-synthesizes
    the statistics at the estimated density and re-minimizes for the
    coefficients. Passing ``known_sep`` skips the synthesis and collapses
    the scheme to a single solve.
    """
    spec = kernel.spec
    N = targets.N
    if known_sep is not None:
        res = recover_known_separation(kernel, targets, sigma, known_sep,
                                       gamma_init, n_starts, seed,
                                       max_iters, gtol)
        return res
    sep1 = separation.approximate_separation(gamma_init, N, spec.radius,
                                             seed=seed)
    ops1 = forward.build_separation_operators(sep1, spec)
    obj1 = Objective(kernel=kernel, targets=targets, sigma=sigma, ops=ops1)
    g0 = simulate.disk_to_box(gamma_init)
    stage1_results = []
    for k in range(n_starts):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        alpha0 = initial_coefficients(obj1, rng, g0)
        stage1_results.append(minimize(
            obj1, alpha0, g0, max_iters=max_iters, gtol=gtol,
            callback=gamma_stabilized(stage1_rel_tol, stage1_window)))
    stage1 = min(stage1_results, key=lambda r: r.value)
    failure = None
    gamma_hat_box = stage1.gamma
    lo, hi = gamma_range
    if not (lo < gamma_hat_box <= hi) or not np.isfinite(gamma_hat_box):
        failure = (f"stage-1 density estimate {gamma_hat_box:.4f} outside "
                   f"({lo}, {hi}]")
        return RecoveryResult(
            alpha=stage1.alpha, gamma_box=gamma_hat_box,
            gamma_disk=simulate.box_to_disk(gamma_hat_box), value=stage1.value,
            iterations=sum(r.iterations for r in stage1_results),
            converged=False, degraded=stage1.degraded, failure=failure,
            gamma_trace_stages=[stage1.gamma_trace], n_starts=n_starts)
    sep2 = separation.approximate_separation(
        simulate.box_to_disk(gamma_hat_box), N, spec.radius,
        seed=seed + 7919)
    ops2 = forward.build_separation_operators(sep2, spec)
    obj2 = Objective(kernel=kernel, targets=targets, sigma=sigma, ops=ops2)
    stage2 = minimize(obj2, stage1.alpha, gamma_hat_box,
                      max_iters=max_iters, gtol=gtol)
    return RecoveryResult(
        alpha=stage2.alpha, gamma_box=stage2.gamma,
        gamma_disk=simulate.box_to_disk(stage2.gamma), value=stage2.value,
        iterations=(sum(r.iterations for r in stage1_results)
                    + stage2.iterations),
        converged=stage2.converged, degraded=stage2.degraded, failure=failure,
        gamma_trace_stages=[stage1.gamma_trace, stage2.gamma_trace],
        n_starts=n_starts)


# ---------------------------------------------------------------------------
# error metrics

def _rotation_mismatch(alpha_true, alpha_est, spec, phi):
    rot = _basis.steer(alpha_est, spec, phi)
    return np.linalg.norm(alpha_true - rot)


def relative_error_alpha(alpha_true, alpha_est, spec, grid=1024):
    """Rotation-gauge-invariant relative coefficient error.

    Minimizes over the in-plane rotation with a coarse grid followed by
    golden-section refinement of the best bracket.
    """
    alpha_true = np.asarray(alpha_true)
    denom = np.linalg.norm(alpha_true)
    if denom == 0:
        raise ValueError("reference coefficients are identically zero")
    phis = 2 * np.pi * np.arange(grid) / grid
    vals = np.array([_rotation_mismatch(alpha_true, alpha_est, spec, p)
                     for p in phis])
    k = int(np.argmin(vals))
    lo = phis[(k - 1) % grid] if k > 0 else phis[k] - 2 * np.pi / grid
    hi = phis[(k + 1) % grid] if k < grid - 1 else phis[k] + 2 * np.pi / grid
    if hi < lo:
        hi += 2 * np.pi
    invphi = (np.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _rotation_mismatch(alpha_true, alpha_est, spec, c)
    fd = _rotation_mismatch(alpha_true, alpha_est, spec, d)
    for _ in range(80):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _rotation_mismatch(alpha_true, alpha_est, spec, c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _rotation_mismatch(alpha_true, alpha_est, spec, d)
    best = min(fc, fd, vals[k])
    return float(best / denom)


def relative_error_gamma(gamma_true, gamma_est):
    return float(abs(gamma_true - gamma_est) / gamma_true)


# ---------------------------------------------------------------------------
# result output

def write_pgm(path, img):
    """8-bit binary PGM, intensity-normalized."""
    img = np.asarray(img, dtype=float)
    lo, hi = img.min(), img.max()
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.round((img - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def save_result(result, path, tables=None, config=None):
    """JSON result, plus a rendered PGM of the estimate next to it."""
    path = str(path)
    with open(path, "w") as fh:
        json.dump(result.to_json_dict(config), fh, indent=2)
    if tables is not None:
        img = _basis.synthesize_image(tables, result.alpha, 0.0)
        write_pgm(path.rsplit(".", 1)[0] + ".pgm", img)
