import itertools

import numpy as np
import pytest

from micromoments import autocorr, basis, forward, separation, simulate
from micromoments import imagemoments as im
from oracles import relerr

RNG = np.random.default_rng(41)


@pytest.fixture(scope="module")
def setup():
    spec = basis.basis_spec(2.0, coeff_count=6)
    tables = basis.build_basis(spec)
    kernel = im.build_moment_kernel(tables)
    alpha = basis.random_coefficients(spec, np.random.default_rng(8))
    return tables, kernel, alpha


def empty_separation(radius, count=1):
    lo, hi, w = separation.neighbor_window(radius)
    return separation.SeparationFunctions(
        xi=np.zeros((w, w)), zeta=np.zeros((w, w, w, w)), count=count,
        radius=radius, pair_mass_out=0.0, trip_mass_out=0.0)


def expected_ac_by_quadrature(tables, alpha, locations, N, n_angles):
    """Expectation of the empirical autocorrelations over i.i.d. rotations.

    Brute force: enumerate a full tensor grid of per-occurrence angles and
    average the directly-computed autocorrelations. Exact once ``n_angles``
    exceeds three times the angular bandlimit (the integrand is a
    trigonometric polynomial in each angle).
    """
    p = len(locations)
    L = tables.spec.diameter
    acc1, acc2, acc3 = 0.0, 0.0, 0.0
    for combo in itertools.product(range(n_angles), repeat=p):
        angles = 2 * np.pi * np.asarray(combo) / n_angles
        meas = simulate.render_measurement(tables, alpha, locations, angles, N)
        ms = autocorr.empirical_ac(meas, method="fft")
        acc1 += ms.a1
        acc2 += ms.a2
        acc3 += ms.a3
    k = n_angles ** p
    return acc1 / k, acc2 / k, acc3 / k


class TestMicroInstanceExact:
    """Three close occurrences, expectation vs model: validates every
    neighbor-region index window and the density convention exactly."""

    def test_three_occurrence_instance(self, setup):
        tables, kernel, alpha = setup
        N = 48
        locations = np.array([[20, 20], [20, 25], [25, 21]])
        d = np.max(np.abs(locations[:, None] - locations[None, :]), axis=2)
        np.fill_diagonal(d, 99)
        assert d.min() >= 4  # non-overlapping but well inside the window

        n_angles = 3 * tables.spec.nu_max + 1
        a1_e, a2_e, a3_e = expected_ac_by_quadrature(
            tables, alpha, locations, N, n_angles)

        sep = separation.separation_from_locations(locations, tables.spec.radius)
        ops = forward.build_separation_operators(sep, tables.spec)
        gamma = simulate.box_density(len(locations), N, tables.spec.radius)
        pred = forward.predict_ac(kernel, alpha, gamma, 0.0, ops)

        assert abs(pred.a1 - a1_e) < 1e-10
        assert np.max(np.abs(pred.a2 - a2_e)) < 1e-10
        assert np.max(np.abs(pred.a3 - a3_e)) < 1e-10

    def test_quadrature_is_converged(self, setup):
        # doubling the per-occurrence angle count changes nothing: the
        # expectation oracle itself is exact, not approximate
        tables, kernel, alpha = setup
        N = 40
        locations = np.array([[16, 16], [16, 21]])
        k = 3 * tables.spec.nu_max + 1
        coarse = expected_ac_by_quadrature(tables, alpha, locations, N, k)
        fine = expected_ac_by_quadrature(tables, alpha, locations, N, 2 * k)
        assert abs(coarse[0] - fine[0]) < 1e-13
        assert np.max(np.abs(coarse[2] - fine[2])) < 1e-13


class TestWellSeparatedReduction:
    def test_zero_histograms_reduce_exactly(self, setup):
        tables, kernel, alpha = setup
        sep = empty_separation(tables.spec.radius)
        ops = forward.build_separation_operators(sep, tables.spec)
        with_ops = forward.predict_ac(kernel, alpha, 0.21, 0.4, ops)
        without = forward.predict_ac(kernel, alpha, 0.21, 0.4, None)
        assert abs(with_ops.a1 - without.a1) < 1e-12
        assert np.max(np.abs(with_ops.a2 - without.a2)) < 1e-12
        assert np.max(np.abs(with_ops.a3 - without.a3)) < 1e-12

    def test_zero_gamma_zero_sigma(self, setup):
        _, kernel, alpha = setup
        pred = forward.predict_ac(kernel, alpha, 0.0, 0.0, None)
        assert pred.a1 == 0
        assert np.all(pred.a2 == 0) and np.all(pred.a3 == 0)

    def test_gamma_linearity(self, setup):
        tables, kernel, alpha = setup
        sep = separation.approximate_separation(0.08, 400, tables.spec.radius,
                                                seed=3)
        ops = forward.build_separation_operators(sep, tables.spec)
        p1 = forward.predict_ac(kernel, alpha, 0.1, 0.0, ops)
        p2 = forward.predict_ac(kernel, alpha, 0.2, 0.0, ops)
        assert abs(p2.a1 - 2 * p1.a1) < 1e-14
        assert np.max(np.abs(p2.a2 - 2 * p1.a2)) < 1e-13
        assert np.max(np.abs(p2.a3 - 2 * p1.a3)) < 1e-13

    def test_swap_symmetry(self, setup):
        tables, kernel, alpha = setup
        sep = separation.approximate_separation(0.08, 400, tables.spec.radius,
                                                seed=3)
        ops = forward.build_separation_operators(sep, tables.spec)
        pred = forward.predict_ac(kernel, alpha, 0.1, 0.3, ops)
        sym = pred.a3.transpose(2, 3, 0, 1)
        assert np.max(np.abs(pred.a3 - sym)) < 1e-12

    def test_window_mismatch_rejected(self, setup):
        tables, kernel, alpha = setup
        bad = empty_separation(3.0)
        with pytest.raises(ValueError, match="n="):
            forward.build_separation_operators(bad, tables.spec)


class TestPopulationValidation:
    """Noiseless arbitrary-spacing simulation vs model with exact xi, zeta."""

    def test_prediction_matches_empirical(self, setup):
        tables, kernel, alpha = setup
        N = 1024
        meas = simulate.simulate_measurement(tables, alpha, N=N, gamma=0.1,
                                             seed=17)
        ms = autocorr.empirical_ac(meas)
        sep = separation.separation_from_locations(meas.locations,
                                                   tables.spec.radius)
        ops = forward.build_separation_operators(sep, tables.spec)
        gamma = simulate.box_density(meas.count, N, tables.spec.radius)
        pred = forward.predict_ac(kernel, alpha, gamma, 0.0, ops)
        assert abs(pred.a1 - ms.a1) / abs(pred.a1) < 0.02
        # deviations normalized by the tensor scale: per-entry ratios are
        # meaningless at sampling-noise-sized entries
        assert np.max(np.abs(ms.a2 - pred.a2)) / np.max(np.abs(pred.a2)) < 0.05
        assert np.max(np.abs(ms.a3 - pred.a3)) / np.max(np.abs(pred.a3)) < 0.05

    def test_a2_deviation_shrinks_as_n_doubles(self, setup):
        # almost-sure convergence proxy for the second-order relation
        tables, kernel, alpha = setup
        meds = []
        for N in [256, 512, 1024]:
            devs = []
            for seed in range(5):
                meas = simulate.simulate_measurement(tables, alpha, N=N,
                                                     gamma=0.08, seed=seed)
                ms = autocorr.empirical_ac(meas)
                sep = separation.separation_from_locations(
                    meas.locations, tables.spec.radius)
                ops = forward.build_separation_operators(sep, tables.spec)
                gamma = simulate.box_density(meas.count, N, tables.spec.radius)
                pred = forward.predict_ac(kernel, alpha, gamma, 0.0, ops)
                mask = np.abs(pred.a2) > 1e-9
                devs.append(np.max(np.abs((ms.a2 - pred.a2)[mask]
                                          / pred.a2[mask])))
            meds.append(np.median(devs))
        assert meds[0] > meds[1] > meds[2]


class TestGradients:
    def test_gamma_partials(self, setup):
        tables, kernel, alpha = setup
        sep = separation.approximate_separation(0.08, 400, tables.spec.radius,
                                                seed=3)
        ops = forward.build_separation_operators(sep, tables.spec)
        g = forward.grad_predict(kernel, alpha, 0.13, 0.4, ops)
        t = forward.moment_tables(kernel, alpha)
        # first order: exactly the image mean
        assert g.da1_gamma == t.s1
        # finite differences in gamma (model is linear, so exact)
        h = 1e-5
        up = forward.predict_ac(kernel, alpha, 0.13 + h, 0.4, ops)
        dn = forward.predict_ac(kernel, alpha, 0.13 - h, 0.4, ops)
        assert np.max(np.abs((up.a3 - dn.a3) / (2 * h) - g.da3_gamma)) < 1e-9
        assert np.max(np.abs((up.a2 - dn.a2) / (2 * h) - g.da2_gamma)) < 1e-9

    def test_gamma_partial_wellsep_structure(self, setup):
        # with no cross terms, da3/dgamma = S3 + s1 sigma^2 spikes
        tables, kernel, alpha = setup
        sigma = 0.7
        g = forward.grad_predict(kernel, alpha, 0.1, sigma, None)
        t = forward.moment_tables(kernel, alpha)
        L = tables.spec.diameter
        want = (t.s3 + t.s1 * sigma ** 2 * forward._spike_pattern(L))
        assert np.max(np.abs(g.da3_gamma.ravel() - want)) < 1e-14

    def test_alpha_partials_match_finite_differences(self, setup):
        # differentiate along the reality-preserving real parameterization
        tables, kernel, alpha = setup
        spec = tables.spec
        sep = separation.approximate_separation(0.08, 400, spec.radius, seed=3)
        ops = forward.build_separation_operators(sep, spec)
        g = forward.grad_predict(kernel, alpha, 0.13, 0.4, ops)
        g2 = basis.realify_gradient(g.da2_alpha, spec)
        g3 = basis.realify_gradient(g.da3_alpha, spec)
        params = basis.alpha_to_params(alpha, spec)
        h = 1e-6
        for j in [0, 2, 4, 5]:
            up = params.copy()
            dn = params.copy()
            up[j] += h
            dn[j] -= h
            au = basis.params_to_alpha(up, spec)
            ad = basis.params_to_alpha(dn, spec)
            fd2 = (forward.predict_ac(kernel, au, 0.13, 0.4, ops).a2
                   - forward.predict_ac(kernel, ad, 0.13, 0.4, ops).a2) / (2 * h)
            assert relerr(g2[j], fd2) < 1e-5
            fd3 = (forward.predict_ac(kernel, au, 0.13, 0.4, ops).a3
                   - forward.predict_ac(kernel, ad, 0.13, 0.4, ops).a3) / (2 * h)
            assert relerr(g3[j], fd3) < 1e-5
