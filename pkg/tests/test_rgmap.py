import cmath
import math

import numpy as np
import pytest

from sgrg import terms as tm
from sgrg.activities import (
    ActivityFlags,
    CloudActivity,
    NormParams,
    TruncatedActivity,
    activity_norm,
    charge_component,
    polymer_exp,
    v_activity,
    whole_torus,
)
from sgrg.covariance import CovarianceKernel
from sgrg.fields import random_band_limited, scale_field
from sgrg.lattice import Polymer, TorusSpec, polymer
from sgrg.rgmap import (
    AnisotropyError,
    RGStepParams,
    build_extraction_activity,
    charge_factors,
    cauchy_higher_order,
    extract_cloud,
    extract_functional,
    extract_linear,
    extraction_coefficients,
    fluctuate,
    fluctuate_linear,
    four_term_split,
    linearized_step,
    neutral_moments,
    rg_step,
    scale_activity,
    scale_linear,
)
from sgrg.terms import CloudTerm, CovAccess, evaluate_terms


def rfield(torus, rng, n_g=8, amp=0.7, k_max=2):
    return random_band_limited(torus, n_g, rng, amplitude=amp, k_max=k_max)


def cloud_K(torus, spec):
    """spec: {blocks: [terms]} convenience builder."""
    return CloudActivity(
        torus,
        {frozenset(b): ts for b, ts in spec.items()},
        ActivityFlags(periodic=True),
    )


def exact_convolved_exp(K, cov, region, fld, torus):
    """mu_C * Exp(box + K)(region, phi) by expanding every collection."""
    from itertools import combinations

    from sgrg.lattice import region_disjoint

    support = [p for p in K.support() if K.terms(p)]
    total = 1.0  # empty collection convolves to 1
    for r in range(1, len(support) + 1):
        for combo in combinations(support, r):
            if not all(
                region_disjoint(a, b, torus) for a, b in combinations(combo, 2)
            ):
                continue
            terms = [CloudTerm(1.0)]
            for p in combo:
                terms = tm.multiply(terms, K.terms(p))
            conv = tm.convolve_terms(terms, cov)
            total += evaluate_terms(conv, fld)
    return total


class TestFluctuationIdentity:
    def setup_method(self):
        self.torus = TorusSpec(2, 2)
        self.kernel = CovarianceKernel("slice", sigma=0.0, torus=self.torus)

    def _check_identity(self, K, beta=2.0, n_fields=4, seed=0, tol=1e-8):
        cov = CovAccess(self.kernel, scale=beta)
        FK = fluctuate(K, cov, n_max=4)
        rng = np.random.default_rng(seed)
        lam = whole_torus(self.torus)
        worst = 0.0
        for _ in range(n_fields):
            fld = rfield(self.torus, rng)
            lhs = exact_convolved_exp(K, cov, lam, fld, self.torus)
            rhs = polymer_exp(FK, lam, fld)
            worst = max(worst, abs(lhs - rhs))
        assert worst < tol, f"fluctuation identity residual {worst}"

    def test_zero(self):
        cov = CovAccess(self.kernel, scale=2.0)
        FK = fluctuate(cloud_K(self.torus, {}), cov)
        assert not FK.data

    def test_two_polymer_charges(self):
        K = cloud_K(
            self.torus,
            {
                ((0, 0),): [CloudTerm(0.4, ((1, (0.0, 0.0)),)), CloudTerm(0.4, ((-1, (0.0, 0.0)),))],
                ((2, 2),): [CloudTerm(0.3, ((1, (2.0, 2.25)),)), CloudTerm(0.3, ((-1, (2.0, 2.25)),))],
            },
        )
        self._check_identity(K)

    def test_three_polymers(self):
        K = cloud_K(
            self.torus,
            {
                ((0, 0),): [CloudTerm(0.5, ((1, (0.0, 0.0)),))],
                ((0, 2),): [CloudTerm(0.4, ((-1, (0.0, 2.0)),))],
                ((2, 0),): [CloudTerm(0.3, ((2, (2.0, 0.0)),))],
            },
        )
        self._check_identity(K, tol=1e-8)

    def test_with_gradient_factors(self):
        K = cloud_K(
            self.torus,
            {
                ((0, 0),): [
                    CloudTerm(0.5, ((1, (0.0, 0.0)),), (((1, 0), (0.0, 0.25)),))
                ],
                ((2, 2),): [
                    CloudTerm(0.4, ((-1, (2.0, 2.0)),), (((0, 1), (2.25, 2.0)),)),
                    CloudTerm(0.2),
                ],
            },
        )
        self._check_identity(K, tol=1e-8)

    def test_single_polymer_is_plain_convolution(self):
        cov = CovAccess(self.kernel, scale=2.0)
        terms = [CloudTerm(0.7, ((1, (1.0, 1.0)), (-1, (1.25, 1.0))))]
        K = cloud_K(self.torus, {((1, 1),): terms})
        FK = fluctuate(K, cov)
        expect = tm.convolve_terms(terms, cov)
        got = FK.terms(polymer([(1, 1)]))
        assert len(got) == len(expect)
        for a, b in zip(got, expect):
            assert a.key() == b.key()
            assert a.coeff == pytest.approx(b.coeff, rel=1e-12)


class TestLinearizedMaps:
    def test_fluctuate_linear_potential(self):
        # F_1 V = e^{-beta C(0)/2} V exactly, cloud coefficients compared
        t = TorusSpec(2, 2)
        kern = CovarianceKernel("slice", sigma=0.0, torus=t)
        beta = 4.0 * math.pi
        cov = CovAccess(kern, scale=beta)
        V = v_activity(t, n_q=2, trans_invariant=True)
        FV = fluctuate_linear(V, cov)
        factor = math.exp(-beta * kern.at_zero() / 2.0)
        key = tuple([(0, 0)])
        for a, b in zip(FV.shapes[key], V.shapes[key]):
            assert a.key() == b.key()
            assert a.coeff == pytest.approx(b.coeff * factor, rel=1e-12)

    def test_scale_linear_potential_multiplier(self):
        # S_1 (zeta V) = L^2 zeta V in the collapsed representation
        t = TorusSpec(2, 2)
        V = v_activity(t, n_q=1, trans_invariant=True)
        SV = scale_linear(V)
        key = tuple([(0, 0)])
        assert SV.torus.side == 2
        got = {x.key(): x.coeff for x in SV.shapes[key]}
        for x in V.shapes[key]:
            assert got[x.key()] == pytest.approx(4.0 * x.coeff, rel=1e-12)

    def test_composed_multiplier_exact(self):
        # S_1 F_1 (zeta V) coefficient ratio = L^2 e^{-beta C(0)/2} to 1e-10
        t = TorusSpec(2, 2)
        kern = CovarianceKernel("slice", sigma=0.0, torus=t)
        for beta in (4.0 * math.pi, 6.0 * math.pi):
            cov = CovAccess(kern, scale=beta)
            V = v_activity(t, n_q=1, trans_invariant=True)
            out = scale_linear(fluctuate_linear(V, cov))
            key = tuple([(0, 0)])
            got = {x.key(): x.coeff for x in out.shapes[key]}
            mult = 4.0 * math.exp(-beta * kern.at_zero() / 2.0)
            for x in V.shapes[key]:
                assert got[x.key()] == pytest.approx(mult * x.coeff, rel=1e-10)


class TestScalingIdentity:
    @pytest.mark.parametrize("M", [1, 2])
    def test_identity_pointwise(self, M):
        t = TorusSpec(2, M)
        spec = {
            ((0, 0),): [CloudTerm(0.4, ((1, (0.0, 0.25)),)), CloudTerm(0.1)],
            ((1, 1),): [CloudTerm(0.3, ((-1, (1.0, 1.0)),))],
        }
        if M == 2:
            spec[((2, 3),)] = [CloudTerm(0.25, ((1, (2.0, 3.0)), (-1, (2.25, 3.0))))]
        K = cloud_K(t, spec)
        SK = scale_activity(K, n_cluster_max=3)
        coarse = t.coarse()
        rng = np.random.default_rng(31)
        worst = 0.0
        for _ in range(6):
            phi = rfield(coarse, rng)
            phi_L = scale_field(phi, t.L)
            lhs = polymer_exp(K, whole_torus(t), phi_L)
            rhs = polymer_exp(SK, whole_torus(coarse), phi)
            worst = max(worst, abs(lhs - rhs))
        assert worst < 1e-9, f"scaling identity residual {worst}"

    def test_zero(self):
        t = TorusSpec(2, 1)
        SK = scale_activity(cloud_K(t, {}))
        assert not SK.data


class TestExtraction:
    def test_extract_zero_F_is_identity(self):
        t = TorusSpec(3, 1)
        K = cloud_K(t, {((0, 0),): [CloudTerm(0.5, ((1, (0.0, 0.0)),))]})
        F = cloud_K(t, {})
        E = extract_cloud(K, F)
        assert E.data.keys() == K.data.keys()

    def test_extract_linear(self):
        t = TorusSpec(3, 1)
        K = cloud_K(t, {((0, 0),): [CloudTerm(0.5)]})
        F = cloud_K(t, {((0, 0),): [CloudTerm(0.2)], ((1, 1),): [CloudTerm(0.1)]})
        E1 = extract_linear(K, F)
        vals = {k: evaluate_terms(ts, None) if False else ts for k, ts in E1.data.items()}
        assert E1.data[frozenset({(0, 0)})][0].coeff == pytest.approx(0.3)
        assert E1.data[frozenset({(1, 1)})][0].coeff == pytest.approx(-0.1)

    @pytest.mark.parametrize("side_spec", [(3, 1), (5, 1)])
    def test_extraction_identity_pointwise(self, side_spec):
        L, M = side_spec
        t = TorusSpec(L, M)
        rng = np.random.default_rng(7)
        K = cloud_K(
            t,
            {
                ((0, 0),): [CloudTerm(0.45, ((1, (0.0, 0.0)),)), CloudTerm(0.1)],
                ((2, 2), (2, 1)): [CloudTerm(0.3, ((-1, (2.0, 2.0)),))],
            },
        )
        F = cloud_K(
            t,
            {
                ((0, 0), (0, 1)): [CloudTerm(0.25), CloudTerm(0.15, (), (((1, 0), (0.0, 1.0)), ((1, 0), (0.0, 1.0))))],
                ((2, 2),): [CloudTerm(0.2, (), (((0, 1), (2.0, 2.0)), ((0, 1), (2.0, 2.0))))],
            },
        )
        E = extract_functional(K, F, t)
        lam = whole_torus(t)
        worst = 0.0
        for _ in range(6):
            fld = rfield(t, rng)
            lhs = polymer_exp(K, lam, fld)
            f_sum = sum(F.value(y, fld) for y in F.support())
            rhs = cmath.exp(f_sum) * polymer_exp(E, lam, fld, torus=t)
            worst = max(worst, abs(lhs - rhs))
        assert worst < 1e-9, f"extraction identity residual {worst}"


class TestExtractionCoefficients:
    def test_gradient_square_gives_dsigma(self):
        # K(D) = eps int_D (d phi)^2 on single blocks -> dsigma = -2 beta eps
        t = TorusSpec(2, 3)
        eps = 0.01
        beta = 5.0
        key = tuple([(0, 0)])
        terms = [
            CloudTerm(eps, (), (((1, 0), (0.0, 0.0)), ((1, 0), (0.0, 0.0)))),
            CloudTerm(eps, (), (((0, 1), (0.0, 0.0)), ((0, 1), (0.0, 0.0)))),
        ]
        K = TruncatedActivity(t, {key: terms})
        coeffs = extraction_coefficients(K, "ir", beta)
        assert coeffs.dsigma == pytest.approx(-2.0 * beta * eps, rel=1e-12)
        assert coeffs.dE == pytest.approx(0.0, abs=1e-15)

    def test_constant_gives_dE(self):
        t = TorusSpec(2, 3)
        key = tuple([(0, 0)])
        K = TruncatedActivity(t, {key: [CloudTerm(0.3)]})
        coeffs = extraction_coefficients(K, "uv", beta=1.0)
        assert coeffs.dE == pytest.approx(0.3)
        assert coeffs.dsigma == 0.0

    def test_charged_activity_extracts_nothing(self):
        t = TorusSpec(2, 3)
        V = v_activity(t, n_q=1, trans_invariant=True)
        coeffs = extraction_coefficients(V, "ir", beta=1.0)
        assert coeffs.dE == pytest.approx(0.0, abs=1e-15)
        assert coeffs.dsigma == pytest.approx(0.0, abs=1e-15)

    def test_conditions_vanish_after_extraction(self):
        # moments of Kbar - F vanish on every small shape (the dim >= 4 check)
        t = TorusSpec(2, 3)
        rng = np.random.default_rng(3)
        shapes = {}
        from sgrg.lattice import enumerate_shapes

        for p in enumerate_shapes(2, 2):
            ts = []
            for b in p.sorted_blocks():
                ts.append(CloudTerm(rng.normal() * 0.1))
                ts.append(
                    CloudTerm(
                        rng.normal() * 0.05,
                        (),
                        (((1, 0), (float(b[0]), float(b[1]))), ((0, 1), (float(b[0]), float(b[1])))),
                    )
                )
                ts.append(
                    CloudTerm(
                        rng.normal() * 0.05,
                        ((1, (float(b[0]), float(b[1]))), (-1, (float(b[0]) + 0.25, float(b[1])))),
                    )
                )
            shapes[p.shape_key()] = ts
        K = TruncatedActivity(t, shapes)
        coeffs = extraction_coefficients(K, "ir", beta=3.0, enforce=False)
        F = build_extraction_activity(coeffs, K, n_q=2)
        resid = extract_linear(charge_component(K, 0), F)
        from sgrg.rgmap import _centroid

        for key, ts in resid.shapes.items():
            blocks = list(key)
            M0, M2, M3 = neutral_moments(ts, _centroid(blocks))
            assert abs(M0) < 1e-10
            assert np.max(np.abs(M2)) < 1e-10
            assert np.max(np.abs(M3)) < 1e-10

    def test_anisotropy_detected(self):
        t = TorusSpec(2, 3)
        key = tuple([(0, 0)])
        terms = [CloudTerm(0.01, (), (((1, 0), (0.0, 0.0)), ((1, 0), (0.0, 0.0))))]
        K = TruncatedActivity(t, {key: terms})
        with pytest.raises(AnisotropyError):
            extraction_coefficients(K, "ir", beta=1.0, enforce=True)


class TestNeutralScalingDimension:
    def test_dim_scaling_across_L(self):
        # neutral quadratics scale like L^{2 - dim}: dim 2 -> flat, dim 4 -> L^-2
        ratios = {}
        for L in (2, 4):
            t = TorusSpec(L, 2)
            key = tuple([(0, 0)])
            for dim, alpha in ((2, (1, 0)), (4, (2, 0))):
                terms = [CloudTerm(1.0, (), ((alpha, (0.0, 0.0)), (alpha, (0.0, 0.0))))]
                K = TruncatedActivity(t, {key: terms})
                SK = scale_linear(K)
                num = activity_norm(SK, NormParams.default(t.coarse(), h=1.0)).log_value
                den = activity_norm(K, NormParams.default(t, h=1.0)).log_value
                ratios[(L, dim)] = math.exp(num - den)
        for L in (2, 4):
            assert ratios[(L, 2)] == pytest.approx(1.0, rel=1e-9)
            assert ratios[(L, 4)] == pytest.approx(L**-2.0, rel=1e-9)


class TestChargeFactors:
    def test_m1(self):
        c0 = 0.3
        out = charge_factors(1, c0, n_c=0.1, h=1.0, eta=0.5, L=2)
        assert out["m_q"] == pytest.approx(math.exp(-0.5 * c0))

    def test_sum_over_q(self):
        c0 = 1.2
        total = sum(
            charge_factors(q, c0, 0.1, 1.0, 0.0, 2)["m_q"] for q in range(-6, 7) if q
        )
        assert total <= 4.0 * math.exp(-c0 / 2.0)

    def test_combined_scaling_in_beta(self):
        # with C(0) = log L / 2 pi and the beta-scaled kernel the combined
        # multiplier is proportional to L^{2 - beta/4 pi}
        L = 8
        beta = 12 * math.pi
        c0 = beta * math.log(L) / (2.0 * math.pi)
        out = charge_factors(1, c0, n_c=0.0, h=1.0, eta=0.0, L=L)
        assert out["combined"] == pytest.approx(L ** (2.0 - beta / (4.0 * math.pi)), rel=1e-12)


class TestRGStep:
    def test_zero_activity(self):
        t = TorusSpec(2, 2)
        params = RGStepParams(beta=4 * math.pi, torus=t, check_hypotheses=False)
        K = TruncatedActivity(t, {})
        k_new, coeffs, diag = rg_step(K, params)
        assert not k_new.shapes
        assert coeffs.dE == 0.0 and coeffs.dsigma == 0.0

    def test_large_set_contraction_measured(self):
        t = TorusSpec(2, 3)
        cross = polymer([(1, 1), (0, 1), (2, 1), (1, 0), (1, 2)])
        key = cross.shape_key()
        terms = [CloudTerm(1e-3, ((1, (1.0, 1.0)), (-1, (0.0, 1.0))))]
        K = TruncatedActivity(t, {key: terms})
        kern = CovarianceKernel("slice", sigma=0.0, torus=t)
        cov = CovAccess(kern, scale=4 * math.pi)
        out = scale_linear(fluctuate_linear(K, cov))
        params = NormParams.default(t, h=1.0)
        num = activity_norm(out, params).log_value
        den = activity_norm(K, params).log_value
        ratio = math.exp(num - den)
        print(f"large-set one-step multiplier at L=2: {ratio:.4f} (L^-2 = 0.25)")
        assert ratio < 1.0

    def test_uv_step_preserves_evenness_and_charge_track(self):
        t = TorusSpec(2, 3)
        from sgrg.activities import mayer_init_truncated

        zeta = 1e-2
        K = mayer_init_truncated(zeta, t, order=3, max_size=2)
        params = RGStepParams(
            beta=4 * math.pi, torus=t, preset="uv",
            norm=NormParams.default(t, h=1.0), check_hypotheses=False,
        )
        k_new, coeffs, diag = rg_step(K, params)
        assert k_new.torus.side == 4
        # evenness: q -> -q symmetric coefficients
        for key, ts in k_new.shapes.items():
            by_key = {x.key(): x.coeff for x in ts}
            for x in ts:
                fl = x.flipped()
                assert fl.key() in by_key
                assert by_key[fl.key()] == pytest.approx(x.coeff.conjugate(), abs=1e-12)
        assert abs(coeffs.dE) < 1.0

    def test_cauchy_split_cross_check(self):
        t = TorusSpec(2, 2)
        from sgrg.activities import mayer_init_truncated

        K = mayer_init_truncated(5e-3, t, order=3, max_size=1)
        params = RGStepParams(
            beta=4 * math.pi, torus=t, preset="uv",
            norm=NormParams.default(t, h=1.0),
            check_hypotheses=False, cauchy_radius=32.0, cauchy_nodes=6,
        )
        out = cauchy_higher_order(K, params)
        # contour and direct higher-order parts agree well below their size
        assert out["residual_log_norm"] < out["direct_log_norm"] - math.log(1e3)


class TestChargedSectorBound:
    def test_single_cloud_never_exceeds_composite_bound(self):
        # || S_1 F_1 k_q || against the composite charged multiplier
        # c L^2 e^{2 N_C |q|} m_q with the beta-scaled kernel
        t = TorusSpec(2, 3)
        kern = CovarianceKernel("slice", sigma=0.0, torus=t)
        beta = 12 * math.pi
        cov = CovAccess(kern, scale=beta)
        c0 = beta * kern.at_zero()
        from sgrg.covariance import translation_loss

        n_c = beta * translation_loss(kern, r=2)
        params = NormParams.default(t, h=1.0)
        for q in (1, 2, 3):
            key = tuple([(0, 0)])
            kq = TruncatedActivity(t, {key: [CloudTerm(1e-3, ((q, (0.0, 0.0)),))]})
            out = scale_linear(fluctuate_linear(kq, cov))
            num = activity_norm(out, NormParams.default(t.coarse(), h=1.0)).log_value
            den = activity_norm(kq, params).log_value
            measured = math.exp(num - den)
            bound = charge_factors(q, c0, n_c, h=1.0, eta=0.0, L=t.L)["combined"]
            assert measured <= bound * (1 + 1e-9), (q, measured, bound)
