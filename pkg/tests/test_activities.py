import cmath
import itertools
import math

import numpy as np
import pytest

from sgrg.activities import (
    ActivityFlags,
    CloudActivity,
    FunctionalActivity,
    NormParams,
    TruncatedActivity,
    activity_norm,
    all_connected_subsets,
    block_quadrature_nodes,
    charge_component,
    mayer_init_cloud,
    mayer_init_functional,
    mayer_init_truncated,
    polymer_exp,
    potential_v,
    v_activity,
    v_cloud_terms,
    verify_evenness,
    verify_locality,
    verify_resummation,
    verify_shift_law,
    vbd_norms,
    whole_torus,
)
from sgrg.lattice import Polymer, TorusSpec, polymer, region_disjoint
from sgrg.fields import FieldGrid, random_band_limited
from sgrg.terms import CloudTerm, evaluate_terms


def rfield(torus, rng, n_g=8, amp=0.8):
    return random_band_limited(torus, n_g, rng, amplitude=amp, k_max=2)


class TestPolymerExp:
    def test_zero_activity(self):
        t = TorusSpec(2, 2)
        K = CloudActivity(t, {})
        rng = np.random.default_rng(0)
        assert polymer_exp(K, whole_torus(t), rfield(t, rng)) == pytest.approx(1.0)

    def test_single_block_region(self):
        t = TorusSpec(2, 2)
        b = (1, 1)
        K = CloudActivity(t, {frozenset({b}): [CloudTerm(0.25)]})
        val = polymer_exp(K, polymer([b]), rfield(t, np.random.default_rng(1)))
        assert val == pytest.approx(1.25)

    def test_spread_blocks_binomial(self):
        # constant c on pairwise non-touching blocks: Exp = (1+c)^n
        t = TorusSpec(2, 2)
        blocks = [(0, 0), (0, 2), (2, 0), (2, 2)]
        K = CloudActivity(t, {frozenset({b}): [CloudTerm(0.3)] for b in blocks})
        val = polymer_exp(K, whole_torus(t), rfield(t, np.random.default_rng(2)))
        assert val == pytest.approx(1.3**4, rel=1e-12)

    def test_adjacent_blocks_exclude_joint_collection(self):
        # two touching single-block polymers can never appear together
        t = TorusSpec(2, 2)
        K = CloudActivity(
            t, {frozenset({(0, 0)}): [CloudTerm(0.5)], frozenset({(0, 1)}): [CloudTerm(0.5)]}
        )
        val = polymer_exp(K, whole_torus(t), rfield(t, np.random.default_rng(3)))
        assert val == pytest.approx(1.0 + 0.5 + 0.5, rel=1e-12)

    def test_against_brute_force_collections(self):
        t = TorusSpec(2, 2)
        rng = np.random.default_rng(7)
        support = [
            polymer([(0, 0)]),
            polymer([(0, 1), (1, 1)]),
            polymer([(2, 2)]),
            polymer([(3, 0), (3, 1)]),
            polymer([(2, 0)]),
            polymer([(1, 3)]),
        ]
        vals = {p.blocks: complex(rng.normal(), rng.normal()) for p in support}
        K = CloudActivity(t, {k: [CloudTerm(v)] for k, v in vals.items()})
        fld = rfield(t, rng)
        got = polymer_exp(K, whole_torus(t), fld)
        expect = 0.0
        for r in range(len(support) + 1):
            for combo in itertools.combinations(support, r):
                if all(
                    region_disjoint(a, b, t) for a, b in itertools.combinations(combo, 2)
                ):
                    prod = 1.0
                    for p in combo:
                        prod *= vals[p.blocks]
                    expect += prod
        assert got == pytest.approx(expect, rel=1e-12)

    def test_factorization_over_separated_regions(self):
        t = TorusSpec(2, 3)
        K = CloudActivity(
            t,
            {
                frozenset({(0, 0)}): [CloudTerm(0.4)],
                frozenset({(4, 4)}): [CloudTerm(0.7)],
            },
        )
        fld = rfield(t, np.random.default_rng(4))
        X = polymer([(0, 0), (0, 1), (1, 0), (1, 1)])
        Y = polymer([(4, 4), (4, 5), (5, 4), (5, 5)])
        XY = Polymer(X.blocks | Y.blocks)
        vx = polymer_exp(K, X, fld)
        vy = polymer_exp(K, Y, fld)
        vxy = polymer_exp(K, XY, fld)
        assert vxy == pytest.approx(vx * vy, rel=1e-12)


class TestMayer:
    @pytest.mark.parametrize("M", [1])
    def test_identity_small_torus(self, M):
        t = TorusSpec(2, M)
        zeta = 0.3 + 0.1j
        K0 = mayer_init_functional(zeta, t, n_q=2)
        rng = np.random.default_rng(11)
        lam = whole_torus(t)
        for _ in range(20):
            fld = rfield(t, rng)
            lhs = cmath.exp(zeta * sum(potential_v(b, fld, 2) for b in lam.sorted_blocks()))
            rhs = polymer_exp(K0, lam, fld)
            assert abs(lhs - rhs) / abs(lhs) < 1e-10

    def test_identity_3x3(self):
        t = TorusSpec(3, 1)
        zeta = 0.2
        K0 = mayer_init_functional(zeta, t, n_q=2, side_cap=4)
        rng = np.random.default_rng(13)
        lam = whole_torus(t)
        for _ in range(10):
            fld = rfield(t, rng)
            lhs = cmath.exp(zeta * sum(potential_v(b, fld, 2) for b in lam.sorted_blocks()))
            rhs = polymer_exp(K0, lam, fld)
            assert abs(lhs - rhs) / abs(lhs) < 1e-10

    def test_zero_coupling(self):
        t = TorusSpec(2, 1)
        K0 = mayer_init_functional(0.0, t)
        fld = rfield(t, np.random.default_rng(5))
        for p in K0.support():
            assert K0.value(p, fld) == pytest.approx(0.0)

    def test_two_block_product_structure(self):
        t = TorusSpec(2, 1)
        zeta = 0.25
        K0 = mayer_init_functional(zeta, t)
        fld = rfield(t, np.random.default_rng(6))
        p = polymer([(0, 0), (0, 1)])
        f0 = cmath.exp(zeta * potential_v((0, 0), fld, 2)) - 1.0
        f1 = cmath.exp(zeta * potential_v((0, 1), fld, 2)) - 1.0
        assert K0.value(p, fld) == pytest.approx(f0 * f1, rel=1e-12)

    def test_cloud_matches_functional_order(self):
        t = TorusSpec(2, 1)
        zeta = 1e-3
        Kc = mayer_init_cloud(zeta, t, n_q=2, order=5, max_size=2, side_cap=4)
        Kf = mayer_init_functional(zeta, t, n_q=2)
        rng = np.random.default_rng(8)
        fld = rfield(t, rng)
        for p in Kc.support():
            a = Kc.value(p, fld)
            b = Kf.value(p, fld)
            assert abs(a - b) < 1e-18 + abs(b) * 1e-10


class TestPotential:
    def test_value_at_zero_field(self):
        t = TorusSpec(2, 1)
        fld = FieldGrid(t, 8, np.zeros((16, 16)))
        assert potential_v((0, 0), fld, 2) == pytest.approx(1.0)

    def test_cloud_terms_match_quadrature(self):
        t = TorusSpec(2, 1)
        rng = np.random.default_rng(9)
        fld = rfield(t, rng)
        for n_q in (1, 2):
            ts = v_cloud_terms((1, 0), n_q)
            val = evaluate_terms(ts, fld)
            assert val.imag == pytest.approx(0.0, abs=1e-12)
            assert val.real == pytest.approx(potential_v((1, 0), fld, n_q), rel=1e-12)

    def test_vbd_norm_bounds(self):
        rep = vbd_norms(1e-10, h=2.0, eps=0.1)
        assert rep["v_norm_series"] <= rep["v_norm_bound"] + 1e-9
        # below each measured threshold the corresponding bound holds
        z1 = rep["threshold_first_order"] * 0.5
        assert vbd_norms(z1, h=2.0, eps=0.1)["exp_minus_one"] <= z1**0.9
        z2 = rep["threshold_second_order"] * 0.5
        assert vbd_norms(z2, h=2.0, eps=0.1)["exp_minus_linear"] <= z2**1.9


class TestChargeDecomposition:
    def test_single_charge_projection(self):
        t = TorusSpec(2, 2)
        K = CloudActivity(
            t, {frozenset({(0, 0)}): [CloudTerm(1.0, ((1, (0.0, 0.0)),))]},
            ActivityFlags(periodic=True),
        )
        k1 = charge_component(K, 1)
        k0 = charge_component(K, 0)
        assert k1.data == K.data
        assert not k0.data

    def test_neutral_part_of_potential_vanishes(self):
        t = TorusSpec(2, 1)
        V = v_activity(t, n_q=2, trans_invariant=False)
        k0 = charge_component(V, 0)
        assert not k0.data

    def test_shift_law_cloud(self):
        t = TorusSpec(2, 1)
        V = v_activity(t, n_q=2, trans_invariant=False)
        rng = np.random.default_rng(3)
        fld = rfield(t, rng)
        for q in (-1, 1):
            res = verify_shift_law(V, q, polymer([(0, 0)]), fld, c=0.77)
            assert res < 1e-12

    def test_functional_quadrature_matches_cloud_filter(self):
        t = TorusSpec(2, 1)
        terms = [
            CloudTerm(0.3, ((1, (0.0, 0.0)),)),
            CloudTerm(0.2, ((2, (0.25, 0.25)), (-1, (0.0, 0.25)))),
            CloudTerm(0.1),
        ]
        K = CloudActivity(t, {frozenset({(0, 0)}): terms}, ActivityFlags(periodic=True))
        Kf = FunctionalActivity(
            t, lambda p, fld: K.value(p, fld), K.support(), ActivityFlags(periodic=True)
        )
        rng = np.random.default_rng(10)
        fld = rfield(t, rng)
        p = polymer([(0, 0)])
        for q in (-1, 0, 1, 2):
            a = charge_component(K, q).value(p, fld)
            b = charge_component(Kf, q, n_phi=4).value(p, fld)
            assert abs(a - b) < 1e-10

    def test_resummation(self):
        t = TorusSpec(2, 1)
        V = v_activity(t, n_q=2, trans_invariant=False)
        rng = np.random.default_rng(12)
        fld = rfield(t, rng)
        res = verify_resummation(V, polymer([(1, 1)]), fld, range(-3, 4))
        assert res < 1e-10

    def test_requires_periodic_flag(self):
        t = TorusSpec(2, 1)
        Kf = FunctionalActivity(t, lambda p, fld: 1.0, [polymer([(0, 0)])])
        with pytest.raises(ValueError):
            charge_component(Kf, 1)


class TestNorms:
    def test_zero_activity(self):
        t = TorusSpec(2, 2)
        res = activity_norm(CloudActivity(t, {}), NormParams.default(t))
        assert res.log_value == -math.inf

    def test_potential_norm_value(self):
        # single-block V with n_q = 1: sum Gamma * |zeta| e^h = 32 |zeta| e^h
        t = TorusSpec(2, 2)
        zeta = 1e-3
        V = v_activity(t, n_q=1, trans_invariant=True)
        K = V.map_shapes(lambda k, ts: [x.scaled(zeta) for x in ts])
        params = NormParams.default(t, h=1.5)
        res = activity_norm(K, params)
        assert res.value == pytest.approx(32.0 * zeta * math.exp(1.5), rel=1e-12)

    def test_charge_sector_norm_dominated(self):
        t = TorusSpec(2, 2)
        rng = np.random.default_rng(4)
        params = NormParams.default(t, h=0.8)
        for _ in range(30):
            terms = []
            for _ in range(rng.integers(1, 6)):
                charges = tuple(
                    (int(rng.integers(-2, 3)), (rng.uniform(0, 1), rng.uniform(0, 1)))
                    for _ in range(rng.integers(1, 3))
                )
                terms.append(CloudTerm(complex(rng.normal(), rng.normal()), charges))
            K = CloudActivity(t, {frozenset({(0, 0)}): terms})
            total = activity_norm(K, params).log_value
            for q in range(-4, 5):
                part = activity_norm(charge_component(K, q), params).log_value
                assert part <= total + 1e-12

    def test_functional_estimate_reported(self):
        t = TorusSpec(2, 1)
        V = v_activity(t, n_q=2, trans_invariant=False)
        Kf = FunctionalActivity(
            t, lambda p, fld: V.value(p, fld), V.support()[:1], ActivityFlags(periodic=True)
        )
        params = NormParams.default(t, h=1.0)
        res = activity_norm(Kf, params, n_samples=10)
        assert res.kind == "sampled-lower-bound"
        assert np.isfinite(res.log_value)


class TestStructureChecks:
    def test_evenness_of_potential(self):
        t = TorusSpec(2, 1)
        V = v_activity(t, n_q=2, trans_invariant=False)
        rng = np.random.default_rng(14)
        fld = rfield(t, rng)
        assert verify_evenness(V, polymer([(0, 1)]), fld) < 1e-12

    def test_locality_masked(self):
        t = TorusSpec(2, 2)
        V = v_activity(t, n_q=2, trans_invariant=False)
        rng = np.random.default_rng(15)
        fld = rfield(t, rng)
        res = verify_locality(V, polymer([(2, 2)]), fld, rng)
        assert res < 1e-12

    def test_truncated_mayer_charge_content(self):
        t = TorusSpec(2, 3)
        K = mayer_init_truncated(1e-2, t, order=3, max_size=2)
        key = (((0, 0)),)
        key = tuple([(0, 0)])
        ts = K.shapes[key]
        qs = {t_.total_charge for t_ in ts}
        assert {1, -1} <= qs
        # charge amplitudes at first order: zeta/2 each sign
        amp = [t_ for t_ in ts if t_.total_charge == 1 and len(t_.charges) == 1]
        assert sum(x.coeff for x in amp) == pytest.approx(0.5e-2, rel=1e-3)


class TestSerialization:
    def test_cloud_roundtrip(self):
        from sgrg.activities import activity_from_json, activity_to_json

        t = TorusSpec(2, 2)
        K = CloudActivity(
            t,
            {frozenset({(0, 0)}): [CloudTerm(0.5 + 0.1j, ((1, (0.0, 0.25)),),
                                             (((1, 0), (0.25, 0.0)),))]},
            ActivityFlags(periodic=True),
        )
        back = activity_from_json(activity_to_json(K))
        assert back.data == K.data and back.flags == K.flags

    def test_truncated_roundtrip(self):
        from sgrg.activities import activity_from_json, activity_to_json

        t = TorusSpec(2, 3)
        K = mayer_init_truncated(1e-2, t, order=2, max_size=2)
        back = activity_from_json(activity_to_json(K))
        assert back.shapes == K.shapes

    def test_functional_not_serializable(self):
        from sgrg.activities import activity_to_json

        t = TorusSpec(2, 1)
        Kf = FunctionalActivity(t, lambda p, f: 1.0, [])
        with pytest.raises(TypeError):
            activity_to_json(Kf)
