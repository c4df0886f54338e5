"""Charge-cloud term algebra: the Gaussian-closed core of the activity maps.

A term is

    c * prod_k (d^{alpha_k} phi)(y_k) * exp( i sum_a q_a phi(x_a) )

stored as (coeff, charges, linfs) with canonical ordering.  The class of
finite sums of such terms is closed under products, Gaussian convolution,
functional Laplacians and field rescaling, so every RG map evaluates on it
in closed form:

  * convolution by the Gaussian measure of covariance scale*C multiplies a
    pure cloud by exp(-scale/2 sum q_a q_b C(x_a-x_b)); linear factors pick
    up imaginary mean shifts i q_a d^a C and Wick pairings;
  * a bond Laplacian -2 Delta_{C(X_i,X_j)} contracts one slot in X_i with
    one slot in X_j;
  * rescaling maps positions x -> x/L and multiplies each derivative
    factor by L^{-|alpha|} (field dimension zero in d = 2).

Evaluation at a concrete field uses exact node lookups when positions sit
on the field grid and trigonometric interpolation otherwise.
"""

from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .covariance import CovarianceKernel

POS_DECIMALS = 9


def _round_pos(pos):
    return (round(float(pos[0]), POS_DECIMALS), round(float(pos[1]), POS_DECIMALS))


@dataclass(frozen=True)
class CloudTerm:
    """One product term; charges ((q, pos), ...), linfs ((alpha, pos), ...)."""

    coeff: complex
    charges: tuple = ()
    linfs: tuple = ()

    def __post_init__(self):
        object.__setattr__(
            self,
            "charges",
            tuple(sorted((int(q), _round_pos(x)) for q, x in self.charges if q != 0)),
        )
        object.__setattr__(
            self,
            "linfs",
            tuple(sorted((tuple(int(c) for c in a), _round_pos(y)) for a, y in self.linfs)),
        )

    @property
    def total_charge(self) -> int:
        return sum(q for q, _ in self.charges)

    @property
    def abs_charge(self) -> int:
        return sum(abs(q) for q, _ in self.charges)

    def key(self):
        return (self.charges, self.linfs)

    def scaled(self, factor: complex) -> "CloudTerm":
        return CloudTerm(self.coeff * factor, self.charges, self.linfs)

    def conjugated(self) -> "CloudTerm":
        return CloudTerm(
            self.coeff.conjugate(),
            tuple((-q, x) for q, x in self.charges),
            self.linfs,
        )

    def flipped(self) -> "CloudTerm":
        """Term composed with phi -> -phi."""
        sign = (-1.0) ** sum(sum(a) for a, _ in self.linfs)
        return CloudTerm(
            self.coeff * sign, tuple((-q, x) for q, x in self.charges), self.linfs
        )


def canon(terms, drop_tol: float = 0.0) -> list[CloudTerm]:
    """Merge identical (charges, linfs) keys; optionally drop tiny coefficients."""
    acc: dict = {}
    for t in terms:
        k = t.key()
        acc[k] = acc.get(k, 0.0) + t.coeff
    out = []
    scale = max((abs(c) for c in acc.values()), default=0.0)
    for (charges, linfs), c in sorted(acc.items()):
        if c == 0.0 or (drop_tol > 0.0 and abs(c) <= drop_tol * scale):
            continue
        out.append(_raw_term(c, charges, linfs))
    return out


def _raw_term(coeff, charges, linfs) -> CloudTerm:
    """Construct a term from already-canonical charges/linfs (no re-sorting)."""
    t = object.__new__(CloudTerm)
    object.__setattr__(t, "coeff", coeff)
    object.__setattr__(t, "charges", charges)
    object.__setattr__(t, "linfs", linfs)
    return t


def multiply(ts1, ts2) -> list[CloudTerm]:
    out = []
    for a in ts1:
        for b in ts2:
            out.append(CloudTerm(a.coeff * b.coeff, a.charges + b.charges, b.linfs + a.linfs))
    return canon(out)


def evaluate_term(term: CloudTerm, field) -> complex:
    """Term value at a concrete field (exact for node-aligned positions)."""
    val = term.coeff
    if term.charges:
        pts = [x for _, x in term.charges]
        phis = field.at(pts)
        phase = sum(q * p for (q, _), p in zip(term.charges, phis))
        val *= cmath.exp(1j * phase)
    for alpha, y in term.linfs:
        val *= field.deriv_at(alpha, [y])[0]
    return val


def evaluate_terms(terms, field) -> complex:
    """Sum of term values with batched field lookups."""
    terms = list(terms)
    if not terms:
        return 0.0
    pos_ix: dict = {}
    queries = []
    for t in terms:
        for _, x in t.charges:
            if x not in pos_ix:
                pos_ix[x] = len(queries)
                queries.append(x)
    lin_ix: dict = {}
    lin_queries: dict = {}
    for t in terms:
        for alpha, y in t.linfs:
            if (alpha, y) not in lin_ix:
                lin_ix[(alpha, y)] = True
                lin_queries.setdefault(alpha, []).append(y)
    phis = field.at(queries) if queries else np.zeros(0)
    lin_vals: dict = {}
    for alpha, ys in lin_queries.items():
        vals = field.deriv_at(alpha, ys)
        for y, v in zip(ys, vals):
            lin_vals[(alpha, y)] = v
    total = 0.0 + 0.0j
    for t in terms:
        val = t.coeff
        if t.charges:
            phase = sum(q * phis[pos_ix[x]] for q, x in t.charges)
            val *= cmath.exp(1j * phase)
        for alpha, y in t.linfs:
            val *= lin_vals[(alpha, y)]
        total += val
    return total


def scale_term(term: CloudTerm, L: int, d: int = 2) -> CloudTerm:
    """Compose with the scaled field: phi_L(x) = phi(x/L) in d = 2.

    Positions divide by L (an order-preserving map, so canonical ordering
    survives) and every derivative factor picks up L^{-|alpha|}.
    """
    if d != 2:
        raise NotImplementedError("cloud scaling implemented for d = 2")
    charges = tuple(
        (q, _round_pos((x[0] / L, x[1] / L))) for q, x in term.charges
    )
    coeff = term.coeff
    linfs = []
    for alpha, y in term.linfs:
        coeff *= float(L) ** (-sum(alpha))
        linfs.append((alpha, _round_pos((y[0] / L, y[1] / L))))
    return _raw_term(coeff, charges, tuple(linfs))


def translate_term(term: CloudTerm, shift) -> CloudTerm:
    """Uniform shift preserves the canonical ordering."""
    charges = tuple(
        (q, _round_pos((x[0] + shift[0], x[1] + shift[1]))) for q, x in term.charges
    )
    linfs = tuple(
        (a, _round_pos((y[0] + shift[0], y[1] + shift[1]))) for a, y in term.linfs
    )
    return _raw_term(term.coeff, charges, linfs)


class CovAccess:
    """Memoized derivative evaluations of scale * C on a torus (min-image)."""

    def __init__(self, kernel: CovarianceKernel, scale: float = 1.0):
        self.kernel = kernel
        self.scale = scale
        self._memo: dict = {}

    def c(self, alpha, dx) -> float:
        key = (tuple(alpha), _round_pos(dx))
        hit = self._memo.get(key)
        if hit is None:
            hit = self.scale * self.kernel.eval(dx, alpha)
            self._memo[key] = hit
        return hit

    def pair(self, alpha_i, yi, alpha_j, yj) -> float:
        """d^{alpha_i}_x d^{alpha_j}_y (scale C)(x - y) at (yi, yj)."""
        a = (alpha_i[0] + alpha_j[0], alpha_i[1] + alpha_j[1])
        sign = (-1.0) ** (alpha_j[0] + alpha_j[1])
        return sign * self.c(a, (yi[0] - yj[0], yi[1] - yj[1]))


def convolve_term(term: CloudTerm, cov: CovAccess) -> list[CloudTerm]:
    """Gaussian convolution: E_zeta[ term(phi + zeta) ] as a term list."""
    qs = [q for q, _ in term.charges]
    xs = [x for _, x in term.charges]
    n_q = len(qs)
    quad = 0.0
    for a in range(n_q):
        for b in range(n_q):
            quad += qs[a] * qs[b] * cov.c((0, 0), (xs[a][0] - xs[b][0], xs[a][1] - xs[b][1]))
    base = term.coeff * math.exp(-0.5 * quad)
    if not term.linfs:
        return [CloudTerm(base, term.charges, ())]
    # mean shifts m_k = i sum_a q_a d^{alpha_k} C(y_k - x_a)
    linfs = list(term.linfs)
    shifts = []
    for alpha, y in linfs:
        m = 0.0
        for q, x in term.charges:
            m += q * cov.c(alpha, (y[0] - x[0], y[1] - x[1]))
        shifts.append(1j * m)
    out = []
    n = len(linfs)
    for pairing, rest in _pairings_with_rest(n):
        pair_factor = 1.0
        for i, j in pairing:
            ai, yi = linfs[i]
            aj, yj = linfs[j]
            pair_factor *= cov.pair(ai, yi, aj, yj)
        # remaining slots: either keep the phi factor or take the mean shift
        for subset in _subsets(rest):
            keep = [linfs[i] for i in subset]
            shift_factor = 1.0
            for i in rest:
                if i not in subset:
                    shift_factor *= shifts[i]
            out.append(
                CloudTerm(base * pair_factor * shift_factor, term.charges, tuple(keep))
            )
    return canon(out)


def convolve_terms(terms, cov: CovAccess) -> list[CloudTerm]:
    out = []
    for t in terms:
        out.extend(convolve_term(t, cov))
    return canon(out)


def _pairings_with_rest(n: int):
    """(pairing, rest) decompositions of {0..n-1} into disjoint pairs + rest."""

    def rec(avail):
        if not avail:
            yield [], []
            return
        first = avail[0]
        # first unpaired
        for pairing, rest in rec(avail[1:]):
            yield pairing, [first] + rest
        # first paired with a later slot
        for k in range(1, len(avail)):
            other = avail[k]
            remaining = avail[1:k] + avail[k + 1 :]
            for pairing, rest in rec(remaining):
                yield [(first, other)] + pairing, rest

    yield from rec(list(range(n)))


def _subsets(items):
    for r in range(len(items) + 1):
        yield from (set(c) for c in itertools.combinations(items, r))


# -- slot-level machinery for the tree terms of the fluctuation map -------------


@dataclass(frozen=True)
class Slot:
    kind: str  # "q" or "l"
    data: tuple  # charge int or alpha
    pos: tuple
    member: int  # polymer index in the partition


def term_slots(term: CloudTerm, member: int) -> list[Slot]:
    slots = [Slot("q", (q,), x, member) for q, x in term.charges]
    slots += [Slot("l", a, y, member) for a, y in term.linfs]
    return slots


def bond_laplacian(coeff: complex, slots: list[Slot], i_mem: int, j_mem: int, cov: CovAccess):
    """Apply the bond operator 2 Delta_{C(X_i, X_j)}: the s-derivative of the
    weighted convolution (d/ds_ij mu_{C(s)} * F = 2 Delta_{C(X_i,X_j)} mu * F).

    Sums over cross-membership slot pairs; linear slots are consumed, charge
    slots persist.  Charge-charge pairs pick up (i q_u)(i q_v) C = -q q C.
    """
    left = [k for k, s in enumerate(slots) if s.member == i_mem]
    right = [k for k, s in enumerate(slots) if s.member == j_mem]
    for a in left:
        for b in right:
            sa, sb = slots[a], slots[b]
            if sa.kind == "q" and sb.kind == "q":
                fac = (
                    -sa.data[0]
                    * sb.data[0]
                    * cov.c((0, 0), (sa.pos[0] - sb.pos[0], sa.pos[1] - sb.pos[1]))
                )
                yield coeff * fac, slots
            elif sa.kind == "q" and sb.kind == "l":
                fac = 1j * sa.data[0] * cov.pair((0, 0), sa.pos, sb.data, sb.pos)
                yield coeff * fac, [s for k, s in enumerate(slots) if k != b]
            elif sa.kind == "l" and sb.kind == "q":
                fac = 1j * sb.data[0] * cov.pair((0, 0), sb.pos, sa.data, sa.pos)
                yield coeff * fac, [s for k, s in enumerate(slots) if k != a]
            else:
                fac = cov.pair(sa.data, sa.pos, sb.data, sb.pos)
                yield coeff * fac, [s for k, s in enumerate(slots) if k not in (a, b)]


def slots_to_term(coeff: complex, slots: list[Slot]) -> CloudTerm:
    charges = tuple((s.data[0], s.pos) for s in slots if s.kind == "q")
    linfs = tuple((s.data, s.pos) for s in slots if s.kind == "l")
    return CloudTerm(coeff, charges, linfs)


# -- series norms -----------------------------------------------------------------


@lru_cache(maxsize=4096)
def linf_weight(m: int, h: float, kappa: float, c_s: float) -> float:
    """sup_u (sqrt(c_s u) + h)^m e^{-kappa u}: per-block weight of m gradient slots."""
    if m == 0:
        return 1.0
    if kappa <= 0:
        raise ValueError("kappa must be positive to control gradient factors")
    us = np.concatenate([[0.0], np.geomspace(1e-8, 1e8, 400)])
    vals = (np.sqrt(c_s * us) + h) ** m * np.exp(-kappa * us)
    return float(np.max(vals))


def term_log_weight(term: CloudTerm, h: float, kappa: float, c_s: float) -> float:
    """log of the series norm contribution |c| e^{h Q} W(linfs)."""
    if abs(term.coeff) == 0.0:
        return -math.inf
    lw = math.log(abs(term.coeff)) + h * term.abs_charge
    if term.linfs:
        lw += math.log(linf_weight(len(term.linfs), h, kappa, c_s))
    return lw


def logsumexp(vals) -> float:
    vals = [v for v in vals if v != -math.inf]
    if not vals:
        return -math.inf
    m = max(vals)
    return m + math.log(sum(math.exp(v - m) for v in vals))
