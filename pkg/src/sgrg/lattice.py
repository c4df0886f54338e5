"""Torus block geometry, polymers, closures and the large-set regulator.

Blocks are closed unit squares centered on the integer lattice points of
the torus (side length L^M in block units).  A polymer is a nonempty set
of block indices.  Two blocks are adjacent when their closed squares
intersect, so corner contact counts; two polymers are *region disjoint*
when no pair of their blocks is adjacent (their closed regions are
disjoint), which is the disjointness used by the polymer exponential.

Two closure maps onto the L-block lattice coexist:

  * ``l_closure``         geometric: every L-block whose closed L-square
                          intersects the polymer (blocks straddling the
                          L-grid belong to several L-blocks);
  * ``partition_closure`` each block is assigned to the unique L-block
                          whose square contains it, ties on straddling
                          blocks broken upward.  The scaling map uses
                          this partition so that single-block activities
                          rescale with the exact L^d block count.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

Block = tuple[int, ...]

ENUM_MAX_SIZE_CAP = 6
ENUM_TORUS_SIDE_CAP = 4096


class EnumerationCapError(RuntimeError):
    """Raised when a polymer enumeration would exceed the configured caps."""


@dataclass(frozen=True)
class TorusSpec:
    """Block lattice on the torus: side length L^M unit blocks per axis."""

    L: int
    M: int
    d: int = 2

    def __post_init__(self):
        if self.L < 2:
            raise ValueError("block scale L must be >= 2")
        if self.M < 0:
            raise ValueError("torus exponent M must be >= 0")
        if self.d < 1:
            raise ValueError("dimension must be >= 1")

    @property
    def side(self) -> int:
        return self.L**self.M

    @property
    def n_blocks(self) -> int:
        return self.side**self.d

    @property
    def volume(self) -> float:
        return float(self.side**self.d)

    def wrap(self, coords) -> Block:
        s = self.side
        return tuple(int(c) % s for c in coords)

    def delta(self, b1: Block, b2: Block) -> tuple[int, ...]:
        """Minimal-image coordinate difference b1 - b2, components in (-side/2, side/2]."""
        s = self.side
        out = []
        for a, b in zip(b1, b2):
            diff = (a - b) % s
            if diff > s // 2:
                diff -= s
            out.append(diff)
        return tuple(out)

    def cheb(self, b1: Block, b2: Block) -> int:
        return max(abs(c) for c in self.delta(b1, b2))

    def coarse(self) -> "TorusSpec":
        if self.M < 1:
            raise ValueError("no coarser lattice below M=0")
        return TorusSpec(self.L, self.M - 1, self.d)


@dataclass(frozen=True)
class Polymer:
    """Nonempty set of blocks with cached size and connectivity count."""

    blocks: frozenset

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("polymer must contain at least one block")

    @property
    def size(self) -> int:
        return len(self.blocks)

    def sorted_blocks(self) -> list[Block]:
        return sorted(self.blocks)

    def anchor(self) -> Block:
        return min(self.blocks)

    def shape_key(self) -> tuple[Block, ...]:
        """Translation-canonical form: blocks shifted so the min corner is 0."""
        bs = self.sorted_blocks()
        base = tuple(min(b[i] for b in bs) for i in range(len(bs[0])))
        return tuple(tuple(c - base[i] for i, c in enumerate(b)) for b in bs)

    def translate(self, shift) -> "Polymer":
        return Polymer(frozenset(tuple(c + s for c, s in zip(b, shift)) for b in self.blocks))

    def translate_mod(self, shift, torus: TorusSpec) -> "Polymer":
        return Polymer(
            frozenset(torus.wrap(tuple(c + s for c, s in zip(b, shift))) for b in self.blocks)
        )

    def to_json(self) -> list:
        return [list(b) for b in self.sorted_blocks()]

    @staticmethod
    def from_json(data) -> "Polymer":
        return Polymer(frozenset(tuple(int(c) for c in b) for b in data))


def polymer(blocks) -> Polymer:
    return Polymer(frozenset(tuple(b) for b in blocks))


def neighbors(b: Block, torus: TorusSpec, include_self: bool = False):
    """Blocks whose closed squares intersect b's (Chebyshev distance <= 1)."""
    offs = itertools.product((-1, 0, 1), repeat=torus.d)
    for off in offs:
        if not include_self and all(o == 0 for o in off):
            continue
        yield torus.wrap(tuple(c + o for c, o in zip(b, off)))


def adjacent(b1: Block, b2: Block, torus: TorusSpec) -> bool:
    return torus.cheb(b1, b2) <= 1


def is_connected(blocks, torus: TorusSpec) -> bool:
    blocks = set(blocks)
    if not blocks:
        return False
    seen = {next(iter(blocks))}
    stack = list(seen)
    while stack:
        b = stack.pop()
        for nb in neighbors(b, torus):
            if nb in blocks and nb not in seen:
                seen.add(nb)
                stack.append(nb)
    return len(seen) == len(blocks)


def connected_components(blocks, torus: TorusSpec) -> list[Polymer]:
    """Partition a block set into maximal adjacency components (sorted, deterministic)."""
    remaining = {torus.wrap(b) for b in blocks}
    comps = []
    while remaining:
        seed = min(remaining)
        comp = {seed}
        stack = [seed]
        remaining.remove(seed)
        while stack:
            b = stack.pop()
            for nb in neighbors(b, torus):
                if nb in remaining:
                    remaining.remove(nb)
                    comp.add(nb)
                    stack.append(nb)
        comps.append(Polymer(frozenset(comp)))
    return sorted(comps, key=lambda p: p.sorted_blocks())


def region_disjoint(p1: Polymer, p2: Polymer, torus: TorusSpec) -> bool:
    """True when the closed regions are disjoint: no pair of blocks adjacent or equal."""
    for a in p1.blocks:
        for b in p2.blocks:
            if torus.cheb(a, b) <= 1:
                return False
    return True


def region_intersects(p1: Polymer, p2: Polymer, torus: TorusSpec) -> bool:
    return not region_disjoint(p1, p2, torus)


def halo(p: Polymer, torus: TorusSpec) -> frozenset:
    """Blocks of p together with every block adjacent to p."""
    out = set(p.blocks)
    for b in p.blocks:
        out.update(neighbors(b, torus))
    return frozenset(out)


def enumerate_polymers(
    torus: TorusSpec,
    max_size: int,
    anchor: Block,
    max_size_cap: int = ENUM_MAX_SIZE_CAP,
) -> list[Polymer]:
    """All connected polymers containing ``anchor`` with size <= max_size, each once."""
    if max_size < 1:
        raise ValueError("max_size must be >= 1")
    if max_size > max_size_cap:
        raise EnumerationCapError(
            f"max_size={max_size} exceeds enumeration cap {max_size_cap}"
        )
    anchor = torus.wrap(anchor)
    start = frozenset({anchor})
    seen = {start}
    frontier = [start]
    out = [start]
    for _ in range(max_size - 1):
        nxt = []
        for s in frontier:
            for b in s:
                for nb in neighbors(b, torus):
                    if nb in s:
                        continue
                    t = s | {nb}
                    if t not in seen:
                        seen.add(t)
                        nxt.append(t)
                        out.append(t)
        frontier = nxt
    return sorted((Polymer(s) for s in out), key=lambda p: (p.size, p.sorted_blocks()))


def enumerate_all_connected(
    torus: TorusSpec, max_size: int, side_cap: int = 8
) -> list[Polymer]:
    """Every connected polymer of the torus with size <= max_size (whole-torus scan)."""
    if torus.side > side_cap:
        raise EnumerationCapError(
            f"torus side {torus.side} exceeds whole-torus enumeration cap {side_cap}"
        )
    seen = set()
    out = []
    for anchor in itertools.product(range(torus.side), repeat=torus.d):
        for p in enumerate_polymers(torus, max_size, anchor):
            if p.blocks not in seen:
                seen.add(p.blocks)
                out.append(p)
    return sorted(out, key=lambda p: (p.size, p.sorted_blocks()))


def enumerate_shapes(d: int, max_size: int, L: int = 2) -> list[Polymer]:
    """Translation classes of connected polymers (anchored with min corner at 0)."""
    aux = TorusSpec(L=2, M=max(4, max_size.bit_length() + 2), d=d)
    center = tuple(aux.side // 2 for _ in range(d))
    shapes = set()
    for p in enumerate_polymers(aux, max_size, center):
        shapes.add(p.shape_key())
    return sorted(
        (Polymer(frozenset(s)) for s in shapes), key=lambda p: (p.size, p.sorted_blocks())
    )


def is_small(p: Polymer, torus: TorusSpec) -> bool:
    """Small set: connected with at most 2^d blocks."""
    return p.size <= 2**torus.d and is_connected(p.blocks, torus)


def count_small_supersets(delta: Block, torus: TorusSpec) -> int:
    """Number of small polymers containing a given block."""
    return sum(1 for p in enumerate_polymers(torus, 2**torus.d, delta))


@lru_cache(maxsize=None)
def small_shapes(d: int = 2) -> tuple[Polymer, ...]:
    """Translation classes of small sets (connected, size <= 2^d)."""
    return tuple(enumerate_shapes(d, 2**d))


def l_closure(p: Polymer, torus: TorusSpec) -> Polymer:
    """Geometric L-closure: L-blocks whose closed squares intersect the polymer.

    Block k occupies [k-1/2, k+1/2]; L-block a occupies [La-L/2, La+L/2].
    Overlap per axis iff |2k - 2La| <= L+1.  Returned on the coarse torus.
    """
    coarse = torus.coarse()
    L = torus.L
    out = set()
    for b in p.blocks:
        ranges = []
        for k in b:
            lo = math.ceil((2 * k - (L + 1)) / (2 * L))
            hi = math.floor((2 * k + (L + 1)) / (2 * L))
            ranges.append(range(lo, hi + 1))
        for combo in itertools.product(*ranges):
            out.add(coarse.wrap(combo))
    return Polymer(frozenset(out))


def partition_block(k: int, L: int) -> int:
    """Index of the L-block assigned to block k; straddling blocks go upward."""
    return (k + L // 2) // L


def partition_closure(p: Polymer, torus: TorusSpec) -> Polymer:
    """Partition closure used by the scaling map: every block to one L-block."""
    coarse = torus.coarse()
    L = torus.L
    return Polymer(
        frozenset(coarse.wrap(tuple(partition_block(k, L) for k in b)) for b in p.blocks)
    )


def scale_up(p: Polymer, torus: TorusSpec) -> Polymer:
    """Image of the polymer under x -> Lx as unit blocks of the fine torus."""
    L = torus.L
    fine = TorusSpec(torus.L, torus.M + 1, torus.d)
    offs = list(itertools.product(range(-(L // 2), L - L // 2), repeat=torus.d))
    out = set()
    for b in p.blocks:
        for off in offs:
            out.add(fine.wrap(tuple(L * c + o for c, o in zip(b, off))))
    return Polymer(frozenset(out))


def blocks_assigned_to(a: Block, torus_fine: TorusSpec) -> list[Block]:
    """Fine blocks whose partition closure is the coarse block a."""
    L = torus_fine.L
    base = range(-(L // 2), L - L // 2)
    out = []
    for off in itertools.product(base, repeat=torus_fine.d):
        out.append(torus_fine.wrap(tuple(L * c + o for c, o in zip(a, off))))
    return out


@dataclass(frozen=True)
class SetRegulatorParams:
    """Large-set regulator Gamma_p(X) = 2^{p|X|} A^{|X|} (1 + MST length)^nu."""

    A: float
    p: int = 0
    nu: float = 2.0

    def __post_init__(self):
        if self.A < 1:
            raise ValueError("amplitude A must be >= 1")

    @staticmethod
    def default(torus: TorusSpec, p: int = 0, nu: float = 2.0) -> "SetRegulatorParams":
        return SetRegulatorParams(A=float(torus.L ** (torus.d + 3)), p=p, nu=nu)


def block_distance(b1: Block, b2: Block, torus: TorusSpec) -> float:
    """Euclidean torus distance between block centers."""
    return math.sqrt(sum(c * c for c in torus.delta(b1, b2)))


def tree_decay_weight(b1: Block, b2: Block, torus: TorusSpec, nu: float = 2.0) -> float:
    """theta(b1, b2) = (1 + d(b1, b2))^nu."""
    return (1.0 + block_distance(b1, b2, torus)) ** nu


def block_metrics(b1: Block, b2: Block, torus: TorusSpec, nu: float = 2.0):
    d = block_distance(b1, b2, torus)
    return d, (1.0 + d) ** nu


def mst_length(p: Polymer, torus: TorusSpec) -> float:
    """Minimal spanning tree length over block centers (Prim)."""
    bs = p.sorted_blocks()
    n = len(bs)
    if n <= 1:
        return 0.0
    in_tree = [False] * n
    dist = [math.inf] * n
    dist[0] = 0.0
    total = 0.0
    for _ in range(n):
        j = min((i for i in range(n) if not in_tree[i]), key=lambda i: dist[i])
        in_tree[j] = True
        total += dist[j]
        for i in range(n):
            if not in_tree[i]:
                d = block_distance(bs[j], bs[i], torus)
                if d < dist[i]:
                    dist[i] = d
    return total


def theta(p: Polymer, torus: TorusSpec, nu: float = 2.0) -> float:
    return (1.0 + mst_length(p, torus)) ** nu


def gamma_p(p: Polymer, params: SetRegulatorParams, torus: TorusSpec) -> float:
    """Gamma_p(X) = 2^{p|X|} A^{|X|} Theta(X)."""
    n = p.size
    return (2.0 ** (params.p * n)) * (params.A**n) * theta(p, torus, params.nu)


def log_gamma_p(p: Polymer, params: SetRegulatorParams, torus: TorusSpec) -> float:
    n = p.size
    return (
        params.p * n * math.log(2.0)
        + n * math.log(params.A)
        + params.nu * math.log1p(mst_length(p, torus))
    )
