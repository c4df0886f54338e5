"""Discretized fields on the torus: derivatives, norms, regulators, sampling.

A FieldGrid stores real values at nodes x = j/n_g (n_g even nodes per unit
length).  Off-node evaluation uses trigonometric interpolation, which is
exact for band-limited fields; derivative arrays come from 2nd-order
central differences (the default for norms and regulators) or from the
spectral multiplier (exact on band-limited fields, used by the activity
algebra where pointwise identities must hold to machine precision).

The large field regulator is

    G(kappa, X, phi) = exp( kappa sum_{1<=|a|<=s} w_a int_X |d^a phi|^2
                          + kappa c w_b sum_{|a|=1} int_{dX} |d phi|^2 )

with w_a = ell^{2|a|-2}, w_b = ell for the ell-scaled variant and 1
otherwise.  Block k covers [k-1/2, k+1/2); boundary faces are the unit
segments between blocks in X and blocks outside it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .covariance import CovarianceKernel, CovarianceMatrix, covariance_matrix
from .lattice import Polymer, TorusSpec


def multi_indices(d: int, min_total: int, max_total: int):
    out = []
    for total in range(min_total, max_total + 1):
        for a in itertools.product(range(total + 1), repeat=d):
            if sum(a) == total:
                out.append(a)
    return out


@dataclass
class FieldGrid:
    """Real field sampled at nodes j/n_g on the torus."""

    torus: TorusSpec
    n_g: int
    values: np.ndarray

    def __post_init__(self):
        if self.n_g < 4 or self.n_g % 2:
            raise ValueError("n_g must be an even integer >= 4")
        n = self.torus.side * self.n_g
        if self.values.shape != (n, n):
            raise ValueError(f"values must have shape {(n, n)}")

    # -- basics ---------------------------------------------------------------

    @property
    def n(self) -> int:
        return self.torus.side * self.n_g

    def copy(self) -> "FieldGrid":
        return FieldGrid(self.torus, self.n_g, self.values.copy())

    def __add__(self, other):
        if isinstance(other, FieldGrid):
            return FieldGrid(self.torus, self.n_g, self.values + other.values)
        return FieldGrid(self.torus, self.n_g, self.values + float(other))

    def __neg__(self):
        return FieldGrid(self.torus, self.n_g, -self.values)

    def _hat(self) -> np.ndarray:
        return np.fft.fft2(self.values)

    def _freqs(self):
        # physical wavenumbers 2 pi m / side for signed mode m
        n = self.n
        m = np.fft.fftfreq(n, d=1.0 / n)
        return 2.0 * math.pi * m / self.torus.side

    def at(self, points) -> np.ndarray:
        """Field values at arbitrary points.

        Node-aligned points are exact array lookups; everything else uses
        trigonometric interpolation (exact for band-limited fields).
        """
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        n = self.n
        scaled = pts * self.n_g
        idx = np.rint(scaled)
        aligned = np.max(np.abs(scaled - idx), axis=1) < 1e-9
        if np.all(aligned):
            ii = idx.astype(int) % n
            return self.values[ii[:, 0], ii[:, 1]].astype(float)
        out = np.empty(pts.shape[0])
        if np.any(aligned):
            ii = idx[aligned].astype(int) % n
            out[aligned] = self.values[ii[:, 0], ii[:, 1]]
        out[~aligned] = self._interpolate(pts[~aligned])
        return out

    def _interpolate(self, pts) -> np.ndarray:
        n = self.n
        hat = self._hat() / (n * n)
        k = self._freqs()
        # Nyquist mode of an even grid must act as a cosine
        kx = k.copy()
        nyq = n // 2
        phase_x = np.exp(1j * np.outer(pts[:, 0], kx))
        phase_y = np.exp(1j * np.outer(pts[:, 1], k))
        if n % 2 == 0:
            phase_x[:, nyq] = np.cos(pts[:, 0] * k[nyq])
            phase_y[:, nyq] = np.cos(pts[:, 1] * k[nyq])
        vals = np.einsum("pk,kl,pl->p", phase_x, hat, phase_y)
        return np.real(vals)

    def deriv_at(self, alpha, points) -> np.ndarray:
        """Spectral derivative evaluated at arbitrary points (cached grid)."""
        a = tuple(int(c) for c in alpha)
        cache = self.__dict__.setdefault("_deriv_cache", {})
        if a not in cache:
            cache[a] = self.deriv(a, method="spectral")
        return cache[a].at(points)

    def deriv(self, alpha, method: str = "fd") -> "FieldGrid":
        """d^alpha field as a new grid; 'fd' central stencils or 'spectral'."""
        a = tuple(int(c) for c in alpha)
        if method == "spectral":
            k = self._freqs()
            out = np.fft.ifft2(self._hat() * _spectral_multiplier(self.n, k, a))
            return FieldGrid(self.torus, self.n_g, np.real(out))
        if method != "fd":
            raise ValueError("method must be 'fd' or 'spectral'")
        vals = self.values
        for axis, order in enumerate(a):
            vals = _fd_axis(vals, order, self.n_g, axis)
        return FieldGrid(self.torus, self.n_g, vals)

    def shifted(self, const: float) -> "FieldGrid":
        return self + const


def _spectral_multiplier(n, k, alpha):
    kx = k.copy()
    ky = k.copy()
    if n % 2 == 0:
        if alpha[0] % 2:
            kx[n // 2] = 0.0
        if alpha[1] % 2:
            ky[n // 2] = 0.0
    return ((1j * kx) ** alpha[0])[:, None] * ((1j * ky) ** alpha[1])[None, :]


def _fd_axis(vals, order, n_g, axis):
    """Compose 2nd-order central stencils to the requested derivative order."""
    for _ in range(order // 2):
        vals = (np.roll(vals, -1, axis) - 2.0 * vals + np.roll(vals, 1, axis)) * n_g**2
    if order % 2:
        vals = (np.roll(vals, -1, axis) - np.roll(vals, 1, axis)) * (n_g / 2.0)
    return vals


def random_band_limited(
    torus: TorusSpec, n_g: int, rng, k_max: int = 3, amplitude: float = 1.0
) -> FieldGrid:
    """Random sum of Fourier modes with |mode| <= k_max (exact under interpolation)."""
    n = torus.side * n_g
    vals = np.zeros((n, n))
    xs = np.arange(n) / n_g
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    for mx in range(-k_max, k_max + 1):
        for my in range(-k_max, k_max + 1):
            if mx == 0 and my == 0:
                continue
            amp = amplitude * rng.normal() / (1 + mx * mx + my * my)
            phase = rng.uniform(0, 2 * math.pi)
            w = 2.0 * math.pi / torus.side
            vals += amp * np.cos(w * (mx * X + my * Y) + phase)
    vals += amplitude * rng.normal()
    return FieldGrid(torus, n_g, vals)


# -- block geometry on the grid ------------------------------------------------


def block_node_index(k: int, n_g: int):
    """Grid indices along one axis for block k (covers [k-1/2, k+1/2))."""
    return np.arange(n_g * k - n_g // 2, n_g * k + n_g // 2)


def polymer_node_indices(p: Polymer, torus: TorusSpec, n_g: int):
    n = torus.side * n_g
    idx = []
    for b in p.blocks:
        ix = block_node_index(b[0], n_g) % n
        iy = block_node_index(b[1], n_g) % n
        gx, gy = np.meshgrid(ix, iy, indexing="ij")
        idx.append((gx.ravel(), gy.ravel()))
    gx = np.concatenate([i[0] for i in idx])
    gy = np.concatenate([i[1] for i in idx])
    return gx, gy


def boundary_faces(p: Polymer, torus: TorusSpec):
    """(block, axis, direction) triples for faces between p and its complement."""
    out = []
    for b in p.blocks:
        for axis in range(torus.d):
            for dire in (-1, 1):
                nb = list(b)
                nb[axis] += dire
                if torus.wrap(nb) not in p.blocks:
                    out.append((b, axis, dire))
    return out


def face_node_indices(face, torus: TorusSpec, n_g: int):
    """Grid indices along a boundary face (the face hits grid lines: n_g even)."""
    (b, axis, dire) = face
    n = torus.side * n_g
    fixed = (n_g * b[axis] + dire * (n_g // 2)) % n
    other = block_node_index(b[1 - axis], n_g) % n
    if axis == 0:
        return np.full_like(other, fixed), other
    return other, np.full_like(other, fixed)


# -- norms and regulators -------------------------------------------------------


def field_norms(
    phi: FieldGrid, p: Polymer, r: int, s: int, method: str = "fd"
) -> tuple[float, float]:
    """(sup norm over |a|<=r, L2 Sobolev norm over |a|<=s) on the polymer."""
    gx, gy = polymer_node_indices(p, phi.torus, phi.n_g)
    sup = 0.0
    l2 = 0.0
    for a in multi_indices(2, 0, s):
        da = phi.deriv(a, method=method).values[gx, gy]
        if sum(a) <= r:
            sup = max(sup, float(np.max(np.abs(da))))
        l2 += float(np.sum(da * da)) / phi.n_g**2
    return sup, math.sqrt(l2)


@dataclass(frozen=True)
class RegulatorParams:
    """Large field regulator constants; s > d/2 + r is required for Sobolev."""

    kappa: float
    c: float
    r: int = 2
    s: int = 4
    h: float = 1.0
    ell: float = 2.0
    c_s: float | None = None

    def __post_init__(self):
        if self.s <= 1 + self.r:  # d = 2
            raise ValueError("need s > d/2 + r")
        if self.kappa > 1.0 or self.c > 1.0:
            raise ValueError("kappa and c must be <= 1")
        if self.h < 0:
            raise ValueError("h must be >= 0")


def log_regulator(
    phi: FieldGrid, p: Polymer, params: RegulatorParams, scaled: bool = False,
    method: str = "fd",
) -> float:
    """log G(kappa, X, phi); ``scaled=True`` gives the ell-scaled variant."""
    gx, gy = polymer_node_indices(p, phi.torus, phi.n_g)
    bulk = 0.0
    for a in multi_indices(2, 1, params.s):
        da = phi.deriv(a, method=method).values[gx, gy]
        w = params.ell ** (2 * sum(a) - 2) if scaled else 1.0
        bulk += w * float(np.sum(da * da)) / phi.n_g**2
    bdry = 0.0
    grads = [phi.deriv(a, method=method).values for a in ((1, 0), (0, 1))]
    for face in boundary_faces(p, phi.torus):
        fx, fy = face_node_indices(face, phi.torus, phi.n_g)
        for g in grads:
            v = g[fx, fy]
            bdry += float(np.sum(v * v)) / phi.n_g
    w_b = params.ell if scaled else 1.0
    return params.kappa * bulk + params.kappa * params.c * w_b * bdry


def regulator(phi, p, params, scaled=False, method="fd") -> float:
    return math.exp(log_regulator(phi, p, params, scaled=scaled, method=method))


def measure_sobolev_constant(
    s: int, n_g: int = 8, n_fields: int = 200, seed: int = 1234, slack: float = 1.1
) -> float:
    """Discrete Sobolev constant: max |d phi(x)|^2 / sum_{1<=|a|<=s} int_D |d^a phi|^2.

    Measured over random band-limited fields on a single block, inflated by
    ``slack``; feeds c = (8 L c_s)^{-1}.
    """
    torus = TorusSpec(2, 1)
    rng = np.random.default_rng(seed)
    block = Polymer(frozenset({(0, 0)}))
    worst = 0.0
    for _ in range(n_fields):
        phi = random_band_limited(torus, n_g, rng, k_max=n_g // 2 - 1)
        gx, gy = polymer_node_indices(block, torus, n_g)
        denom = 0.0
        for a in multi_indices(2, 1, s):
            da = phi.deriv(a).values[gx, gy]
            denom += float(np.sum(da * da)) / n_g**2
        num = 0.0
        for a in ((1, 0), (0, 1)):
            da = phi.deriv(a).values[gx, gy]
            num = max(num, float(np.max(da * da)))
        if denom > 1e-12:
            worst = max(worst, num / denom)
    return worst * slack


def default_regulator_params(
    L: int, r: int, s: int, kappa_scale: float = 0.1, c_s: float | None = None, h: float = 1.0
) -> RegulatorParams:
    """kappa, c from the smallness rules: c = (8 L c_s)^{-1}, kappa c^{-1} L^2 <= kappa_scale.

    The measured discrete c_s can be small enough that (8 L c_s)^{-1} > 1;
    c is clamped at 1 (the regulator requires c <= 1) which keeps every
    smallness condition intact since kappa is tied to the clamped value.
    """
    if c_s is None:
        c_s = measure_sobolev_constant(s)
    c = min(1.0, 1.0 / (8.0 * L * c_s))
    kappa = kappa_scale * c / L**2
    return RegulatorParams(kappa=kappa, c=c, r=r, s=s, h=h, c_s=c_s)


# -- field scaling ---------------------------------------------------------------


def scale_amplitude(ell: float, d: int = 2) -> float:
    """Field rescaling amplitude ell^{-(d-2)/2} (identity in d = 2)."""
    return float(ell) ** (-(d - 2) / 2.0)


def scale_field(phi: FieldGrid, ell: int) -> FieldGrid:
    """phi_ell(x) = ell^{-(d-2)/2} phi(x/ell) on the ell-times-larger torus."""
    t = phi.torus
    if ell == t.L:
        big = TorusSpec(t.L, t.M + 1, t.d)
    else:
        # representable only if the scaled side is a power of L
        side = t.side * ell
        M = round(math.log(side, t.L))
        if t.L**M != side:
            raise ValueError(f"scaled side {side} not a power of L={t.L}")
        big = TorusSpec(t.L, M, t.d)
    n = big.side * phi.n_g
    xs = np.arange(n) / phi.n_g / ell
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    vals = phi.at(pts).reshape(n, n) * scale_amplitude(ell, t.d)
    return FieldGrid(big, phi.n_g, vals)


# -- Gaussian machinery -----------------------------------------------------------


@dataclass
class GaussianEnsemble:
    """Seeded sampler for the Gaussian measure with the given grid covariance."""

    cov: CovarianceMatrix
    torus: TorusSpec
    n_g: int
    seed: int

    def sample(self, count: int) -> list[FieldGrid]:
        rng = np.random.default_rng(self.seed)
        fac = self.cov.sqrt_factor
        xi = rng.standard_normal(size=(count, fac.shape[1]))
        draws = xi @ fac.T
        n = self.torus.side * self.n_g
        return [FieldGrid(self.torus, self.n_g, d.reshape(n, n)) for d in draws]

    def sample_values(self, count: int) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        fac = self.cov.sqrt_factor
        xi = rng.standard_normal(size=(count, fac.shape[1]))
        return xi @ fac.T


def grid_points(torus: TorusSpec, n_g: int) -> np.ndarray:
    n = torus.side * n_g
    xs = np.arange(n) / n_g
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def gaussian_ensemble(
    kernel: CovarianceKernel, torus: TorusSpec, n_g: int, seed: int, scale: float = 1.0
) -> GaussianEnsemble:
    cov = covariance_matrix(kernel, grid_points(torus, n_g), scale=scale)
    return GaussianEnsemble(cov=cov, torus=torus, n_g=n_g, seed=seed)


def save_field(phi: FieldGrid, path, seed: int | None = None):
    """Flat binary array with a JSON header (torus, n_g, seed)."""
    import json

    header = {
        "L": phi.torus.L,
        "M": phi.torus.M,
        "d": phi.torus.d,
        "n_g": phi.n_g,
        "seed": seed,
        "dtype": "float64",
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(np.ascontiguousarray(phi.values, dtype=np.float64).tobytes())


def load_field(path) -> FieldGrid:
    import json

    with open(path, "rb") as fh:
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode())
        values = np.frombuffer(fh.read(), dtype=np.float64)
    torus = TorusSpec(header["L"], header["M"], header["d"])
    side = torus.side * header["n_g"]
    return FieldGrid(torus, header["n_g"], values.reshape(side, side).copy())


def charge_cloud_expectation(charges, kernel: CovarianceKernel, scale: float = 1.0) -> float:
    """E[e^{i sum_a q_a phi(x_a)}] = exp(-scale/2 sum_ab q_a q_b C(x_a - x_b))."""
    qs = np.asarray([float(q) for q, _ in charges])
    xs = np.asarray([tuple(x) for _, x in charges], dtype=np.float64)
    diffs = xs[:, None, :] - xs[None, :, :]
    c = kernel.eval_many(diffs.reshape(-1, 2), [(0, 0)])[:, 0].reshape(len(qs), len(qs))
    return math.exp(-0.5 * scale * float(qs @ c @ qs))
