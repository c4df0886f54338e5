"""Hot numeric kernels with an optional numba JIT path.

The covariance evaluators reduce to one inner loop: a weighted sum of
derivative-modulated plane waves over a list of momenta.  That loop is
implemented twice, once as explicit loops compiled by numba and once as
vectorized numpy.  The active path is chosen at import time:

  * set SGRG_NO_NUMBA=1 to force the numpy fallback,
  * otherwise numba is used when importable.

Both paths return identical values to machine precision; ``sgrg.bench``
times them against each other.
"""

import os

import numpy as np

_DISABLED = os.environ.get("SGRG_NO_NUMBA", "").strip() not in ("", "0", "false", "False")

HAS_NUMBA = False
if not _DISABLED:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False


def _mode_sum_py(px, py, f, ax, ay, xs, out):
    """Sum_m f_m * Re[(i px)^ax (i py)^ay e^{i p.x}] for every x row, alpha row.

    px, py, f: (n_modes,) momenta and weights.
    ax, ay:    (n_alpha,) derivative multi-index components.
    xs:        (n_x, 2) evaluation points.
    out:       (n_x, n_alpha) result, overwritten.
    """
    phase = px[None, :] * xs[:, 0:1] + py[None, :] * xs[:, 1:2]
    cos_p = np.cos(phase)
    sin_p = np.sin(phase)
    for j in range(ax.shape[0]):
        k = int(ax[j] + ay[j]) % 4
        if k == 0:
            tr = cos_p
        elif k == 1:
            tr = -sin_p
        elif k == 2:
            tr = -cos_p
        else:
            tr = sin_p
        w = f * px ** int(ax[j]) * py ** int(ay[j])
        out[:, j] = tr @ w
    return out


if HAS_NUMBA:

    @njit(cache=True)
    def _mode_sum_nb(px, py, f, ax, ay, xs, out):  # pragma: no cover - jitted
        n_modes = px.shape[0]
        n_x = xs.shape[0]
        n_a = ax.shape[0]
        # mode weights per derivative order are reused across points
        w = np.empty((n_a, n_modes))
        for j in range(n_a):
            for m in range(n_modes):
                w[j, m] = f[m] * px[m] ** ax[j] * py[m] ** ay[j]
        for i in range(n_x):
            x0 = xs[i, 0]
            x1 = xs[i, 1]
            for j in range(n_a):
                out[i, j] = 0.0
            for m in range(n_modes):
                th = px[m] * x0 + py[m] * x1
                c = np.cos(th)
                s = np.sin(th)
                for j in range(n_a):
                    k = (ax[j] + ay[j]) % 4
                    if k == 0:
                        tr = c
                    elif k == 1:
                        tr = -s
                    elif k == 2:
                        tr = -c
                    else:
                        tr = s
                    out[i, j] += w[j, m] * tr
        return out

    _mode_sum_impl = _mode_sum_nb
else:
    _mode_sum_impl = _mode_sum_py


def mode_sum(px, py, f, alphas, xs):
    """Evaluate derivative plane-wave sums; returns (n_x, n_alpha) float array."""
    px = np.ascontiguousarray(px, dtype=np.float64)
    py = np.ascontiguousarray(py, dtype=np.float64)
    f = np.ascontiguousarray(f, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.int64).reshape(-1, 2)
    xs = np.ascontiguousarray(np.asarray(xs, dtype=np.float64).reshape(-1, 2))
    out = np.empty((xs.shape[0], alphas.shape[0]), dtype=np.float64)
    ax = np.ascontiguousarray(alphas[:, 0])
    ay = np.ascontiguousarray(alphas[:, 1])
    return _mode_sum_impl(px, py, f, ax, ay, xs, out)


def mode_sum_numpy(px, py, f, alphas, xs):
    """Force the numpy path (used by the benchmark and equivalence tests)."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.int64).reshape(-1, 2)
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, 2)
    out = np.empty((xs.shape[0], alphas.shape[0]), dtype=np.float64)
    return _mode_sum_py(px, py, f, alphas[:, 0], alphas[:, 1], xs, out)


def active_backend():
    return "numba" if HAS_NUMBA else "numpy"
