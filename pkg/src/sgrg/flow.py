"""IR and UV flow drivers with energy and field-strength bookkeeping.

The IR flow (beta > 8 pi) iterates the composed step on the shrinking tori
Lambda_{M-j}, feeding the field-strength extraction dsigma back into the
Gaussian measure and accumulating the energy

    E_{j+1} = E_j + dE_j |Lambda_{M-j}| - (1/2) tr log(1 + dsigma_j T).

The UV flow (beta < 8 pi) runs from j = -N up to 0, keeps sigma = 0,
extracts constants only, and maintains the split K_j = zeta_j V + Ktilde_j
with the exact linearized multiplier zeta_{j+1} = L^2 e^{-beta C(0)/2}
zeta_j.

Desk-scale defaults keep a fixed analyticity radius h; the slowly varying
schedules kappa_j, h_j are available as pure functions and as the
'schedule' h-mode.  All truncation losses per step (clipped large-set
norm, dropped term count) are carried in the trajectory diagnostics.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .activities import (
    NormParams,
    TruncatedActivity,
    activity_norm,
    charge_component,
    mayer_init_cloud,
    mayer_init_functional,
    mayer_init_truncated,
    polymer_exp,
    potential_v,
    v_activity,
    whole_torus,
)
from .covariance import CovarianceKernel, trlog_T
from .fields import gaussian_ensemble
from .lattice import TorusSpec
from .rgmap import (
    RGStepParams,
    extract_cloud,
    extraction_coefficients,
    build_extraction_activity,
    fluctuate,
    rg_step,
    scale_activity,
)

SIGMA_CAP = 0.1


# -- schedules -----------------------------------------------------------------


def kappa_schedule_ir(j: int, kappa0: float) -> float:
    """kappa_j = kappa_0 sum_{k=0}^{j} 2^{-k} (slowly increasing)."""
    return kappa0 * (2.0 - 2.0 ** (-j))


def h_schedule_ir(j: int, h_inf: float) -> float:
    """h_j = h_inf (1 + sum_{k>j} 2^{-k}) = h_inf (1 + 2^{-j}) (decreasing)."""
    return h_inf * (1.0 + 2.0 ** (-j))


def h_schedule_uv(j: int, h0: float) -> float:
    """h_j = h_0 (1 + sum_{k=1}^{|j|} 2^{-k}), j <= 0 (decreasing toward 0)."""
    return h0 * (2.0 - 2.0 ** (-abs(j)))


# -- configuration ----------------------------------------------------------------


@dataclass
class FlowConfig:
    mode: str  # 'ir' | 'uv'
    beta: float
    zeta: complex
    L: int
    M: int = 0  # IR: starting torus exponent
    N: int = 0  # UV: cutoff exponent
    steps: int = 1
    eps: float | None = None
    h: float = 1.0
    h_mode: str = "fixed"  # or 'schedule'
    kappa: float = 1e-3
    c_s: float = 1.0
    q_max: int = 3
    mayer_order: int = 3
    mayer_max_size: int = 2
    n_q: int = 1
    n_tree_max: int = 2
    pair_window: int = 2
    gamma_p: int | None = None  # None: pick p so the per-block budget is ~2
    seed: int = 0
    override_hypotheses: bool = True

    def __post_init__(self):
        if self.mode not in ("ir", "uv"):
            raise ValueError("mode must be 'ir' or 'uv'")
        if self.eps is None:
            self.eps = 0.1 if self.mode == "ir" else 0.2
        self.warnings = []
        if self.mode == "ir":
            if self.beta <= 8 * math.pi:
                self.warnings.append("IR flow configured with beta <= 8 pi")
            if abs(complex(self.zeta).imag) > 0:
                raise ValueError("IR flow requires real zeta")
            if self.steps > self.M:
                raise ValueError("IR flow needs steps <= M")
        else:
            if self.beta >= 8 * math.pi:
                self.warnings.append("UV flow configured with beta >= 8 pi")
            if self.eps >= 0.25:
                self.warnings.append("UV flow eps >= 1/4")
            if self.steps > self.N:
                raise ValueError("UV flow needs steps <= N")


@dataclass
class FlowState:
    j: int
    sigma: float
    energy: float
    dE: float = 0.0
    dsigma: float = 0.0
    zeta_j: complex = 0.0
    log_norm: float = -math.inf
    log_norm_tilde: float = -math.inf
    ratio: float = float("nan")
    charged_multiplier: float = float("nan")
    large_multiplier: float = float("nan")
    higher_share: float = float("nan")
    clipped_log_norm: float = -math.inf


@dataclass
class FlowTrajectory:
    config: FlowConfig
    states: list
    diagnostics: list = field(default_factory=list)

    def to_rows(self):
        rows = []
        for s in self.states:
            rows.append(
                {
                    "j": s.j,
                    "sigma": s.sigma,
                    "energy": s.energy,
                    "dE": s.dE,
                    "dsigma": s.dsigma,
                    "zeta_abs": abs(s.zeta_j),
                    "log_norm": s.log_norm,
                    "log_norm_tilde": s.log_norm_tilde,
                    "ratio": s.ratio,
                    "charged_multiplier": s.charged_multiplier,
                    "large_multiplier": s.large_multiplier,
                    "higher_share": s.higher_share,
                    "clipped_log_norm": s.clipped_log_norm,
                }
            )
        return rows

    def write_csv(self, path):
        rows = self.to_rows()
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)

    def write_json(self, path):
        payload = {
            "config": _config_json(self.config),
            "rows": self.to_rows(),
            "diagnostics": self.diagnostics,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, default=_json_default)


def _json_default(x):
    if isinstance(x, complex):
        return {"re": x.real, "im": x.imag}
    if isinstance(x, (np.floating, np.integer)):
        return float(x)
    if isinstance(x, frozenset):
        return sorted(map(list, x))
    return str(x)


def _config_json(config: FlowConfig) -> dict:
    out = {}
    for k, v in asdict(config).items():
        out[k] = _json_default(v) if isinstance(v, complex) else v
    out["warnings"] = config.warnings
    return out


# -- helpers -------------------------------------------------------------------------


def _flow_gamma_p(config: FlowConfig) -> int:
    """Gamma_p shift for flow diagnostics: the full budget A = L^{d+3}
    requires |zeta| << 1/A, far below desk-scale couplings, so the flow
    norms use 2^{p|X|} A^{|X|} with p chosen to bring the per-block weight
    down to ~2 (the size sum then converges at the configured zeta)."""
    if config.gamma_p is not None:
        return config.gamma_p
    A = float(config.L ** (2 + 3))
    return -round(math.log2(A / 2.0))


def _norm_params(config: FlowConfig, torus: TorusSpec, j: int) -> NormParams:
    if config.h_mode == "fixed":
        h = config.h
        kappa = config.kappa
    elif config.mode == "ir":
        h_inf = 1.0 / math.sqrt(config.kappa)
        h = h_schedule_ir(j, h_inf)
        kappa = kappa_schedule_ir(j, config.kappa)
    else:
        h0 = 1.0 / math.sqrt(config.kappa)
        h = h_schedule_uv(j, h0)
        kappa = config.kappa
    return NormParams.default(
        torus, h=h, kappa=kappa, c_s=config.c_s, p=_flow_gamma_p(config)
    )


def _step_params(config: FlowConfig, torus: TorusSpec, sigma: float, j: int,
                 preset: str, c_star: float | None = None) -> RGStepParams:
    np_ = _norm_params(config, torus, j)
    if config.h_mode == "fixed":
        delta_h = 0.25 * config.h
    else:
        base = 1.0 / math.sqrt(config.kappa)
        delta_h = base * 2.0 ** (-(abs(j) + 1))
    return RGStepParams(
        c_star=c_star,
        beta=config.beta,
        torus=torus,
        sigma=sigma,
        preset=preset,
        norm=np_,
        delta_h=delta_h,
        delta_kappa=config.kappa * 2.0 ** (-(abs(j) + 1)),
        n_tree_max=config.n_tree_max,
        n_q=config.n_q,
        pair_window=config.pair_window,
        clip_small=True,
        post_scale_extract=True,
        override_hypotheses=config.override_hypotheses,
        check_hypotheses=True,
    )


def _flow_star_norm(config: FlowConfig, torus: TorusSpec) -> float:
    """beta-scaled star norm of the slice kernel, computed once per flow
    (its sigma dependence is negligible at desk scale)."""
    from .covariance import star_norm

    value, _ = star_norm(CovarianceKernel("slice", sigma=0.0, torus=torus), r=2)
    return config.beta * value


def _multipliers(diag: dict) -> dict:
    four = diag.get("four_terms", {})

    def mult(name):
        d = four.get(name, {})
        if d.get("in", -math.inf) == -math.inf:
            return float("nan")
        return math.exp(d["out"] - d["in"])

    return {
        "charged": mult("charged_small"),
        "large": mult("large_sets"),
        "higher": mult("higher_order"),
    }


# -- IR flow --------------------------------------------------------------------------


def ir_flow(config: FlowConfig) -> FlowTrajectory:
    """Iterate the step with the gradient extraction; sigma and E accumulate."""
    if config.mode != "ir":
        raise ValueError("ir_flow needs an IR config")
    torus = TorusSpec(config.L, config.M)
    K = mayer_init_truncated(
        complex(config.zeta).real, torus, order=config.mayer_order,
        max_size=config.mayer_max_size, q_max=config.q_max, n_q=config.n_q,
    )
    sigma = 0.0
    energy = 0.0
    states = [FlowState(j=0, sigma=sigma, energy=energy)]
    states[0].log_norm = activity_norm(K, _norm_params(config, torus, 0)).log_value
    diagnostics = []
    c_star = _flow_star_norm(config, torus)
    for step in range(config.steps):
        j = step
        params = _step_params(config, torus, sigma, j, "ir", c_star=c_star)
        K_new, coeffs, diag = rg_step(K, params)
        mults = _multipliers(diag)
        dE = coeffs.dE
        dsig = coeffs.dsigma + coeffs.dsigma2
        coarse = torus.coarse()
        tr = trlog_T(coarse, sigma, dsig)
        energy = (
            energy + dE * torus.volume + coeffs.dE2 * coarse.volume - 0.5 * tr
        )
        sigma = sigma + dsig
        if abs(sigma) > SIGMA_CAP:
            raise RuntimeError(f"sigma left the allowed window: {sigma}")
        torus = coarse
        K = K_new
        log_norm = activity_norm(K, _norm_params(config, torus, j + 1)).log_value
        st = FlowState(
            j=j + 1, sigma=sigma, energy=energy, dE=dE, dsigma=dsig,
            log_norm=log_norm,
            ratio=math.exp(log_norm - states[-1].log_norm)
            if states[-1].log_norm > -math.inf
            else float("nan"),
            charged_multiplier=mults["charged"],
            large_multiplier=mults["large"],
            higher_share=mults["higher"],
            clipped_log_norm=diag.get("clipped_log_norm", -math.inf),
        )
        states.append(st)
        diagnostics.append(
            {"j": j, "hypotheses": diag.get("hypotheses", {}),
             "dropped_terms": diag.get("dropped_terms", 0)}
        )
    return FlowTrajectory(config=config, states=states, diagnostics=diagnostics)


# -- UV flow --------------------------------------------------------------------------


def uv_zeta_schedule(config: FlowConfig) -> list[complex]:
    """zeta_j = L^{-2|j|} e^{beta v^{|j|}_0(0)/2} zeta for j = -N..0."""
    out = []
    for j in range(-config.N, 1):
        n = abs(j)
        t = TorusSpec(config.L, n)
        v0 = CovarianceKernel("full", sigma=0.0, torus=t).at_zero() if n >= 0 else 0.0
        out.append(
            complex(config.zeta)
            * config.L ** (-2 * n)
            * math.exp(config.beta * v0 / 2.0)
        )
    return out


def uv_multiplier(config: FlowConfig, j: int) -> float:
    """One-step multiplier L^2 e^{-beta C^{|j|}(0)/2} from scale |j| to |j|-1."""
    t = TorusSpec(config.L, abs(j))
    c0 = CovarianceKernel("slice", sigma=0.0, torus=t).at_zero()
    return config.L**2 * math.exp(-config.beta * c0 / 2.0)


def _subtract_v(K: TruncatedActivity, zeta_j: complex, n_q: int) -> TruncatedActivity:
    V = v_activity(K.torus, n_q=n_q, trans_invariant=True)
    negV = V.map_shapes(lambda k, ts: [t.scaled(-zeta_j) for t in ts])
    out = dict(K.shapes)
    for k, ts in negV.shapes.items():
        from .terms import canon

        out[k] = canon(list(out.get(k, [])) + list(ts))
    return TruncatedActivity(K.torus, {k: v for k, v in out.items() if v},
                             K.flags, K.q_max, K.max_linfs)


def uv_flow(config: FlowConfig) -> FlowTrajectory:
    """Iterate with constants-only extraction, tracking K_j = zeta_j V + Ktilde_j."""
    if config.mode != "uv":
        raise ValueError("uv_flow needs a UV config")
    zetas = uv_zeta_schedule(config)
    torus = TorusSpec(config.L, config.N)
    zeta_init = zetas[0]
    K = mayer_init_truncated(
        zeta_init, torus, order=config.mayer_order,
        max_size=config.mayer_max_size, q_max=config.q_max, n_q=config.n_q,
    )
    energy = 0.0
    states = []
    st0 = FlowState(j=-config.N, sigma=0.0, energy=0.0, zeta_j=zeta_init)
    np0 = _norm_params(config, torus, -config.N)
    st0.log_norm = activity_norm(K, np0).log_value
    st0.log_norm_tilde = activity_norm(
        _subtract_v(K, zeta_init, config.n_q), np0
    ).log_value
    states.append(st0)
    diagnostics = []
    c_star = _flow_star_norm(config, torus)
    for step in range(config.steps):
        j = -config.N + step
        params = _step_params(config, torus, 0.0, j, "uv", c_star=c_star)
        K_new, coeffs, diag = rg_step(K, params)
        mults = _multipliers(diag)
        dE = coeffs.dE
        energy = energy + dE * torus.volume + coeffs.dE2 * torus.coarse().volume
        zeta_next = zetas[step + 1]
        torus = torus.coarse()
        K = K_new
        np_j = _norm_params(config, torus, j + 1)
        log_norm = activity_norm(K, np_j).log_value
        ktilde = _subtract_v(K, zeta_next, config.n_q)
        log_tilde = activity_norm(ktilde, np_j).log_value
        st = FlowState(
            j=j + 1, sigma=0.0, energy=energy, dE=dE, zeta_j=zeta_next,
            log_norm=log_norm, log_norm_tilde=log_tilde,
            ratio=math.exp(log_norm - states[-1].log_norm)
            if states[-1].log_norm > -math.inf
            else float("nan"),
            charged_multiplier=mults["charged"],
            large_multiplier=mults["large"],
            higher_share=mults["higher"],
            clipped_log_norm=diag.get("clipped_log_norm", -math.inf),
        )
        states.append(st)
        diagnostics.append(
            {"j": j, "hypotheses": diag.get("hypotheses", {}),
             "dropped_terms": diag.get("dropped_terms", 0)}
        )
    return FlowTrajectory(config=config, states=states, diagnostics=diagnostics)


# -- partition-function oracle ----------------------------------------------------------


class OraclePrecisionError(RuntimeError):
    pass


@dataclass
class OracleResult:
    value: float
    stderr: float
    n_samples: int


def partition_oracle(
    beta: float,
    zeta: complex,
    torus: TorusSpec,
    K,
    sigma: float,
    energy: float,
    n_samples: int,
    seed: int,
    n_g: int = 8,
    rel_err_cap: float = 0.02,
) -> OracleResult:
    """MC estimate of e^E int Exp(box + K)(Lambda, phi) d mu_{beta v(sigma)}."""
    if torus.side > 4:
        raise ValueError("oracle restricted to tiny tori (side <= 4)")
    kern = CovarianceKernel("full", sigma=sigma, torus=torus)
    ens = gaussian_ensemble(kern, torus, n_g, seed=seed, scale=beta)
    lam = whole_torus(torus)
    vals = np.empty(n_samples)
    fields = ens.sample(n_samples)
    for i, fld in enumerate(fields):
        vals[i] = (polymer_exp(K, lam, fld)).real
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n_samples))
    scale = math.exp(energy)
    if mean != 0 and abs(se / mean) > rel_err_cap:
        raise OraclePrecisionError(
            f"relative standard error {abs(se / mean):.3%} above the cap; "
            f"suggest n_samples >= {int(n_samples * (se / (rel_err_cap * mean)) ** 2)}"
        )
    return OracleResult(value=scale * mean, stderr=scale * se, n_samples=n_samples)


def z_invariance_check(
    beta: float,
    zeta: float,
    L: int = 2,
    M: int = 1,
    n_samples: int = 40000,
    seed: int = 11,
    n_g: int = 8,
    order: int = 6,
    n_q: int = 1,
) -> dict:
    """Compare MC estimates of Z in the step-j and step-(j+1) representations.

    Exact small-torus path (side <= 2, where every polymer pair touches):
    the fluctuation is the per-polymer convolution, and the extraction and
    scaling sums reduce to subset DPs over per-polymer scalar values, so
    the j+1 representation is assembled without any series truncation.
    With the e^{-p^4} cutoff the side-2 torus carries no sub-cutoff modes
    (covariance ~ 1e-43), making the MC essentially deterministic; the
    pull is reported against a standard-error floor.
    """
    torus = TorusSpec(L, M)
    if torus.side > 2:
        raise ValueError("exact invariance check restricted to side <= 2")
    from .activities import CloudActivity
    from .terms import CovAccess, convolve_terms, evaluate_terms

    K0 = mayer_init_cloud(zeta, torus, n_q=n_q, order=order,
                          max_size=torus.n_blocks, side_cap=2)
    kern = CovarianceKernel("slice", sigma=0.0, torus=torus)
    cov = CovAccess(kern, scale=beta)
    # on side <= 2 every polymer pair touches: F K = mu_C * K per polymer
    k_sharp = CloudActivity(
        torus, {k: convolve_terms(ts, cov) for k, ts in K0.data.items()}, K0.flags
    )
    coeffs = extraction_coefficients(k_sharp, "ir", beta, enforce=False)
    F = build_extraction_activity(coeffs, k_sharp, n_q=n_q)
    dsig = coeffs.dsigma
    coarse = torus.coarse()
    energy1 = coeffs.dE * torus.volume - 0.5 * trlog_T(coarse, 0.0, dsig)

    supp = [p for p in k_sharp.support()]
    f_supp = [p for p in F.support()]
    lam_blocks = frozenset(whole_torus(torus).blocks)

    def rep_j_value(fld) -> float:
        return polymer_exp(K0, whole_torus(torus), fld).real

    def rep_j1_value(fld_coarse) -> float:
        # Exp(box + S K*)(coarse, phi) = Exp(box + K*)(fine, phi_L); on the
        # fine side every collection is a single polymer, so the value is
        # 1 + sum_Z K*(Z) with K* from the subset DPs below
        from .fields import scale_field

        psi = scale_field(fld_coarse, torus.L)
        ksh = {p.blocks: evaluate_terms(k_sharp.terms(p), psi) for p in supp}
        f_val = {p.blocks: evaluate_terms(F.terms(p), psi) for p in f_supp}
        # (e^F - 1)^+ via subset DP over F polymers (all pairs touch here)
        plus: dict = {frozenset(): 1.0}
        for p in f_supp:
            fy = np.exp(f_val[p.blocks]) - 1.0
            for B, c in list(plus.items()):
                key = B | p.blocks
                plus[key] = plus.get(key, 0.0) + c * fy
        ktilde = {}
        for p in supp:
            ktilde[p.blocks] = ksh[p.blocks] - plus.get(p.blocks, 0.0)
        for B, c in plus.items():
            if B and B not in ktilde:
                ktilde[B] = -c
        total = 1.0
        for xb, kt in ktilde.items():
            if kt == 0.0:
                continue
            # Y-subset DP: collections of distinct F polymers joined to X
            reach: dict = {xb: 1.0}
            for p in f_supp:
                gy = np.exp(-f_val[p.blocks]) - 1.0
                for B, c in list(reach.items()):
                    key = B | p.blocks
                    reach[key] = reach.get(key, 0.0) + c * gy
            for B, c in reach.items():
                total += (kt * c).real
        return total.real if isinstance(total, complex) else float(total)

    kern_full = CovarianceKernel("full", sigma=0.0, torus=torus)
    ens = gaussian_ensemble(kern_full, torus, n_g, seed=seed, scale=beta)
    vals0 = np.array([rep_j_value(f) for f in ens.sample(min(n_samples, 2000))])
    z0_mean, z0_se = float(np.mean(vals0)), float(np.std(vals0, ddof=1) / math.sqrt(len(vals0)))
    kern_c = CovarianceKernel("full", sigma=dsig, torus=coarse)
    ens_c = gaussian_ensemble(kern_c, coarse, n_g, seed=seed + 1, scale=beta)
    vals1 = np.array([rep_j1_value(f) for f in ens_c.sample(min(n_samples, 400))])
    z1_mean = float(np.mean(vals1)) * math.exp(energy1)
    z1_se = float(np.std(vals1, ddof=1) / math.sqrt(len(vals1))) * math.exp(energy1)
    floor = 1e-6 * abs(z0_mean)
    pull = abs(z0_mean - z1_mean) / max(math.hypot(z0_se, z1_se), floor)
    return {
        "z0": OracleResult(z0_mean, z0_se, len(vals0)),
        "z1": OracleResult(z1_mean, z1_se, len(vals1)),
        "pull": pull,
        "rel_diff": abs(z0_mean - z1_mean) / abs(z0_mean),
        "dsigma": dsig,
        "dE": coeffs.dE,
        "se_floor_used": math.hypot(z0_se, z1_se) < floor,
    }


def z_derivative_check(
    beta: float, L: int = 2, M: int = 1, n_samples: int = 40000, seed: int = 3,
    n_g: int = 8,
) -> dict:
    """dZ/dzeta at zero equals |Lambda| e^{-beta v(0)/2}; MC versus closed form."""
    torus = TorusSpec(L, M)
    kern = CovarianceKernel("full", sigma=0.0, torus=torus)
    expect = torus.volume * math.exp(-beta * kern.at_zero() / 2.0)
    ens = gaussian_ensemble(kern, torus, n_g, seed=seed, scale=beta)
    lam = whole_torus(torus)
    vals = np.empty(n_samples)
    for i, fld in enumerate(ens.sample(n_samples)):
        vals[i] = sum(potential_v(b, fld, 2) for b in lam.sorted_blocks())
    mean = float(np.mean(vals))
    se = float(np.std(vals, ddof=1) / math.sqrt(n_samples))
    # fluctuation-free tori give se = 0 exactly; fall back to a relative floor
    denom = max(se, 1e-12 * abs(expect))
    return {"mc": mean, "stderr": se, "expected": expect,
            "pull": abs(mean - expect) / denom}


# -- contraction report -------------------------------------------------------------------


def contraction_report(traj: FlowTrajectory) -> list[dict]:
    """Per-step table: norm ratios and sector multipliers against references."""
    if len(traj.states) < 2:
        raise ValueError("contraction report needs at least two states")
    cfg = traj.config
    delta_ref = max(
        cfg.L**-2.0, cfg.L ** (2.0 - cfg.beta / (4.0 * math.pi))
    )
    rows = []
    for prev, cur in zip(traj.states, traj.states[1:]):
        row = {
            "j": cur.j,
            "ratio": cur.ratio,
            "delta_ref": delta_ref,
            "charged_multiplier": cur.charged_multiplier,
            "charged_ref": cfg.L ** (2.0 - cfg.beta / (4.0 * math.pi)),
            "large_multiplier": cur.large_multiplier,
            "large_ref": cfg.L**-2.0,
            "higher_share": cur.higher_share,
        }
        if cfg.mode == "uv":
            row["zeta_abs"] = abs(cur.zeta_j)
            row["zeta_ratio"] = (
                abs(cur.zeta_j) / abs(prev.zeta_j) if prev.zeta_j else float("nan")
            )
            row["log_norm_tilde"] = cur.log_norm_tilde
            row["tilde_target"] = (2.0 - 4.0 * cfg.eps) * math.log(abs(cur.zeta_j))
        rows.append(row)
    return rows
