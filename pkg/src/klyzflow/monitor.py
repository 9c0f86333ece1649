"""Local curvature-estimate machinery evaluated along stored runs.

All quantities live in the real picture: Riemannian metric ``h = 2 Re g``,
real time ``s = t / time_scale`` and real norms (see
``geometry.REAL_NORM_FACTOR``).  The monitor is a post-process over uniformly
spaced snapshots.

K and L default to the measured sups over the whole run (floored), so the
curvature hypotheses hold by construction.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .flow import FlowParams, FlowState
from .grid import Grid


class BallTooLarge(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


class NonFlatInitialMetric(ValueError):
    pass


@dataclass(frozen=True)
class MonitorConfig:
    p: int = 3
    x0: tuple[int, ...] | None = None
    rho: float = 0.25
    theta: float = 1.0
    tau: float = 2.0
    K: float | None = None
    L: float | None = None
    K_floor: float = 1.0
    L_floor: float = 1e-6
    C: float = 1.0
    equiv_slack: float = 1e-6

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 3:
            raise ValueError("p must be an integer >= 3")
        if self.theta < 1.0:
            raise ValueError("theta must be >= 1")
        if self.tau <= 1.0:
            raise ValueError("tau must be > 1")
        if self.rho <= 0.0:
            raise ValueError("rho must be positive")
        if self.C <= 0.0:
            raise ValueError("C must be positive")
        for name in ("K", "L"):
            v = getattr(self, name)
            if v is not None and v <= 0.0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["x0"] = None if self.x0 is None else list(self.x0)
        return d


# per-sample fields ---------------------------------------------------------------


@dataclass
class SampleFields:
    s: float
    h: np.ndarray
    dV: np.ndarray
    rm: np.ndarray
    ric: np.ndarray
    alpha: np.ndarray
    d_ric: np.ndarray
    d_rm: np.ndarray
    d_alpha: np.ndarray
    d_tr: np.ndarray


def _real_metric(g: np.ndarray) -> np.ndarray:
    n = g.shape[-1]
    out = np.empty(g.shape[:-2] + (2 * n, 2 * n))
    out[..., 0::2, 0::2] = 2.0 * g.real
    out[..., 1::2, 1::2] = 2.0 * g.real
    out[..., 0::2, 1::2] = 2.0 * g.imag
    out[..., 1::2, 0::2] = -2.0 * g.imag
    return out


def sample_fields(state: FlowState, params: FlowParams) -> SampleFields:
    b = state.bundle()
    cd = geo.covariant_derivative_norms(b)
    f = geo.REAL_NORM_FACTOR
    n = state.grid.n_complex
    return SampleFields(
        s=state.t / params.time_scale,
        h=_real_metric(b.metric),
        dV=(2.0**n) * b.volume_density,
        rm=f["rm"] * b.norm_rm,
        ric=f["ric"] * b.norm_ric,
        alpha=f["alpha"] * b.norm_alpha,
        d_ric=f["ric"] ** 2 * cd["ric"],
        d_rm=f["rm"] ** 2 * cd["rm"],
        d_alpha=f["alpha"] ** 2 * cd["alpha"],
        d_tr=4.0 * cd["tr_alpha"],
    )


# cutoff ----------------------------------------------------------------------------


def _lattice_shifts(grid: Grid):
    per = np.asarray(grid.periods)
    for m in itertools.product((-1, 0, 1), repeat=grid.real_dim):
        yield np.asarray(m) * per


def injectivity_radius(grid: Grid, h0: np.ndarray) -> float:
    lengths = [math.sqrt(float(v @ h0 @ v)) for v in _lattice_shifts(grid) if np.any(v)]
    return 0.5 * min(lengths)


def flat_distance(grid: Grid, h0: np.ndarray, x0: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Distance to x0 on the flat torus (h0 constant) and the covector h0 dx / d."""
    coords = grid.mesh()
    x0c = np.array([c[x0] for c in coords])
    base = np.stack([c - x0c[i] for i, c in enumerate(coords)], axis=-1)
    per = np.asarray(grid.periods)
    base = base - per * np.round(base / per)
    best_d2 = np.full(grid.shape, np.inf)
    best = np.zeros_like(base)
    for shift in _lattice_shifts(grid):
        delta = base + shift
        d2 = np.einsum("...a,ab,...b->...", delta, h0, delta)
        pick = d2 < best_d2
        best_d2 = np.where(pick, d2, best_d2)
        best = np.where(pick[..., None], delta, best)
    d = np.sqrt(best_d2)
    cov = np.einsum("ab,...b->...a", h0, best)
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = np.where(d[..., None] > 0, cov / np.where(d > 0, d, 1.0)[..., None], 0.0)
    return d, cov


@dataclass
class Cutoff:
    phi: np.ndarray
    dist: np.ndarray
    covector: np.ndarray  # d(dist), as a covector field
    radius: float
    theta: float

    def grad_norm2(self, h: np.ndarray) -> np.ndarray:
        """|grad phi|^2 measured in the metric h."""
        hinv = np.linalg.inv(h)
        q = np.einsum("...a,...ab,...b->...", self.covector, hinv, self.covector)
        inside = self.phi > 0.0
        return np.where(inside, q, 0.0) / (self.theta * self.radius) ** 2

    def ball(self, shrink: float = 1.0) -> np.ndarray:
        return self.dist < self.radius / shrink


def cutoff_field(config: MonitorConfig, grid: Grid, h0: np.ndarray, K: float) -> Cutoff:
    """phi = max(0, (rho/sqrt(K) - d) / (theta rho / sqrt(K))) for the flat metric h0."""
    h0 = np.asarray(h0, dtype=float)
    if h0.ndim != 2:
        raise NonFlatInitialMetric("cutoff needs a constant initial metric")
    radius = config.rho / math.sqrt(K)
    inj = injectivity_radius(grid, h0)
    if radius > inj:
        raise BallTooLarge(f"ball radius {radius:.4g} exceeds embedding bound {inj:.4g}")
    x0 = config.x0 if config.x0 is not None else tuple(n // 2 for n in grid.shape)
    if len(x0) != grid.real_dim:
        raise ValueError("x0 needs one index per real axis")
    d, cov = flat_distance(grid, h0, tuple(x0))
    phi = np.maximum(0.0, (radius - d) / (config.theta * radius))
    return Cutoff(phi=phi, dist=d, covector=cov, radius=radius, theta=config.theta)


def constant_initial_metric(f0: SampleFields, tol: float = 1e-10) -> np.ndarray:
    h = f0.h.reshape(-1, *f0.h.shape[-2:])
    h0 = h.mean(axis=0)
    if np.abs(h - h0).max() > tol * max(1.0, np.abs(h0).max()):
        raise NonFlatInitialMetric("initial metric is not flat; closed-form distance unavailable")
    return h0


# quantities --------------------------------------------------------------------------

QUANTITY_NAMES = ("A1", "A2", "A3", "A4", "B1", "B2", "B3", "B4", "B5")


def _integrands(f: SampleFields, cut: Cutoff, p: int, K: float) -> dict[str, np.ndarray]:
    phi = cut.phi
    gphi = cut.grad_norm2(f.h)
    rm = f.rm
    w = phi ** (2 * p)
    rm_p1 = rm ** (p - 1)
    rm_p3 = rm ** (p - 3)
    return {
        "A1": rm**p * w,
        "A2": rm_p1 * gphi * phi ** (2 * p - 1),
        "A3": rm_p1 * w,
        "A4": rm_p1 * gphi * phi ** (2 * p - 2),
        "B1": f.d_ric * rm_p1 * w / K,
        "B2": f.d_rm * rm_p3 * w,
        "B3": f.d_alpha * rm_p1 * w / K,
        "B4": f.d_tr * rm_p1 * w / K,
        "B5": f.d_alpha * rm_p3 * w,
    }


def compute_quantities(f: SampleFields, cut: Cutoff, config: MonitorConfig, K: float, cell: float) -> dict[str, float]:
    out = {}
    for k, v in _integrands(f, cut, config.p, K).items():
        out[k] = float(np.sum(v * f.dV) * cell)
    return out


def compute_quantities_bruteforce(
    f: SampleFields, cut: Cutoff, config: MonitorConfig, K: float, cell: float
) -> dict[str, float]:
    """Point-by-point evaluation with exactly rounded sums; a second summation path."""
    p = config.p
    hinv = np.linalg.inv(f.h)
    acc = {k: [] for k in QUANTITY_NAMES}
    flat = [a.reshape(-1) for a in (cut.phi, f.rm, f.d_ric, f.d_rm, f.d_alpha, f.d_tr, f.dV)]
    cov = cut.covector.reshape(-1, cut.covector.shape[-1])
    hinv = hinv.reshape(-1, *hinv.shape[-2:])
    scale = 1.0 / (cut.theta * cut.radius) ** 2
    for i in range(flat[0].size):
        phi, rm, dric, drm, dal, dtr, dv = (float(a[i]) for a in flat)
        if phi <= 0.0:
            continue
        c = cov[i]
        gphi = float(c @ hinv[i] @ c) * scale
        dvol = dv * cell
        w = phi ** (2 * p) * dvol
        r1 = rm ** (p - 1)
        r3 = rm ** (p - 3)
        acc["A1"].append(rm**p * w)
        acc["A2"].append(r1 * gphi * phi ** (2 * p - 1) * dvol)
        acc["A3"].append(r1 * w)
        acc["A4"].append(r1 * gphi * phi ** (2 * p - 2) * dvol)
        acc["B1"].append(dric * r1 * w / K)
        acc["B2"].append(drm * r3 * w)
        acc["B3"].append(dal * r1 * w / K)
        acc["B4"].append(dtr * r1 * w / K)
        acc["B5"].append(dal * r3 * w)
    return {k: math.fsum(v) for k, v in acc.items()}


def _u_coefficients(p: int, K: float, L: float, C: float) -> tuple[float, ...]:
    kl = K * K + L * L
    return (
        1.0,
        1.0 / (2.0 * K),
        C * p**6 * kl / (K * (p - 1)),
        C * p**2 * kl / (K * L * L),
        C ** ((p + 3) / 2) * float(p) ** (2 * p) * kl / (K * L * L),
    )


def _u_integrands(f: SampleFields, cut: Cutoff, p: int) -> tuple[np.ndarray, ...]:
    w = cut.phi ** (2 * p)
    rm_p1 = f.rm ** (p - 1)
    a2 = f.alpha**2
    return (f.rm**p * w, f.ric**2 * rm_p1 * w, rm_p1 * w, a2 * rm_p1 * w, a2 * w)


def compute_U(f: SampleFields, cut: Cutoff, config: MonitorConfig, K: float, L: float, cell: float) -> float:
    coef = _u_coefficients(config.p, K, L, config.C)
    terms = [float(np.sum(t * f.dV) * cell) for t in _u_integrands(f, cut, config.p)]
    return float(sum(c * t for c, t in zip(coef, terms)))


def compute_U_check(f: SampleFields, cut: Cutoff, config: MonitorConfig, K: float, L: float, cell: float) -> float:
    """U from a single combined integrand, summed with fsum."""
    coef = _u_coefficients(config.p, K, L, config.C)
    dens = sum(c * t for c, t in zip(coef, _u_integrands(f, cut, config.p))) * f.dV * cell
    return math.fsum(dens.reshape(-1).tolist())


# constants ------------------------------------------------------------------------------


@dataclass(frozen=True)
class GronwallConstants:
    a1: float
    a2: float
    a3: float
    K_prime: float
    A: float
    log_B: float

    @property
    def B(self) -> float:
        return math.exp(self.log_B) if self.log_B < 709.0 else math.inf


def gronwall_constants(
    config: MonitorConfig, a: float, b: float, T: float, K: float, L: float
) -> GronwallConstants:
    p, C, theta, rho = config.p, config.C, config.theta, config.rho
    a1 = 1.0 + K + L + K / (p**4 * L * L)
    a2 = L ** (p - 1) / K ** ((p - 3) / 2)
    e = 1.0 / (p - 2)
    a3 = (1.0 + K + L) * max(L, 1.0) ** (p + 2 + e) / min(K, 1.0) ** (0.5 * (p - 2 + e))
    kp = K + abs(a) + abs(b) * L
    A = C * p**6 * (1.0 + (K * K + L * L) / K) * a1
    lead = math.log(C ** ((p + 3) / 2) * float(p) ** (2 * p) * (K * K + L * L) / (theta ** (2 * p) * K))
    first = math.log(a1) + p * math.log(kp) - 2 * p * math.log(rho) + 2 * kp * p * T
    bracket = np.logaddexp(first, math.log(max(a2, 1.0) ** 2 + a3))
    return GronwallConstants(a1, a2, a3, kp, A, lead + float(bracket))


# reports ------------------------------------------------------------------------------


@dataclass
class MonitorReport:
    t: float
    s: float
    quantities: dict
    quantities_check: dict
    U: float
    U_check: float
    a1: float
    a2: float
    a3: float
    K_prime: float
    A_const: float
    B_const: float
    log_B_const: float
    K: float
    L: float
    ball_volume: float
    dU_dt_measured: float = float("nan")
    gronwall_margin: float = float("nan")
    integral_margin: float = float("nan")
    margin_a1: float = float("nan")
    metric_equiv_ok: bool = True
    metric_equiv_range: tuple = (1.0, 1.0)
    lp_ball_integral: float = 0.0
    lp_rhs_log: float = float("nan")
    lp_ok: bool = True
    normalized_lp: float = float("nan")
    b4_b3_ok: bool = True

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["kind"] = "monitor"
        d["metric_equiv_range"] = list(self.metric_equiv_range)
        return d


def measured_bounds(fields: list[SampleFields], config: MonitorConfig) -> tuple[float, float]:
    K = config.K if config.K is not None else max(config.K_floor, max(float(f.ric.max()) for f in fields))
    L = config.L if config.L is not None else max(config.L_floor, max(float(f.alpha.max()) for f in fields))
    return K, L


def generalized_eigenvalues(h: np.ndarray, h0: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(h0)
    root_inv = v @ np.diag(w**-0.5) @ v.T
    return np.linalg.eigvalsh(np.einsum("ab,...bc,cd->...ad", root_inv, h, root_inv))


def check_metric_equivalence(fields: list[SampleFields], h0: np.ndarray, K_prime: float, slack: float = 1e-6) -> list[tuple[bool, float, float]]:
    out = []
    for f in fields:
        ev = generalized_eigenvalues(f.h, h0)
        lo, hi = float(ev.min()), float(ev.max())
        bound = math.exp(2.0 * K_prime * f.s)
        ok = lo >= (1.0 - slack) / bound and hi <= bound * (1.0 + slack)
        out.append((ok, lo, hi))
    return out


def check_gronwall(reports: list[MonitorReport], A: float, B: float) -> list[tuple[float, float, float]]:
    """(dU/ds, differential margin, integral margin) for every report."""
    if len(reports) < 3:
        raise InsufficientSamples("need at least 3 samples for centered differencing")
    s = np.array([r.s for r in reports])
    U = np.array([r.U for r in reports])
    vol = np.array([r.ball_volume for r in reports])
    dU = np.gradient(U, s, edge_order=2)
    diff_margin = A * U + B * vol - dU
    # e^{-As} U(s) <= U(0) + int_0^s B e^{-A sigma} Vol d sigma
    integrand = B * np.exp(-A * s) * vol
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(s))])
    with np.errstate(invalid="ignore"):
        int_margin = U[0] + cum - np.exp(-A * s) * U
    return [(float(a), float(b), float(c)) for a, b, c in zip(dU, diff_margin, int_margin)]


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / math.gamma(d / 2 + 1)


def local_lp_bound(
    fields: list[SampleFields], cut: Cutoff, config: MonitorConfig, consts: GronwallConstants,
    K: float, L: float, T: float, cell: float, real_dim: int,
) -> list[tuple[float, float]]:
    """(lhs, log rhs) of the local L^p bound at every sample."""
    p, C, th, tau = config.p, config.C, config.theta, config.tau
    inner = cut.ball(tau)
    outer = cut.ball(1.0)
    f0 = fields[0]
    init = float(np.sum(np.where(outer, f0.rm**p * f0.dV, 0.0)) * cell)
    vol_T = float(np.sum(np.where(outer, fields[-1].dV, 0.0)) * cell)
    kl = (K * K + L * L) / K
    t1 = C * p**6 / th ** (2 * p) * (1.0 + kl) * consts.a1 * init
    log_coef2 = np.logaddexp(consts.log_B - math.log(consts.A), math.log(C ** ((p + 3) / 2) * float(p) ** (2 * p) / th ** (2 * p) * kl))
    log_t2 = float(log_coef2) + 4 * real_dim * consts.K_prime * T + math.log(max(vol_T, 1e-300))
    with np.errstate(divide="ignore"):
        log_bracket = float(np.logaddexp(math.log(t1) if t1 > 0 else -np.inf, log_t2))
    log_rhs = 2 * p * math.log(tau * th / (tau - 1.0)) + consts.A * T + log_bracket
    out = []
    for f in fields:
        lhs = float(np.sum(np.where(inner, f.rm**p * f.dV, 0.0)) * cell)
        out.append((lhs, log_rhs))
    return out


def monitor_run(
    samples: list[FlowState], params: FlowParams, config: MonitorConfig, fields: list[SampleFields] | None = None
) -> list[MonitorReport]:
    if not samples:
        return []
    grid = samples[0].grid
    fields = fields if fields is not None else [sample_fields(s, params) for s in samples]
    K, L = measured_bounds(fields, config)
    h0 = constant_initial_metric(fields[0])
    cut = cutoff_field(config, grid, h0, K)
    T = fields[-1].s
    consts = gronwall_constants(config, params.a, params.b, T, K, L)
    cell = grid.cell_volume
    outer = cut.ball(1.0)
    inner_exact = unit_ball_volume(grid.real_dim) * (cut.radius / config.tau) ** grid.real_dim
    lam0 = float(np.where(outer, fields[0].rm, 0.0).max())
    d = grid.real_dim
    reports = []
    for state, f in zip(samples, fields):
        q = compute_quantities(f, cut, config, K, cell)
        qc = compute_quantities_bruteforce(f, cut, config, K, cell)
        reports.append(
            MonitorReport(
                t=state.t,
                s=f.s,
                quantities=q,
                quantities_check=qc,
                U=compute_U(f, cut, config, K, L, cell),
                U_check=compute_U_check(f, cut, config, K, L, cell),
                a1=consts.a1,
                a2=consts.a2,
                a3=consts.a3,
                K_prime=consts.K_prime,
                A_const=consts.A,
                B_const=consts.B,
                log_B_const=consts.log_B,
                K=K,
                L=L,
                ball_volume=float(np.sum(np.where(outer, f.dV, 0.0)) * cell),
                b4_b3_ok=q["B4"] <= d * q["B3"] * (1.0 + 1e-9) + 1e-300,
            )
        )
    for r, (ok, lo, hi) in zip(reports, check_metric_equivalence(fields, h0, consts.K_prime, config.equiv_slack)):
        r.metric_equiv_ok = ok
        r.metric_equiv_range = (lo, hi)
    for r, (lhs, log_rhs) in zip(reports, local_lp_bound(fields, cut, config, consts, K, L, T, cell, d)):
        r.lp_ball_integral = lhs
        r.lp_rhs_log = log_rhs
        r.lp_ok = lhs <= 0.0 or math.log(lhs) <= log_rhs
        r.normalized_lp = (lhs / inner_exact) ** (1.0 / config.p) / (lam0 + 1.0 + config.rho**-2)
    if len(reports) >= 3:
        for r, (du, dm, im) in zip(reports, check_gronwall(reports, consts.A, consts.B)):
            r.dU_dt_measured = du
            r.gronwall_margin = dm
            r.integral_margin = im
        s = np.array([r.s for r in reports])
        a1s = np.array([r.quantities["A1"] for r in reports])
        dA1 = np.gradient(a1s, s, edge_order=2)
        p, C = config.p, config.C
        for r, da in zip(reports, dA1):
            q = r.quantities
            rhs = (
                q["B1"] + C * p**4 * K * q["B2"] + q["B3"] + C * p**4 * K * q["A4"]
                + C * p * (1.0 + K + L) * q["A1"]
            )
            r.margin_a1 = float(rhs - da)
    return reports


def calibrate_C(
    samples: list[FlowState], params: FlowParams, config: MonitorConfig, max_doublings: int = 60
) -> float:
    """Smallest power of two >= 1 making every differential margin nonnegative."""
    fields = [sample_fields(s, params) for s in samples]
    C = 1.0
    for _ in range(max_doublings):
        cfg = dataclasses.replace(config, C=C)
        reps = monitor_run(samples, params, cfg, fields=fields)
        if all(r.gronwall_margin >= 0.0 for r in reps if not math.isnan(r.gronwall_margin)):
            return C
        C *= 2.0
    raise RuntimeError("calibration did not converge")
