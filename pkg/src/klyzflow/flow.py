"""Time integration of the kappa-LYZ flow on flat tori.

Two formulations are offered.

``potential``
    omega(t) = omega + ddbar phi, alpha(t) = alpha + ddbar f with

        dphi/dt = log det(omega + ddbar phi) - log_Omega - c_phi + lam * phi + f
        df/dt   = kappa_f * (Lap_{omega(t)} f + tr_{omega(t)} alpha - c_f)

    where ddbar log_Omega = -(lam * omega + alpha) and the constants c_phi, c_f
    only fix the additive gauge of the potentials (they make the flat
    ``alpha = omega`` configuration an exact fixed point).  kappa_f is 1
    unless the generalized-kappa reduction is switched on.

``form_level_n1``
    n = 1 with coefficient fields g (metric) and a (alpha):

        dg/dt = ddbar log g + lam * g + a
        da/dt = kappa * c_heat * Lap0(a / g)

    Lap0 is the flat real Laplacian; c_heat = 1 ("real" normalization, a
    frozen flat metric gives the standard heat equation) or 1/4 ("complex",
    the normalization implied by the potential formulation).
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .grid import Grid

log = logging.getLogger(__name__)

FORMULATIONS = ("potential", "form_level_n1")
INTEGRATORS = ("rk4", "rk4_explicit", "imex1")
TERMINATION_CAUSES = ("reached_T", "positivity_lost", "blowup_threshold", "nan_detected")


class CohomologyMismatch(ValueError):
    pass


class StepRejected(ArithmeticError):
    def __init__(self, cause: str, message: str = ""):
        super().__init__(message or cause)
        self.cause = cause


@dataclass(frozen=True)
class FlowParams:
    kappa: float = 1.0
    lam: float = -1.0
    formulation: str = "form_level_n1"
    a: float | None = None
    b: float | None = None
    time_scale: float = 2.0
    generalized_kappa: bool = False
    freeze_metric: bool = False
    heat_normalization: str = "real"

    def __post_init__(self):
        if not self.kappa > 0.0:
            raise ValueError("kappa must be positive")
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation {self.formulation!r}")
        if self.heat_normalization not in ("real", "complex"):
            raise ValueError("heat_normalization must be 'real' or 'complex'")
        if self.formulation == "potential" and not self.generalized_kappa:
            if (self.kappa, self.lam) != (1.0, -1.0):
                raise ValueError("formulation requires (kappa, lambda) = (1, -1)")
        # real-system dictionary: a = 2 lam, b = 2 in real time s = t / time_scale
        if self.a is None:
            object.__setattr__(self, "a", 2.0 * self.lam)
        if self.b is None:
            object.__setattr__(self, "b", 2.0)

    @property
    def c_heat(self) -> float:
        return 1.0 if self.heat_normalization == "real" else 0.25

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class FlowState:
    grid: Grid
    t: float
    background: np.ndarray
    background_alpha: np.ndarray
    phi: np.ndarray | None = None
    f: np.ndarray | None = None
    g_coeff: np.ndarray | None = None
    alpha_coeff: np.ndarray | None = None
    log_omega: np.ndarray | None = None
    gauge: tuple[float, float] = (0.0, 0.0)

    @property
    def formulation(self) -> str:
        return "potential" if self.phi is not None else "form_level_n1"

    def fields(self) -> dict[str, np.ndarray]:
        if self.formulation == "potential":
            return {"phi": self.phi, "f": self.f}
        return {"g": self.g_coeff, "alpha": self.alpha_coeff}

    def with_fields(self, t: float, values: dict[str, np.ndarray]) -> "FlowState":
        if self.formulation == "potential":
            return dataclasses.replace(self, t=t, phi=values["phi"], f=values["f"])
        return dataclasses.replace(self, t=t, g_coeff=values["g"], alpha_coeff=values["alpha"])

    def metric(self) -> np.ndarray:
        if self.formulation == "potential":
            return geo.metric_from_potential(self.grid, self.background, self.phi)
        g = geo.scalar_metric(self.grid, self.g_coeff)
        geo.check_positive(g)
        return g

    def alpha(self) -> np.ndarray:
        if self.formulation == "potential":
            return geo.hermitize(self.background_alpha + self.grid.ddbar(self.f))
        return geo.scalar_metric(self.grid, self.alpha_coeff)

    def bundle(self) -> geo.CurvatureBundle:
        return geo.curvature_bundle(self.grid, self.metric(), self.alpha())


def solve_background_volume(
    grid: Grid, omega: np.ndarray, alpha: np.ndarray, lam: float = -1.0, tol: float = 1e-9
) -> np.ndarray:
    """Mean-zero log_Omega with ddbar log_Omega = -(lam * omega + alpha).

    For lam = -1 this is ddbar log_Omega = omega - alpha.  On the torus the
    right-hand side is ddbar-exact iff its mean vanishes (c_1 = 0).
    """
    rhs = -(lam * omega + alpha)
    scale = max(1.0, float(np.abs(omega).max()), float(np.abs(alpha).max()))
    means = grid.mean(rhs)
    if np.abs(means).max() > tol * scale:
        raise CohomologyMismatch(
            f"class of lam*omega + alpha is not zero: means {np.round(means, 12).tolist()}"
        )
    trace = np.trace(rhs, axis1=-2, axis2=-1).real
    sym = np.trace(grid.ddbar_symbols, axis1=-2, axis2=-1).real
    t_hat = grid.fft(trace)
    safe = np.where(sym == 0.0, 1.0, sym)
    psi_hat = np.where(sym == 0.0, 0.0, t_hat / safe)
    psi = grid.ifft(psi_hat).real
    resid = np.abs(grid.ddbar(psi) - rhs).max()
    if resid > 1e-6 * scale:
        raise CohomologyMismatch(f"omega - alpha is not ddbar-exact (residual {resid:.2e})")
    return psi - grid.mean(psi)


def make_potential_state(grid: Grid, omega: np.ndarray, alpha: np.ndarray, params: FlowParams) -> FlowState:
    omega = geo.hermitize(np.asarray(omega, dtype=complex))
    alpha = geo.hermitize(np.asarray(alpha, dtype=complex))
    geo.check_positive(omega)
    log_omega = solve_background_volume(grid, omega, alpha, params.lam)
    c_phi = float(grid.mean(geo.log_det(omega) - log_omega))
    dens = geo.det(omega)
    c_f = float(np.sum(geo.trace_form(omega, alpha) * dens) / np.sum(dens))
    zero = np.zeros(grid.shape)
    return FlowState(
        grid=grid,
        t=0.0,
        background=omega,
        background_alpha=alpha,
        phi=zero,
        f=zero.copy(),
        log_omega=log_omega,
        gauge=(c_phi, c_f),
    )


def make_form_state(grid: Grid, g: np.ndarray, a: np.ndarray) -> FlowState:
    if grid.n_complex != 1:
        raise ValueError("form-level formulation is only offered for n = 1")
    g = np.asarray(g, dtype=float).copy()
    a = np.asarray(a, dtype=float).copy()
    geo.check_positive(geo.scalar_metric(grid, g))
    return FlowState(
        grid=grid,
        t=0.0,
        background=geo.scalar_metric(grid, g),
        background_alpha=geo.scalar_metric(grid, a),
        g_coeff=g,
        alpha_coeff=a,
    )


# right-hand sides ------------------------------------------------------------


def rhs_potential(state: FlowState, params: FlowParams) -> dict[str, np.ndarray]:
    grid = state.grid
    g = geo.metric_from_potential(grid, state.background, state.phi)
    c_phi, c_f = state.gauge
    dphi = geo.log_det(g) - state.log_omega - c_phi + params.lam * state.phi + state.f
    kappa_f = params.kappa if params.generalized_kappa else 1.0
    df = kappa_f * (
        geo.laplacian(grid, g, state.f) + geo.trace_form(g, state.background_alpha) - c_f
    )
    return {"phi": dphi, "f": df}


def rhs_form_level_n1(state: FlowState, params: FlowParams) -> dict[str, np.ndarray]:
    grid = state.grid
    g, a = state.g_coeff, state.alpha_coeff
    if not np.all(np.isfinite(g)) or g.min() <= geo.POSITIVITY_RTOL * abs(g.mean()):
        raise geo.PositivityLost("form-level metric coefficient not positive")
    if params.freeze_metric:
        dg = np.zeros_like(g)
    else:
        dg = 0.25 * grid.real_laplacian(np.log(g)) + params.lam * g + a
    da = params.kappa * params.c_heat * grid.real_laplacian(a / g)
    return {"g": dg, "alpha": da}


def rhs(state: FlowState, params: FlowParams) -> dict[str, np.ndarray]:
    if state.formulation != params.formulation:
        raise ValueError("state and params disagree on the formulation")
    if params.formulation == "potential":
        return rhs_potential(state, params)
    return rhs_form_level_n1(state, params)


# linear parts for the integrating factor -----------------------------------------


def linear_symbols(state: FlowState, params: FlowParams) -> dict[str, np.ndarray]:
    """Constant-coefficient diffusion symbols frozen at the current state."""
    grid = state.grid
    lap0 = grid.real_laplacian_symbol
    if params.formulation == "form_level_n1":
        gbar = float(np.mean(state.g_coeff))
        sym_g = np.zeros_like(lap0) if params.freeze_metric else lap0 / (4.0 * gbar)
        return {"g": sym_g, "alpha": params.kappa * params.c_heat * lap0 / gbar}
    gbar = np.linalg.inv(grid.mean(state.background))
    # Lap_{gbar} symbol = tr(gbar^{-1} S)
    sym = np.einsum("ij,...ji->...", gbar, grid.ddbar_symbols).real
    kappa_f = params.kappa if params.generalized_kappa else 1.0
    return {"phi": sym, "f": kappa_f * sym}


def cfl_limit(state: FlowState, params: FlowParams, c_cfl: float = 0.2) -> float:
    """dt <= c_cfl * h^2 / (4 sup|g^{-1}|) for the explicit integrator."""
    h = min(state.grid.spacing)
    g_inv = geo.inverse(state.metric())
    sup = float(np.abs(np.linalg.eigvalsh(g_inv)).max())
    speed = max(1.0, params.kappa * params.c_heat * 4.0) if params.formulation == "form_level_n1" else 1.0
    return c_cfl * h * h / (4.0 * sup * speed)


def _check_finite(values: dict[str, np.ndarray]) -> None:
    for k, v in values.items():
        if not np.all(np.isfinite(v)):
            raise StepRejected("nan_detected", f"non-finite values in {k}")


def _apply(grid: Grid, sym: np.ndarray, u: np.ndarray, scale: float) -> np.ndarray:
    return grid.ifft(grid.fft(u) * np.exp(sym * scale)).real


def step(state: FlowState, params: FlowParams, dt: float, method: str = "rk4") -> FlowState:
    """Advance one step; raises StepRejected on positivity loss or non-finite values."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    try:
        out = _step(state, params, dt, method)
    except geo.PositivityLost as exc:
        raise StepRejected("positivity_lost", str(exc)) from exc
    except FloatingPointError as exc:
        raise StepRejected("nan_detected", str(exc)) from exc
    _check_finite(out)
    new = state.with_fields(state.t + dt, out)
    try:
        new.metric()
    except geo.PositivityLost as exc:
        raise StepRejected("positivity_lost", str(exc)) from exc
    return new


def _step(state: FlowState, params: FlowParams, dt: float, method: str) -> dict[str, np.ndarray]:
    grid = state.grid
    u = state.fields()

    def F(s: FlowState) -> dict[str, np.ndarray]:
        r = rhs(s, params)
        _check_finite(r)
        return r

    def at(t: float, vals: dict[str, np.ndarray]) -> FlowState:
        return state.with_fields(t, vals)

    if method == "rk4_explicit":
        k1 = F(state)
        k2 = F(at(state.t + dt / 2, {k: u[k] + dt / 2 * k1[k] for k in u}))
        k3 = F(at(state.t + dt / 2, {k: u[k] + dt / 2 * k2[k] for k in u}))
        k4 = F(at(state.t + dt, {k: u[k] + dt * k3[k] for k in u}))
        return {k: u[k] + dt / 6 * (k1[k] + 2 * k2[k] + 2 * k3[k] + k4[k]) for k in u}

    syms = linear_symbols(state, params)

    def lin(vals, key):
        return grid.ifft(grid.fft(vals[key]) * syms[key]).real

    def N(s: FlowState) -> dict[str, np.ndarray]:
        r = F(s)
        vals = s.fields()
        return {k: r[k] - lin(vals, k) for k in r}

    if method == "imex1":
        n1 = N(state)
        return {
            k: grid.ifft(grid.fft(u[k] + dt * n1[k]) / (1.0 - dt * syms[k])).real for k in u
        }
    if method != "rk4":
        raise ValueError(f"unknown integrator {method!r}")

    # Lawson integrating-factor form of classical RK4.
    def E(v, k, frac):
        return _apply(grid, syms[k], v, frac * dt)

    k1 = N(state)
    u2 = {k: E(u[k] + dt / 2 * k1[k], k, 0.5) for k in u}
    k2 = N(at(state.t + dt / 2, u2))
    u3 = {k: E(u[k], k, 0.5) + dt / 2 * k2[k] for k in u}
    k3 = N(at(state.t + dt / 2, u3))
    u4 = {k: E(u[k], k, 1.0) + dt * E(k3[k], k, 0.5) for k in u}
    k4 = N(at(state.t + dt, u4))
    return {
        k: E(u[k], k, 1.0)
        + dt / 6 * (E(k1[k], k, 1.0) + 2 * E(k2[k] + k3[k], k, 0.5) + k4[k])
        for k in u
    }


# run loop ------------------------------------------------------------------


@dataclass
class RunRecord:
    times: list[float] = field(default_factory=list)
    sup_rm: list[float] = field(default_factory=list)
    sup_ric: list[float] = field(default_factory=list)
    sup_alpha: list[float] = field(default_factory=list)
    sup_scalar: list[float] = field(default_factory=list)
    area: list[float] = field(default_factory=list)
    cause: str = "reached_T"
    message: str = ""
    ceiling: float = float("inf")
    samples: list[FlowState] = field(default_factory=list)
    steps_taken: int = 0
    rejections: int = 0

    def rows(self) -> list[dict]:
        return [
            {
                "t": self.times[i],
                "sup_rm": self.sup_rm[i],
                "sup_ric": self.sup_ric[i],
                "sup_alpha": self.sup_alpha[i],
                "sup_scalar": self.sup_scalar[i],
                "area": self.area[i],
            }
            for i in range(len(self.times))
        ]

    def summary(self) -> dict:
        return {
            "cause": self.cause,
            "message": self.message,
            "n_samples": len(self.times),
            "t_final": self.times[-1] if self.times else 0.0,
            "ceiling": self.ceiling,
            "steps_taken": self.steps_taken,
            "rejections": self.rejections,
        }


def sample_quantities(state: FlowState) -> dict:
    b = state.bundle()
    return {
        "t": state.t,
        "sup_rm": float(b.norm_rm.max()),
        "sup_ric": float(b.norm_ric.max()),
        "sup_alpha": float(b.norm_alpha.max()),
        "sup_scalar": float(np.abs(b.scalar).max()),
        "area": state.grid.integrate(b.volume_density),
    }


def run(
    state: FlowState,
    params: FlowParams,
    t_end: float,
    dt: float,
    *,
    sample_every: float | None = None,
    method: str = "rk4",
    ceiling: float | None = None,
    ceiling_factor: float = 1e6,
    dt_min: float | None = None,
    keep_samples: bool = True,
    on_sample=None,
) -> RunRecord:
    """Integrate to t_end, sampling at the given cadence.

    The blow-up ceiling defaults to ``ceiling_factor * (initial sup|Rm| + 1)``.
    A rejected step is retried at half the step down to ``dt_min``.
    """
    if not t_end > 0.0:
        raise ValueError("t_end must be positive")
    sample_every = dt if sample_every is None else sample_every
    dt_min = dt / 2**10 if dt_min is None else dt_min
    rec = RunRecord()

    def record(s: FlowState) -> bool:
        q = sample_quantities(s)
        rec.times.append(q["t"])
        for k in ("sup_rm", "sup_ric", "sup_alpha", "sup_scalar", "area"):
            getattr(rec, k).append(q[k])
        if keep_samples:
            rec.samples.append(s)
        if on_sample is not None:
            on_sample(s, q)
        if not all(np.isfinite(v) for v in q.values()):
            rec.cause = "nan_detected"
            return False
        if q["sup_rm"] > rec.ceiling:
            rec.cause = "blowup_threshold"
            rec.message = f"sup|Rm| = {q['sup_rm']:.6g} exceeds ceiling {rec.ceiling:.6g}"
            return False
        return True

    q0 = sample_quantities(state)
    rec.ceiling = float(ceiling) if ceiling is not None else ceiling_factor * (q0["sup_rm"] + 1.0)
    if not record(state):
        return rec
    n_samples = int(round(t_end / sample_every))
    cur = state
    for i in range(1, n_samples + 1):
        t_target = min(i * sample_every, t_end) if i < n_samples else t_end
        h = dt
        while cur.t < t_target - 1e-12 * max(1.0, t_target):
            h_try = min(h, t_target - cur.t)
            try:
                cur = step(cur, params, h_try, method)
                rec.steps_taken += 1
            except StepRejected as exc:
                rec.rejections += 1
                h = h_try / 2
                log.debug("step rejected at t=%g (%s); retry dt=%g", cur.t, exc.cause, h)
                if h < dt_min:
                    rec.cause = exc.cause
                    rec.message = str(exc)
                    return rec
        cur = dataclasses.replace(cur, t=t_target)
        if not record(cur):
            return rec
    return rec


def field_drift(a: FlowState, b: FlowState) -> float:
    fa, fb = a.fields(), b.fields()
    return max(float(np.abs(fa[k] - fb[k]).max()) for k in fa)
