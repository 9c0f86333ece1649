"""Audits of the real-picture evolution identities along a run.

Everything here is recomputed on a separate real-coordinate path: the
Riemannian metric ``h = 2 Re g`` and the symmetric tensor ``2 Re alpha``,
with Christoffel symbols, curvature and covariant derivatives assembled from
real spectral derivatives.  Nothing is borrowed from the complex code in
``geometry`` except the grid.

The real system runs in its own time ``s = t / time_scale`` (time_scale = 2 for
the documented dictionary), so ``d/ds = time_scale * d/dt``.

Exact identities (volume, scalar, Ricci) are compared against centered time
differences.  Schematic ones are reported as one-sided bounds with a fitted
constant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import flow
from .flow import FlowParams, FlowState
from .grid import Grid


class AuditError(ValueError):
    pass


# real tensor calculus ---------------------------------------------------------


def real_metric(state: FlowState) -> tuple[np.ndarray, np.ndarray]:
    """(h, alpha_r) as (*shape, d, d) real fields, d = 2n."""
    grid = state.grid
    n = grid.n_complex
    g = state.metric()
    a = state.alpha()
    return _realify(g, n), _realify(a, n)


def _realify(m: np.ndarray, n: int) -> np.ndarray:
    # x_k, y_k ordering; h(x_k, x_l) = h(y_k, y_l) = 2 Re G_kl, h(x_k, y_l) = 2 Im G_kl
    re, im = 2.0 * m.real, 2.0 * m.imag
    out = np.empty(m.shape[:-2] + (2 * n, 2 * n))
    out[..., 0::2, 0::2] = re
    out[..., 1::2, 1::2] = re
    out[..., 0::2, 1::2] = im
    out[..., 1::2, 0::2] = -im
    return out


def _grad(grid: Grid, t: np.ndarray) -> np.ndarray:
    """Partial derivatives of every component; derivative index trails."""
    return grid.gradient(t)


def covd(grid: Grid, t: np.ndarray, gamma: np.ndarray, rank: int) -> np.ndarray:
    """nabla_c T for a covariant tensor of the given rank; c trails."""
    out = _grad(grid, t)
    for slot in range(rank):
        axis = t.ndim - rank + slot
        moved = np.moveaxis(t, axis, -1)  # [..., rest, p]
        gam = gamma.reshape(gamma.shape[: grid.real_dim] + (1,) * (rank - 1) + gamma.shape[-3:])
        # Gamma^p_{c a} T_{..p..}
        corr = np.einsum("...pca,...p->...ac", gam, moved)
        corr = np.moveaxis(corr, -2, axis)
        out = out - corr
    return out


@dataclass
class RealGeometry:
    grid: Grid
    h: np.ndarray
    hinv: np.ndarray
    gamma: np.ndarray
    riem: np.ndarray  # R_{ijkl} = h_{lm} R^m_{ijk}
    ric: np.ndarray
    scalar: np.ndarray
    alpha: np.ndarray

    @property
    def volume(self) -> np.ndarray:
        return np.sqrt(np.linalg.det(self.h))

    def raise2(self, t: np.ndarray) -> np.ndarray:
        return np.einsum("...ia,...jb,...ab->...ij", self.hinv, self.hinv, t)

    def norm2(self, t: np.ndarray) -> np.ndarray:
        r = t.ndim - self.grid.real_dim
        tt = t
        for slot in range(r):
            axis = self.grid.real_dim + slot
            moved = np.moveaxis(tt, axis, -1)
            moved = np.einsum("...ab,...b->...a", self.hinv.reshape(self.hinv.shape[: self.grid.real_dim] + (1,) * (r - 1) + self.hinv.shape[-2:]), moved)
            tt = np.moveaxis(moved, -1, axis)
        return np.sum(tt * t, axis=tuple(range(self.grid.real_dim, t.ndim)))

    def trace(self, t: np.ndarray) -> np.ndarray:
        return np.einsum("...ab,...ab->...", self.hinv, t)

    def grad(self, f: np.ndarray) -> np.ndarray:
        return _grad(self.grid, f)

    def hess(self, f: np.ndarray) -> np.ndarray:
        return covd(self.grid, self.grad(f), self.gamma, 1)

    def lap(self, f: np.ndarray) -> np.ndarray:
        return self.trace(self.hess(f))

    def nabla(self, t: np.ndarray, rank: int) -> np.ndarray:
        return covd(self.grid, t, self.gamma, rank)

    def rough_lap2(self, t: np.ndarray) -> np.ndarray:
        """(Delta T)_{ij} for a 2-tensor and the second derivative field [i, j, c, d] = nabla_d nabla_c T_ij."""
        dd = self.nabla(self.nabla(t, 2), 3)
        return np.einsum("...cd,...ijcd->...ij", self.hinv, dd), dd


def real_geometry(grid: Grid, h: np.ndarray, alpha: np.ndarray) -> RealGeometry:
    hinv = np.linalg.inv(h)
    dh = _grad(grid, h)  # [..., i, j, c] = d_c h_ij
    # Gamma^k_{ij} = 1/2 h^{kl} (d_i h_jl + d_j h_il - d_l h_ij)
    lower = 0.5 * (
        np.einsum("...jli->...ijl", dh) + np.einsum("...ilj->...ijl", dh) - dh
    )
    gamma = np.einsum("...kl,...ijl->...kij", hinv, lower)
    dgam = _grad(grid, gamma)  # [..., l, j, k, i] = d_i Gamma^l_jk
    # R^l_{ijk} = d_i G^l_jk - d_j G^l_ik + G^l_ip G^p_jk - G^l_jp G^p_ik
    r_up = (
        np.einsum("...ljki->...lijk", dgam)
        - np.einsum("...likj->...lijk", dgam)
        + np.einsum("...lip,...pjk->...lijk", gamma, gamma)
        - np.einsum("...ljp,...pik->...lijk", gamma, gamma)
    )
    ric = np.einsum("...iijk->...jk", r_up)
    riem = np.einsum("...lm,...mijk->...ijkl", h, r_up)
    scalar = np.einsum("...ab,...ab->...", hinv, ric)
    return RealGeometry(grid, h, hinv, gamma, riem, ric, scalar, alpha)


def real_geometry_of(state: FlowState) -> RealGeometry:
    h, a = real_metric(state)
    return real_geometry(state.grid, h, a)


def real_norms(rg: RealGeometry) -> dict[str, np.ndarray]:
    return {
        "rm": np.sqrt(np.maximum(rg.norm2(rg.riem), 0.0)),
        "ric": np.sqrt(np.maximum(rg.norm2(rg.ric), 0.0)),
        "alpha": np.sqrt(np.maximum(rg.norm2(rg.alpha), 0.0)),
        "scalar": rg.scalar,
    }


# samples and reports -----------------------------------------------------------


@dataclass
class AuditSample:
    prev: FlowState
    cur: FlowState
    nxt: FlowState
    params: FlowParams

    def __post_init__(self):
        if self.prev.grid != self.cur.grid or self.nxt.grid != self.cur.grid:
            raise AuditError("snapshots live on different grids")
        d1 = self.cur.t - self.prev.t
        d2 = self.nxt.t - self.cur.t
        if not d1 > 0 or abs(d1 - d2) > 1e-9 * max(d1, 1e-300):
            raise AuditError("snapshots must be uniformly spaced in time")
        self._geo = None

    @property
    def dt(self) -> float:
        return self.cur.t - self.prev.t

    @property
    def ds(self) -> float:
        return self.dt / self.params.time_scale

    @property
    def geo(self) -> tuple[RealGeometry, RealGeometry, RealGeometry]:
        if self._geo is None:
            self._geo = tuple(real_geometry_of(s) for s in (self.prev, self.cur, self.nxt))
        return self._geo

    def d_ds(self, fn) -> np.ndarray:
        p, _, n = self.geo
        return (fn(n) - fn(p)) / (2.0 * self.ds)

    @property
    def heat_speed(self) -> float:
        """Speed of the alpha heat flow in real time."""
        p = self.params
        return 2.0 * p.time_scale * p.kappa * p.c_heat

    @property
    def a_eff(self) -> float:
        return 0.0 if self.params.freeze_metric else self.params.a

    @property
    def b_eff(self) -> float:
        return 0.0 if self.params.freeze_metric else self.params.b


def _stats(grid: Grid, r: np.ndarray) -> dict[str, float]:
    r = np.abs(r)
    return {
        "linf": float(r.max()),
        "l2": float(np.sqrt(grid.integrate(r**2) / grid.total_volume)),
    }


def _require_form_level(sample: AuditSample):
    if sample.params.formulation != "form_level_n1":
        raise AuditError("real-picture identities are audited on form_level_n1 runs")


def audit_volume_evolution(sample: AuditSample) -> np.ndarray:
    """d_s dV - (-R + a d / 2 + (b / 2) tr alpha) dV."""
    _require_form_level(sample)
    rg = sample.geo[1]
    d = sample.cur.grid.real_dim
    lhs = sample.d_ds(lambda g: g.volume)
    rhs = (-rg.scalar + sample.a_eff * d / 2 + sample.b_eff / 2 * rg.trace(rg.alpha)) * rg.volume
    if sample.params.freeze_metric:
        rhs = np.zeros_like(rhs)
    return lhs - rhs


def audit_scalar_curvature_evolution(sample: AuditSample) -> np.ndarray:
    """(d_s - Delta) R - [2|Ric|^2 - b Delta tr alpha - a R - b Ric.alpha + b div div alpha]."""
    _require_form_level(sample)
    rg = sample.geo[1]
    a, b = sample.a_eff, sample.b_eff
    lhs = sample.d_ds(lambda g: g.scalar) - rg.lap(rg.scalar)
    _, dd = rg.rough_lap2(rg.alpha)
    divdiv = np.einsum("...ia,...jb,...jiba->...", rg.hinv, rg.hinv, dd)
    rhs = (
        2.0 * rg.norm2(rg.ric)
        - b * rg.lap(rg.trace(rg.alpha))
        - a * rg.scalar
        - b * np.einsum("...ij,...ij->...", rg.raise2(rg.ric), rg.alpha)
        + b * divdiv
    )
    if sample.params.freeze_metric:
        rhs = -rg.lap(rg.scalar)
        lhs = sample.d_ds(lambda g: g.scalar) - rhs
        return lhs
    return lhs - rhs


def ricci_rhs(rg: RealGeometry, b: float) -> np.ndarray:
    """Right side of the Ricci evolution without the Laplacian term."""
    ric_up = rg.raise2(rg.ric)
    quad = -2.0 * np.einsum("...ik,...kl,...lj->...ij", rg.ric, rg.hinv, rg.ric)
    quad = quad + 2.0 * np.einsum("...pijq,...pq->...ij", rg.riem, ric_up)
    lap_a, dd = rg.rough_lap2(rg.alpha)
    # nabla^k nabla_i alpha_jk = h^{kd} nabla_d nabla_i alpha_jk
    mixed = np.einsum("...kd,...jkid->...ij", rg.hinv, dd)
    hess_tr = rg.hess(rg.trace(rg.alpha))
    return quad + 0.5 * b * (-lap_a + mixed + np.swapaxes(mixed, -1, -2) - hess_tr)


def audit_ricci_evolution(sample: AuditSample) -> np.ndarray:
    """Pointwise |(d_s - Delta) Ric - rhs|_h."""
    _require_form_level(sample)
    rg = sample.geo[1]
    lap_ric, _ = rg.rough_lap2(rg.ric)
    lhs = sample.d_ds(lambda g: g.ric) - lap_ric
    if sample.params.freeze_metric:
        res = sample.d_ds(lambda g: g.ric)
    else:
        res = lhs - ricci_rhs(rg, sample.b_eff)
    return np.sqrt(np.maximum(rg.norm2(res), 0.0))


def _fit(x: np.ndarray, majorant: np.ndarray, floor_frac: float) -> float:
    m_max = float(np.max(majorant))
    if m_max <= 0.0:
        return 0.0 if float(np.max(x)) <= 1e-12 else float("inf")
    mask = majorant >= floor_frac * m_max
    ratio = np.where(mask, np.maximum(x, 0.0) / np.where(mask, majorant, 1.0), 0.0)
    return float(ratio.max())


def audit_alpha_norm_evolution(sample: AuditSample, floor_frac: float = 1e-3) -> dict:
    """D = (d_s - mu Delta)|alpha|^2 + 2 mu |nabla alpha|^2 + 2 a |alpha|^2 against C(|Rm||a|^2 + |Ric||a|^2 + |a|^3)."""
    _require_form_level(sample)
    rg = sample.geo[1]
    mu = sample.heat_speed
    a2 = rg.norm2(rg.alpha)
    d = (
        sample.d_ds(lambda g: g.norm2(g.alpha))
        - mu * rg.lap(a2)
        + 2.0 * mu * rg.norm2(rg.nabla(rg.alpha, 2))
        + 2.0 * sample.a_eff * a2
    )
    nr = real_norms(rg)
    na = np.sqrt(np.maximum(a2, 0.0))
    maj = nr["rm"] * a2 + nr["ric"] * a2 + na**3
    return {"D": d, "majorant": maj, "C_fit": _fit(np.abs(d), maj, floor_frac), **_stats(rg.grid, d)}


def audit_schematic_bounds(sample: AuditSample, L: float | None = None, floor_frac: float = 1e-3) -> dict:
    """Fitted constants for the Rm gradient bound and the u <= C f u inequality."""
    _require_form_level(sample)
    rg = sample.geo[1]
    mu = sample.heat_speed
    rm2 = rg.norm2(rg.riem)
    nr = real_norms(rg)
    box_rm2 = sample.d_ds(lambda g: g.norm2(g.riem)) - rg.lap(rm2)
    grad_rm2 = rg.norm2(rg.nabla(rg.riem, 4))
    x = grad_rm2 + 0.5 * box_rm2
    _, dd = rg.rough_lap2(rg.alpha)
    hess_a = np.sqrt(np.maximum(rg.norm2(dd), 0.0))
    maj = nr["rm"] ** 3 + nr["rm"] ** 2 + nr["rm"] ** 2 * nr["alpha"] + nr["rm"] * hess_a
    c_rm = _fit(x, maj, floor_frac)

    a2 = rg.norm2(rg.alpha)
    u = rm2 + a2
    L = float(nr["alpha"].max()) if L is None else L
    f = 1.0 + L + L * L + nr["rm"]
    box_u = box_rm2 + sample.d_ds(lambda g: g.norm2(g.alpha)) - mu * rg.lap(a2)
    c_u = _fit(box_u, f * u, floor_frac)
    return {
        "C_fit_rm": c_rm,
        "C_fit_u": c_u,
        "rm_lhs_max": float(x.max()),
        "u_box_max": float(box_u.max()),
    }


def audit_potential_identity(sample: AuditSample) -> np.ndarray:
    """Metric form of the potential reduction: d_t omega - (-Ric + lam omega + alpha)."""
    from . import geometry as geo

    if sample.params.formulation != "potential":
        raise AuditError("potential identity needs a potential-formulation run")
    grid = sample.cur.grid
    g = sample.cur.metric()
    lhs = (sample.nxt.metric() - sample.prev.metric()) / (2.0 * sample.dt)
    rhs = -geo.ricci_form(grid, g) + sample.params.lam * g + sample.cur.alpha()
    return np.abs(lhs - rhs).max(axis=(-2, -1))


# reports -------------------------------------------------------------------------


@dataclass
class AuditReport:
    t: float
    h: float
    dt: float
    residuals: dict[str, dict[str, float]] = field(default_factory=dict)
    constants: dict[str, float] = field(default_factory=dict)
    orders: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": "audit",
            "t": self.t,
            "h": self.h,
            "dt": self.dt,
            "residuals": self.residuals,
            "constants": self.constants,
            "orders": self.orders,
        }


def audit_sample(sample: AuditSample) -> AuditReport:
    grid = sample.cur.grid
    rep = AuditReport(t=sample.cur.t, h=min(grid.spacing), dt=sample.dt)
    if sample.params.formulation == "potential":
        rep.residuals["potential"] = _stats(grid, audit_potential_identity(sample))
        return rep
    rep.residuals["volume"] = _stats(grid, audit_volume_evolution(sample))
    rep.residuals["scalar"] = _stats(grid, audit_scalar_curvature_evolution(sample))
    rep.residuals["ricci"] = _stats(grid, audit_ricci_evolution(sample))
    al = audit_alpha_norm_evolution(sample)
    rep.residuals["alpha_norm"] = {"linf": al["linf"], "l2": al["l2"]}
    rep.constants["alpha_norm"] = al["C_fit"]
    sch = audit_schematic_bounds(sample)
    rep.constants["rm_gradient"] = sch["C_fit_rm"]
    rep.constants["u_bound"] = sch["C_fit_u"]
    return rep


def audit_series(samples: list[FlowState], params: FlowParams) -> list[AuditReport]:
    """Audit every interior snapshot of a uniformly sampled series."""
    out = []
    for i in range(1, len(samples) - 1):
        s = AuditSample(samples[i - 1], samples[i], samples[i + 1], params)
        out.append(audit_sample(s))
    return out


def snapshots_around(
    state: FlowState, params: FlowParams, t_center: float, delta: float, dt_factor: int = 10
) -> AuditSample:
    """Integrate to t_center + delta and keep the three snapshots spaced by delta."""
    t0 = t_center - delta
    if t0 < state.t - 1e-12:
        raise AuditError("t_center - delta precedes the initial state")
    dt = delta / dt_factor
    cur = state
    if t0 > state.t + 1e-12:
        span = t0 - state.t
        cur = _advance(state, params, span, dt)
    keep = [cur]
    for _ in range(2):
        cur = _advance(cur, params, delta, dt)
        keep.append(cur)
    return AuditSample(keep[0], keep[1], keep[2], params)


def _advance(state: FlowState, params: FlowParams, span: float, dt: float) -> FlowState:
    steps = max(1, int(round(span / dt)))
    h = span / steps
    cur = state
    for _ in range(steps):
        cur = flow.step(cur, params, h)
    return cur


def convergence_order(deltas: list[float], residuals: list[float]) -> float:
    """Least-squares slope of log(residual) against log(delta)."""
    if len(deltas) < 3:
        raise AuditError("order estimates need at least 3 ladder rungs")
    x = np.log(np.asarray(deltas))
    y = np.log(np.maximum(np.asarray(residuals), 1e-300))
    return float(np.polyfit(x, y, 1)[0])


def refinement_ladder(
    state: FlowState,
    params: FlowParams,
    t_center: float,
    deltas=(0.01, 0.005, 0.0025),
    dt_factor: int = 10,
) -> dict:
    res = {"volume": [], "scalar": [], "ricci": []}
    for d in deltas:
        s = snapshots_around(state, params, t_center, d, dt_factor)
        res["volume"].append(float(np.abs(audit_volume_evolution(s)).max()))
        res["scalar"].append(float(np.abs(audit_scalar_curvature_evolution(s)).max()))
        res["ricci"].append(float(np.abs(audit_ricci_evolution(s)).max()))
    orders = {k: convergence_order(list(deltas), v) for k, v in res.items()}
    return {"deltas": list(deltas), "residuals": res, "orders": orders}
