"""Named initial-data presets.

All presets start from a flat metric so the monitor can use the closed-form
torus distance.  Perturbations go into alpha only (form level) or into the
dd-bar exact part of alpha (potential level), which keeps the cohomology
class fixed.
"""
from __future__ import annotations

import itertools

import numpy as np

from . import flow
from . import geometry as geo
from .grid import Grid

SCENARIOS = ("potential_torus_n1", "potential_torus_n2", "form_level_n1")
PRESETS = ("flat_fixed_point", "exponential", "frozen_heat", "perturbed")


class PresetError(ValueError):
    pass


def random_field(grid: Grid, seed: int, modes: int = 2) -> np.ndarray:
    """Band-limited real trig polynomial, mean zero, sup-normalized to 1."""
    rng = np.random.default_rng(seed)
    coords = grid.mesh()
    out = np.zeros(grid.shape)
    rng_range = range(-modes, modes + 1)
    for m in itertools.product(rng_range, repeat=grid.real_dim):
        if not any(m):
            continue
        # keep one of each +/- pair
        first = next(c for c in m if c != 0)
        if first < 0:
            continue
        phase = sum(2.0 * np.pi * mi * x / p for mi, x, p in zip(m, coords, grid.periods))
        c, s = rng.standard_normal(2) / (1.0 + sum(mi * mi for mi in m))
        out += c * np.cos(phase) + s * np.sin(phase)
    peak = np.abs(out).max()
    return out / peak if peak > 0 else out


def default_params(scenario: str, preset: str, flow_cfg: dict | None = None) -> flow.FlowParams:
    cfg = dict(flow_cfg or {})
    formulation = "form_level_n1" if scenario == "form_level_n1" else "potential"
    cfg.setdefault("formulation", formulation)
    if preset == "exponential":
        cfg.setdefault("lam", 0.5)
    if preset == "frozen_heat":
        cfg.setdefault("freeze_metric", True)
    return flow.FlowParams(**cfg)


def initial_state(
    scenario: str,
    preset: str,
    grid: Grid,
    params: flow.FlowParams,
    *,
    seed: int = 0,
    amplitude: float = 1e-2,
    modes: int = 2,
    metric_scale: float = 1.0,
) -> flow.FlowState:
    if scenario not in SCENARIOS:
        raise PresetError(f"unknown scenario {scenario!r}")
    if preset not in PRESETS:
        raise PresetError(f"unknown preset {preset!r}")
    want_n = 2 if scenario == "potential_torus_n2" else 1
    if grid.n_complex != want_n:
        raise PresetError(f"scenario {scenario} needs n_complex = {want_n}")

    if scenario == "form_level_n1":
        g0 = np.full(grid.shape, metric_scale)
        if preset == "flat_fixed_point":
            a0 = -params.lam * g0
        elif preset == "exponential":
            a0 = np.zeros(grid.shape)
        elif preset == "frozen_heat":
            a0 = 1.0 + amplitude * random_field(grid, seed, modes)
        else:
            a0 = -params.lam * g0 + amplitude * random_field(grid, seed, modes)
        return flow.make_form_state(grid, g0, a0)

    if preset in ("exponential", "frozen_heat"):
        raise PresetError(f"preset {preset!r} is only offered for form_level_n1")
    omega = geo.constant_field(grid, metric_scale * np.eye(grid.n_complex))
    alpha = -params.lam * omega
    if preset == "perturbed":
        alpha = alpha + amplitude * grid.ddbar(random_field(grid, seed, modes))
    return flow.make_potential_state(grid, omega, geo.hermitize(alpha), params)
