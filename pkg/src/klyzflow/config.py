"""Run configuration: YAML loading, env overrides and validation."""
from __future__ import annotations

import copy
import os

import numpy as np
import yaml

from . import flow, scenarios
from .grid import Grid, GridError
from .monitor import MonitorConfig

ENV_PREFIX = "KLYZ_"

DEFAULTS: dict = {
    "scenario": "form_level_n1",
    "preset": "flat_fixed_point",
    "seed": 0,
    "perturbation": {"amplitude": 1e-2, "modes": 2},
    "initial": {"metric_scale": 1.0, "alpha_scale": None, "check_cohomology": False},
    "flow": {
        "kappa": 1.0,
        "lam": None,
        "a": None,
        "b": None,
        "time_scale": 2.0,
        "generalized_kappa": False,
        "freeze_metric": None,
        "heat_normalization": "real",
    },
    "grid": {"points": 64, "period": 1.0, "points_per_axis": None, "periods": None},
    "time": {"T_end": 1.0, "dt": 1e-3, "integrator": "rk4", "dt_min": None, "sample_every": 0.05},
    "ceiling": None,
    "ceiling_factor": 1e6,
    "audit": {"enabled": True},
    "monitor": {"enabled": True, "p": 3, "x0": None, "rho": 0.25, "theta": 1.0, "tau": 2.0,
                "K": None, "L": None, "K_floor": 1.0, "L_floor": 1e-6, "C": 1.0},
    "calibration": False,
    "snapshots": True,
    "output": "run",
}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(["config root must be a mapping"])
    return data


def apply_env(cfg: dict, environ=None) -> dict:
    """KLYZ_SECTION__KEY=value overrides; values parsed as YAML scalars."""
    environ = os.environ if environ is None else environ
    out = copy.deepcopy(cfg)
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(environ[key])
    return out


def grid_from(cfg: dict) -> Grid:
    n = 2 if cfg["scenario"] == "potential_torus_n2" else 1
    gc = cfg["grid"]
    pts = gc.get("points_per_axis") or [gc["points"]] * (2 * n)
    per = gc.get("periods") or [gc["period"]] * (2 * n)
    return Grid(n, tuple(int(p) for p in pts), tuple(float(p) for p in per))


def params_from(cfg: dict) -> flow.FlowParams:
    fc = {k: v for k, v in cfg["flow"].items() if v is not None}
    return scenarios.default_params(cfg["scenario"], cfg["preset"], fc)


def monitor_from(cfg: dict) -> MonitorConfig:
    mc = {k: v for k, v in cfg["monitor"].items() if k != "enabled"}
    if mc.get("x0") is not None:
        mc["x0"] = tuple(int(i) for i in mc["x0"])
    return MonitorConfig(**mc)


def validate_config(raw: dict) -> dict:
    """Fill defaults, resolve the dictionary and check every invariant.

    All problems are collected and raised together as ConfigError.
    """
    errors: list[str] = []
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        errors.append(f"unknown keys: {', '.join(unknown)}")
    cfg = _merge(DEFAULTS, {k: v for k, v in raw.items() if k in DEFAULTS})

    scenario, preset = cfg["scenario"], cfg["preset"]
    if scenario not in scenarios.SCENARIOS:
        errors.append(f"unknown scenario {scenario!r}")
    if preset not in scenarios.PRESETS:
        errors.append(f"unknown preset {preset!r}")
    if scenario != "form_level_n1" and preset in ("exponential", "frozen_heat"):
        errors.append(f"preset {preset!r} is only offered for form_level_n1")

    # flow parameters
    fc = cfg["flow"]
    if fc.get("lam") is None:
        fc["lam"] = 0.5 if preset == "exponential" else -1.0
    if fc.get("freeze_metric") is None:
        fc["freeze_metric"] = preset == "frozen_heat"
    try:
        kappa = float(fc["kappa"])
        if not kappa > 0:
            errors.append("flow.kappa must be positive")
    except (TypeError, ValueError):
        errors.append("flow.kappa must be a number")
        kappa = None
    try:
        lam_val = float(fc["lam"])
    except (TypeError, ValueError):
        errors.append("flow.lam must be a number")
        lam_val = None
    if scenario in scenarios.SCENARIOS and scenario != "form_level_n1" and lam_val is not None:
        if not fc.get("generalized_kappa") and (kappa, lam_val) != (1.0, -1.0):
            errors.append("formulation requires (kappa, lambda) = (1, -1)")
    if fc.get("heat_normalization") not in ("real", "complex"):
        errors.append("flow.heat_normalization must be 'real' or 'complex'")
    params = None
    if not errors:
        try:
            params = params_from(cfg)
            fc["a"], fc["b"] = params.a, params.b
        except (TypeError, ValueError) as exc:
            errors.append(f"flow: {exc}")

    # grid
    try:
        if scenario in scenarios.SCENARIOS:
            grid_from(cfg)
    except (GridError, TypeError, ValueError) as exc:
        errors.append(f"grid: {exc}")

    # time
    tc = cfg["time"]
    for key in ("T_end", "dt", "sample_every"):
        v = tc.get(key)
        if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
            errors.append(f"time.{key} must be a positive number")
    if tc.get("integrator") not in flow.INTEGRATORS:
        errors.append(f"time.integrator must be one of {', '.join(flow.INTEGRATORS)}")
    if cfg["ceiling"] is not None and not float(cfg["ceiling"]) > 0:
        errors.append("ceiling must be positive")

    # monitor
    try:
        monitor_from(cfg)
    except (TypeError, ValueError) as exc:
        errors.append(f"monitor: {exc}")

    # initial data and cohomology class
    ic = cfg["initial"]
    if ic.get("alpha_scale") is None and isinstance(fc.get("lam"), (int, float)):
        ic["alpha_scale"] = -float(fc["lam"])
    lam = lam_val
    try:
        a_scale = float(ic["alpha_scale"])
    except (TypeError, ValueError):
        errors.append("initial.alpha_scale must be a number")
        lam = None
    if lam is not None:
        check = scenario != "form_level_n1" or ic.get("check_cohomology")
        if check and not np.isclose(a_scale, -lam, rtol=0, atol=1e-12):
            errors.append(
                f"CohomologyMismatch: mean(alpha) = {ic['alpha_scale']} * mean(omega) "
                f"is incompatible with lambda = {lam}"
            )
    if errors:
        raise ConfigError(errors)
    return cfg


def build_initial_state(cfg: dict):
    grid = grid_from(cfg)
    params = params_from(cfg)
    ic, pc = cfg["initial"], cfg["perturbation"]
    state = scenarios.initial_state(
        cfg["scenario"], cfg["preset"], grid, params,
        seed=int(cfg["seed"]), amplitude=float(pc["amplitude"]), modes=int(pc["modes"]),
        metric_scale=float(ic["metric_scale"]),
    )
    shift = float(ic["alpha_scale"]) + params.lam
    if shift != 0.0 and cfg["preset"] in ("flat_fixed_point", "perturbed"):
        state = _shift_alpha(state, shift * float(ic["metric_scale"]), params)
    return grid, params, state


def _shift_alpha(state, amount, params):
    import dataclasses

    from . import geometry as geo

    if state.formulation == "form_level_n1":
        return dataclasses.replace(state, alpha_coeff=state.alpha_coeff + amount,
                                   background_alpha=state.background_alpha + amount)
    alpha = state.background_alpha + amount * geo.constant_field(state.grid, np.eye(state.grid.n_complex))
    return flow.make_potential_state(state.grid, state.background, alpha, params)


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
