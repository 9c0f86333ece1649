"""Command line entry point: ``klyz <verb> [flags]``.

Exit codes: 0 reached_T, 2 config error, 3 positivity_lost, 4 blowup_threshold,
5 nan_detected, 6 missing run directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import audit, flow, io, monitor
from . import config as cfgmod

EXIT_CODES = {
    "reached_T": 0,
    "config_error": 2,
    "positivity_lost": 3,
    "blowup_threshold": 4,
    "nan_detected": 5,
    "missing_run": 6,
}

log = logging.getLogger("klyzflow")


def resolve_config(path: str | None, overrides: dict | None = None, environ=None) -> dict:
    raw = cfgmod.load_config(path)
    raw = cfgmod.apply_env(raw, environ)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfgmod.validate_config(raw)


def _uniform_prefix(samples: list) -> list:
    if len(samples) < 3:
        return samples
    dt = samples[1].t - samples[0].t
    out = samples[:2]
    for s in samples[2:]:
        if abs((s.t - out[-1].t) - dt) > 1e-9 * dt:
            break
        out.append(s)
    return out


def monitor_rows(samples, params, mcfg) -> list[dict]:
    try:
        reps = monitor.monitor_run(_uniform_prefix(samples), params, mcfg)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return [{"kind": "monitor_error", "message": str(exc)}]
    return [r.to_dict() for r in reps]


def audit_rows(samples, params) -> list[dict]:
    if params.formulation != "form_level_n1" and params.formulation != "potential":
        return []
    uni = _uniform_prefix(samples)
    if len(uni) < 3:
        return []
    try:
        return [r.to_dict() for r in audit.audit_series(uni, params)]
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return [{"kind": "audit_error", "message": str(exc)}]


def execute_run(cfg: dict, out_dir: Path) -> tuple[int, flow.RunRecord]:
    """Run one configuration, writing the full run directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(cfgmod.dump(cfg))
    grid, params, state = cfgmod.build_initial_state(cfg)
    tc = cfg["time"]
    snap_dir = out_dir / "snapshots"
    if snap_dir.exists():
        for p in snap_dir.iterdir():
            p.unlink()
    counter = {"i": 0}

    with io.JsonlWriter(out_dir / "series.jsonl") as out:
        def on_sample(s, q):
            out.write({"kind": "sample", **q})
            if cfg["snapshots"]:
                io.write_snapshot(snap_dir, counter["i"], s)
            counter["i"] += 1

        rec = flow.run(
            state, params, float(tc["T_end"]), float(tc["dt"]),
            sample_every=float(tc["sample_every"]),
            method=tc["integrator"],
            ceiling=cfg["ceiling"],
            ceiling_factor=float(cfg["ceiling_factor"]),
            dt_min=tc["dt_min"],
            on_sample=on_sample,
        )
        good = rec.samples if rec.cause == "reached_T" else rec.samples[:-1] or rec.samples[:1]
        finite = [s for s in good if all(np.all(np.isfinite(v)) for v in s.fields().values())]
        if cfg["audit"]["enabled"]:
            for row in audit_rows(finite, params):
                out.write(row)
        if cfg["monitor"]["enabled"] and finite:
            for row in monitor_rows(finite, params, cfgmod.monitor_from(cfg)):
                out.write(row)
        term = {"kind": "termination", **rec.summary()}
        if rec.samples:
            term["drift"] = flow.field_drift(rec.samples[0], rec.samples[-1])
        out.write(term)
    return EXIT_CODES[rec.cause], rec


def _load_run(run_dir: Path):
    run_dir = Path(run_dir)
    if not (run_dir / "config.yaml").exists():
        raise io.MissingRun(f"{run_dir} is not a run directory")
    cfg = cfgmod.validate_config(yaml.safe_load((run_dir / "config.yaml").read_text()))
    return cfg, cfgmod.params_from(cfg), io.load_samples(run_dir)


def _write_rows(path: Path, rows: list[dict]) -> None:
    with io.JsonlWriter(path) as out:
        for r in rows:
            out.write(r)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="klyz", description="kappa-LYZ flow simulator on flat tori")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p, run_flags=True):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--out", help="run directory")
        if run_flags:
            p.add_argument("--seed", type=int)
            p.add_argument("--preset")
            p.add_argument("--until", type=float, help="final time T")
            p.add_argument("--dt", type=float)
            p.add_argument("--ceiling", type=float, help="absolute sup|Rm| ceiling")

    common(sub.add_parser("validate", help="check a config and print its normalized form"))
    common(sub.add_parser("run", help="integrate, audit and monitor"))
    common(sub.add_parser("audit", help="re-audit stored snapshots"), run_flags=False)
    common(sub.add_parser("monitor", help="re-monitor stored snapshots"), run_flags=False)
    common(sub.add_parser("plot-data", help="write CSV tables from a run"), run_flags=False)
    common(sub.add_parser("calibrate", help="fit the universal constant C"))
    return ap


def _overrides(args) -> dict:
    return {
        "seed": getattr(args, "seed", None),
        "preset": getattr(args, "preset", None),
        "time.T_end": getattr(args, "until", None),
        "time.dt": getattr(args, "dt", None),
        "ceiling": getattr(args, "ceiling", None),
        "output": args.out,
    }


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.verb in ("validate", "run", "calibrate"):
            cfg = resolve_config(args.config, _overrides(args))
        if args.verb == "validate":
            sys.stdout.write(cfgmod.dump(cfg))
            return 0
        if args.verb == "run":
            code, rec = execute_run(cfg, Path(cfg["output"]))
            print(json.dumps({"cause": rec.cause, "exit": code, "samples": len(rec.times)}))
            return code
        if args.verb == "calibrate":
            cfg["monitor"]["enabled"] = False
            cfg["audit"]["enabled"] = False
            code, rec = execute_run(cfg, Path(cfg["output"]))
            params = cfgmod.params_from(cfg)
            C = monitor.calibrate_C(_uniform_prefix(rec.samples), params, cfgmod.monitor_from(cfg))
            (Path(cfg["output"]) / "calibration.json").write_text(io.json_line({"C": C}) + "\n")
            print(json.dumps({"C": C}))
            return code
        run_dir = Path(args.out or ".")
        if args.verb == "plot-data":
            for p in io.emit_plot_data(run_dir):
                print(p)
            return 0
        cfg, params, samples = _load_run(run_dir)
        if args.verb == "audit":
            rows = audit_rows(samples, params)
            _write_rows(run_dir / "audit.jsonl", rows)
            print(json.dumps({"audited": len(rows)}))
            return 0
        if args.verb == "monitor":
            if args.config:
                over = cfgmod.load_config(args.config).get("monitor", {})
                cfg["monitor"].update(over)
            rows = monitor_rows(samples, params, cfgmod.monitor_from(cfg))
            _write_rows(run_dir / "monitor.jsonl", rows)
            ok = all(r.get("kind") == "monitor" for r in rows)
            print(json.dumps({"monitored": len(rows), "ok": ok}))
            return 0
    except cfgmod.ConfigError as exc:
        print(json.dumps({"kind": "config_error", "errors": exc.errors}), file=sys.stderr)
        return EXIT_CODES["config_error"]
    except io.MissingRun as exc:
        print(json.dumps({"kind": "missing_run", "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES["missing_run"]
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
