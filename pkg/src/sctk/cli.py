"""Command-line orchestration and machine-readable reporting.

Config files are flat JSON with typed keys; matrices are row-major lists
with shapes implied by (n, m, d).  Every command writes a JSON report of
the form {"meta": {...}, "report": {...}} where only the meta header
carries the timestamp: identical config and seed reproduce the report
section byte for byte.  Exit status: 0 completed analysis (verdicts are
data), 1 invalid config, 2 numerical failure, 3 budget exceeded.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys as _sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .corpus import CORPUS, EXPECTED_STABILIZABLE
from .errors import BudgetExceeded, InvalidConfig, NumericalFailure
from .moments import build_generator, growth_constant_c0, spectral_abscissa
from .nullcontrol import control_kernel, synthesize_control, verify_theorem_5_1
from .observability import (
    DEFAULT_MAX_DENSE_DIM,
    DEFAULT_MAX_GRAM_DIM,
    assemble_forms,
    invariance_experiment,
    optimal_constant,
)
from .riccati import NotSolvable, lq_value, solve_sare
from .stabilizer import equivalence_harness, run_piecewise, run_riccati_feedback
from .systems import HorizonConfig, StochasticSystem, hautus_stabilizability, validate_system
from .trees import DEFAULT_MAX_LEAVES, TreeDriver, build_tree, field_to_rows

COMMANDS = (
    "validate",
    "stability",
    "riccati",
    "observe",
    "invariance",
    "synthesize",
    "theorem51",
    "stabilize",
    "equivalence",
    "emit-corpus",
)

_KNOWN_KEYS = {
    "name": str,
    "description": str,
    "expected": dict,
    "n": int,
    "m": int,
    "d": int,
    "A": list,
    "B": list,
    "C": list,
    "D": list,
    "T": (int, float),
    "K": int,
    "K_grid": list,
    "driver": str,
    "gh_levels": int,
    "delta": (int, float),
    "delta_grid": list,
    "T_grid": list,
    "c": (int, float),
    "x0": list,
    "seed": int,
    "paths": int,
    "k_max": int,
    "max_leaves": int,
    "max_gram_dim": int,
    "max_dense_dim": int,
}


@dataclass
class RunConfig:
    """Parsed, validated run configuration."""

    raw: dict
    system: StochasticSystem
    horizon: HorizonConfig
    driver: TreeDriver
    name: str = "unnamed"
    delta: float = 0.5
    delta_grid: list = field(default_factory=lambda: [0.3, 0.6, 0.9])
    T_grid: list = field(default_factory=lambda: [0.5, 1.0])
    K_grid: list = field(default_factory=lambda: [4, 6, 8])
    c: float = None
    x0: np.ndarray = None
    seed: int = 0
    paths: int = 10_000
    k_max: int = 5
    max_leaves: int = DEFAULT_MAX_LEAVES
    max_gram_dim: int = DEFAULT_MAX_GRAM_DIM
    max_dense_dim: int = DEFAULT_MAX_DENSE_DIM


def _reshape(name, flat, rows, cols):
    arr = np.asarray(flat, dtype=float)
    if arr.size != rows * cols:
        raise InvalidConfig(
            f"key {name!r}: expected {rows * cols} entries for a "
            f"{rows}x{cols} matrix, got {arr.size}"
        )
    return arr.reshape(rows, cols)


def parse_config(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise InvalidConfig("config root must be a JSON object")
    for key, val in data.items():
        if key not in _KNOWN_KEYS:
            raise InvalidConfig(f"unknown config key {key!r}")
        if not isinstance(val, _KNOWN_KEYS[key]) and not (
            _KNOWN_KEYS[key] == (int, float) and isinstance(val, (int, float))
        ):
            raise InvalidConfig(f"config key {key!r} has wrong type")
    for req in ("n", "m", "d", "A", "B", "T", "K"):
        if req not in data:
            raise InvalidConfig(f"missing required config key {req!r}")
    n, m, d = int(data["n"]), int(data["m"]), int(data["d"])
    A = _reshape("A", data["A"], n, n)
    B = _reshape("B", data["B"], n, m)
    Craw = data.get("C", [[0.0] * (n * n)] * d)
    Draw = data.get("D", [[0.0] * (n * m)] * d)
    if len(Craw) != d or len(Draw) != d:
        raise InvalidConfig(f"C and D must be lists of d={d} matrices")
    C = tuple(_reshape(f"C[{i}]", Ci, n, n) for i, Ci in enumerate(Craw))
    D = tuple(_reshape(f"D[{i}]", Di, n, m) for i, Di in enumerate(Draw))
    system = StochasticSystem(n=n, m=m, d=d, A=A, B=B, C=C, D=D)
    violations = validate_system(system)
    if violations:
        raise InvalidConfig("invalid system: " + "; ".join(violations))
    horizon = HorizonConfig(T=float(data["T"]), K=int(data["K"]))
    driver = TreeDriver.from_name(
        data.get("driver", "bernoulli"), int(data.get("gh_levels", 3))
    )
    delta = float(data.get("delta", 0.5))
    if not 0.0 <= delta < 1.0:
        raise InvalidConfig(f"delta must be in [0, 1), got {delta}")
    x0 = np.asarray(data.get("x0", [1.0] + [0.0] * (n - 1)), dtype=float)
    if x0.shape != (n,):
        raise InvalidConfig(f"x0 must have {n} entries")

    def _env_cap(env, key, default):
        if os.environ.get(env):
            return int(os.environ[env])
        return int(data.get(key, default))

    return RunConfig(
        raw=data,
        system=system,
        horizon=horizon,
        driver=driver,
        name=data.get("name", "unnamed"),
        delta=delta,
        delta_grid=[float(v) for v in data.get("delta_grid", [0.3, 0.6, 0.9])],
        T_grid=[float(v) for v in data.get("T_grid", [0.5, 1.0])],
        K_grid=[int(v) for v in data.get("K_grid", [4, 6, 8])],
        c=float(data["c"]) if "c" in data else None,
        x0=x0,
        seed=int(data.get("seed", 0)),
        paths=int(data.get("paths", 10_000)),
        k_max=int(data.get("k_max", 5)),
        max_leaves=_env_cap("SCTK_MAX_LEAVES", "max_leaves", DEFAULT_MAX_LEAVES),
        max_gram_dim=_env_cap("SCTK_MAX_GRAM_DIM", "max_gram_dim", DEFAULT_MAX_GRAM_DIM),
        max_dense_dim=_env_cap("SCTK_MAX_DENSE_DIM", "max_dense_dim", DEFAULT_MAX_DENSE_DIM),
    )


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidConfig(f"cannot read config {path}: {exc}") from exc
    return parse_config(data)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else ("inf" if v > 0 else "-inf")
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _config_hash(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def write_report(out_dir, command, cfg_raw, seed, payload) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "meta": {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "command": command,
            "config_hash": _config_hash(cfg_raw),
            "seed": seed,
            "versions": {
                "sctk": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
        },
        "report": _jsonable(payload),
    }
    path = out_dir / f"{command.replace('-', '_')}_report.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# command implementations; each returns (payload, verdict_line)


def _cmd_validate(cfg: RunConfig):
    violations = validate_system(cfg.system)
    payload = {"violations": violations, "valid": not violations}
    return payload, f"validate: {'ok' if not violations else violations}"


def _cmd_stability(cfg: RunConfig):
    gen = build_generator(cfg.system)
    alpha = spectral_abscissa(gen)
    c0 = growth_constant_c0(cfg.system, cfg.horizon.T).c0
    payload = {
        "open_loop_abscissa": alpha,
        "c0": c0,
        "T": cfg.horizon.T,
    }
    if cfg.system.is_deterministic:
        payload["hautus_stabilizable"] = hautus_stabilizability(
            cfg.system.A, cfg.system.B
        )
    return payload, f"stability: open-loop abscissa {alpha:.6g}, c0({cfg.horizon.T}) = {c0:.6g}"


def _cmd_riccati(cfg: RunConfig):
    sol = solve_sare(cfg.system, seed=cfg.seed)
    if isinstance(sol, NotSolvable):
        payload = {"solvable": False, "reason": sol.reason, "diagnostics": sol.diagnostics}
        return payload, "riccati: NotSolvable"
    payload = {
        "solvable": True,
        "P": sol.P,
        "F": sol.F,
        "residual": sol.residual,
        "iterations": sol.iterations,
        "value_at_x0": lq_value(sol.P, cfg.x0),
        "closed_loop_abscissa": spectral_abscissa(build_generator(cfg.system, sol.F)),
    }
    return payload, f"riccati: solved, residual {sol.residual:.3e}"


def _build_forms(cfg: RunConfig):
    tree = build_tree(cfg.driver, cfg.horizon, cfg.system.d, cfg.max_leaves)
    forms = assemble_forms(
        tree, cfg.system, max_gram_dim=cfg.max_gram_dim, max_dense_dim=cfg.max_dense_dim
    )
    return tree, forms


def _cmd_observe(cfg: RunConfig):
    tree, forms = _build_forms(cfg)
    rep = optimal_constant(forms, cfg.delta)
    payload = {
        "driver": tree.driver.kind,
        "K": tree.K,
        "delta": rep.delta,
        "T": rep.T,
        "c_opt": rep.c_opt,
        "observable": rep.observable,
        "diagnostics": rep.diagnostics,
    }
    return payload, (
        f"observe: c_opt({cfg.delta}) = "
        f"{'inf' if not rep.observable else format(rep.c_opt, '.10g')}"
    )


def _cmd_invariance(cfg: RunConfig, out_dir):
    drivers = [
        TreeDriver.bernoulli(),
        TreeDriver.trinomial(),
        TreeDriver.quantized_gaussian(3),
    ]
    table = invariance_experiment(
        cfg.system,
        cfg.horizon.T,
        cfg.delta,
        drivers,
        cfg.K_grid,
        max_leaves=cfg.max_leaves,
        max_gram_dim=cfg.max_gram_dim,
    )
    payload = {
        "rows": table.rows,
        "gaps": {str(k): v for k, v in table.gaps.items()},
        "gaps_non_increasing": table.gaps_non_increasing,
    }
    csv_path = Path(out_dir) / "invariance_table.csv"
    with open(csv_path, "w") as fh:
        fh.write("driver,K,delta,T,c_opt,observable\n")
        for row in table.rows:
            fh.write(
                f"{row['driver']},{row['K']},{row['delta']},{row['T']},"
                f"{row['c_opt']},{row['observable']}\n"
            )
    gap_str = ", ".join(f"K={k}: {v:.3e}" for k, v in sorted(table.gaps.items()))
    return payload, f"invariance: gaps {gap_str}"


def _pick_constant(cfg: RunConfig, forms):
    if cfg.c is not None:
        return cfg.c
    rep = optimal_constant(forms, cfg.delta)
    if not rep.observable:
        raise InvalidConfig(
            f"system is not observable at delta={cfg.delta} on this tree, "
            "so no valid constant exists; raise delta or the horizon"
        )
    return max(rep.c_opt, 1e-12)


def _cmd_synthesize(cfg: RunConfig, out_dir):
    tree, forms = _build_forms(cfg)
    c = _pick_constant(cfg, forms)
    res = synthesize_control(tree, cfg.system, cfg.x0, c, cfg.delta, forms)
    rows = field_to_rows(tree, res.u)
    csv_path = Path(out_dir) / "control_field.csv"
    header = "node,depth," + ",".join(f"u{i}" for i in range(cfg.system.m))
    np.savetxt(csv_path, rows, delimiter=",", header=header, comments="")
    payload = {
        "c": c,
        "delta": cfg.delta,
        "control_energy": res.control_energy,
        "terminal_energy": res.terminal_energy,
        "f_energy": res.f_energy,
        "c0": res.c0,
        "tree_growth": res.tree_growth,
        "bounds": res.bounds,
        "terminal_identity_residual": res.terminal_identity_residual,
        "energy_identity_residual": res.energy_identity_residual,
        "all_bounds_hold": res.all_bounds_hold,
    }
    return payload, (
        f"synthesize: terminal energy {res.terminal_energy:.6g} <= "
        f"{cfg.delta}*|x_s|^2, bounds {'pass' if res.all_bounds_hold else 'FAIL'}"
    )


def _cmd_theorem51(cfg: RunConfig):
    rep = verify_theorem_5_1(
        cfg.system, cfg.horizon, cfg.delta, driver=cfg.driver, c=cfg.c,
        max_leaves=cfg.max_leaves,
    )
    payload = {
        "applicable": rep.applicable,
        "delta": rep.delta,
        "T": rep.T,
        "c_opt": rep.c_opt,
        "c_used": rep.c_used,
        "c0": rep.c0,
        "forward_pass": rep.forward_pass,
        "forward_details": rep.forward_details,
        "measured_cost": rep.measured_cost,
        "measured_cost_basis_max": rep.measured_cost_basis_max,
        "converse_pair": rep.converse_pair,
        "converse_pass": rep.converse_pass,
        "converse_pair_linear": rep.converse_pair_linear,
        "converse_pass_linear": rep.converse_pass_linear,
        "cost_vs_bound_ratio": rep.cost_vs_bound_ratio,
    }
    if not rep.applicable:
        return payload, "theorem51: not applicable (not observable at this delta)"
    return payload, (
        f"theorem51: forward {'pass' if rep.forward_pass else 'FAIL'}, "
        f"converse {'pass' if rep.converse_pass else 'FAIL'}"
    )


def _cmd_stabilize(cfg: RunConfig, out_dir):
    if not (0.0 < cfg.delta < 1.0):
        raise InvalidConfig("stabilize needs delta in (0, 1)")
    tree, forms = _build_forms(cfg)
    c = _pick_constant(cfg, forms)
    kernel = control_kernel(tree, cfg.system, c, cfg.delta, forms)
    run = run_piecewise(
        cfg.system, kernel, cfg.x0, cfg.k_max, cfg.paths, seed=cfg.seed
    )
    csv_path = Path(out_dir) / "piecewise_decay.csv"
    with open(csv_path, "w") as fh:
        fh.write("k,msq,msq_se,energy,energy_se,cum_energy,cum_energy_se\n")
        for r in run.records:
            fh.write(
                f"{r.k},{r.msq},{r.msq_se},{r.energy},{r.energy_se},"
                f"{r.cum_energy},{r.cum_energy_se}\n"
            )
    payload = {
        "c": c,
        "delta": cfg.delta,
        "paths": run.paths,
        "seed": run.seed,
        "records": [vars(r) for r in run.records],
        "decay_slope": run.decay_slope,
        "log_delta": float(np.log(cfg.delta)),
        "total_energy": run.total_energy,
        "total_energy_se": run.total_energy_se,
    }
    sol = solve_sare(cfg.system, seed=cfg.seed)
    if not isinstance(sol, NotSolvable):
        fb = run_riccati_feedback(cfg.system, sol.F, cfg.x0)
        payload["feedback_comparison"] = {
            "abscissa": fb.abscissa,
            "cost": fb.cost,
            "value_at_x0": lq_value(sol.P, cfg.x0),
            "control_norm_T": fb.control_norm_T,
        }
    return payload, (
        f"stabilize: decay slope {run.decay_slope:.4f} vs log(delta) "
        f"{np.log(cfg.delta):.4f}, total energy {run.total_energy:.6g}"
    )


def _cmd_equivalence(cfg: RunConfig):
    rep = equivalence_harness(
        cfg.system,
        cfg.T_grid,
        cfg.delta_grid,
        horizon_K=cfg.horizon.K,
        driver=cfg.driver,
        seed=cfg.seed,
    )
    payload = {
        "riccati_solvable": rep.riccati_solvable,
        "feedback_stabilizable": rep.feedback_stabilizable,
        "weakly_observable": rep.weakly_observable,
        "null_controllable_with_cost": rep.null_controllable_with_cost,
        "agreement": rep.agreement,
        "grid_point": rep.grid_point,
        "refined": rep.refined,
        "details": rep.details,
    }
    return payload, (
        f"equivalence: verdicts {rep.verdicts}, agreement "
        f"{'yes' if rep.agreement else 'NO'}"
    )


def _corpus_config(name: str) -> dict:
    from .corpus import CORPUS

    sysv = CORPUS[name]()
    cfg = {
        "name": name,
        "description": {
            "S1": "scalar integrator, no noise; stabilizable with P = 1",
            "S2": "scalar with unit state noise; stabilizable with P = (1+sqrt(5))/2",
            "S3": "unstable scalar without control; not stabilizable",
            "S4": "double integrator with mild state noise; stabilizable",
            "M0": "martingale case A=C=0, B=I; optimal constant 1/T at delta=0",
        }[name],
        "expected": {"stabilizable": EXPECTED_STABILIZABLE[name]},
        "n": sysv.n,
        "m": sysv.m,
        "d": sysv.d,
        "A": sysv.A.ravel().tolist(),
        "B": sysv.B.ravel().tolist(),
        "C": [Ci.ravel().tolist() for Ci in sysv.C],
        "D": [Di.ravel().tolist() for Di in sysv.D],
        "T": 1.0,
        "K": 4,
        "driver": "bernoulli",
        "delta": 0.5,
        "seed": 0,
    }
    return cfg


def emit_corpus(out_dir) -> list:
    """Write the bundled S1..S4 and M0 configs; deterministic bytes."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = []
        for name in ("S1", "S2", "S3", "S4", "M0"):
            path = out / f"{name.lower()}.json"
            path.write_text(json.dumps(_corpus_config(name), sort_keys=True, indent=2) + "\n")
            paths.append(path)
        return paths
    except OSError as exc:
        raise NumericalFailure(f"corpus emission failed: {exc}") from exc


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sctk",
        description="Desk-scale analysis of constant-coefficient stochastic "
        "control systems: observability constants, Gramian control "
        "synthesis, Riccati feedback, and their equivalence.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="path to a JSON run configuration")
    parser.add_argument("--out", default="sctk_out", help="output directory")
    args = parser.parse_args(argv)

    try:
        if args.command == "emit-corpus":
            paths = emit_corpus(args.out)
            print(f"emit-corpus: wrote {len(paths)} configs to {args.out}")
            return 0
        if not args.config:
            raise InvalidConfig(f"command {args.command!r} requires --config")
        cfg = load_config(args.config)
        if args.command == "validate":
            payload, line = _cmd_validate(cfg)
        elif args.command == "stability":
            payload, line = _cmd_stability(cfg)
        elif args.command == "riccati":
            payload, line = _cmd_riccati(cfg)
        elif args.command == "observe":
            payload, line = _cmd_observe(cfg)
        elif args.command == "invariance":
            Path(args.out).mkdir(parents=True, exist_ok=True)
            payload, line = _cmd_invariance(cfg, args.out)
        elif args.command == "synthesize":
            Path(args.out).mkdir(parents=True, exist_ok=True)
            payload, line = _cmd_synthesize(cfg, args.out)
        elif args.command == "theorem51":
            payload, line = _cmd_theorem51(cfg)
        elif args.command == "stabilize":
            Path(args.out).mkdir(parents=True, exist_ok=True)
            payload, line = _cmd_stabilize(cfg, args.out)
        elif args.command == "equivalence":
            payload, line = _cmd_equivalence(cfg)
        else:  # pragma: no cover
            raise InvalidConfig(f"unhandled command {args.command}")
        write_report(args.out, args.command, cfg.raw, cfg.seed, payload)
        print(line)
        return 0
    except BudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=_sys.stderr)
        return 3
    except (NumericalFailure, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=_sys.stderr)
        return 2
    except (InvalidConfig, ValueError) as exc:
        print(f"invalid config: {exc}", file=_sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
