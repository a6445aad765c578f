"""Command-line front end: ``homoode {solve,trace-experiment,train,eval}``.

Config files hold flat ``section.key = value`` lines (``#`` starts a
comment).  Every key has a default; unknown keys are rejected.  Flags
override the file, and ``--set section.key=value`` overrides anything.

Exit codes: 0 success, 2 config error, 3 numerical non-convergence, 4 IO error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import data as D
from .equilibrium import EquilibriumProblem, NonConvergenceError, newton_solve
from .homotopy import (
    HomotopyProblem,
    PathFailureError,
    nfe_vs_distance_experiment,
    newton_homotopy_ode,
    trace_zero_path,
    velocity_invariance,
    write_distance_csv,
)
from .models import CheckpointError, ImplicitModel, ModelConfig, load_checkpoint, save_checkpoint
from .ode import SolverConfig, SolverError
from .problems import EquationError, sine_equation, parse_equation
from .shared_init import SharedInit
from .tensor import Tensor

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("homoode")


class ConfigError(ValueError):
    pass


# ---- run configuration -------------------------------------------------------
DEFAULTS: Dict[str, Dict[str, object]] = {
    "model": {"kind": "homoode", "channels": 0, "groups": 4, "augment_dim": 0, "dropout": 0.0,
              "activation": "relu", "t0": 0.0, "t1": 1.0, "deq_anderson_depth": 5,
              "deq_tol": 1e-4, "deq_max_iter": 50, "deq_strict": True},
    "solver": {"method": "dopri5", "atol": 1e-3, "rtol": 1e-3, "max_steps": 1000,
               "initial_step": 0.0},
    "data": {"name": "circles", "n_train": 0, "n_test": 0, "noise": 0.05, "root": "",
             "augment_pad": 0, "augment_flip": False},
    "train": {"epochs": 10, "batch_size": 64, "lr": 1e-3, "backward": "direct",
              "eval_train": False},
    "shared_init": {"enabled": False, "lr_init": 0.02, "update_every": 20},
    "experiment": {"seed": 0},
}

DATA_DEFAULTS = {
    "mnist": {"n_train": 10000, "n_test": 2000},
    "digits": {"n_train": 1400, "n_test": 397},
    "circles": {"n_train": 256, "n_test": 256},
    "moons": {"n_train": 256, "n_test": 256},
}


def _coerce(section: str, key: str, raw):
    default = DEFAULTS[section][key]
    if not isinstance(raw, str):
        return raw
    s = raw.strip()
    try:
        if isinstance(default, bool):
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}")
    return s


def set_key(cfg: dict, dotted: str, value) -> None:
    section, _, key = dotted.strip().partition(".")
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {dotted.strip()!r}")
    cfg[section][key] = _coerce(section, key, value)


def parse_config_text(text: str, cfg: Optional[dict] = None) -> dict:
    cfg = cfg or {s: dict(v) for s, v in DEFAULTS.items()}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'section.key = value'")
        k, v = line.split("=", 1)
        set_key(cfg, k, v)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def format_config(cfg: dict) -> str:
    return "\n".join(f"{s}.{k} = {v}" for s in sorted(cfg) for k, v in sorted(cfg[s].items()))


def resolve_config(args) -> dict:
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        parse_config_text(text, cfg)
    for dotted, attr in (("model.kind", "model"), ("data.name", "data"), ("train.epochs", "epochs"),
                         ("experiment.seed", "seed"), ("train.backward", "backward")):
        val = getattr(args, attr, None)
        if val is not None:
            set_key(cfg, dotted, str(val))
    if getattr(args, "shared_init", None) is not None:
        set_key(cfg, "shared_init.enabled", args.shared_init)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        set_key(cfg, k, v)
    name = cfg["data"]["name"]
    if name not in DATA_DEFAULTS:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(DATA_DEFAULTS)}")
    for k, v in DATA_DEFAULTS[name].items():
        if not cfg["data"][k]:
            cfg["data"][k] = v
    return cfg


def solver_from(cfg: dict) -> SolverConfig:
    s = cfg["solver"]
    try:
        return SolverConfig(method=s["method"], atol=s["atol"], rtol=s["rtol"],
                            max_steps=s["max_steps"], initial_step=s["initial_step"] or None)
    except ValueError as exc:
        raise ConfigError(f"solver: {exc}") from exc


def model_config_from(cfg: dict, train: D.Dataset) -> ModelConfig:
    m, seed = cfg["model"], cfg["experiment"]["seed"]
    init_seed = int(D.substream(seed, "init").integers(2 ** 31))
    common = dict(kind=m["kind"], groups=m["groups"], augment_dim=m["augment_dim"],
                  dropout=m["dropout"], activation=m["activation"], t0=m["t0"], t1=m["t1"],
                  deq_anderson_depth=m["deq_anderson_depth"], deq_tol=m["deq_tol"],
                  deq_max_iter=m["deq_max_iter"], deq_strict=m["deq_strict"], seed=init_seed,
                  num_classes=train.num_classes)
    try:
        if train.images.ndim == 2:
            return ModelConfig(arch="mlp", input_dim=train.images.shape[1],
                               channels=m["channels"] or 16, **common)
        return ModelConfig(arch="conv", in_channels=train.images.shape[1],
                           image_size=train.images.shape[2], channels=m["channels"] or 32, **common)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def load_data(cfg: dict):
    d, seed = cfg["data"], cfg["experiment"]["seed"]
    name = d["name"]
    if name == "mnist":
        return D.mnist_subset(d["root"] or None, d["n_train"], d["n_test"], seed)
    if name == "digits":
        tr, te = D.load_digits_split(d["n_test"], seed)
        return tr.subset(np.arange(min(d["n_train"], len(tr)))), te
    gen = D.synth_circles if name == "circles" else D.synth_moons
    ds = int(D.substream(seed, "data").integers(2 ** 31))
    return (gen(d["n_train"], d["noise"], ds, "train"),
            gen(d["n_test"], d["noise"], ds + 1, "test"))


# ---- subcommands ----------------------------------------------------------------
def _vector(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError:
        raise ConfigError(f"cannot parse vector {text!r}")


def _write_trace(path, rows: List[tuple], dim: int, comment: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {comment}\n")
        w = csv.writer(fh)
        w.writerow(["s", "lambda"] + [f"z{i}" for i in range(dim)] + ["residual"])
        for s, lam, z, res in rows:
            w.writerow([repr(float(s)), repr(float(lam))] + [repr(float(v)) for v in z] + [repr(float(res))])


def cmd_solve(args) -> int:
    residual = parse_equation(args.equation)
    z0 = _vector(args.z0)
    cfg = {"equation": args.equation, "method": args.method, "z0": z0.tolist(), "tol": args.tol,
           "atol": args.atol, "rtol": args.rtol}
    tag = f"config_hash={config_hash(cfg)} {json.dumps(cfg, sort_keys=True)}"
    scfg = SolverConfig(atol=args.atol, rtol=args.rtol, max_steps=args.max_steps)
    rows = []
    if args.method == "fixed_point":
        res = trace_zero_path(HomotopyProblem(residual, z0), scfg, solve_tol=args.tol)
        root, count, label = res.solution, res.nfe, "nfe"
        rows = [(p.s, p.lam, p.z, p.residual) for p in res.trace]
    elif args.method == "newton_homotopy":
        p = HomotopyProblem(residual, z0, kind="newton")
        root, sol = newton_homotopy_ode(p, scfg)
        count, label = sol.nfe, "nfe"
        s = 0.0
        for i, (lam, z) in enumerate(zip(sol.times, sol.states)):
            if i:
                s += float(np.linalg.norm(np.append(z - sol.states[i - 1], lam - sol.times[i - 1])))
            rows.append((s, lam, z, np.max(np.abs(p.r(z) - (1 - lam) * p.r0))))
    else:
        if args.trace:
            raise ConfigError("--trace is only available for the homotopy methods")
        p = HomotopyProblem(residual, z0)
        ep = EquilibriumProblem(lambda z, _: z - p.r(z), max_iter=args.max_iter, tol=args.tol)
        out = newton_solve(ep, z0, jac=lambda z: p.J(z))
        root, count, label = out.z_star, out.iterations, "iterations"
    resid = float(np.max(np.abs(HomotopyProblem(residual, root).r0)))
    if not np.isfinite(resid) or resid > max(args.tol, 1e-6) * 10:
        print(f"error: {args.method} ended at {root} with residual {resid:.3g}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"root: {' '.join(f'{v:.10g}' for v in root)}")
    print(f"residual: {resid:.3e}")
    print(f"{label}: {count}")
    if args.trace:
        _write_trace(args.trace, rows, z0.size, tag)
    return EXIT_OK


def cmd_trace_experiment(args) -> int:
    cfg = {"experiment": args.experiment, "seed": args.seed}
    start = 6.0
    p = HomotopyProblem(sine_equation, [start])
    if args.experiment == "nfe_vs_distance":
        z_star = trace_zero_path(p).solution
        distances = [float(d) for d in args.distances.split(",")]
        cfg.update(distances=distances, z_star=z_star.tolist())
        rows = nfe_vs_distance_experiment(p, distances, z_star=z_star, direction=np.ones(1))
        write_distance_csv(rows, args.out, f"config_hash={config_hash(cfg)} {json.dumps(cfg)}")
        failed = [r for r in rows if r.nfe is None]
        for r in rows:
            print(f"inv_distance={r.inv_distance:.6g} nfe={r.nfe}")
        if failed:
            print(f"error: {len(failed)} rows failed: {failed[0].error}", file=sys.stderr)
            return EXIT_NUMERIC
        return EXIT_OK
    velocities = (0.5, 1.0, 2.0)
    cfg.update(velocities=velocities, start=start)
    runs, dev = velocity_invariance(p, velocities)
    with open(args.out, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash(cfg)} {json.dumps(cfg)}\n")
        w = csv.writer(fh)
        w.writerow(["v", "lambda", "z0"])
        for v in velocities:
            for e in runs[v]:
                w.writerow([repr(v), repr(e.lam)] + [repr(float(x)) for x in e.z])
        w.writerow(["max_deviation", "", repr(dev)])
    print(f"max matched-lambda deviation: {dev:.3e}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    n_train = cfg["data"]["n_train"]
    tr, te = load_data(cfg)
    mcfg = model_config_from(cfg, tr)
    model = ImplicitModel(mcfg, solver_from(cfg))
    si = None
    sic = cfg["shared_init"]
    if sic["enabled"]:
        if mcfg.kind != "homoode":
            raise ConfigError("shared_init.enabled applies to the homoode model only")
        si = SharedInit.zeros(model.state_channels, lr_init=sic["lr_init"],
                              update_every=sic["update_every"])
    t = cfg["train"]
    try:
        tcfg = D.TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"],
                             backward=t["backward"], eval_train=t["eval_train"],
                             augment_pad=cfg["data"]["augment_pad"],
                             augment_flip=cfg["data"]["augment_flip"], seed=cfg["experiment"]["seed"])
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    (out / "config.txt").write_text(f"# config_hash={h}\n{format_config(cfg)}\n")
    log.info("resolved config (hash %s):\n%s", h, format_config(cfg))
    mlog = D.train_loop(model, tr, te, tcfg, si)
    mlog.to_csv(out / "metrics.csv", f"config_hash={h}")
    save_checkpoint(out / "checkpoint.bin", model, None if si is None else si.z_tilde.data,
                    extra={"config": cfg, "config_hash": h})
    last = mlog.last("test")
    if last is not None:
        print(f"test accuracy: {last.accuracy:.6f}")
        print(f"test mean_nfe: {last.mean_nfe:.3f}")
        print(f"test loss: {last.loss:.6f}")
    print(f"skipped batches: {mlog.skipped_batches}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, shared, extra = load_checkpoint(args.checkpoint)
    cfg = extra.get("config")
    if not cfg:
        raise CheckpointError(f"{args.checkpoint}: no run config stored")
    if args.data:
        set_key(cfg, "data.name", args.data)
    _, te = load_data(cfg)
    si = None
    if shared is not None:
        si = SharedInit(Tensor(shared))
    acc, mnfe, loss = D.evaluate(model, te, si)
    print(f"test accuracy: {acc:.6f}")
    print(f"test mean_nfe: {mnfe:.3f}")
    print(f"test loss: {loss:.6f}")
    return EXIT_OK


# ---- entry point -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="homoode", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve r(z) = 0")
    s.add_argument("--equation", required=True)
    s.add_argument("--method", choices=["fixed_point", "newton_homotopy", "newton"],
                   default="fixed_point")
    s.add_argument("--z0", required=True, help="comma-separated start point")
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--atol", type=float, default=1e-8)
    s.add_argument("--rtol", type=float, default=1e-8)
    s.add_argument("--max-steps", type=int, default=10000)
    s.add_argument("--max-iter", type=int, default=50)
    s.add_argument("--trace", help="write the path states to this CSV")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("trace-experiment", help="homotopy path experiments on the test equation")
    e.add_argument("--experiment", choices=["nfe_vs_distance", "velocity_invariance"], required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--distances", default="0.5,0.3,0.2,0.1,0.05,0.02,0.01,0.005,0.002,0.001,"
                                          "1e-4,1e-5,1e-6,0")
    e.set_defaults(func=cmd_trace_experiment)

    t = sub.add_parser("train", help="train an implicit model")
    t.add_argument("--model", choices=["homoode", "node", "anode", "deq"])
    t.add_argument("--data", choices=sorted(DATA_DEFAULTS))
    t.add_argument("--config")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--backward", choices=["direct", "adjoint"])
    t.add_argument("--shared-init", choices=["on", "off"])
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval", help="evaluate a checkpoint on its test split")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", choices=sorted(DATA_DEFAULTS))
    v.set_defaults(func=cmd_eval)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, EquationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergenceError, PathFailureError, SolverError) as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
