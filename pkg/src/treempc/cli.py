"""Command line interface.

Subcommands cover the full pipeline: `generate` labels a state grid with
exact MPC moves, `train` fits and hardens an oblique tree, `evaluate`
measures accuracy, suboptimality and the offline error bound, `simulate`
rolls out one closed loop, `bench` times controllers, `explicit` enumerates
the piecewise-affine law, and `export` writes human-readable artifacts.

Option values resolve as defaults < JSON config file (--config) < explicit
flags. Every run writes manifest_<command>.json into the output directory:
the resolved configuration, SHA-256 hashes of the file inputs and the
produced filenames. Manifests contain no timestamps, so identical runs
produce identical bytes.

Exit codes: 0 success, 2 bad input or configuration, 3 numerical failure,
4 filesystem error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, _accel
from .dataset import (StateBox, export_csv, generate_dataset, label_states,
                      load_dataset, save_dataset)
from .errors import (AllInfeasible, ControllerFailure, Diverged,
                     NonConvergent, NotCovered, NotSeparable, QpInfeasible,
                     QpMaxIterations, TooLarge, TooManyPoints, TooShort,
                     ValidationError)
from .evaluation import (DisturbanceSpec, ExplicitController, TreeController,
                         benchmark_timing, default_iss_starts,
                         error_bound_report, iss_probe, lambda_ratios,
                         mpc_chain_timing, simulate)
from .explicit import enumerate_explicit, regions_to_dicts
from .qp import MpcController
from .system import BUILTIN_BOXES, load_problem
from .training import TrainConfig, train
from .tree import ObliqueTree, export_rules

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

_BAD_INPUT_ERRORS = (ValidationError, TooManyPoints, TooLarge)
_NUMERICAL_ERRORS = (NonConvergent, Diverged, AllInfeasible, QpInfeasible,
                     QpMaxIterations, NotSeparable, NotCovered, TooShort,
                     ControllerFailure)

_TEST_STREAM = 0xE5
_LAMBDA_STREAM = 0x1A
_BENCH_STREAM = 0xBE

_DEFAULTS = {
    "generate": {"problem": None, "delta": None, "count": None, "seed": 0,
                 "jobs": 1, "box_lo": None, "box_hi": None},
    "train": {"data": None, "depth": None, "epochs": 200, "batch_size": 1024,
              "learning_rate": 1e-2, "alpha_start": 1.0, "alpha_growth": 1.3,
              "alpha_max": 512.0, "seed": 0, "validation_fraction": 0.1,
              "restarts": 1, "ridge": 1e-8, "init_noise": 1e-2},
    "evaluate": {"problem": None, "data": None, "tree": None,
                 "test_states": 2000, "lambda_states": 100, "lambda_steps": 20,
                 "jump_samples": 256, "k_max_probes": 512, "iss": None,
                 "iss_trajectories": 100, "iss_steps": 50, "w_bound": 0.01,
                 "e_bound": 0.01, "seed": 0, "jobs": 1},
    "simulate": {"problem": None, "tree": None, "controller": "tree",
                 "x0": None, "steps": 100, "w_bound": 0.0, "e_bound": 0.0,
                 "dist_mode": "uniform", "seed": 0},
    "export": {"tree": None, "data": None, "precision": 6, "format": "rules"},
    "bench": {"problem": None, "tree": None, "states": 100, "reps": 100,
              "chain_steps": 0, "seed": 0, "box_lo": None, "box_hi": None},
    "explicit": {"problem": None, "box_lo": None, "box_hi": None,
                 "max_vars": 12},
}


def _parse_vector(text, name):
    try:
        return np.array([float(v) for v in str(text).split(",")],
                        dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"cannot parse {name} {text!r}: "
                              "expected comma-separated numbers") from exc


def _resolve_box(cfg, problem):
    if cfg.get("box_lo") is not None or cfg.get("box_hi") is not None:
        if cfg.get("box_lo") is None or cfg.get("box_hi") is None:
            raise ValidationError("give both box_lo and box_hi or neither")
        return StateBox(_parse_vector(cfg["box_lo"], "box_lo"),
                        _parse_vector(cfg["box_hi"], "box_hi"))
    if problem.name in BUILTIN_BOXES:
        lo, hi = BUILTIN_BOXES[problem.name]
        return StateBox(lo, hi)
    raise ValidationError("custom problems need box_lo and box_hi")


def _require(cfg, command, *keys):
    for key in keys:
        if cfg.get(key) is None:
            raise ValidationError(f"{command}: missing required option "
                                  f"--{key.replace('_', '-')}")


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(outdir, command, cfg, input_paths, outputs):
    inputs = {}
    for p in input_paths:
        if p is None:
            continue
        p = str(p)
        if Path(p).is_file():
            inputs[p] = _sha256(p)
    manifest = {
        "command": command,
        "version": __version__,
        "backend": _accel.BACKEND,
        "config": {k: cfg[k] for k in sorted(cfg)},
        "inputs": inputs,
        "outputs": sorted(outputs),
    }
    _write_json(Path(outdir) / f"manifest_{command}.json", manifest)


def _merged_config(command, args):
    cfg = dict(_DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        with open(config_path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config file is not valid JSON: {exc}") from exc
        unknown = sorted(set(data) - set(cfg))
        if unknown:
            raise ValidationError(f"unknown config keys for {command}: "
                                  f"{', '.join(unknown)}")
        cfg.update(data)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _outdir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_generate(args):
    cfg = _merged_config("generate", args)
    _require(cfg, "generate", "problem", "delta")
    out = _outdir(args)
    problem = load_problem(cfg["problem"])
    box = _resolve_box(cfg, problem)
    count = None if cfg["count"] is None else int(cfg["count"])
    ds = generate_dataset(problem, box, float(cfg["delta"]), count=count,
                          seed=int(cfg["seed"]), jobs=int(cfg["jobs"]))
    save_dataset(ds, out / "dataset.dsbin")
    _write_manifest(out, "generate", cfg, [cfg["problem"], args.config],
                    ["dataset.dsbin"])
    print(f"generate: {len(ds)} labeled states -> {out / 'dataset.dsbin'}")
    return EXIT_OK


def _cmd_train(args):
    cfg = _merged_config("train", args)
    _require(cfg, "train", "data", "depth")
    out = _outdir(args)
    ds = load_dataset(cfg["data"])
    tc = TrainConfig(epochs=int(cfg["epochs"]),
                     batch_size=int(cfg["batch_size"]),
                     learning_rate=float(cfg["learning_rate"]),
                     alpha_start=float(cfg["alpha_start"]),
                     alpha_growth=float(cfg["alpha_growth"]),
                     alpha_max=float(cfg["alpha_max"]), seed=int(cfg["seed"]),
                     validation_fraction=float(cfg["validation_fraction"]),
                     restarts=int(cfg["restarts"]), ridge=float(cfg["ridge"]),
                     init_noise=float(cfg["init_noise"]))
    tree, report = train(ds, int(cfg["depth"]), tc)
    tree.save(out / "tree.json")
    _write_json(out / "train_report.json", report.to_dict())
    _write_manifest(out, "train", cfg, [cfg["data"], args.config],
                    ["tree.json", "train_report.json"])
    print(f"train: depth {tree.depth}, train rmse {report.train_rmse:.3e}, "
          f"val rmse {report.val_rmse:.3e} -> {out / 'tree.json'}")
    return EXIT_OK


def _cmd_evaluate(args):
    cfg = _merged_config("evaluate", args)
    _require(cfg, "evaluate", "problem", "data", "tree")
    out = _outdir(args)
    problem = load_problem(cfg["problem"])
    ds = load_dataset(cfg["data"])
    tree = ObliqueTree.load(cfg["tree"])
    seed = int(cfg["seed"])
    jobs = int(cfg["jobs"])

    rng = np.random.default_rng([seed, _TEST_STREAM])
    Xt = ds.box.sample(int(cfg["test_states"]), rng)
    Xt, Ut, _ = label_states(problem, Xt, jobs=jobs)
    diff = tree.predict_batch(Xt) - Ut
    per_row = np.sqrt(np.sum(diff * diff, axis=1))
    test_rmse = float(np.sqrt(np.mean(diff * diff)))

    ctrl = TreeController(tree, problem)
    base = MpcController(problem)
    rng = np.random.default_rng([seed, _LAMBDA_STREAM])
    x0s = ds.box.sample(int(cfg["lambda_states"]), rng)
    ratios = lambda_ratios(problem, ctrl, base, x0s,
                           steps=int(cfg["lambda_steps"]))

    bound = error_bound_report(tree, problem, ds, test_states=Xt,
                               jump_samples=int(cfg["jump_samples"]),
                               k_max_probes=int(cfg["k_max_probes"]),
                               seed=seed, jobs=jobs)

    report = {
        "problem": problem.name,
        "test_states": int(Xt.shape[0]),
        "test_rmse": test_rmse,
        "test_max_error": float(per_row.max()),
        "lambda_states": int(x0s.shape[0]),
        "lambda_mean_ratio": float(ratios.mean()),
        "lambda_worst_ratio": float(ratios.max()),
        "performance_loss": float(ratios.mean() - 1.0),
        "error_bound": bound.to_dict(),
        "iss": None,
    }
    if cfg["iss"]:
        starts = default_iss_starts(ds.box, count=int(cfg["iss_trajectories"]),
                                    seed=seed)
        dist = DisturbanceSpec(w_bound=float(cfg["w_bound"]),
                               e_bound=float(cfg["e_bound"]), seed=seed)
        iss = iss_probe(problem, ctrl, starts, ds.box, dist=dist,
                        steps=int(cfg["iss_steps"]))
        report["iss"] = iss.to_dict()
    _write_json(out / "eval_report.json", report)
    _write_manifest(out, "evaluate", cfg,
                    [cfg["problem"], cfg["data"], cfg["tree"], args.config],
                    ["eval_report.json"])
    print(f"evaluate: test rmse {test_rmse:.3e}, "
          f"performance loss {report['performance_loss']:.3e}, "
          f"bound {bound.bound:.3e} "
          f"({'violated' if bound.violated else 'holds'})")
    return EXIT_OK


def _build_controller(kind, problem, tree_path):
    if kind == "tree":
        if tree_path is None:
            raise ValidationError("controller 'tree' needs --tree")
        return TreeController(ObliqueTree.load(tree_path), problem)
    if kind == "mpc":
        return MpcController(problem)
    if kind == "explicit":
        return ExplicitController(enumerate_explicit(problem))
    raise ValidationError(f"unknown controller {kind!r}")


def _cmd_simulate(args):
    cfg = _merged_config("simulate", args)
    _require(cfg, "simulate", "problem", "x0")
    out = _outdir(args)
    problem = load_problem(cfg["problem"])
    controller = _build_controller(cfg["controller"], problem, cfg["tree"])
    x0 = _parse_vector(cfg["x0"], "x0")
    dist = None
    if float(cfg["w_bound"]) > 0 or float(cfg["e_bound"]) > 0:
        dist = DisturbanceSpec(w_bound=float(cfg["w_bound"]),
                               e_bound=float(cfg["e_bound"]),
                               seed=int(cfg["seed"]), mode=cfg["dist_mode"])
    res = simulate(problem, controller, x0, int(cfg["steps"]), dist=dist)

    n, m = problem.n, problem.m
    header = (["step"] + [f"x{i}" for i in range(n)]
              + [f"u{i}" for i in range(m)] + ["stage_cost"])
    with open(out / "trajectory.csv", "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for k in range(res.steps):
            cost = problem.stage_cost(res.states[k], res.inputs[k])
            row = ([str(k)] + [f"{v:.17g}" for v in res.states[k]]
                   + [f"{v:.17g}" for v in res.inputs[k]]
                   + [f"{cost:.17g}"])
            fh.write(",".join(row) + "\n")
        row = ([str(res.steps)] + [f"{v:.17g}" for v in res.states[-1]]
               + [""] * m + [""])
        fh.write(",".join(row) + "\n")
    _write_manifest(out, "simulate", cfg,
                    [cfg["problem"], cfg["tree"], args.config],
                    ["trajectory.csv"])
    lam_txt = "n/a" if res.lam is None else f"{res.lam:.6g}"
    print(f"simulate: {res.steps} steps, final |x|_inf "
          f"{np.max(np.abs(res.states[-1])):.3e}, lambda {lam_txt}"
          + (", bounds violated" if res.violated else ""))
    return EXIT_OK


def _cmd_export(args):
    cfg = _merged_config("export", args)
    if cfg["tree"] is None and cfg["data"] is None:
        raise ValidationError("export: give --tree and/or --data")
    out = _outdir(args)
    outputs = []
    if cfg["tree"] is not None:
        tree = ObliqueTree.load(cfg["tree"])
        if cfg["format"] in ("rules", "both"):
            text = export_rules(tree, precision=int(cfg["precision"]))
            (out / "rules.txt").write_text(text, encoding="utf-8")
            outputs.append("rules.txt")
        if cfg["format"] in ("json", "both"):
            _write_json(out / "tree_export.json", tree.to_dict())
            outputs.append("tree_export.json")
    if cfg["data"] is not None:
        ds = load_dataset(cfg["data"])
        export_csv(ds, out / "dataset.csv")
        outputs.append("dataset.csv")
    _write_manifest(out, "export", cfg, [cfg["tree"], cfg["data"], args.config],
                    outputs)
    print(f"export: wrote {', '.join(outputs)} to {out}")
    return EXIT_OK


def _cmd_bench(args):
    cfg = _merged_config("bench", args)
    _require(cfg, "bench", "problem", "tree")
    out = _outdir(args)
    problem = load_problem(cfg["problem"])
    tree = ObliqueTree.load(cfg["tree"])
    box = _resolve_box(cfg, problem)
    rng = np.random.default_rng([int(cfg["seed"]), _BENCH_STREAM])
    X = box.sample(int(cfg["states"]), rng)
    reps = int(cfg["reps"])

    controllers = {"tree": TreeController(tree, problem),
                   "mpc": MpcController(problem, warm=False)}
    rep = benchmark_timing(controllers, X, repetitions=reps)
    tree_row, mpc_row = rep.row("tree"), rep.row("mpc")
    payload = rep.to_dict()
    payload["speedup_mean"] = mpc_row.mean_s / tree_row.mean_s
    payload["tree_worst_over_mpc_mean"] = tree_row.worst_s / mpc_row.mean_s
    if int(cfg["chain_steps"]) > 0:
        chain = mpc_chain_timing(problem, X[:min(10, X.shape[0])],
                                 steps=int(cfg["chain_steps"]))
        payload["chain"] = chain.to_dict()
    _write_json(out / "timing.json", payload)
    _write_manifest(out, "bench", cfg,
                    [cfg["problem"], cfg["tree"], args.config], ["timing.json"])
    print(f"bench: tree worst {tree_row.worst_s * 1e6:.2f} us, "
          f"mpc mean {mpc_row.mean_s * 1e6:.2f} us, "
          f"ratio {payload['tree_worst_over_mpc_mean']:.4f}")
    return EXIT_OK


def _cmd_explicit(args):
    cfg = _merged_config("explicit", args)
    _require(cfg, "explicit", "problem")
    out = _outdir(args)
    problem = load_problem(cfg["problem"])
    box = None
    if cfg["box_lo"] is not None or cfg["box_hi"] is not None:
        box = _resolve_box(cfg, problem)
    regions = enumerate_explicit(problem, box=box,
                                 max_vars=int(cfg["max_vars"]))
    _write_json(out / "regions.json",
                {"problem": problem.name, "count": len(regions),
                 "regions": regions_to_dicts(regions)})
    _write_manifest(out, "explicit", cfg, [cfg["problem"], args.config],
                    ["regions.json"])
    print(f"explicit: {len(regions)} full-dimensional regions "
          f"-> {out / 'regions.json'}")
    return EXIT_OK


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "simulate": _cmd_simulate,
    "export": _cmd_export,
    "bench": _cmd_bench,
    "explicit": _cmd_explicit,
}


def _add_common(sp):
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--config", help="JSON file with option defaults")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="treempc",
        description="Oblique decision trees approximating linear MPC laws.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("generate", help="label a state grid with MPC moves")
    _add_common(sp)
    sp.add_argument("--problem", help="built-in name (case1, case2) or JSON path")
    sp.add_argument("--delta", type=float, help="lattice spacing")
    sp.add_argument("--count", type=int, help="subsample size (full grid if omitted)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int, help="worker threads for labeling")
    sp.add_argument("--box-lo", dest="box_lo", help="comma-separated lower corner")
    sp.add_argument("--box-hi", dest="box_hi", help="comma-separated upper corner")

    sp = sub.add_parser("train", help="fit and harden an oblique tree")
    _add_common(sp)
    sp.add_argument("--data", help="dataset.dsbin path")
    sp.add_argument("--depth", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--learning-rate", dest="learning_rate", type=float)
    sp.add_argument("--alpha-start", dest="alpha_start", type=float)
    sp.add_argument("--alpha-growth", dest="alpha_growth", type=float)
    sp.add_argument("--alpha-max", dest="alpha_max", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--validation-fraction", dest="validation_fraction",
                    type=float)
    sp.add_argument("--restarts", type=int)
    sp.add_argument("--ridge", type=float)
    sp.add_argument("--init-noise", dest="init_noise", type=float)

    sp = sub.add_parser("evaluate", help="accuracy, suboptimality and bound")
    _add_common(sp)
    sp.add_argument("--problem")
    sp.add_argument("--data")
    sp.add_argument("--tree")
    sp.add_argument("--test-states", dest="test_states", type=int)
    sp.add_argument("--lambda-states", dest="lambda_states", type=int)
    sp.add_argument("--lambda-steps", dest="lambda_steps", type=int)
    sp.add_argument("--jump-samples", dest="jump_samples", type=int)
    sp.add_argument("--k-max-probes", dest="k_max_probes", type=int)
    sp.add_argument("--iss", action="store_const", const=True,
                    help="also run the disturbed stability probe")
    sp.add_argument("--iss-trajectories", dest="iss_trajectories", type=int)
    sp.add_argument("--iss-steps", dest="iss_steps", type=int)
    sp.add_argument("--w-bound", dest="w_bound", type=float)
    sp.add_argument("--e-bound", dest="e_bound", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--jobs", type=int)

    sp = sub.add_parser("simulate", help="roll out one closed loop")
    _add_common(sp)
    sp.add_argument("--problem")
    sp.add_argument("--tree")
    sp.add_argument("--controller", choices=["tree", "mpc", "explicit"])
    sp.add_argument("--x0", help="comma-separated initial state")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--w-bound", dest="w_bound", type=float)
    sp.add_argument("--e-bound", dest="e_bound", type=float)
    sp.add_argument("--dist-mode", dest="dist_mode",
                    choices=["uniform", "signflip"])
    sp.add_argument("--seed", type=int)

    sp = sub.add_parser("export", help="write rules.txt and/or dataset.csv")
    _add_common(sp)
    sp.add_argument("--tree")
    sp.add_argument("--data")
    sp.add_argument("--precision", type=int)
    sp.add_argument("--format", choices=["rules", "json", "both"],
                    help="tree export style (default rules)")

    sp = sub.add_parser("bench", help="time tree vs exact MPC evaluations")
    _add_common(sp)
    sp.add_argument("--problem")
    sp.add_argument("--tree")
    sp.add_argument("--states", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--chain-steps", dest="chain_steps", type=int,
                    help="also time warm-started closed-loop MPC solves")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--box-lo", dest="box_lo")
    sp.add_argument("--box-hi", dest="box_hi")

    sp = sub.add_parser("explicit", help="enumerate the piecewise-affine law")
    _add_common(sp)
    sp.add_argument("--problem")
    sp.add_argument("--box-lo", dest="box_lo")
    sp.add_argument("--box-hi", dest="box_hi")
    sp.add_argument("--max-vars", dest="max_vars", type=int)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _BAD_INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except _NUMERICAL_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
