"""Command-line workbench: ``flowmatch <subcommand> [flags]``.

Every subcommand writes into ``<out>/<run_id>/`` with the layout
``manifest.json, config, checkpoints/, csv/, reports/``. The manifest lists
each emitted file with its SHA-256. Exit codes: 0 success, 1 numerical
failure, 2 usage, 3 unknown benchmark, 4 bad configuration or input file,
5 checkpoint error.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from importlib import metadata

import numpy as np

from . import _backend, benchmark, diagnostics, flow_ode, metrics, seeding, toydata
from .coupling import CostSpec
from .errors import ConfigError, FlowMatchError
from .fieldnet import VectorFieldNet, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train

PRESETS = {
    "circular_mog_source": toydata.circular_mog_source,
    "five_gaussians_target": toydata.five_gaussians_target,
    "eight_gaussians_source": toydata.eight_gaussians_source,
    "moons_target": toydata.moons_target,
}


def tool_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# --- config files -------------------------------------------------------------

def parse_value(text):
    """JSON scalar or list if it parses, comma list of numbers, else the bare string."""
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "," in text:
        return [parse_value(p) for p in text.split(",") if p.strip()]
    return text


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Returns a flat dict."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = parse_value(value)
    return out


def _format_value(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple, dict)) or v is None or isinstance(v, bool):
        return json.dumps(v)
    return str(v)


def write_config(path, flat):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(flat):
            fh.write(f"{key} = {_format_value(flat[key])}\n")
    return path


def resolve_distribution(name, params=None):
    """Preset name or distribution kind, with parameter overrides."""
    params = dict(params or {})
    if name in PRESETS:
        base = PRESETS[name]()
        return toydata.Distribution2DSpec(base.kind, {**base.params, **params})
    return toydata.Distribution2DSpec(name, params)


def _split_side(flat, side):
    params = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith(side + ".")}
    return params


def config_from_flat(flat):
    """Build a :class:`TrainConfig` from ``key = value`` entries.

    Distribution parameters use dotted keys (``source.radius = 0.6``) and
    the cost uses ``cost`` (kind) and ``epsilon``.
    """
    flat = dict(flat)
    kwargs = {}
    for side in ("source", "target"):
        params = _split_side(flat, side)
        for k in list(flat):
            if k.startswith(side + "."):
                del flat[k]
        if side in flat or params:
            name = flat.pop(side, None)
            default = TrainConfig.__dataclass_fields__[side].default_factory()
            kwargs[side] = (resolve_distribution(name, params) if name is not None
                            else toydata.Distribution2DSpec(default.kind, {**default.params, **params}))
    kind = flat.pop("cost", "euclidean")
    eps = flat.pop("epsilon", None)
    kwargs["cost"] = CostSpec(kind, None if eps is None else float(eps))
    if "hidden_dims" in flat:
        h = flat.pop("hidden_dims")
        kwargs["hidden_dims"] = tuple(h) if isinstance(h, list) else (int(h),)
    fields = TrainConfig.__dataclass_fields__
    unknown = set(flat) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kwargs.update(flat)
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def flatten_config(cfg):
    flat = {k: v for k, v in cfg.to_dict().items() if k not in ("cost", "source", "target")}
    flat["cost"] = cfg.cost.kind
    flat["epsilon"] = cfg.cost.epsilon
    for side in ("source", "target"):
        spec = getattr(cfg, side)
        flat[side] = spec.kind
        for k, v in spec.params.items():
            flat[f"{side}.{k}"] = v
    return flat


# --- run directories ----------------------------------------------------------

class RunDir:
    """One run's output directory; tracks every file written for the manifest."""

    def __init__(self, root, run_id):
        self.run_id = run_id
        self.path = os.path.join(root, run_id)
        for sub in ("checkpoints", "csv", "reports"):
            os.makedirs(os.path.join(self.path, sub), exist_ok=True)
        self.files = []

    def file(self, *parts):
        rel = os.path.join(*parts)
        if rel not in self.files:
            self.files.append(rel)
        return os.path.join(self.path, rel)

    def write_json(self, rel, doc):
        with open(self.file(rel), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def manifest(self, command, config, seed, wallclock):
        inventory = []
        for rel in sorted(self.files):
            with open(os.path.join(self.path, rel), "rb") as fh:
                data = fh.read()
            inventory.append({"path": rel.replace(os.sep, "/"), "bytes": len(data),
                              "sha256": hashlib.sha256(data).hexdigest()})
        doc = {"run_id": self.run_id, "command": command, "config": config, "seed": seed,
               "tool_version": tool_version(), "backend": _backend.name(),
               "wallclock_s": wallclock, "files": inventory}
        with open(os.path.join(self.path, "manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return doc


def make_run_id(command, config, seed):
    digest = hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()
    return f"{command}-s{seed}-{digest[:10]}"


def write_points_csv(path, pts):
    pts = toydata.as_points(pts)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(f"x{i}" for i in range(pts.shape[1])) + "\n")
        for row in pts:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return path


def read_points_csv(path):
    try:
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            data = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read points from {path}: {exc}") from exc
    if data.size == 0 or data.shape[1] != len(header):
        raise ConfigError(f"{path}: expected {len(header)} columns of points")
    return data


def _kv_pairs(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v)
    return out


def _float_list(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _int_list(text):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


# --- subcommands --------------------------------------------------------------

def cmd_gen_data(args):
    spec = resolve_distribution(args.dist, _kv_pairs(args.param))
    config = {"dist": spec.to_dict(), "n": args.n}
    run = RunDir(args.out, args.run_id or make_run_id("gen-data", config, args.seed))
    write_config(run.file("config"), {"dist": spec.kind, "n": args.n, "seed": args.seed,
                                      **{f"dist.{k}": v for k, v in spec.params.items()}})
    pts = toydata.sample(spec, args.n, seeding.stream(args.seed, "data")).points
    write_points_csv(run.file("csv", "samples.csv"), pts)
    return run, config


def _train_config(args):
    flat = read_config(args.config) if args.config else {}
    overrides = {"strategy": args.strategy, "epsilon": args.eps, "batch_size": args.batch_size,
                 "iterations": args.iters, "seed": args.seed, "lr": args.lr,
                 "checkpoint_every": args.checkpoint_every, "source": args.source,
                 "target": args.target}
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_flat(flat)


def cmd_train(args):
    cfg = _train_config(args)
    config = cfg.to_dict()
    run = RunDir(args.out, args.run_id or make_run_id("train", config, cfg.seed))
    write_config(run.file("config"), flatten_config(cfg))
    ckpt_dir = os.path.join(run.path, "checkpoints")
    net, log = train(cfg, checkpoint_dir=ckpt_dir if cfg.checkpoint_every else None,
                     resume=args.resume)
    for path in log.checkpoints:
        run.file(os.path.relpath(path, run.path))
    save_checkpoint(run.file("checkpoints", "final.json"), net, rng_seed=cfg.seed,
                    training_config=config, step=cfg.iterations)
    log.to_csv(run.file("csv", "training_log.csv"), deterministic=args.deterministic)
    run.write_json(os.path.join("reports", "train.json"),
                   {"final_loss": float(log.rows[-1][1]), "iterations": cfg.iterations,
                    "strategy": cfg.strategy, "epsilon": cfg.cost.epsilon})
    return run, config


def _load_net(path):
    doc = load_checkpoint(path)
    cfg = doc.get("training_config")
    return doc["net"], cfg


def _source_from_checkpoint(cfg_doc, override, side="source"):
    if override is not None:
        return resolve_distribution(override)
    if cfg_doc and cfg_doc.get(side):
        return toydata.Distribution2DSpec.from_dict(cfg_doc[side])
    raise ConfigError(f"checkpoint has no {side} distribution; pass --{side}")


def cmd_sample(args):
    net, cfg_doc = _load_net(args.checkpoint)
    source = _source_from_checkpoint(cfg_doc, args.source)
    config = {"checkpoint": os.path.abspath(args.checkpoint), "n": args.n, "solver": args.solver,
              "steps": args.steps, "rtol": args.rtol, "atol": args.atol, "source": source.to_dict(),
              "trajectories": args.trajectories}
    run = RunDir(args.out, args.run_id or make_run_id("sample", config, args.seed))
    write_config(run.file("config"), {k: v for k, v in config.items() if k != "source"})
    x0 = toydata.sample(source, args.n, seeding.stream(args.seed, "eval")).points
    traj = flow_ode.integrate(net, x0, args.solver, args.steps, args.rtol, args.atol,
                              record=args.trajectories > 0)
    write_points_csv(run.file("csv", "samples.csv"), traj.endpoint)
    if args.trajectories > 0:
        m = min(args.trajectories, args.n)
        sub = flow_ode.Trajectory(traj.times, traj.states[:, :m], traj.eval_times,
                                  traj.speed_sq[:, :m], traj.path_energy[:m], traj.nfe)
        flow_ode.write_trajectories_csv(run.file("csv", "trajectories.csv"), sub)
    energy = np.atleast_1d(flow_ode.path_energy(traj))
    run.write_json(os.path.join("reports", "sample.json"),
                   {"nfe": traj.nfe, "accepted": traj.accepted, "rejected": traj.rejected,
                    "path_energy_mean": float(energy.mean()), "n": args.n})
    return run, config


def cmd_eval(args):
    real, fake = read_points_csv(args.real), read_points_csv(args.fake)
    config = {"real": os.path.abspath(args.real), "fake": os.path.abspath(args.fake), "k": args.k,
              "kde_bandwidth": args.kde_bandwidth, "checkpoint": args.checkpoint}
    run = RunDir(args.out, args.run_id or make_run_id("eval", config, args.seed))
    write_config(run.file("config"), config)
    npe = None
    if args.checkpoint:
        net, cfg_doc = _load_net(args.checkpoint)
        source = _source_from_checkpoint(cfg_doc, args.source)
        target = _source_from_checkpoint(cfg_doc, args.target, "target")
        npe = metrics.npe(net, source, target, args.n_mc, args.solver, args.steps, args.rtol,
                          args.atol, rng=seeding.stream(args.seed, "mc"))
    report = metrics.evaluate(real, fake, args.k, npe, rng=seeding.stream(args.seed, "eval"),
                              config=config)
    report.to_json(run.file("reports", "metrics.json"))
    if args.kde_bandwidth:
        metrics.kde_grid(fake, args.kde_bandwidth).to_csv(run.file("csv", "kde.csv"))
    return run, config


def cmd_diagnose_eps(args):
    flat = read_config(args.config) if args.config else {}
    source = resolve_distribution(args.source or flat.get("source", "circular_mog_source"),
                                  _split_side(flat, "source"))
    target = resolve_distribution(args.target or flat.get("target", "five_gaussians_target"),
                                  _split_side(flat, "target"))
    config = {"source": source.to_dict(), "target": target.to_dict(), "n_mc": args.n_mc,
              "n_eval": args.n_eval, "rho": args.rho}
    run = RunDir(args.out, args.run_id or make_run_id("diagnose-eps", config, args.seed))
    write_config(run.file("config"), {"n_mc": args.n_mc, "n_eval": args.n_eval, "rho": args.rho,
                                      "seed": args.seed, "source": source.kind,
                                      "target": target.kind})
    scan = diagnostics.select_epsilon(source, target, n_mc=args.n_mc, n_eval=args.n_eval,
                                      rng=seeding.stream(args.seed, "mc"), rho=args.rho)
    scan.to_json(run.file("reports", "epsilon_scan.json"))
    scan.to_csv(run.file("csv", "epsilon_scan.csv"))
    return run, config


def cmd_verify_prop3(args):
    eps = 1.0 if args.eps is None else args.eps
    sizes = _int_list(args.batch_sizes)
    config = {"epsilon": eps, "batch_sizes": sizes, "reps": args.reps, "n_pairs": args.n_pairs,
              "r_source": 1.0, "r_target": 2.0}
    run = RunDir(args.out, args.run_id or make_run_id("verify-prop3", config, args.seed))
    write_config(run.file("config"), {**config, "seed": args.seed})
    net = VectorFieldNet.init(2, (64, 64), seeding.stream(args.seed, "init"))
    table = diagnostics.verify_prop3(net, CostSpec("euclidean", eps), sizes, args.reps,
                                     seeding.stream(args.seed, "mc"), n_pairs=args.n_pairs)
    table.to_csv(run.file("csv", "prop3.csv"))
    dev = table.deviations()
    run.write_json(os.path.join("reports", "prop3.json"),
                   {"reference": table.reference, "reference_stderr": table.reference_stderr,
                    "deviations": dev.tolist(),
                    "converging": bool(diagnostics.is_converging(
                        dev, [r.ratio_stderr for r in table.rows]))})
    return run, config


def cmd_benchmark(args):
    bench = benchmark.get_benchmark(args.name)
    if args.methods:
        eps = _float_list(args.eps) if args.eps else None
        methods = benchmark.parse_methods(bench, [m.strip() for m in args.methods.split(",")], eps)
    else:
        methods = benchmark.standard_methods(bench)
    seeds = _int_list(args.seeds)
    iterations = args.iters or 60_000
    ec = benchmark.EvalConfig(n_gen=args.n_gen, steps=args.steps)
    config = {"name": args.name, "methods": [m.label for m in methods], "seeds": seeds,
              "iterations": iterations, "eval": vars(ec)}
    run = RunDir(args.out, args.run_id or make_run_id("benchmark", config, seeds[0]))
    write_config(run.file("config"), {"name": args.name, "iterations": iterations,
                                      "methods": config["methods"], "seeds": seeds,
                                      "n_gen": ec.n_gen, "steps": ec.steps})
    result = benchmark.run_benchmark(args.name, methods, seeds, iterations, ec,
                                     workers=1 if args.deterministic else None)
    result.write_runs_csv(run.file("csv", "runs.csv"))
    result.write_summary_csv(run.file("csv", "summary.csv"))
    table = result.format_table()
    with open(run.file("reports", "table.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return run, config


# --- parser -------------------------------------------------------------------

def _common(p, seed_default=0):
    p.add_argument("--seed", type=int, default=seed_default)
    p.add_argument("--out", default="runs", help="root directory for run folders")
    p.add_argument("--run-id", help="override the derived run id")
    p.add_argument("--deterministic", action="store_true",
                   help="zero out timings and run single-process")


def _solver(p):
    p.add_argument("--solver", choices=("euler", "dopri5"), default="euler")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--atol", type=float, default=1e-5)


def build_parser():
    parser = argparse.ArgumentParser(prog="flowmatch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="draw samples from a distribution")
    _common(p)
    p.add_argument("--dist", default="circular_mog_source", help="preset name or distribution kind")
    p.add_argument("--param", action="append", help="distribution parameter key=value")
    p.add_argument("--n", type=int, default=1000)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a velocity field")
    _common(p, seed_default=None)
    p.add_argument("--config")
    p.add_argument("--strategy", choices=("icfm", "wcfm", "otcfm_exact", "otcfm_sinkhorn"))
    p.add_argument("--eps", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="integrate a trained field from source draws")
    _common(p)
    _solver(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--source")
    p.add_argument("--trajectories", type=int, default=0, help="dump this many full paths")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score generated samples against real ones")
    _common(p)
    _solver(p)
    p.add_argument("--real", required=True)
    p.add_argument("--fake", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--kde-bandwidth", type=float)
    p.add_argument("--checkpoint", help="also report normalised path energy of this field")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--n-mc", type=int, default=2048)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose-eps", help="scan epsilon by tilt relative variance")
    _common(p)
    p.add_argument("--config")
    p.add_argument("--source")
    p.add_argument("--target")
    p.add_argument("--n-mc", type=int, default=2048)
    p.add_argument("--n-eval", type=int, default=512)
    p.add_argument("--rho", type=float, default=0.15)
    p.set_defaults(func=cmd_diagnose_eps)

    p = sub.add_parser("verify-prop3", help="batch entropic OT loss against its large-batch limit")
    _common(p)
    p.add_argument("--eps", type=float)
    p.add_argument("--batch-sizes", default="8,32,128,512")
    p.add_argument("--reps", type=int, default=16)
    p.add_argument("--n-pairs", type=int, default=1_000_000)
    p.set_defaults(func=cmd_verify_prop3)

    p = sub.add_parser("benchmark", help="multi-seed method comparison on a named benchmark")
    _common(p)
    p.add_argument("--name", required=True)
    p.add_argument("--methods", help="comma list; 'wcfm' expands over --eps")
    p.add_argument("--eps", help="comma list of epsilons for 'wcfm'")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--iters", type=int)
    p.add_argument("--n-gen", type=int, default=2048)
    p.add_argument("--steps", type=int, default=100)
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", 0) is None and args.command != "train":
        args.seed = 0
    t0 = time.perf_counter()
    try:
        run, config = args.func(args)
        seed = args.seed
        if args.command == "train":
            seed = config["seed"]
        wall = 0.0 if args.deterministic else round(time.perf_counter() - t0, 3)
        run.manifest(args.command, config, seed, wall)
    except FlowMatchError as exc:
        print(f"flowmatch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    print(run.path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
