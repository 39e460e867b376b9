"""``fragto`` command line.

Every command writes into an output directory and leaves a ``manifest.txt``
there with its effective settings; ``--config <manifest>`` replays a run.
Exit codes: 0 success, 2 usage or configuration error, 3 numerical or I/O
failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, formats, pipeline
from .fem import FemError
from .fragmap import FragmentError, FragmentSpec, NormalizationFactors, ScaleSpec
from .grid import CATALOG, DEFAULT_RATIO, ProblemError, make_problem
from .mapnet import (ModelFileError, TrainConfig, TrainingDiverged, load_model, save_model,
                     smoothed)
from .topopt import OptimizerConfig, run_to

log = logging.getLogger("fragto")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
_RESERVED = ("command", "toolkit_version")
_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off", "")


class ConfigError(ValueError):
    pass


def _size(text: str) -> tuple[int, int]:
    w, sep, h = text.lower().partition("x")
    try:
        size = (int(w), int(h)) if sep else (int(w), int(w))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 128x128, got {text!r}") from None
    if min(size) < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return size


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text) -> bool:
    t = str(text).strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


# ---------------------------------------------------------------- arguments

def _add_problem(p, method_default="beso"):
    p.add_argument("--problem", required=True, choices=CATALOG)
    p.add_argument("--size", type=_size, default=(128, 128), help="WxH fine mesh")
    p.add_argument("--method", choices=("simp", "beso"), default=method_default)
    p.add_argument("--ratio", type=_positive_int, default=DEFAULT_RATIO)
    p.add_argument("--volume-fraction", type=float, default=None)
    p.add_argument("--penal", type=float, default=3.0)
    p.add_argument("--filter-radius", type=float, default=None)
    p.add_argument("--max-iters", type=_positive_int, default=200)
    p.add_argument("--evolution-rate", type=float, default=0.02)
    p.add_argument("--move-limit", type=float, default=0.2)
    p.add_argument("--solver", choices=("direct", "pcg"), default="direct")


def _add_fragments(p, overlap_default=False):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--crop-scale", type=_positive_int, default=None,
                   help="fragments per coarse side (coarse patch = coarse width / crop scale)")
    g.add_argument("--coarse-patch", type=_positive_int, default=None)
    p.add_argument("--overlap", type=_bool, nargs="?", const=True, default=overlap_default)


def _add_norm(p):
    p.add_argument("--norm-coarse", type=float, default=None)
    p.add_argument("--norm-fine", type=float, default=None)


def _add_train(p):
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--steps", type=_positive_int, default=1000)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--channels", type=_positive_int, default=16)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fragto", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fragto {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", default=None, help="key=value file (e.g. a previous manifest)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = command("gen-data", "harvest (coarse energy, density, fine energy) from fine FEM-TO")
    _add_problem(p)
    p.add_argument("--iters", type=int, required=True)

    p = command("train", "train a network on a harvested dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--first", type=int, default=None, help="use only the first N samples")
    _add_fragments(p)
    _add_train(p)
    _add_norm(p)

    p = command("optimize", "run topology optimization with either engine")
    _add_problem(p)
    p.add_argument("--engine", choices=("fem", "mapnet"), default="fem")
    p.add_argument("--model", default=None)
    p.add_argument("--overlap", type=_bool, nargs="?", const=True, default=True)
    p.add_argument("--auto-norm", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--verify", type=_bool, nargs="?", const=True, default=True,
                   help="score the final design with one fine FEM solve")
    _add_norm(p)

    p = command("eval", "score a model on held-out iterations of a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--after", type=int, default=0, help="use iterations > AFTER")
    p.add_argument("--upto", type=int, default=None, help="use iterations <= UPTO")
    p.add_argument("--overlap", type=_bool, nargs="?", const=True, default=False)

    p = command("ablate", "train/evaluate over ratios x crop scales x sample counts")
    _add_problem(p)
    p.add_argument("--ratios", type=_int_list, default=[DEFAULT_RATIO])
    p.add_argument("--crops", type=_int_list, default=[4])
    p.add_argument("--ns", type=_int_list, default=[60])
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--test-iters", type=_positive_int, default=40)
    p.add_argument("--overlap", type=_bool, nargs="?", const=True, default=False)
    _add_train(p)

    p = command("detect-nonunique", "list fragment pairs with equal inputs and different targets")
    p.add_argument("--data", required=True)
    p.add_argument("--first", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-12)
    _add_fragments(p)
    _add_norm(p)

    p = command("render", "write a grid file as a binary graymap")
    p.add_argument("--grid", required=True)
    p.add_argument("--kind", choices=("density", "energy"), required=True)

    p = command("bench", "median per-phase time of one TO iteration under each engine")
    _add_problem(p)
    p.add_argument("--model", required=True)
    p.add_argument("--overlap", type=_bool, nargs="?", const=True, default=True)
    p.add_argument("--repeats", type=_positive_int, default=5)
    return parser


def _dests(p: argparse.ArgumentParser) -> dict:
    return {a.dest: a for a in p._actions if a.dest not in ("help", "version", "config")}


def _peek(argv):
    """Subcommand and ``--config`` path, found without enforcing required flags."""
    command = next((t for t in argv if not t.startswith("-")), None)
    config = None
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            config = argv[i + 1]
        elif tok.startswith("--config="):
            config = tok.split("=", 1)[1]
    return command, config


def parse_args(argv) -> argparse.Namespace:
    """Parse flags, letting a ``--config`` file supply values flags do not set."""
    parser = build_parser()
    command, config = _peek(argv)
    subs = parser._subparsers._group_actions[0].choices
    if config is None or command not in subs:
        return parser.parse_args(argv)
    sub = subs[command]
    try:
        entries = formats.read_manifest(config)
    except (OSError, formats.FormatError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    known = _dests(sub)
    if entries.get("command", command) != command:
        raise ConfigError(f"config is for '{entries['command']}', not '{command}'")
    defaults = {}
    for key, value in entries.items():
        if key in _RESERVED or key.startswith("result."):
            continue
        dest = key.replace("-", "_")
        if dest not in known or dest == "command":
            raise ConfigError(f"unknown config key {key!r}")
        action = known[dest]
        if action.type is _bool or isinstance(action, argparse._StoreTrueAction):
            try:
                defaults[dest] = _bool(value)
            except argparse.ArgumentTypeError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            defaults[dest] = value   # strings go through the action's type
        action.required = False
    # string defaults still pass through each action's type conversion
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------- helpers

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    if isinstance(v, tuple) and len(v) == 2:
        return f"{v[0]}x{v[1]}"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _write_manifest(args, out: Path, extra: dict | None = None):
    items = {"command": args.command, "toolkit_version": __version__}
    for k, v in sorted(vars(args).items()):
        if k in ("command", "config", "verbose") or v is None:
            continue
        items[k] = _fmt(v)
    for k, v in (extra or {}).items():
        items[f"result.{k}"] = _fmt(v)
    formats.write_manifest(out / "manifest.txt", items)


def _optimizer_cfg(args) -> OptimizerConfig:
    return OptimizerConfig(method=args.method, penal=args.penal, filter_radius=args.filter_radius,
                           move_limit=args.move_limit, beso_evolution_rate=args.evolution_rate,
                           max_iters=args.max_iters, solver=args.solver)


def _problem(args):
    w, h = args.size
    return make_problem(args.problem, w, h, ratio=args.ratio, volume_fraction=args.volume_fraction)


def _fspec(args, coarse_w: int, ratio: int) -> FragmentSpec:
    if args.coarse_patch is not None:
        return FragmentSpec(args.coarse_patch, ratio, bool(args.overlap))
    crop = args.crop_scale if args.crop_scale is not None else max(1, coarse_w // 2)
    return FragmentSpec.from_crop_scale(coarse_w, crop, ratio, bool(args.overlap))


def _norm_override(args, fallback=None):
    if args.norm_coarse is None and args.norm_fine is None:
        return fallback
    base = fallback or NormalizationFactors(1.0, 1.0)
    return NormalizationFactors(args.norm_coarse or base.coarse, args.norm_fine or base.fine)


def _spec_from_model(model, overlap: bool) -> FragmentSpec:
    cp, _, ratio = model.fingerprint
    return FragmentSpec(cp, ratio, overlap)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_csv_cell(x) for x in row])


def _csv_cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def _trace_rows(trace):
    return [(r.iteration, r.compliance, r.volume_fraction,
             "" if r.coarse_compliance is None else r.coarse_compliance) for r in trace.records]


# ---------------------------------------------------------------- commands

def cmd_gen_data(args, out: Path):
    if args.iters < 1:
        raise ConfigError("--iters must be positive")
    problem = _problem(args)
    cfg = _optimizer_cfg(args)
    if args.iters > cfg.max_iters:
        raise ConfigError("--iters exceeds --max-iters")
    scale = ScaleSpec(problem.width, problem.height, args.ratio)
    data = pipeline.generate_dataset(problem, cfg, args.iters, scale)
    formats.save_dataset(data, out / "dataset")
    # the dataset folder carries its own manifest; keep the run manifest beside it
    return {"n_samples": len(data)}


def cmd_train(args, out: Path):
    data = formats.load_dataset(args.data)
    if args.first is not None:
        if args.first < 1:
            raise ConfigError("--first must be positive")
        data = data.first(args.first)
    fspec = _fspec(args, data.scale.coarse_w, data.scale.ratio)
    tcfg = TrainConfig(learning_rate=args.lr, steps=args.steps, batch_size=args.batch_size,
                       seed=args.seed)
    norm = _norm_override(args, pipeline.estimate_factors(data) if data.norm is None else data.norm)
    model, losses = pipeline.train_mapnet(data, fspec, tcfg, norm=norm,
                                          channels_base=args.channels)
    save_model(model, out / "model.mnet")
    _write_csv(out / "loss.csv", ("step", "loss"), enumerate(losses, 1))
    first, last = smoothed(losses)
    return {"coarse_patch": fspec.coarse_patch, "norm_coarse": norm.coarse,
            "norm_fine": norm.fine, "loss_first": first, "loss_last": last}


def cmd_optimize(args, out: Path):
    problem = _problem(args)
    cfg = _optimizer_cfg(args)
    if args.engine == "mapnet":
        if not args.model:
            raise ConfigError("--engine mapnet needs --model")
        model = load_model(args.model)
        fspec = _spec_from_model(model, args.overlap)
        if fspec.ratio != args.ratio:
            raise ConfigError(f"model ratio {fspec.ratio} differs from --ratio {args.ratio}")
        trace = pipeline.run_lifted_to(model, problem, cfg, fspec,
                                       norm=_norm_override(args, model.norm),
                                       auto_norm=args.auto_norm)
    else:
        trace = run_to(problem, cfg, keep_fields=False)
    _write_csv(out / "trace.csv", ("iteration", "compliance", "volume_fraction",
                                   "coarse_compliance"), _trace_rows(trace))
    _write_csv(out / "timings.csv", ("iteration", "phase", "seconds"),
               [(r.iteration, k, v) for r in trace.records for k, v in sorted(r.timings.items())])
    formats.write_grid(out / "design.mfld", trace.final_density)
    formats.render(trace.final_density, out / "design.pgm", "density")
    res = {"iterations": trace.n_iters, "converged": trace.converged,
           "final_compliance": trace.records[-1].compliance,
           "final_volume_fraction": trace.records[-1].volume_fraction}
    if args.verify:
        res["fine_compliance"] = pipeline.fine_compliance(problem, trace.final_density, cfg.penal)
    return res


def cmd_eval(args, out: Path):
    model = load_model(args.model)
    data = formats.load_dataset(args.data).window(args.after, args.upto)
    if len(data) == 0:
        raise ConfigError("no samples in the requested iteration window")
    fspec = _spec_from_model(model, args.overlap)
    rep = pipeline.evaluate(model, data, fspec)
    _write_csv(out / "per_sample.csv", ("iteration", "plain_mse_defrag"),
               zip(data.iterations, rep.per_sample))
    return {"l2n_fragment": rep.l2n_fragment, "l2n_defrag": rep.l2n_defrag,
            "plain_mse_fragment": rep.plain_mse_fragment, "plain_mse_defrag": rep.plain_mse_defrag,
            "n_fragments": rep.n_fragments, "n_samples": len(data)}


ABLATION_COLUMNS = ("ratio", "crop_scale", "coarse_patch", "n_train_iters", "overlap", "seed",
                    "fragments_per_sample", "n_train_fragments", "l2n_fragment",
                    "l2n_defrag", "plain_mse_defrag", "final_loss", "nonunique_pairs",
                    "t_generate", "t_train", "t_eval")


def cmd_ablate(args, out: Path):
    problem = _problem(args)
    tcfg = TrainConfig(learning_rate=args.lr, steps=args.steps, batch_size=args.batch_size)
    rows = pipeline.ablation_suite(problem, args.ratios, args.crops, args.ns,
                                   cfg=_optimizer_cfg(args), tcfg=tcfg,
                                   test_iters=args.test_iters, overlap=args.overlap,
                                   seeds=args.seeds, channels_base=args.channels,
                                   workers=_threads())
    _write_csv(out / "ablation.csv", ABLATION_COLUMNS,
               [[row[c] for c in ABLATION_COLUMNS] for row in rows])
    return {"rows": len(rows)}


def cmd_detect_nonunique(args, out: Path):
    data = formats.load_dataset(args.data)
    if args.first is not None:
        data = data.first(args.first)
    fspec = _fspec(args, data.scale.coarse_w, data.scale.ratio)
    norm = _norm_override(args, data.norm or pipeline.estimate_factors(data))
    batch = pipeline.fragment_dataset(data, fspec, norm)
    pairs = pipeline.detect_nonuniqueness(batch, args.tol)
    _write_csv(out / "pairs.csv", ("first", "second"), pairs)
    return {"pairs": len(pairs), "fragments": len(batch), "coarse_patch": fspec.coarse_patch}


def cmd_render(args, out: Path):
    field = formats.read_grid(args.grid)
    name = Path(args.grid).stem + ".pgm"
    formats.render(field, out / name, args.kind)
    return {"image": name}


def cmd_bench(args, out: Path):
    problem = _problem(args)
    model = load_model(args.model)
    fspec = _spec_from_model(model, args.overlap)
    rows = pipeline.bench_iteration(problem, _optimizer_cfg(args), model, fspec, args.repeats)
    _write_csv(out / "bench.csv", ("engine", "phase", "median_seconds"), rows)
    totals = {engine: s for engine, phase, s in rows if phase == "total"}
    return {"fem_total": totals["fem"], "mapnet_total": totals["mapnet"],
            "speedup": totals["fem"] / totals["mapnet"]}


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "optimize": cmd_optimize, "eval": cmd_eval,
    "ablate": cmd_ablate, "detect-nonunique": cmd_detect_nonunique, "render": cmd_render,
    "bench": cmd_bench,
}


def _threads() -> int:
    raw = os.environ.get("FRAGTO_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FRAGTO_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("FRAGTO_THREADS must be positive")
    return n


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:           # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    except ConfigError as exc:
        print(f"fragto: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        _threads()
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, out)
    except (ConfigError, ProblemError, FragmentError, argparse.ArgumentTypeError) as exc:
        print(f"fragto: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FemError, TrainingDiverged, ModelFileError, formats.FormatError, OSError,
            ValueError, FloatingPointError, ArithmeticError) as exc:
        print(f"fragto: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    _write_manifest(args, out, result)
    for k, v in result.items():
        print(f"{k}={_fmt(v)}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
