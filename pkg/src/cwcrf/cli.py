"""Command-line interface: ``cwcrf <subcommand> ...``.

Exit codes: 0 success, 1 some pipeline items failed, 2 argument error,
3 file format / validation error, 4 budget refusal.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import crf, fusion, metrics, pipeline, selection, synth, tuner
from .errors import ArgumentError, BudgetExceededError, FormatError, ValidationError
from .tensor_io import read_labels, read_ppm, read_tensor, validate_probability_map, write_pgm, write_tensor

logger = logging.getLogger("cwcrf")

EXIT_OK, EXIT_ITEMS_FAILED, EXIT_ARGS, EXIT_FORMAT, EXIT_BUDGET = 0, 1, 2, 3, 4


def _emit(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- select -------------------------------------------------------------------


def cmd_select(args):
    matrix = selection.load_iou_csv(args.matrix, args.units)
    if args.exclude:
        matrix = matrix.without_classes(args.exclude)
    k = selection.DEFAULT_K if args.k is None else args.k
    pick = selection.brute_force_select if args.brute_force else selection.greedy_select
    result = pick(matrix, k)
    out = result.to_dict(matrix)
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    if args.json:
        _emit(out)
        return EXIT_OK
    width = max(len(n) for n in matrix.network_names)
    print(f"{'step':>4}  {'network':<{width}}  oracle mIoU")
    for step, (i, m) in enumerate(zip(result.ordered_indices, result.per_step_miou), start=1):
        print(f"{step:>4}  {matrix.network_names[i]:<{width}}  {100 * m:.2f}")
    return EXIT_OK


# -- fuse ---------------------------------------------------------------------


def _parse_maps(specs):
    out = []
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise ArgumentError(f"--map expects NAME=PATH, got {spec!r}")
        out.append((name, path))
    return out


def cmd_fuse(args):
    cfg = fusion.FusionConfig.from_json(args.config) if args.config else fusion.FusionConfig()
    cfg = fusion.FusionConfig(args.alpha if args.alpha is not None else cfg.alpha, args.mode or cfg.mode)
    pairs = _parse_maps(args.map)
    maps = [validate_probability_map(read_tensor(p)) for _, p in pairs]
    names = [n for n, _ in pairs]
    iou = None
    if cfg.mode != "uniform" or args.weights_out:
        if not args.matrix:
            raise ArgumentError(f"fusion mode {cfg.mode!r} needs --matrix")
        matrix = selection.load_iou_csv(args.matrix, args.units)
        if matrix.n_classes != maps[0].shape[0]:
            raise ArgumentError(f"matrix has {matrix.n_classes} classes, maps have {maps[0].shape[0]}")
        iou = matrix.values[[matrix.network_index(n) for n in names]]
        if args.weights_out:
            w = fusion.uniform_weights(*iou.shape) if cfg.mode == "uniform" else fusion.compute_weights(iou, cfg.alpha)
            fusion.write_weights_csv(args.weights_out, w, names, matrix.class_names)
    fused = fusion.fuse(maps, iou, cfg)
    write_tensor(args.out, fused.astype(np.float32))
    return EXIT_OK


# -- refine -------------------------------------------------------------------


_PARAM_FLAGS = ("sigma_g", "sigma_b", "sigma_c", "w_g", "w_b", "iterations")


def _params_from_args(args):
    params = crf.CrfParams.from_json(args.params) if args.params else crf.CrfParams()
    overrides = {k: getattr(args, k) for k in _PARAM_FLAGS if getattr(args, k, None) is not None}
    return params.replace(**overrides) if overrides else params


def cmd_refine(args):
    prob = validate_probability_map(read_tensor(args.prob))
    image = read_ppm(args.image)
    params = _params_from_args(args)
    q, labels = crf.refine(prob, image, params, args.backend)
    if labels.size and labels.max() > 255:
        raise ArgumentError("more than 256 classes cannot be written as PGM")
    write_pgm(args.out, labels.astype(np.uint8))
    if args.q_out:
        write_tensor(args.q_out, q.astype(np.float32))
    return EXIT_OK


# -- eval ---------------------------------------------------------------------


_LABEL_SUFFIXES = (".pgm", ".cwt")


def _label_files(path):
    path = Path(path)
    if path.is_file():
        return {path.stem: path}
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file() and p.suffix in _LABEL_SUFFIXES:
            out[str(p.relative_to(path).with_suffix(""))] = p
    return out


def cmd_eval(args):
    preds, gts = _label_files(args.pred), _label_files(args.gt)
    if Path(args.pred).is_file() and Path(args.gt).is_file():
        pairs = [(next(iter(preds.values())), next(iter(gts.values())))]
    else:
        missing = sorted(set(gts) - set(preds))
        if missing:
            raise ArgumentError(f"no prediction for ground-truth file(s): {missing[:5]}")
        pairs = [(preds[k], gts[k]) for k in sorted(gts)]
    if not pairs:
        raise ArgumentError("no label files found")
    names = args.class_names.split(",") if args.class_names else []
    n = len(names) if names else args.classes
    if not n:
        raise ArgumentError("give --classes or --class-names")
    cm = metrics.empty_confusion(n)
    for p, g in pairs:
        cm = metrics.accumulate(cm, read_labels(p), read_labels(g), args.ignore)
    report = metrics.iou_report(cm, args.exclude or (), names)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.table())
    if args.json:
        _emit(report.to_dict())
    return EXIT_OK


# -- tune ---------------------------------------------------------------------


def tune_items(bench_dir, split, k, alpha, mode):
    """Fused (prob, image, gt) items for one benchmark split plus the chosen expert names."""
    matrix = synth.load_benchmark_matrix(bench_dir)
    chosen = list(selection.greedy_select(matrix, min(k, matrix.n_networks)).ordered_indices)
    cfg = fusion.FusionConfig(alpha, mode)
    items = []
    for it in synth.load_split(bench_dir, split):
        maps = [validate_probability_map(it.predictions[i]) for i in chosen]
        items.append((fusion.fuse(maps, matrix.values[chosen], cfg), it.scene.image, it.scene.labels))
    return items, matrix, [matrix.network_names[i] for i in chosen]


def cmd_tune(args):
    items, matrix, names = tune_items(args.bench, args.split, args.k, args.alpha, args.mode)
    space = tuner.SearchSpace.from_dict(json.loads(Path(args.space).read_text())) if args.space else None
    base = _params_from_args(args)
    objective = tuner.make_objective(items, matrix.n_classes, args.backend)
    best, records = tuner.tune(objective, space, args.trials, args.seed, args.strategy, base)
    if args.log:
        tuner.write_trial_log(args.log, records, timing=args.log_timing)
    if args.out:
        best.write_json(args.out)
    score = max(r.score for r in records)
    _emit({"networks": names, "best_score": score, "best_params": best.to_dict(), "trials": len(records)})
    return EXIT_OK


# -- synth --------------------------------------------------------------------


def cmd_synth(args):
    cfg = synth.BenchmarkConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else synth.BenchmarkConfig()
    changes = {}
    if args.size:
        changes.update(height=args.size[0], width=args.size[1])
    if args.n_val is not None:
        changes["n_val"] = args.n_val
    if args.n_test is not None:
        changes["n_test"] = args.n_test
    if changes:
        cfg = synth.BenchmarkConfig.from_dict({**cfg.to_dict(), **changes})
    bench = synth.gen_benchmark(args.seed, cfg)
    synth.write_benchmark(bench, args.out)
    _emit({"out": str(args.out), "networks": list(cfg.network_names), "val": len(bench.val), "test": len(bench.test)})
    return EXIT_OK


# -- pipeline -----------------------------------------------------------------


def cmd_pipeline(args):
    overrides = {
        "k": args.k, "alpha": args.alpha, "mode": args.mode, "backend": args.backend,
        "output_dir": args.output_dir, "input_dir": args.input_dir, "crf_params": args.params,
        "units": args.units, "threads": args.threads,
    }
    if args.overlay:
        overrides["overlay"] = True
    cfg = pipeline.PipelineConfig.from_json(args.config, overrides)
    summary, report, timing = pipeline.run_pipeline(cfg)
    if report is not None:
        print(report.table(row_label="fused"))
    _emit({"miou": summary.get("miou"), "networks": summary["networks"], "failed": summary["failed"],
           "timing": timing.to_dict()})
    return EXIT_ITEMS_FAILED if summary["failed"] else EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_param_flags(p):
    p.add_argument("--params", help="CRF params JSON")
    for name in _PARAM_FLAGS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int if name == "iterations" else float)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand's copy of a flag from resetting the global one
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="images processed concurrently")
    common.add_argument("--units", choices=("percent", "fraction"), default=argparse.SUPPRESS,
                        help="IoU CSV units (default percent)")
    common.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="cwcrf", parents=[common],
                                     description="Class-wise fusion of segmentation maps with dense-CRF refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", parents=[common], help="choose expert networks from an IoU matrix")
    p.add_argument("matrix")
    p.add_argument("--k", type=int)
    p.add_argument("--exclude", nargs="*", default=[], help="class names to drop before selecting")
    p.add_argument("--brute-force", action="store_true")
    p.add_argument("--json", action="store_true", help="print JSON instead of a table")
    p.add_argument("--out", help="also write the selection JSON here")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("fuse", parents=[common], help="fuse K probability maps")
    p.add_argument("--matrix")
    p.add_argument("--map", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=fusion.MODES)
    p.add_argument("--config", help="fusion config JSON {alpha, mode}")
    p.add_argument("--weights-out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("refine", parents=[common], help="CRF-refine a fused map")
    p.add_argument("--prob", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--backend", choices=("auto", "exact", "windowed"), default="auto")
    p.add_argument("--out", required=True)
    p.add_argument("--q-out")
    _add_param_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="IoU report for predicted vs ground-truth labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--class-names")
    p.add_argument("--exclude", nargs="*", default=[])
    p.add_argument("--ignore", type=int, default=metrics.DEFAULT_IGNORE)
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tune", parents=[common], help="Bayesian tuning of CRF params on a benchmark split")
    p.add_argument("--bench", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--trials", type=int, default=tuner.DEFAULT_TRIALS)
    p.add_argument("--strategy", choices=tuner.STRATEGIES, default="smbo")
    p.add_argument("--k", type=int, default=selection.DEFAULT_K)
    p.add_argument("--alpha", type=float, default=fusion.DEFAULT_ALPHA)
    p.add_argument("--mode", choices=fusion.MODES, default="probability")
    p.add_argument("--backend", choices=("auto", "exact", "windowed"), default="auto")
    p.add_argument("--space", help="search space JSON {param: {lower, upper, scale}}")
    p.add_argument("--log", help="JSON-lines trial log")
    p.add_argument("--log-timing", action="store_true", help="include wall times in the log")
    p.add_argument("--out", help="best params JSON")
    _add_param_flags(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("synth", parents=[common], help="write a seeded synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="benchmark config JSON")
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", parents=[common], help="select, fuse, refine and score a batch")
    p.add_argument("--config", required=True)
    p.add_argument("--input-dir")
    p.add_argument("--output-dir")
    p.add_argument("--params", help="CRF params JSON")
    p.add_argument("--k", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=fusion.MODES)
    p.add_argument("--backend", choices=("auto", "exact", "windowed"))
    p.add_argument("--overlay", action="store_true")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", 0), ("threads", None), ("units", None), ("verbose", 0)):
        if not hasattr(args, name):
            setattr(args, name, default)
    # pipeline keeps None so the config file's values survive
    if args.command != "pipeline":
        args.units = args.units or "percent"
        args.threads = args.threads or 1
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArgumentError as exc:
        parser.print_usage(sys.stderr)
        print(f"cwcrf: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (FormatError, ValidationError) as exc:
        print(f"cwcrf: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except BudgetExceededError as exc:
        print(f"cwcrf: refused: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except FileNotFoundError as exc:
        print(f"cwcrf: error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
