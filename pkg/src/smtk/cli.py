"""Command-line entry point: ``smtk <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical
failure (including failed gradient checks).
"""

import argparse
import csv
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

from . import gradcheck
from .errors import FormatError, NumericalError
from .geometry import read_xyzl, write_xyzl
from .network import (
    ABLATION_CASES,
    TOY_CONFIG,
    NetworkConfig,
    ablation_config,
    build,
    count_parameters,
    load,
)
from .train import (
    CLASS_NAMES,
    PRIMITIVE_LABELS,
    TrainSchedule,
    evaluate,
    make_dataset,
    save_metrics_csv,
    toy_experiment,
    train_loop,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
REFERENCE_REDUCTION = 24.3
ABLATION_FIELDS = ["case", "seed", "epochs", "parameters", "loss", "mIoU", "mAcc", "OA"]

log = logging.getLogger("smtk")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (falls back to $SMTK_SEED, then 0)")
    common.add_argument("--config", type=Path, help="network configuration file (key=value lines)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration entry; repeatable")
    common.add_argument("--threads", type=int, default=None, help="cap numerical library threads")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="smtk", description="Soft-masked point transformer toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write synthetic labelled scenes as .xyzl files")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian position noise in meters")
    p.add_argument("--primitives", default="plane,sphere,box")

    for name, helptext in (("train", "train on .xyzl scenes (or generated toy scenes)"),
                           ("eval", "score a checkpoint on labelled .xyzl scenes")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", type=Path, required=name == "eval", help=".xyzl file or directory")
        p.add_argument("--checkpoint", type=Path, required=name == "eval")
        p.add_argument("--out", type=Path, help="output directory (train) or CSV file (eval)")
        p.add_argument("--batch-size", type=int, default=8)
        if name == "train":
            p.add_argument("--eval-data", type=Path, help="held-out .xyzl file or directory")
            p.add_argument("--epochs", type=int, default=8)
            p.add_argument("--lr", type=float, default=0.1)
            p.add_argument("--momentum", type=float, default=0.9)
            p.add_argument("--weight-decay", type=float, default=1e-4)
            p.add_argument("--milestones", type=_int_list, default=(6,))
            p.add_argument("--gamma", type=float, default=0.1)
            p.add_argument("--cosine", action="store_true", help="cosine decay instead of milestones")
            p.add_argument("--scenes", type=int, default=200, help="generated scenes when --data is absent")

    p = sub.add_parser("param-count", parents=[common], help="parameter totals for both sharing modes")
    p.add_argument("--sharing", choices=["shared", "unshared"], help="report a single mode")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--module", action="append", choices=sorted(gradcheck.SUITES), help="suite to run; repeatable")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")

    p = sub.add_parser("ablate", parents=[common], help="train one ablation case on the toy task")
    p.add_argument("--case", required=True, type=str.upper, choices=list(ABLATION_CASES))
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--train-scenes", type=int, default=200)
    p.add_argument("--test-scenes", type=int, default=50)
    p.add_argument("--points", type=int, default=256)
    p.add_argument("--out", type=Path, help="CSV file for the result row")
    return parser


# ---------------------------------------------------------------------------
# helpers


def resolve_seed(seed):
    if seed is not None:
        return seed
    env = os.environ.get("SMTK_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SMTK_SEED must be an integer, got {env!r}") from None


def resolve_config(args, base):
    """Defaults < config file < ``--set`` overrides."""
    config = NetworkConfig.from_file(args.config) if args.config else base
    if args.overrides:
        text = config.to_text() + "\n".join(args.overrides) + "\n"
        config = NetworkConfig.from_text(text, source="--set")
    return config


def read_clouds(path):
    if path.is_dir():
        files = sorted(path.glob("*.xyzl"))
        if not files:
            raise FormatError(f"{path}: no .xyzl files")
    elif path.exists():
        files = [path]
    else:
        raise FormatError(f"{path}: no such file or directory")
    return [read_xyzl(f) for f in files]


def _check_labelled(clouds, n_classes, source):
    for cloud in clouds:
        if cloud.labels is None:
            raise FormatError(f"{source}: scenes must carry labels")
        try:
            cloud.check_labels(n_classes)
        except ValueError as exc:
            raise FormatError(f"{source}: {exc}") from None


def _summary_line(metrics):
    return " ".join(f"{k}={v:.4f}" for k, v in metrics.summary().items())


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, seed):
    primitives = tuple(p.strip() for p in args.primitives.split(",") if p.strip())
    unknown = set(primitives) - set(PRIMITIVE_LABELS)
    if unknown:
        raise UsageError(f"unknown primitives {sorted(unknown)}; choose from {', '.join(PRIMITIVE_LABELS)}")
    clouds = make_dataset(args.scenes, points=args.points, seed=seed, noise=args.noise, primitives=primitives)
    args.out.mkdir(parents=True, exist_ok=True)
    for i, cloud in enumerate(clouds):
        write_xyzl(args.out / f"scene_{i:04d}.xyzl", cloud)
    print(f"wrote {len(clouds)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args, seed):
    config = resolve_config(args, TOY_CONFIG)
    if args.data:
        train_set = read_clouds(args.data)
        eval_set = read_clouds(args.eval_data) if args.eval_data else None
    else:
        train_set = make_dataset(args.scenes, seed=seed)
        eval_set = make_dataset(max(1, args.scenes // 4), seed=seed + 1)
    _check_labelled(train_set, config.n_classes, args.data or "generated data")
    if eval_set is not None:
        _check_labelled(eval_set, config.n_classes, args.eval_data or "generated data")
    out = args.out or Path("smtk-run")
    out.mkdir(parents=True, exist_ok=True)
    checkpoint = args.checkpoint or out / "best.ckpt"
    schedule = TrainSchedule(epochs=args.epochs, lr=args.lr, momentum=args.momentum,
                             weight_decay=args.weight_decay, milestones=args.milestones,
                             gamma=args.gamma, cosine=args.cosine, batch_size=args.batch_size, seed=seed)
    (out / "config.txt").write_text(config.to_text(), encoding="utf-8")
    model = build(config, seed=seed)
    records = train_loop(model, train_set, schedule, eval_set=eval_set, log_path=out / "log.jsonl",
                         checkpoint_path=checkpoint)
    save_metrics_csv(out / "metrics.csv", records)
    last = records[-1]
    print(f"epochs={len(records)} loss={last['loss']:.4f} mIoU={last['mIoU']:.4f} "
          f"mAcc={last['mAcc']:.4f} OA={last['OA']:.4f}")
    print(f"checkpoint: {checkpoint}")
    return EXIT_OK


def cmd_eval(args, seed):
    model = load(args.checkpoint)
    clouds = read_clouds(args.data)
    _check_labelled(clouds, model.config.n_classes, args.data)
    metrics = evaluate(model, clouds, batch_size=args.batch_size)
    print(_summary_line(metrics))
    names = CLASS_NAMES if model.config.n_classes == len(CLASS_NAMES) else None
    for c, iou in enumerate(metrics.iou()):
        print(f"  class {c}{f' ({names[c]})' if names else ''}: IoU={iou:.4f}")
    if args.out:
        save_metrics_csv(args.out, [metrics.summary()])
    return EXIT_OK


def cmd_param_count(args, seed):
    config = resolve_config(args, NetworkConfig())
    modes = [args.sharing] if args.sharing else ["unshared", "shared"]
    counts = {}
    for mode in modes:
        counts[mode] = count_parameters(build(config.replace(sharing=mode), seed=seed))
        c = counts[mode]
        print(f"{mode}: total={c['total']} position_encoding={c['position_encoding']}")
        for module, n in c["by_module"].items():
            print(f"  {module}: {n}")
    if len(counts) == 2:
        before, after = counts["unshared"]["total"], counts["shared"]["total"]
        reduction = 100.0 * (before - after) / before
        print(f"reduction: {reduction:.1f}% (reference target {REFERENCE_REDUCTION}%)")
    return EXIT_OK


def cmd_gradcheck(args, seed):
    names = args.module or list(gradcheck.SUITES)
    reports = gradcheck.run_all(names, seeds=tuple(range(seed, seed + args.seeds)))
    for r in reports:
        print(r.line())
        for name, entry, ana, num in r.failures[:5]:
            print(f"  {name}[{entry}]: analytic {ana:.10g} numeric {num:.10g}")
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_NUMERICAL


def cmd_ablate(args, seed):
    config = ablation_config(args.case, resolve_config(args, TOY_CONFIG))
    model, records, metrics = toy_experiment(config, seed=seed, epochs=args.epochs, lr=args.lr,
                                             n_train=args.train_scenes, n_test=args.test_scenes,
                                             points=args.points)
    row = {"case": args.case, "seed": seed, "epochs": args.epochs,
           "parameters": count_parameters(model)["total"], "loss": f"{records[-1]['loss']:.6f}",
           **{k: f"{v:.6f}" for k, v in metrics.summary().items()}}
    writer = csv.DictWriter(sys.stdout, fieldnames=ABLATION_FIELDS, lineterminator="\n")
    writer.writeheader()
    writer.writerow(row)
    if args.out:
        save_metrics_csv(args.out, [row])
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "param-count": cmd_param_count,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def _thread_limit(threads):
    if threads is None:
        return nullcontext()
    if threads < 1:
        raise UsageError("--threads must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=threads)


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        seed = resolve_seed(args.seed)
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args, seed)
    except UsageError as exc:
        print(f"smtk: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError, ValueError) as exc:
        print(f"smtk: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"smtk: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
