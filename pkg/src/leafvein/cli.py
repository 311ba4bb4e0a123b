"""Command-line entry point: ``leafvein <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import runner
from .config import INPUT_MODES, MODEL_CHOICES, load_config
from .errors import LeafveinError
from .preprocess import MAGNITUDE_MODES, VenationConfig, preprocess_directory

log = logging.getLogger("leafvein")


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON key/value file; flags override its keys")
    p.add_argument("--dataset-root", dest="dataset_root", help="<root>/<species>/<image> corpus")
    p.add_argument("--output-dir", dest="output_dir", help="run directory")
    p.add_argument("--model", choices=MODEL_CHOICES)
    p.add_argument("--input-mode", dest="input_mode", choices=INPUT_MODES)
    p.add_argument("--seed", type=int)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--median-kernel", dest="median_kernel", type=int)
    p.add_argument("--magnitude-mode", dest="magnitude_mode", choices=MAGNITUDE_MODES)
    p.add_argument("--epochs", type=int, help="cap on epochs for every training phase")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, help="first-phase learning rate")
    p.add_argument("--pretrained", dest="pretrained", action="store_true", default=None,
                   help="load ImageNet weights (default)")
    p.add_argument("--no-pretrained", dest="pretrained", action="store_false",
                   help="randomly initialised backbones")
    p.add_argument("--parallel", action="store_true", default=None, help="train models in separate processes")
    p.add_argument("--svg", action="store_true", default=None, help="vector figures instead of PNG")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    parser = argparse.ArgumentParser(prog="leafvein", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in (
        ("validate", "dry-run checks of dataset layout and output directory"),
        ("split", "scan the dataset and write the stratified manifest"),
        ("train", "train the selected model(s) on an existing manifest"),
        ("run", "split, train, evaluate and report in one go"),
    ):
        _add_run_options(sub.add_parser(name, help=help_, parents=[common]))

    ev = sub.add_parser("evaluate", help="predictions.csv -> metrics.json", parents=[common])
    _add_run_options(ev)
    ev.add_argument("--runs", nargs="+", help="model run directories (default: <output-dir>/<model>)")

    pp = sub.add_parser("preprocess", help="write venation-enhanced copies of an image tree", parents=[common])
    pp.add_argument("--input", required=True, help="input directory")
    pp.add_argument("--output", required=True, help="mirrored output directory (PNG)")
    pp.add_argument("--kernel", type=int, default=3, help="median filter size (odd)")
    pp.add_argument("--magnitude-mode", dest="magnitude_mode", choices=MAGNITUDE_MODES, default="euclidean")
    pp.add_argument("--stage-dir", dest="stage_dir", help="also dump every intermediate stage here")

    rp = sub.add_parser("report", help="summary table and figures from run directories", parents=[common])
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--svg", action="store_true")
    return parser


def _config(args):
    return load_config(getattr(args, "config", None), vars(args))


def cmd_validate(args) -> int:
    cfg = _config(args)
    print("resolved configuration:")
    for line in cfg.dumps().splitlines():
        print(f"  {line}")
    diag = runner.validate(cfg)
    for line in diag.lines():
        print(line)
    return 0 if diag.ok else 1


def cmd_split(args) -> int:
    cfg = _config(args)
    m = runner.split(cfg)
    print(f"{len(m.records)} images, {m.num_classes} classes -> {cfg.out / runner.MANIFEST_FILE}")
    return 0


def cmd_preprocess(args) -> int:
    outputs = preprocess_directory(args.input, args.output, VenationConfig(args.kernel, args.magnitude_mode),
                                   args.stage_dir)
    print(f"{len(outputs)} images written to {args.output}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = runner.load_manifest(cfg)
    for model_id in cfg.model_ids:
        run_dir = runner.train(cfg, model_id, manifest)
        print(f"{model_id}: {run_dir}")
    return 0


def cmd_evaluate(args) -> int:
    if args.runs:
        dirs = [Path(d) for d in args.runs]
        seed = None
    else:
        cfg = _config(args)
        dirs = [cfg.out / m for m in cfg.model_ids]
        seed = cfg.seed
    for d in dirs:
        written = runner.evaluate_run(d, seed)
        print(f"{d}: " + ", ".join(str(p.name) for p in written.values()))
    return 0


def cmd_report(args) -> int:
    result = runner.report_runs(args.runs, args.out, args.svg)
    print(Path(result["summary"][1]).read_text(encoding="utf-8"), end="")
    for run_id, figs in result["figures"].items():
        print(f"{run_id}: {len(figs)} figures")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    run_dirs = runner.run(cfg)
    print((cfg.out / "report" / "summary.txt").read_text(encoding="utf-8"), end="")
    print(f"artifacts: {', '.join(str(d) for d in run_dirs)}")
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "split": cmd_split,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except LeafveinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
