"""``bbuda`` command line: data generation, training, serving, adaptation, evaluation.

Every failure ends with one line on stderr of the form
``bbuda: error: <category>: <message>`` and a category-specific exit code
(see :data:`EXIT_CODES`).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from . import config as cfgmod
from . import report as reportmod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .metrics import evaluate as evaluate_predictor
from .synthdata import (DEFAULT_SPECS, DatasetError, GeometryError, dataset_digest, load_dataset,
                        make_splits, save_dataset)
from .teacher import InProcessTeacher, RemoteTeacher, TeacherError, serve
from .trainer import NonFiniteGradientError, TrainingAborted, adapt_target, train_source

log = logging.getLogger("bbuda")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_CORRUPT = 5
EXIT_TEACHER = 6
EXIT_ABORTED = 7
EXIT_INTERRUPTED = 130

EXIT_CODES: Dict[str, int] = {
    "usage": EXIT_USAGE,
    "config": EXIT_CONFIG,
    "missing-file": EXIT_MISSING,
    "corrupt": EXIT_CORRUPT,
    "teacher": EXIT_TEACHER,
    "aborted": EXIT_ABORTED,
    "internal": EXIT_INTERNAL,
    "interrupted": EXIT_INTERRUPTED,
}

MANIFEST_FILE = "manifests.jsonl"


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _file_digest(path) -> str:
    return hashlib.sha1(Path(path).read_bytes()).hexdigest()


def _dataset_dir(path, split: str) -> Path:
    """Accept a dataset directory or a ``gen-data`` output holding ``split/``."""
    root = Path(path)
    if (root / "manifest.json").exists():
        return root
    if (root / split / "manifest.json").exists():
        return root / split
    if not root.exists():
        raise FileNotFoundError(f"data directory not found: {root}")
    raise FileNotFoundError(f"no dataset manifest in {root} or {root / split}")


class Manifest:
    """One append-only JSON line per run, written next to the run's outputs."""

    def __init__(self, subcommand: str, config: dict, seed: Optional[int] = None):
        self.record = {"subcommand": subcommand, "version": __version__, "config": config,
                       "seed": seed, "started": _now(), "finished": None,
                       "inputs": {}, "outputs": []}

    def input_dataset(self, path: Path) -> None:
        self.record["inputs"][str(path)] = dataset_digest(path)

    def input_file(self, path) -> None:
        self.record["inputs"][str(path)] = _file_digest(path)

    def output(self, path) -> None:
        self.record["outputs"].append(str(path))

    def write(self, directory) -> Path:
        self.record["finished"] = _now()
        target = Path(directory) / MANIFEST_FILE
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "a") as fh:
            fh.write(json.dumps(self.record, sort_keys=True) + "\n")
        return target


def _connect_teacher(address: str) -> RemoteTeacher:
    try:
        teacher = RemoteTeacher.from_address(address)
    except ValueError as exc:
        raise CliError("usage", str(exc)) from None
    teacher.health()
    return teacher


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    spec = cfgmod.resolve_domain_spec(DEFAULT_SPECS[args.domain], args.spec, args.set)
    manifest = Manifest("gen-data", {"domain": args.domain, "spec": spec.to_dict(),
                                     "n_train": args.n_train, "n_test": args.n_test,
                                     "size": args.size}, spec.seed)
    if args.spec:
        manifest.input_file(args.spec)
    train, test = make_splits(spec, args.n_train, args.n_test, args.size, args.size)
    out = Path(args.out)
    for name, samples in (("train", train), ("test", test)):
        save_dataset(samples, out / name, spec)
        manifest.output(out / name)
    manifest.write(out)
    print(f"wrote {len(train)} train / {len(test)} test {args.domain} samples to {out}")
    return EXIT_OK


def cmd_train_source(args) -> int:
    run = cfgmod.resolve_run_config(args.config, args.set)
    data = _dataset_dir(args.data, "train")
    samples = load_dataset(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = Manifest("train-source", cfgmod.flatten_run_config(run), run.seed)
    manifest.input_dataset(data)

    log_path = out / "train_log.csv"
    with open(log_path, "w") as fh:
        fh.write("iter,loss\n")

        def on_step(it, loss):
            fh.write(f"{it},{loss!r}\n")

        ckpt = train_source(run, samples, on_step=on_step)
    ckpt_path = out / "teacher.ckpt"
    save_checkpoint(ckpt, ckpt_path)
    manifest.output(ckpt_path)
    manifest.output(log_path)

    val_dir = Path(args.data) / "test"
    if (val_dir / "manifest.json").exists():
        report = evaluate_predictor(ckpt.build_net(), load_dataset(val_dir))
        report.save(out / "source_val.json", method="source-only")
        manifest.input_dataset(val_dir)
        manifest.output(out / "source_val.json")
        print(f"source validation whole Dice {report.regions['whole'].dice_mean:.4f}")
    manifest.write(out)
    print(f"teacher checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_serve_teacher(args) -> int:
    from .teacher import TeacherServer, parse_bind

    try:
        address = parse_bind(args.bind)
    except ValueError as exc:
        raise CliError("usage", str(exc)) from None
    server = TeacherServer(args.checkpoint, address)
    host, port = server.server_address[:2]
    print(f"serving teacher on {host}:{port}", flush=True)
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return EXIT_OK


def cmd_adapt(args) -> int:
    run = cfgmod.resolve_run_config(args.config, args.set, base=cfgmod.ADAPT_DEFAULTS,
                                    preset=args.preset)
    data = _dataset_dir(args.data, "train")
    samples = [s.unlabeled() for s in load_dataset(data)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    method = "BBUDA-Ent" if run.schedule.alpha_start == 0 and run.schedule.alpha_end == 0 else "BBUDA"
    flat = cfgmod.flatten_run_config(run)
    manifest = Manifest("adapt", dict(flat, method=method), run.seed)
    manifest.input_dataset(data)

    if args.teacher:
        teacher = _connect_teacher(args.teacher)
        manifest.record["teacher"] = args.teacher
    else:
        teacher = InProcessTeacher(args.teacher_checkpoint)
        manifest.input_file(args.teacher_checkpoint)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume)
        manifest.input_file(args.resume)

    log_path = out / "loss_log.csv"
    ckpt_path = out / "student.ckpt"
    if resume is None and log_path.exists():
        log_path.unlink()
    try:
        with teacher:
            ckpt, _ = adapt_target(run, teacher, samples, resume=resume, log_path=log_path,
                                   checkpoint_path=ckpt_path, stop_after=args.stop_after)
    except TrainingAborted as exc:
        manifest.record["aborted"] = str(exc)
        manifest.output(ckpt_path)
        manifest.write(out)
        raise
    # the trainer writes the final checkpoint; add the method label for reporting
    ckpt.meta["method"] = method
    save_checkpoint(ckpt, ckpt_path)
    manifest.output(ckpt_path)
    manifest.output(log_path)
    manifest.write(out)
    print(f"{method} student checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    data = _dataset_dir(args.data, "test")
    samples = load_dataset(data)
    manifest = Manifest("evaluate", {"method": args.method}, None)
    manifest.input_dataset(data)
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        manifest.input_file(args.checkpoint)
        predictor = ckpt.build_net()
        method = args.method or ckpt.meta.get("method") or "source-only"
    else:
        predictor = _connect_teacher(args.teacher)
        manifest.record["teacher"] = args.teacher
        method = args.method or "source-only"
    report = evaluate_predictor(predictor, samples)
    if args.teacher:
        predictor.close()
    out = Path(args.out)
    if out.suffix != ".json":
        out = out / "eval.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.save(out, method=method)
    manifest.record["config"]["method"] = method
    manifest.output(out)
    manifest.write(out.parent)
    w = report.regions["whole"]
    print(f"{method}: whole Dice {w.dice_mean:.4f} (n={report.n}) -> {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    evals = [reportmod.load_eval(p) for p in args.reports]
    report = reportmod.build(evals)
    manifest = Manifest("report", {"reports": [str(p) for p in args.reports]})
    for p in args.reports:
        path = Path(p)
        manifest.input_file(path / "eval.json" if path.is_dir() else path)
    json_path, text_path = reportmod.write(report, args.out)
    manifest.output(json_path)
    manifest.output(text_path)
    manifest.write(args.out)
    sys.stdout.write(reportmod.render_text(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bbuda", description="Black-box unsupervised domain adaptation for segmentation.",
                epilog="Exit codes: " + ", ".join(f"{v}={k}" for k, v in EXIT_CODES.items()))
    p.add_argument("--version", action="version", version=f"bbuda {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    def config_opts(sp):
        sp.add_argument("--config", metavar="FILE", help="key-value config file")
        sp.add_argument("--set", metavar="SECTION.KEY=VALUE", action="append", default=[],
                        help="override one config key (repeatable)")

    g = sub.add_parser("gen-data", help="generate a synthetic domain (train and test splits)")
    g.add_argument("--domain", choices=sorted(DEFAULT_SPECS), required=True)
    g.add_argument("--out", required=True, metavar="DIR")
    g.add_argument("--spec", metavar="FILE", help="domain spec overrides ([domain] section)")
    g.add_argument("--set", metavar="domain.KEY=VALUE", action="append", default=[])
    g.add_argument("--n-train", type=int, default=200)
    g.add_argument("--n-test", type=int, default=50)
    g.add_argument("--size", type=int, default=32, help="image height and width")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-source", help="train the source model that becomes the teacher")
    t.add_argument("--data", required=True, metavar="DIR")
    t.add_argument("--out", required=True, metavar="DIR")
    config_opts(t)
    t.set_defaults(func=cmd_train_source)

    s = sub.add_parser("serve-teacher", help="serve a frozen checkpoint over the frame protocol")
    s.add_argument("--checkpoint", required=True, metavar="PATH")
    s.add_argument("--bind", required=True, metavar="HOST:PORT", help="port 0 picks a free port")
    s.set_defaults(func=cmd_serve_teacher)

    a = sub.add_parser("adapt", help="adapt a student to unlabelled target data")
    src = a.add_mutually_exclusive_group(required=True)
    src.add_argument("--teacher", metavar="HOST:PORT")
    src.add_argument("--teacher-checkpoint", metavar="PATH")
    a.add_argument("--data", required=True, metavar="DIR")
    a.add_argument("--out", required=True, metavar="DIR")
    a.add_argument("--preset", choices=sorted(cfgmod.PRESETS), default="bbuda")
    a.add_argument("--resume", metavar="CKPT", help="continue from a student checkpoint")
    a.add_argument("--stop-after", type=int, metavar="ITER", help="halt after this iteration")
    config_opts(a)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("evaluate", help="Dice/Hausdorff of a checkpoint or served teacher")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", metavar="PATH")
    src.add_argument("--teacher", metavar="HOST:PORT")
    e.add_argument("--data", required=True, metavar="DIR")
    e.add_argument("--out", required=True, metavar="FILE|DIR")
    e.add_argument("--method", choices=reportmod.METHOD_ORDER,
                   help="row label for reports (default: from checkpoint metadata)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="compare source-only, BBUDA-Ent and BBUDA evaluations")
    r.add_argument("reports", nargs="+", metavar="EVAL", help="eval.json files or their directories")
    r.add_argument("--out", required=True, metavar="DIR")
    r.set_defaults(func=cmd_report)
    return p


def _categorise(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, KeyboardInterrupt):
        return "interrupted"
    if isinstance(exc, (cfgmod.ConfigError, GeometryError)):
        return "config"
    if isinstance(exc, (FileNotFoundError, IsADirectoryError, NotADirectoryError)):
        return "missing-file"
    if isinstance(exc, (CheckpointError, DatasetError, reportmod.ReportError)):
        return "corrupt"
    if isinstance(exc, TeacherError):
        return "teacher"
    if isinstance(exc, (TrainingAborted, NonFiniteGradientError)):
        return "aborted"
    return "internal"


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except SystemExit as exc:   # --help / --version
        return int(exc.code or 0)
    except BaseException as exc:  # noqa: BLE001 - every failure maps to an exit code
        category = _categorise(exc)
        if category == "internal":
            log.debug("internal error", exc_info=True)
        message = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"bbuda: error: {category}: {message}", file=sys.stderr)
        return EXIT_CODES[category]


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
