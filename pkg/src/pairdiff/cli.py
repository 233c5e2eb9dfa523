"""Command line: ``pairdiff {gen-data,train,sample,eval,verify,config}``.

Every command resolves a :class:`~pairdiff.config.RunConfig` from
``--config`` and ``--set section.key=value`` overrides, works under
``<out>/``, and appends a ``run.log`` to the directory it writes.  The
output root is ``--out``, else ``run.out_dir``, else ``$PAIRDIFF_OUT``,
else ``./runs``.

Layout::

    <out>/data/            training pairs
    <out>/heldout/         held-out real pairs for FID-lite
    <out>/models/<role>/   model.pdck, losses.tsv, run.log
    <out>/samples/         generated pairs (default --dest)

Failures print one ``error<TAB>code=<n><TAB>kind=<Class><TAB><message>``
line on stderr and exit with the class's code.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import RunConfig, load_config, parse_overrides
from .data import generate_synthetic, load_batch, read_manifest
from .denoiser import load_checkpoint
from .errors import ConfigError, FormatError, PairdiffError, UsageError
from .evaluate import evaluate
from .pig import ROLES, sample_paired, train_model, write_samples
from .verify import SUITES, run_suites

log = logging.getLogger("pairdiff")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config file (sectioned key = value)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--out", help="output root directory")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--threads", type=int, help="BLAS thread count; 1 gives bit-exact reruns")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="pairdiff", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"pairdiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen-data", parents=[common], help="write the synthetic training and held-out sets")

    p = sub.add_parser("train", parents=[common], help="train one denoiser")
    p.add_argument("--model", choices=ROLES, required=True)

    p = sub.add_parser("sample", parents=[common], help="generate (mask, image) pairs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--guider", help="mask model checkpoint (default <out>/models/guider/model.pdck)")
    p.add_argument("--cond", help="image model checkpoint (default <out>/models/cond/model.pdck)")
    p.add_argument("--dest", help="sample directory (default <out>/samples)")

    p = sub.add_parser("eval", parents=[common], help="score a sample directory")
    p.add_argument("--samples", help="sample directory (default <out>/samples)")
    p.add_argument("--real", help="real reference set (default <out>/heldout)")

    p = sub.add_parser("verify", parents=[common], help="run the learning-free oracle suites")
    p.add_argument("--suite", action="append", choices=sorted(SUITES), help="run only these suites")

    sub.add_parser("config", parents=[common], help="print the resolved config")
    return parser


class RunLog:
    """``run.log`` writer: provenance header, then metric lines."""

    def __init__(self, command: str, cfg: RunConfig, argv, threads: int | None):
        self.lines = [
            f"command = {command}",
            f"argv = {' '.join(argv)}",
            f"config_hash = {cfg.hash()}",
            f"seed = {cfg.seed}",
            f"pairdiff = {__version__}",
            f"numpy = {np.__version__}",
            f"python = {platform.python_version()}",
            f"threads = {threads if threads is not None else 'default'}",
        ]
        self.start = time.perf_counter()

    def metric(self, name: str, value) -> None:
        self.lines.append(f"metric\t{name}\t{value}")

    def write(self, directory: Path) -> None:
        self.lines.append(f"wall_time = {time.perf_counter() - self.start:.3f}")
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "run.log", "a", encoding="utf-8") as fh:
            fh.write("\n".join(self.lines) + "\n\n")


def _resolve(args) -> RunConfig:
    overrides = parse_overrides(args.set)
    if args.seed is not None:
        overrides.setdefault("run", {})["seed"] = str(args.seed)
    if args.out is not None:
        overrides.setdefault("run", {})["out_dir"] = args.out
    return load_config(args.config, overrides)


def cmd_gen_data(args, cfg: RunConfig, runlog: RunLog) -> Path:
    root = cfg.out_root()
    generate_synthetic(cfg.data, root / "data")
    generate_synthetic(cfg.heldout_spec(), root / "heldout")
    (root / "config.ini").write_text(cfg.to_text(out_dir=False))
    runlog.metric("train_pairs", cfg.data.n_samples)
    runlog.metric("heldout_pairs", cfg.heldout.n_samples)
    return root / "data"


def cmd_train(args, cfg: RunConfig, runlog: RunLog) -> Path:
    root = cfg.out_root()
    manifest = read_manifest(root / "data" / "manifest.tsv")
    data = load_batch(manifest)
    out = root / "models" / args.model
    tcfg = cfg.train_config(args.model)
    result = train_model(data, tcfg, cfg.denoiser, out_dir=out,
                         meta={"config_hash": cfg.hash(), "schedule": cfg.to_dict()["schedule"]})
    (out / "losses.tsv").write_text("".join(f"{i}\t{v!r}\n" for i, v in enumerate(result.losses, 1)))
    (out / "config.ini").write_text(cfg.to_text(out_dir=False))
    tail = result.losses[-max(1, len(result.losses) // 10):]
    runlog.metric("first_loss", f"{result.losses[0]:.6g}")
    runlog.metric("final_loss_mean", f"{float(np.mean(tail)):.6g}")
    runlog.metric("steps", tcfg.steps)
    return out


def _load_model(path: Path, cfg: RunConfig, role: str):
    net, info = load_checkpoint(path)
    have_role = info["meta"].get("role")
    if have_role not in (None, role):
        raise ConfigError(f"{path} holds a {have_role!r} model, expected {role!r}")
    want = cfg.to_dict()["schedule"]
    have = info["meta"].get("schedule", {"T": info["T"]})
    if any(have.get(k, want[k]) != want[k] for k in want) or info["T"] != want["T"]:
        raise ConfigError(f"{path} was trained with schedule {have}, config has {want}")
    if net.cfg != cfg.denoiser:
        raise ConfigError(f"{path} network {net.cfg} differs from config {cfg.denoiser}")
    return net


def cmd_sample(args, cfg: RunConfig, runlog: RunLog) -> Path:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    root = cfg.out_root()
    models = root / "models"
    mx = _load_model(Path(args.guider or models / "guider" / "model.pdck"), cfg, "guider")
    my = _load_model(Path(args.cond or models / "cond" / "model.pdck"), cfg, "cond")
    dest = Path(args.dest) if args.dest else root / "samples"
    records = sample_paired(mx, my, cfg.sampler_config(), n=args.n, batch_size=cfg.sample.batch_size)
    write_samples(records, dest, cfg.hash())
    (dest / "config.ini").write_text(cfg.to_text(out_dir=False))
    runlog.metric("samples", len(records))
    return dest


def cmd_eval(args, cfg: RunConfig, runlog: RunLog) -> Path:
    root = cfg.out_root()
    samples = Path(args.samples) if args.samples else root / "samples"
    real = Path(args.real) if args.real else root / "heldout"
    gen = load_batch(read_manifest(samples / "manifest.tsv"))
    ref = load_batch(read_manifest(real / "manifest.tsv"))
    report = evaluate(gen.masks, gen.images, ref.images, cfg.data, cfg.hash(), cfg.eval.min_samples)
    report.write(samples / "report.txt")
    for name in ("pair_iou_mean", "pair_iou_sd", "fid_lite", "diversity", "empty_masks"):
        runlog.metric(name, getattr(report, name))
    print(report.to_text(), end="")
    return samples


def cmd_verify(args, cfg: RunConfig, runlog: RunLog) -> Path:
    results = run_suites(args.suite)
    for res in results:
        print(res.line(), flush=True)
        runlog.metric(res.name, "pass" if res.passed else "fail")
    failed = [r.name for r in results if not r.passed]
    dest = cfg.out_root() / "verify"
    if failed:
        runlog.write(dest)
        raise PairdiffError(f"oracle suites failed: {', '.join(failed)}")
    return dest


def cmd_config(args, cfg: RunConfig, runlog: RunLog) -> None:
    print(cfg.to_text(), end="")
    print(f"# config_hash = {cfg.hash()}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "config": cmd_config,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = _resolve(args)
        limits = threadpool_limits(limits=args.threads) if args.threads else contextlib.nullcontext()
        with limits:
            runlog = RunLog(args.command, cfg, argv, args.threads)
            dest = COMMANDS[args.command](args, cfg, runlog)
            if dest is not None:
                runlog.write(dest)
    except PairdiffError as exc:
        return _fail(exc.exit_code, exc)
    except OSError as exc:
        return _fail(FormatError.exit_code, exc)
    return 0


def _fail(code: int, exc: BaseException) -> int:
    message = str(exc).replace("\n", " ")
    print(f"error\tcode={code}\tkind={type(exc).__name__}\t{message}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
