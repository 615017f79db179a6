"""Command-line entry point: train, customize, inspect-mask, oracle-check.

Exit codes: 0 ok, 2 usage / bad input, 3 semantic error (target word not in
prompt), 4 mask capacity exceeded, 5 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .backbone import Model
from .ccp import COMBINE_MODES
from .checks import SUITES, run_suite
from .config import TRAIN_REQUIRED, ConfigError, RunConfig, load_config
from .fileio import CheckpointError, load_checkpoint, read_pgm, read_ppm, save_checkpoint, write_pgm, write_ppm
from .masks import CapacityError
from .sampler import TargetWordError, customize
from .tensor import NonFiniteError, ShapeError
from .training import run_curriculum_training

EXIT_OK, EXIT_USAGE, EXIT_SEMANTIC, EXIT_CAPACITY, EXIT_NUMERIC = 0, 2, 3, 4, 5
MASK_NAME = re.compile(r"^mask_s(\d{3,})_j(\d+)\.pgm$")
SAMPLER_KEYS = ("sampler.steps", "sampler.omega", "sampler.gamma", "sampler.t_stop", "sampler.seed",
                "sampler.cross_source", "sampler.self_source", "sampler.mask_norm")

log = logging.getLogger("subjectdiff")


class UsageError(Exception):
    pass


def _fmt(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# -- train ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg.require(TRAIN_REQUIRED)
    mode = cfg.get("backbone.ccp_mode")
    if mode not in COMBINE_MODES:
        raise ConfigError(f"unknown combine mode {mode!r}", cfg.lines.get("backbone.ccp_mode"), "backbone.ccp_mode")
    model = Model.create(cfg.backbone(), seed=cfg.get("backbone.seed"), ccp_mode=mode)
    tcfg = cfg.train()
    metrics = Path(args.metrics) if args.metrics else Path(args.out).with_suffix(".csv")
    state, rows = run_curriculum_training(model, tcfg, metrics_path=metrics)
    crc = save_checkpoint(args.out, model)
    final = rows[-1][3] if rows else float("nan")
    print(f"final loss {final:.6f}")
    print(f"checkpoint {args.out} crc32 {crc:08x}")
    return EXIT_OK


# -- customize -----------------------------------------------------------------------


def read_manifest(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read manifest {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"manifest line {n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value
    return out


def write_manifest(path, params: dict):
    lines = [f"{k}={_fmt(v)}" for k, v in params.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _split_subject(arg: str):
    path, sep, word = arg.rpartition(":")
    if not sep or not path or not word.strip():
        raise UsageError(f"--subject expects IMAGE:WORD, got {arg!r}")
    return path, word.strip()


def resolve_customize(args):
    """Merge manifest, config file and flags (later wins) into one parameter set."""
    run = RunConfig()
    base = {}
    if args.manifest:
        base = read_manifest(args.manifest)
        for key in SAMPLER_KEYS:
            if key in base:
                run.set(key, base[key])
    if args.config:
        for key, value in load_config(args.config).values.items():
            if key in SAMPLER_KEYS:
                run.values[key] = value
    for flag, key in (("steps", "sampler.steps"), ("omega", "sampler.omega"), ("gamma", "sampler.gamma"),
                      ("t_stop", "sampler.t_stop"), ("seed", "sampler.seed"),
                      ("cross_source", "sampler.cross_source"), ("self_source", "sampler.self_source"),
                      ("mask_norm", "sampler.mask_norm")):
        value = getattr(args, flag)
        if value is not None:
            run.set(key, str(value))
    checkpoint = args.checkpoint or base.get("checkpoint")
    prompt = args.prompt if args.prompt is not None else base.get("prompt")
    if args.subject:
        subjects = [_split_subject(s) for s in args.subject]
    else:
        n = 0
        subjects = []
        while f"subject.{n}" in base:
            subjects.append(_split_subject(base[f"subject.{n}"]))
            n += 1
    out = args.out or base.get("out")
    trace_dir = args.trace_dir if args.trace_dir is not None else (base.get("trace_dir") or None)
    if not checkpoint:
        raise UsageError("missing --checkpoint")
    if prompt is None or not prompt.strip():
        raise UsageError("missing --prompt")
    if not out:
        raise UsageError("missing --out")
    return run, checkpoint, prompt, subjects, out, trace_dir, base.get("checkpoint_crc")


def cmd_customize(args) -> int:
    run, checkpoint, prompt, subjects, out, trace_dir, want_crc = resolve_customize(args)
    try:
        blob = Path(checkpoint).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {checkpoint}: {exc.strerror}") from None
    crc = f"{int.from_bytes(blob[-4:], 'little'):08x}" if len(blob) >= 4 else ""
    if want_crc is not None and want_crc != crc:
        raise UsageError(f"checkpoint crc {crc} differs from manifest {want_crc}")
    model = load_checkpoint(checkpoint)
    scfg = run.sampler()

    images = {}
    pairs = []
    for path, word in subjects:
        key = str(Path(path).resolve())
        if key not in images:
            try:
                images[key] = read_ppm(path)
            except OSError as exc:
                raise UsageError(f"cannot read subject image {path}: {exc.strerror}") from None
        pairs.append((images[key], word))

    image, trace = customize(model, prompt, pairs, scfg)
    if not np.all(np.isfinite(image)):
        raise NonFiniteError("generated image contains non-finite values")
    write_ppm(out, image)

    params = {"checkpoint": str(Path(checkpoint).resolve()), "checkpoint_crc": crc, "prompt": prompt}
    for j, (path, word) in enumerate(subjects):
        params[f"subject.{j}"] = f"{Path(path).resolve()}:{word}"
    params["out"] = str(Path(out).resolve())
    params["trace_dir"] = str(Path(trace_dir).resolve()) if trace_dir else ""
    for key in SAMPLER_KEYS:
        params[key] = run.get(key) if key != "sampler.seed" else scfg.seed
    params["sampler.gamma"] = scfg.ratios(len(subjects)) if subjects else run.get("sampler.gamma")

    if trace_dir:
        tdir = Path(trace_dir)
        tdir.mkdir(parents=True, exist_ok=True)
        for k, masks in enumerate(trace.masks, start=1):
            for j, m in enumerate(masks):
                write_pgm(tdir / f"mask_s{k:03d}_j{j}.pgm", m)
        write_manifest(tdir / "manifest.txt", params)
    else:
        write_manifest(out + ".manifest", params)
    print(f"wrote {out} ({trace.total_forwards} denoiser forwards)")
    return EXIT_OK


# -- inspect-mask --------------------------------------------------------------------


def mask_iou(a, b) -> float:
    a, b = np.asarray(a) > 0, np.asarray(b) > 0
    union = int(np.count_nonzero(a | b))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(a & b)) / union


def inspect_trace(trace_dir):
    """Rows ``(step, subject, support, max, iou_prev)``; iou_prev is None at a subject's first step."""
    tdir = Path(trace_dir)
    if not tdir.is_dir():
        raise UsageError(f"trace dir {trace_dir} does not exist")
    found = {}
    for p in tdir.iterdir():
        m = MASK_NAME.match(p.name)
        if m:
            found[(int(m.group(2)), int(m.group(1)))] = p
    if not found:
        raise UsageError(f"no mask files in {trace_dir}")
    rows = []
    prev = {}
    for j, step in sorted(found):
        mask = read_pgm(found[(j, step)])
        iou = mask_iou(prev[j], mask) if j in prev else None
        rows.append((step, j, int(np.count_nonzero(mask)), float(mask.max()) / 255.0, iou))
        prev[j] = mask
    rows.sort()
    return rows


def cmd_inspect_mask(args) -> int:
    rows = inspect_trace(args.trace_dir)
    print("step\tsubject\tsupport\tmax\tiou_prev")
    for step, j, support, peak, iou in rows:
        print(f"{step}\t{j}\t{support}\t{peak:.4f}\t{'-' if iou is None else f'{iou:.4f}'}")
    return EXIT_OK


# -- oracle-check --------------------------------------------------------------------


def cmd_oracle_check(args) -> int:
    if args.suite != "all" and args.suite not in SUITES:
        print(f"unknown suite {args.suite!r}; choose from {', '.join(['all', *SUITES])}", file=sys.stderr)
        return EXIT_USAGE
    reports = run_suite(args.suite)
    for r in reports:
        print(r.line())
    return EXIT_OK if all(r.status == "PASS" for r in reports) else EXIT_NUMERIC


# -- wiring --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="subjectdiff", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="curriculum training of the projector and visual projections")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="metrics CSV (default: checkpoint path with .csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("customize", help="generate an image with customized subjects")
    p.add_argument("--checkpoint")
    p.add_argument("--prompt")
    p.add_argument("--subject", action="append", default=[], metavar="IMAGE:WORD",
                   help="reference PPM and target word; repeat for more subjects")
    p.add_argument("--config", help="config file supplying sampler.* keys")
    p.add_argument("--manifest", help="re-run from a manifest written by an earlier run")
    p.add_argument("--gamma", help="Top-K ratio, or a comma list with one value per subject")
    p.add_argument("--t-stop", dest="t_stop", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--cross-source", dest="cross_source", choices=["low", "all"])
    p.add_argument("--self-source", dest="self_source", choices=["high", "all", "none"])
    p.add_argument("--mask-norm", dest="mask_norm", choices=["max", "binary"])
    p.add_argument("--out", help="output PPM")
    p.add_argument("--trace-dir", dest="trace_dir", help="directory for per-step masks and the manifest")
    p.set_defaults(func=cmd_customize)

    p = sub.add_parser("inspect-mask", help="summarise the masks in a trace directory")
    p.add_argument("trace_dir")
    p.set_defaults(func=cmd_inspect_mask)

    p = sub.add_parser("oracle-check", help="run a reference-oracle suite")
    p.add_argument("suite", help=f"one of: all, {', '.join(SUITES)}")
    p.set_defaults(func=cmd_oracle_check)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, CheckpointError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TargetWordError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SEMANTIC
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
