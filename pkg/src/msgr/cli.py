"""Command line entry point: ``msgr <command> ...``.

Exit statuses: 0 ok, 1 runtime failure, 2 usage error, 3 identity fallback.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_FALLBACK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msgr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("make-corpus", help="write procedural registered IR/VIS source images")
    c.add_argument("--out", required=True)
    c.add_argument("--count", type=int, default=32)
    c.add_argument("--size", type=int, default=320)
    c.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen-syn", help="generate a synthetic stitching set from a source corpus")
    g.add_argument("--src", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=224)
    g.add_argument("--rho", type=float, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--data", required=True)
    t.add_argument("--stage", choices=("align", "recon", "joint"))
    t.add_argument("--config")
    t.add_argument("--ckpt-in")
    t.add_argument("--ckpt-out", required=True)

    s = sub.add_parser("stitch", help="stitch one reference/target pair")
    for k in ("ref-ir", "ref-vis", "tar-ir", "tar-vis", "ckpt", "out"):
        s.add_argument(f"--{k}", required=True)

    e = sub.add_parser("eval", help="metrics and corner error over a generated set")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--report", required=True)

    k = sub.add_parser("gradcheck", help="finite-difference check of one block family")
    k.add_argument("--module", required=True)
    k.add_argument("--seed", type=int, default=0)
    return p


def _make_corpus(a) -> int:
    from .synth import make_corpus

    make_corpus(a.out, a.count, a.size, a.seed)
    print(f"wrote {a.count} source pairs to {a.out}")
    return EXIT_OK


def _gen_syn(a) -> int:
    from .synth import generate_set

    path = generate_set(a.src, a.out, a.count, a.size, a.rho, a.seed, a.workers)
    print(f"wrote {a.count} samples; manifest {path}")
    return EXIT_OK


def _train(a) -> int:
    from .config import load_config
    from .pipeline import train

    cfg = load_config(a.config, stage=a.stage)
    if cfg.stage in ("recon", "joint") and not a.ckpt_in:
        raise UsageError(f"stage {cfg.stage} needs --ckpt-in from an align run")
    _, tlog = train(cfg, a.data, a.ckpt_in, a.ckpt_out, on_epoch=lambda e: print(e.line(), flush=True))
    print(f"done: {len(tlog.epochs)} epochs, {tlog.skipped} skipped steps, checkpoint {a.ckpt_out}")
    return EXIT_OK


def _stitch(a) -> int:
    from .checkpoint import load_checkpoint
    from .data import ViewPair, load_gray, save_gray
    from .geometry import write_homography
    from .pipeline import sidecar_path, stitch

    model, _ = load_checkpoint(a.ckpt)
    ref = ViewPair.from_arrays(load_gray(a.ref_ir), load_gray(a.ref_vis), model.dtype)
    tar = ViewPair.from_arrays(load_gray(a.tar_ir), load_gray(a.tar_vis), model.dtype)
    res = stitch(model, ref, tar)
    save_gray(a.out, res.image)
    write_homography(sidecar_path(a.out), res.H)
    print(f"panorama {res.canvas.width}x{res.canvas.height} -> {a.out}")
    if res.fell_back:
        print("warning: regressed homography was degenerate; used identity", file=sys.stderr)
        return EXIT_FALLBACK
    return EXIT_OK


def _eval(a) -> int:
    from .checkpoint import load_checkpoint
    from .pipeline import evaluate

    model, header = load_checkpoint(a.ckpt)
    rep = evaluate(model, a.data, {"ckpt": a.ckpt, "stage": header["stage"], "data": a.data})
    rep.save(a.report)
    means = rep.means()
    print(" ".join(f"{k}={v:.6g}" for k, v in means.items()))
    return EXIT_OK


def _gradcheck(a) -> int:
    from .checks import SUITES, TOL, format_table, run_suite

    if a.module not in SUITES:
        raise UsageError(f"unknown module {a.module!r}; choose from {', '.join(SUITES)}")
    rows = run_suite(a.module, a.seed)
    print(format_table(rows))
    return EXIT_OK if all(v < TOL for v in rows.values()) else EXIT_FAIL


COMMANDS = {
    "make-corpus": _make_corpus,
    "gen-syn": _gen_syn,
    "train": _train,
    "stitch": _stitch,
    "eval": _eval,
    "gradcheck": _gradcheck,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"msgr: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"msgr: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - report and map to the runtime-failure status
        logging.getLogger("msgr").debug("failure", exc_info=True)
        print(f"msgr: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
