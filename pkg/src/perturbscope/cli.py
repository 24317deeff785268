"""Command-line entry point: ``perturbscope <subcommand> ...``.

Exit status is 0 only when every requested stage succeeded for every sample,
1 when a batch finished with failed pairs, and 2 for bad input or
configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__
from . import detection as det
from . import pipeline
from .config import RunConfig, resolve_workers
from .errors import PerturbscopeError
from .imaging import f32_to_u8, load_png, save_png
from .occlusion import OverlapMode
from .pmap import write_pmap
from .report import build_report
from .synthesis import MaskKind, NoiseKind

log = logging.getLogger("perturbscope")


def _csv_list(kind=str):
    def parse(text):
        return tuple(kind(t.strip()) for t in text.split(",") if t.strip())
    return parse


def _reconstructor(text):
    if text in ("oracle", "paired", "highpass") or (text.startswith("external:") and len(text) > 9):
        return text
    raise argparse.ArgumentTypeError("expected oracle, paired, highpass or external:CMD")


def _common(p, analysis=True):
    p.add_argument("--config", metavar="PATH", help="JSON run configuration; flags override it")
    p.add_argument("--seed", type=int, metavar="N", help="master seed")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--workers", type=int, metavar="N",
                   help="worker processes (fallback: PERTURBSCOPE_WORKERS, then config)")
    if analysis:
        p.add_argument("--threshold", type=float, metavar="BITS", help="entropy detection threshold")
        p.add_argument("--reconstructor", type=_reconstructor, metavar="{oracle|paired|highpass|external:CMD}")
        p.add_argument("--window", type=int, metavar="N", help="occlusion window side")
        p.add_argument("--stride", type=int, metavar="N", help="occlusion stride")
        p.add_argument("--overlap", choices=[m.value for m in OverlapMode])


def _grid_flags(p):
    p.add_argument("--base", metavar="PNG", help="base image (default: bundled 512x512 image)")
    p.add_argument("--masks", type=_csv_list(), metavar="K[,K...]",
                   help="mask kinds: " + ", ".join(m.value for m in MaskKind))
    p.add_argument("--noises", type=_csv_list(), metavar="K[,K...]",
                   help="noise kinds: " + ", ".join(n.value for n in NoiseKind))
    p.add_argument("--lightness", type=_csv_list(float), metavar="L[,L...]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perturbscope",
                                     description="Signal-level analysis of image protection perturbations.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize the perturbation grid")
    _common(p, analysis=False)
    _grid_flags(p)

    p = sub.add_parser("analyze-pair", help="occlusion, spectra and detection for one clean/perturbed pair")
    _common(p)
    p.add_argument("clean")
    p.add_argument("perturbed")
    p.add_argument("--delta", metavar="PMAP", help="ground-truth perturbation for the oracle reconstructor")
    p.add_argument("--pair-id", help="output subdirectory name (default: perturbed file stem)")

    p = sub.add_parser("batch", help="analyze a dataset and write summaries, embedding and aggregates")
    _common(p)
    _grid_flags(p)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--pairs", metavar="DIR", help="directory with clean/ and one subdirectory per label")
    src.add_argument("--grid", metavar="DIR", help="existing synth output directory")

    p = sub.add_parser("report", help="render the HTML report for a finished run")
    p.add_argument("run_dir")

    for name, text in (("detect", "entropy detection on one image"),
                       ("purify", "subtract the reconstructed perturbation from one image")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--out", metavar="DIR", help="directory for written outputs")
        p.add_argument("--reconstructor", type=_reconstructor, metavar="{oracle|paired|highpass|external:CMD}")
        p.add_argument("--threshold", type=float, metavar="BITS")
        p.add_argument("image")
        p.add_argument("--clean", metavar="PNG", help="clean reference (paired reconstructor)")
        p.add_argument("--delta", metavar="PMAP", help="ground-truth perturbation (oracle reconstructor)")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {
        "master_seed": getattr(args, "seed", None),
        "output_dir": getattr(args, "out", None),
        "threshold": getattr(args, "threshold", None),
        "reconstructor": getattr(args, "reconstructor", None),
        "window": getattr(args, "window", None),
        "stride": getattr(args, "stride", None),
        "overlap": getattr(args, "overlap", None),
        "base": getattr(args, "base", None),
        "masks": getattr(args, "masks", None),
        "noises": getattr(args, "noises", None),
        "lightness": getattr(args, "lightness", None),
        "pairs_dir": getattr(args, "pairs", None),
        "grid_dir": getattr(args, "grid", None),
    }
    if hasattr(args, "workers"):
        over["workers"] = resolve_workers(args.workers, cfg.workers)
    return cfg.with_overrides(**over)


def _cmd_synth(args, cfg):
    result, manifest = pipeline.run_synth(cfg)
    print(f"{len(result.rows)} images written to {cfg.output_dir}")
    return 0


def _cmd_analyze_pair(args, cfg):
    for path in (args.clean, args.perturbed, args.delta):
        if path and not os.path.isfile(path):
            raise FileNotFoundError(f"no such file: {path}")
    outcome, _ = pipeline.run_analyze_pair(args.clean, args.perturbed, cfg, args.pair_id, args.delta)
    print(json.dumps(outcome.detection, sort_keys=True))
    return 0


def _cmd_batch(args, cfg):
    out = pipeline.run_batch(cfg)
    n = len(out.outcomes)
    print(f"{n - sum(1 for o in out.outcomes if o.error)}/{n} pairs analysed, "
          f"{len(out.failures)} failure(s); outputs in {cfg.output_dir}")
    return out.exit_code


def _cmd_report(args, cfg):
    print(build_report(args.run_dir))
    return 0


def _single_image_rec(args, cfg):
    spec = cfg.detection.reconstructor
    if spec is None:
        spec = "oracle" if args.delta else "paired" if args.clean else None
    if spec is None:
        raise ValueError("choose a --reconstructor (or pass --clean / --delta)")
    if spec == "paired" and not args.clean:
        raise ValueError("the paired reconstructor needs --clean")
    if spec == "highpass":
        return det.HighPassReconstructor(cfg.detection.highpass_size)
    return det.make_reconstructor(spec, delta=args.delta, timeout=cfg.detection.timeout)


def _cmd_detect(args, cfg):
    rec = _single_image_rec(args, cfg)
    image = load_png(args.image)
    clean = load_png(args.clean) if args.clean else None
    result = det.detect(image, rec, pipeline.resolve_threshold(cfg), clean, cfg.detection.bins)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_pmap(result.delta_hat.plane, os.path.join(args.out, "delta_hat.pmap"))
        with open(os.path.join(args.out, "detection.json"), "w", encoding="utf-8") as fh:
            json.dump(result.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(json.dumps(result.to_dict(), sort_keys=True))
    return 0


def _cmd_purify(args, cfg):
    rec = _single_image_rec(args, cfg)
    image = load_png(args.image)
    clean = load_png(args.clean) if args.clean else None
    cleaned = det.purify(image, rec, clean)
    out_dir = args.out or "."
    stem = os.path.splitext(os.path.basename(args.image))[0]
    path = os.path.join(out_dir, f"{stem}.purified.png")
    save_png(f32_to_u8(cleaned), path)
    print(path)
    return 0


COMMANDS = {
    "synth": _cmd_synth,
    "analyze-pair": _cmd_analyze_pair,
    "batch": _cmd_batch,
    "report": _cmd_report,
    "detect": _cmd_detect,
    "purify": _cmd_purify,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except (PerturbscopeError, ValueError, OSError, KeyError) as exc:
        print(f"perturbscope {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
