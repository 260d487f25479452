"""Command-line entry point.

Exit codes: 0 success, 1 bad input or data, 2 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import density_lab as dl
from .checkpoint_io import CheckpointError, TensorIndex, open_checkpoint, write_checkpoint
from .config import ConfigError, MergeConfig, build_plan, load_config
from .runner import InvariantError, run_plan

log = logging.getLogger("modmerge")

EXIT_OK = 0
EXIT_USER = 1
EXIT_INTERNAL = 2

USER_ERRORS = (ConfigError, CheckpointError, ValueError, KeyError, OSError)


def _resolve_source(source: str, base_dir: Path | None) -> Path:
    p = Path(source)
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return p


def _open_sources(cfg: MergeConfig, base_dir: Path | None) -> dict[str, TensorIndex]:
    return {src: open_checkpoint(_resolve_source(src, base_dir)) for src in cfg.sources()}


def _base_dir(args: argparse.Namespace) -> Path:
    # relative sources resolve against --base-dir, else the config's directory
    if args.base_dir is not None:
        return Path(args.base_dir)
    return Path(args.config).resolve().parent


def cmd_merge(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    indices = _open_sources(cfg, _base_dir(args))
    plan = build_plan(cfg, indices, seed=args.seed)
    tensors, report = run_plan(plan, indices, threads=args.threads)
    out = Path(args.out)
    try:
        write_checkpoint(out, tensors, plan.out_dtype, plan.metadata)
        if args.report:
            Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    except BaseException:
        out.unlink(missing_ok=True)
        raise
    log.info("wrote %d tensors to %s (%s)", len(tensors), out, plan.out_dtype.value)
    return EXIT_OK


def cmd_plan(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    indices = _open_sources(cfg, _base_dir(args))
    plan = build_plan(cfg, indices, seed=args.seed)
    print(json.dumps(plan.to_dict(), indent=2))
    return EXIT_OK


def index_to_dict(index: TensorIndex) -> dict:
    return {
        "metadata": dict(index.metadata),
        "tensors": {
            name: {
                "dtype": e.dtype.value,
                "shape": list(e.shape),
                "data_offsets": list(e.data_offsets),
                "bytes": e.nbytes,
                "shard": e.shard.name,
            }
            for name in index.names()
            for e in [index[name]]
        },
    }


def cmd_inspect(args: argparse.Namespace) -> int:
    index = open_checkpoint(args.checkpoint)
    if args.json:
        print(json.dumps(index_to_dict(index), indent=2))
        return EXIT_OK
    names = index.names()
    width = max([len(n) for n in names] + [4])
    print(f"{'name':<{width}}  {'dtype':<5}  {'shape':<20}  bytes")
    for name in names:
        e = index[name]
        print(f"{name:<{width}}  {e.dtype.value:<5}  {str(list(e.shape)):<20}  {e.nbytes}")
    return EXIT_OK


def cmd_density_demo(args: argparse.Namespace) -> int:
    lo, hi = args.range
    if not lo < hi:
        raise ValueError(f"--range needs lo < hi, got {lo} {hi}")
    if args.step <= 0 or args.step > hi - lo:
        raise ValueError(f"--step must be in (0, {hi - lo}], got {args.step}")
    c1 = dl.GaussianComponent(args.mu1, args.sigma1)
    c2 = dl.GaussianComponent(args.mu2, args.sigma2)
    mixture = dl.MixtureDensity.pair(c1, c2, args.alpha)
    averaged = dl.parameter_average_density(c1, c2, args.alpha)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "mixture": "mixture.csv",
        "weighted_average": "weighted_average.csv",
        "component1": "component1.csv",
        "component2": "component2.csv",
    }
    for key, source in (("mixture", mixture), ("weighted_average", averaged), ("component1", c1), ("component2", c2)):
        dl.emit_density_profile(source, lo, hi, args.step, out_dir / files[key])

    summary = {
        "parameters": {
            "mu1": args.mu1, "sigma1": args.sigma1,
            "mu2": args.mu2, "sigma2": args.sigma2,
            "alpha": args.alpha, "range": [lo, hi], "step": args.step,
        },
        "weighted_average": {"mu": averaged.mu, "sigma": averaged.sigma},
        "mixture_maxima": dl.find_local_maxima(mixture, lo, hi, args.step),
        "weighted_average_maxima": dl.find_local_maxima(averaged, lo, hi, args.step),
        "files": files,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({k: summary[k] for k in ("mixture_maxima", "weighted_average_maxima")}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modmerge", description="Merge tensor checkpoints and explore mixture densities.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="merge checkpoints as described by a YAML config")
    p.add_argument("config")
    p.add_argument("--base-dir", help="directory that relative source paths resolve against (default: the config's directory)")
    p.add_argument("--out", required=True, help="output container file")
    p.add_argument("--seed", type=int, default=None, help="overrides parameters.seed (default 0)")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--report", help="write a JSON run report here")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("plan", help="print the resolved per-tensor plan as JSON")
    p.add_argument("config")
    p.add_argument("--base-dir")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("inspect", help="list the tensors in a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("density-demo", help="write mixture vs parameter-average density profiles")
    p.add_argument("--mu1", type=float, default=0.0)
    p.add_argument("--sigma1", type=float, default=1.0)
    p.add_argument("--mu2", type=float, default=5.0)
    p.add_argument("--sigma2", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--range", type=float, nargs=2, default=[-5.0, 10.0], metavar=("LO", "HI"))
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--out-dir", default="density_demo")
    p.set_defaults(func=cmd_density_demo)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
