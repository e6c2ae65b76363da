"""Command-line entry point: ``fairir [STAGE] [--config PATH] [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline, synthetic


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fairir", description="Build, measure and rewire related item networks.")
    ap.add_argument("stage", nargs="?", choices=(*pipeline.STAGES, "all", "synth"), help="stage to run (default: all)")
    ap.add_argument("--stage", dest="stage_flag", choices=(*pipeline.STAGES, "all", "synth"))
    ap.add_argument("--config", help="TOML config file")
    ap.add_argument("--beta", type=_floats, help="comma-separated beta values, e.g. 0,0.25,0.75,1")
    ap.add_argument("--k", type=int)
    ap.add_argument("--alpha", type=float)
    ap.add_argument("--epsilon", type=float)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    ap.add_argument("--jobs", type=int)
    ap.add_argument("--out")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.stage and args.stage_flag and args.stage != args.stage_flag:
        print("error: conflicting stage arguments", file=sys.stderr)
        return 2
    stage = args.stage or args.stage_flag or "all"
    overrides = {
        "betas": args.beta, "k": args.k, "alpha": args.alpha, "epsilon": args.epsilon,
        "seed": args.seed, "deterministic": args.deterministic, "jobs": args.jobs, "out": args.out,
    }
    try:
        cfg = pipeline.load_config(args.config, overrides)
        if stage == "synth":
            ds = cfg.dataset
            paths = synthetic.write(cfg.out, n_items=ds.synthetic_items, n_users=ds.synthetic_users, seed=ds.synthetic_seed)
            print("\n".join(str(p) for p in paths))
            return 0
        done = pipeline.Pipeline(cfg).run(stage)
    except (pipeline.PipelineError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name, built in done.items():
        print(f"{name}: {'built' if built else 'cached'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
