"""Run the desk-scale reference experiments and write their numbers as JSON.

    python3 scripts/run_reference.py --out results/reference.json
    python3 scripts/run_reference.py --only overfit --set tok_steps=300

Stages: ``mcar`` (cyclic code streams), ``overfit`` (tokenizer on 64 samples)
and ``pipeline`` (alignment probe plus instruction tuning with and without
option shuffling).  Nothing is judged here; see tests/test_acceptance.py.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from eeglm import experiments
from eeglm.config import RunConfig, load_config

STAGES = ("mcar", "overfit", "pipeline")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/reference.json"))
    ap.add_argument("--only", choices=STAGES, action="append", help="run just these stages (repeatable)")
    ap.add_argument("--config", type=Path, help="run configuration for the pipeline stage")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = dict(item.split("=", 1) for item in args.set)
    cfg = cfg.with_overrides(seed=args.seed, **overrides)
    log = lambda msg: print(msg, file=sys.stderr, flush=True)

    results, t0 = {}, time.perf_counter()
    for stage in args.only or STAGES:
        log(f"== {stage}")
        if stage == "mcar":
            results[stage] = experiments.mcar_cyclic(seed=args.seed)
        elif stage == "overfit":
            results[stage] = experiments.tokenizer_overfit(seed=args.seed)
        else:
            results[stage] = experiments.reference_pipeline(cfg, log=log)
    results["total_seconds"] = time.perf_counter() - t0
    results["config"] = cfg.dumps()

    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log(f"wrote {args.out} ({results['total_seconds'] / 60:.1f} min)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
