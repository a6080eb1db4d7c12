"""Command-line entry point: ``thfem <verb> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Optional, Sequence

from .errors import ThfemError
from .pipeline import (AXES, SETTINGS, AblationSpec, cmd_ablate, cmd_build_pairs, cmd_complexity, cmd_eval,
                       cmd_infer, cmd_synth, cmd_train, cmd_train_sync, config_field_types, load_config,
                       parse_overrides)

VERBS = ("synth", "build-pairs", "train-sync", "train", "infer", "eval", "ablate", "complexity")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("-v", "--verbose", action="store_true")
    group = common.add_argument_group("run config (override the config file)")
    for name in config_field_types():
        group.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="VALUE")

    parser = argparse.ArgumentParser(prog="thfem", description="Expression editing with adjacent-frame talking-head repair.")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("synth", parents=[common], help="write training and held-out synthetic corpora")
    sub.add_parser("build-pairs", parents=[common], help="DTW-align pairs and build the training set")
    sub.add_parser("train-sync", parents=[common], help="train the lip-sync expert")
    sub.add_parser("train", parents=[common], help="train the talking-head generator")
    p = sub.add_parser("infer", parents=[common], help="two-stage inference on one source utterance")
    p.add_argument("--source", required=True, help="source record id")
    p.add_argument("--reference", required=True, help="reference record id or emotion")
    p.add_argument("--corpus", help="corpus directory (default: held-out corpus)")
    p.add_argument("--output", help="output .f32seq path")
    p = sub.add_parser("eval", parents=[common], help="metric reports on the held-out corpus")
    p.add_argument("--setting", choices=[*SETTINGS, "both"], default="both")
    p.add_argument("--system", choices=["pipeline", "fem"], default="pipeline")
    p = sub.add_parser("ablate", parents=[common], help="train and evaluate one run per ablation value")
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--values", help="comma-separated values (default: the axis's standard set)")
    sub.add_parser("complexity", parents=[common], help="parameter and MAC counts")
    return parser


def _config(args):
    raw = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return load_config(args.config, parse_overrides(raw))


def run(args) -> object:
    cfg = _config(args)
    if args.verb == "synth":
        return {k: str(v) for k, v in cmd_synth(cfg).items()}
    if args.verb == "build-pairs":
        ds = cmd_build_pairs(cfg)
        return {"samples": len(ds), "skipped": ds.skipped}
    if args.verb == "train-sync":
        cmd_train_sync(cfg)
        return {"expert": str(cfg.path("model") / "expert.ckpt")}
    if args.verb == "train":
        st = cmd_train(cfg)
        return {"steps": len(st.history), "final": st.history.rows[-1] if st.history.rows else None}
    if args.verb == "infer":
        out = cmd_infer(cfg, args.source, args.reference, args.corpus, args.output)
        return {"frames": len(out)}
    if args.verb == "eval":
        settings = SETTINGS if args.setting == "both" else (args.setting,)
        reps = cmd_eval(cfg, settings, args.system)
        return {s: json.loads(r.to_json()) for s, r in reps.items()}
    if args.verb == "ablate":
        values = tuple(v.strip() for v in args.values.split(",")) if args.values else ()
        if args.axis == "window_n":
            values = tuple(int(v) for v in values)
        return cmd_ablate(cfg, AblationSpec(args.axis, values))
    if args.verb == "complexity":
        return cmd_complexity(cfg)
    raise AssertionError(args.verb)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except ThfemError as exc:
        print(json.dumps({"error": exc.kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
