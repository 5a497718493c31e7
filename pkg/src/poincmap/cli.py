"""Command-line entry points.

    poincmap run <config.yaml | bundled-name>
    poincmap export <output_dir> <stage> <fmt>
    poincmap perturb-check <config.yaml | bundled-name>
    poincmap entropy <output_dir>

Exit codes: 0 success, 2 stage failure, 3 configuration error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .pipeline import (ConfigError, RunManifest, bundled_config_path,
                       export_stage, load_config, perturb_check, run_pipeline)


def _resolve_config(arg: str):
    p = Path(arg)
    if p.exists():
        return load_config(p)
    return load_config(bundled_config_path(arg))


def _cmd_run(args) -> int:
    cfg = _resolve_config(args.config)
    man = run_pipeline(cfg)
    path = man.save()
    print(f"run complete; manifest at {path}")
    for k, v in man.derived.items():
        print(f"  {k}: {v}")
    return 0


def _cmd_export(args) -> int:
    man = RunManifest.load(args.output_dir)
    for p in export_stage(man, args.stage, args.fmt):
        print(p)
    return 0


def _cmd_perturb(args) -> int:
    cfg = _resolve_config(args.config)
    results = perturb_check(cfg)
    for name, r in results["variants"].items():
        status = "match" if r["match"] else "MISMATCH"
        print(f"{name}: {status} {r['prefixes']}")
    print("all kneading prefixes unchanged" if results["all_match"]
          else "kneading prefixes CHANGED under perturbation")
    return 0 if results["all_match"] else 2


def _cmd_entropy(args) -> int:
    man = RunManifest.load(args.output_dir)
    st = man.stages.get("knead")
    if not st:
        raise ConfigError("run has no kneading stage")
    with open(st["paths"]["kneading"]) as fh:
        report = json.load(fh)
    if "entropy" not in report:
        print("no finite-grammar entropy for this run (multimodal map)")
        return 0
    ent = report["entropy"]
    print(f"forbidden blocks: {ent['forbidden_blocks']}")
    print(f"characteristic polynomial coefficients (1, z, z^2, ...): "
          f"{ent['char_poly']}")
    print(f"topological entropy h = {ent['h']:.12f}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="poincmap", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="run the full pipeline from a config")
    p_run.add_argument("config")
    p_run.set_defaults(func=_cmd_run)

    p_exp = sub.add_parser("export", help="print artifact paths of a stage")
    p_exp.add_argument("output_dir")
    p_exp.add_argument("stage")
    p_exp.add_argument("fmt", choices=["csv", "json", "npz"])
    p_exp.set_defaults(func=_cmd_export)

    p_pc = sub.add_parser("perturb-check",
                          help="re-run with perturbed numerics, diff kneading")
    p_pc.add_argument("config")
    p_pc.set_defaults(func=_cmd_perturb)

    p_en = sub.add_parser("entropy", help="report finite-grammar entropy")
    p_en.add_argument("output_dir")
    p_en.set_defaults(func=_cmd_entropy)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 3
    except FileNotFoundError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 3
    except Exception as err:  # stage failure
        print(f"stage failure: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
