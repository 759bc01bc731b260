"""Command-line entry points: run, ablate, sweep, baseline."""

from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .config import ConfigError, make_config


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--seed", type=int, help="global seed override")
    parser.add_argument("--out", default="runs/latest", help="output directory")
    parser.add_argument("--order", type=int, choices=(1, 2, 3), help="optimization order")
    parser.add_argument("--estimator", choices=("cge", "rge"), help="gradient estimator")
    parser.add_argument(
        "--set",
        dest="extra",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override any config field (repeatable)",
    )


def _build_config(args: argparse.Namespace):
    overrides = {}
    for item in args.extra:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.order is not None:
        overrides["order"] = args.order
    if args.estimator is not None:
        overrides["estimator"] = args.estimator
    return make_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fedbox",
        description="Personalized federated learning over a sealed logit-only model",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment")
    _add_common(p_run)

    p_ablate = sub.add_parser("ablate", help="run the five-variant ablation table")
    _add_common(p_ablate)

    p_sweep = sub.add_parser("sweep", help="sweep one hyperparameter")
    _add_common(p_sweep)
    p_sweep.add_argument("--param", required=True, help="parameter to sweep")
    p_sweep.add_argument(
        "--values", required=True, help="comma-separated values, e.g. 0.001,0.005,0.05"
    )

    p_base = sub.add_parser("baseline", help="report the zero-shot baseline only")
    _add_common(p_base)

    args = parser.parse_args(argv)
    try:
        cfg = _build_config(args)
        if args.command == "run":
            result = harness.run(cfg, args.out)
            print(json.dumps(result.summary["final"], indent=1, sort_keys=True))
            print(
                f"zero-shot {result.summary['zero_shot']['avg_test_acc']:.4f} -> "
                f"final {result.summary['final']['avg_test_acc']:.4f} "
                f"({result.summary['improvement_delta_points']:+.1f} points); "
                f"artifacts in {result.run_dir}"
            )
        elif args.command == "ablate":
            table = harness.ablation_suite(cfg, args.out)
            for row in table:
                print(
                    f"{row['variant']:>20}: test acc {row['avg_test_acc']:.4f} "
                    f"({row['delta_vs_zero_shot']:+.4f} vs zero-shot)"
                )
        elif args.command == "sweep":
            values = [v for v in args.values.split(",") if v.strip()]
            rows = harness.sweep(cfg, args.param, values, args.out)
            for row in rows:
                print(
                    f"{row['param']}={row['value']}: final test acc "
                    f"{row['final_avg_test_acc']:.4f}"
                )
        elif args.command == "baseline":
            out = harness.zero_shot_only(cfg)
            print(json.dumps(out, indent=1, sort_keys=True))
    except (ConfigError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
