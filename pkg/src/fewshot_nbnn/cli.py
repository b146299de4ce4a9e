"""Command-line interface.

Subcommands::

    eval       run the episodic protocol, print an EvalReport as JSON
    classify   classify one query descriptor file against a support manifest
    trace      like classify, but print the full selection trace
    gen-synth  write a synthetic clutter dataset (descriptor files + manifest)
    bench      time the kernel backends on the standard episode shape

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import statistics
import sys
from pathlib import Path

from .core import DataError, InvalidPercent, InvalidSpec, Method
from .episodes import ProtocolConfig, evaluate
from .fileio import load_manifest, read_descriptor_file, selection_trace, support_pool_from_dataset, write_manifest
from .classify import classify
from .synth import SynthSpec, synth_generate

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

# protocol keys a manifest may set, by flag name; flags override them
PROTOCOL_KEYS = ("method", "score", "ways", "shots", "queries", "episodes", "merge", "k_percent", "semi", "distractors", "seed")
PROTOCOL_DEFAULTS = {
    "method": "mn4",
    "score": "nbnn",
    "ways": 5,
    "shots": 1,
    "queries": 15,
    "episodes": 600,
    "merge": "union",
    "k_percent": None,
    "semi": 0,
    "distractors": 0,
    "seed": 0,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_method_flags(p):
    p.add_argument("--method", choices=[m.value for m in Method], default=argparse.SUPPRESS)
    p.add_argument("--score", choices=["nbnn", "logodds", "rank"], default=argparse.SUPPRESS)
    p.add_argument("--merge", choices=["mean", "union"], default=argparse.SUPPRESS)
    p.add_argument("--k-percent", dest="k_percent", type=float, default=argparse.SUPPRESS, help="ODM percentage")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fewshot-nbnn", description="NBNN few-shot classification over descriptor sets.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ev = sub.add_parser("eval", help="episodic evaluation")
    ev.add_argument("--manifest", help="dataset manifest (default: built-in synthetic clutter dataset)")
    _add_method_flags(ev)
    ev.add_argument("--ways", type=int, default=argparse.SUPPRESS)
    ev.add_argument("--shots", type=int, default=argparse.SUPPRESS)
    ev.add_argument("--queries", type=int, default=argparse.SUPPRESS, help="query images per class")
    ev.add_argument("--episodes", type=int, default=argparse.SUPPRESS)
    ev.add_argument(
        "--semi", type=int, nargs="?", const=5, default=argparse.SUPPRESS,
        help="unlabeled images per episode class (bare flag: 5)",
    )
    ev.add_argument("--distractors", type=int, default=argparse.SUPPRESS, help="distractor classes for --semi")
    ev.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--repeats", type=int, default=1, help="independent runs with seeds seed, seed+1, ...")
    ev.add_argument("--no-timing", action="store_true", help="omit wall-time fields")
    ev.add_argument("--out", help="write the report here instead of stdout")

    for name, helptext in (("classify", "classify one query file"), ("trace", "selection trace for one query file")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("query", help="query descriptor file (.dsc)")
        p.add_argument("--manifest", required=True, help="support manifest; one class per labelled class id")
        _add_method_flags(p)
        p.add_argument("--out")

    gs = sub.add_parser("gen-synth", help="write a synthetic dataset")
    gs.add_argument("--out", required=True, help="output directory")
    defaults = SynthSpec()
    gs.add_argument("--classes", type=int, default=defaults.n_classes)
    gs.add_argument("--images-per-class", type=int, default=defaults.images_per_class)
    gs.add_argument("--descriptors", type=int, default=defaults.descriptors_per_image)
    gs.add_argument("--dim", type=int, default=defaults.dim)
    gs.add_argument("--signal-fraction", type=float, default=defaults.signal_fraction)
    gs.add_argument("--signal-noise", type=float, default=defaults.signal_noise)
    gs.add_argument("--clutter-noise", type=float, default=defaults.clutter_noise)
    gs.add_argument("--clutter-prototypes", type=int, default=defaults.clutter_prototypes)
    gs.add_argument("--distractors", type=int, default=defaults.distractor_classes)
    gs.add_argument("--seed", type=int, default=defaults.seed)
    _add_method_flags(gs)
    gs.add_argument("--ways", type=int, default=argparse.SUPPRESS)
    gs.add_argument("--shots", type=int, default=argparse.SUPPRESS)
    gs.add_argument("--queries", type=int, default=argparse.SUPPRESS)
    gs.add_argument("--episodes", type=int, default=argparse.SUPPRESS)

    b = sub.add_parser("bench", help="time the kernel backends")
    b.add_argument("--episodes", type=int, default=200)
    b.add_argument("--out")
    return parser


def _protocol(args, manifest_defaults: dict) -> dict:
    merged = dict(PROTOCOL_DEFAULTS)
    unknown = set(manifest_defaults) - set(PROTOCOL_KEYS)
    if unknown:
        raise UsageError(f"manifest protocol has unknown keys: {sorted(unknown)}")
    merged.update(manifest_defaults)
    merged.update({k: getattr(args, k) for k in PROTOCOL_KEYS if hasattr(args, k)})
    return merged


def _config(p: dict) -> ProtocolConfig:
    try:
        return ProtocolConfig(
            n_ways=int(p["ways"]),
            k_shots=int(p["shots"]),
            queries_per_class=int(p["queries"]),
            episode_count=int(p["episodes"]),
            merge_strategy=p["merge"],
            method=p["method"],
            score_rule=p["score"],
            odm_k_percent=None if p["k_percent"] is None else float(p["k_percent"]),
            unlabeled_per_class=int(p["semi"]),
            distractor_classes=int(p["distractors"]),
            seed=int(p["seed"]),
        )
    except (ValueError, TypeError) as exc:
        if isinstance(exc, DataError):
            raise
        raise UsageError(f"bad protocol setting: {exc}") from None


def _emit(doc, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=False) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_eval(args) -> int:
    if args.workers < 1 or args.repeats < 1:
        raise UsageError("--workers and --repeats must be positive")
    if args.manifest:
        dataset, defaults = load_manifest(args.manifest)
        source = {"manifest": str(args.manifest)}
    else:
        spec = SynthSpec(distractor_classes=3)
        dataset, defaults = synth_generate(spec), {}
        source = {"synthetic": spec.to_dict()}
    config = _config(_protocol(args, defaults))
    reports = []
    for r in range(args.repeats):
        report = evaluate(dataset, config.with_(seed=config.seed + r), workers=args.workers)
        doc = report.to_dict(include_timing=not args.no_timing)
        doc["data"] = source
        reports.append(doc)
    if args.repeats == 1:
        _emit(reports[0], args.out)
    else:
        accs = [d["accuracy"] for d in reports]
        _emit(
            {
                "repeats": args.repeats,
                "accuracy_mean": statistics.fmean(accs),
                "accuracy_std": statistics.stdev(accs),
                "runs": reports,
            },
            args.out,
        )
    return EXIT_OK


def _support(args):
    dataset, defaults = load_manifest(args.manifest)
    p = _protocol(args, {k: v for k, v in defaults.items() if k in PROTOCOL_KEYS})
    if len(dataset.class_ids) < 2:
        raise DataError("the support manifest needs at least two labelled classes")
    pool = support_pool_from_dataset(dataset, p["merge"])
    query = read_descriptor_file(args.query)
    if query.dim != pool.dim:
        raise DataError(f"query dimension {query.dim} differs from support dimension {pool.dim}")
    return query, pool, p


def cmd_classify(args) -> int:
    query, pool, p = _support(args)
    result = classify(query, pool, p["method"], p["score"], p["k_percent"])
    _emit(
        {
            "query": str(args.query),
            "method": p["method"],
            "score_rule": p["score"],
            "predicted": result.predicted,
            "scores": result.scores.as_dict(),
            "selected": len(result.selection),
            "fallback": result.fallback,
        },
        args.out,
    )
    return EXIT_OK


def cmd_trace(args) -> int:
    query, pool, p = _support(args)
    doc = selection_trace(query, pool, p["method"], p["score"], p["k_percent"])
    doc = {"query": str(args.query), **doc}
    _emit(doc, args.out)
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    try:
        spec = SynthSpec(
            n_classes=args.classes,
            images_per_class=args.images_per_class,
            descriptors_per_image=args.descriptors,
            dim=args.dim,
            signal_fraction=args.signal_fraction,
            signal_noise=args.signal_noise,
            clutter_noise=args.clutter_noise,
            clutter_prototypes=args.clutter_prototypes,
            distractor_classes=args.distractors,
            seed=args.seed,
        )
    except InvalidSpec as exc:
        raise UsageError(str(exc)) from None
    protocol = {k: getattr(args, k) for k in PROTOCOL_KEYS if k not in ("distractors", "seed") and hasattr(args, k)}
    path = write_manifest(synth_generate(spec), args.out, protocol=protocol or None, extra={"synthetic": spec.to_dict()})
    print(path)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import compare_backends

    if args.episodes < 1:
        raise UsageError("--episodes must be positive")
    _emit(compare_backends(episodes=args.episodes), args.out)
    return EXIT_OK


COMMANDS = {"eval": cmd_eval, "classify": cmd_classify, "trace": cmd_trace, "gen-synth": cmd_gen_synth, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidSpec, InvalidPercent) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
