"""Command line for the offline activation exporter."""

import argparse
import sys

from .export import ExportSpec, check_export, export_activations, zero_shot_scores


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hl-export",
        description="Run a frozen dual-encoder trunk over videos and queries "
                    "and write engine-format activation files")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("run", help="export activations, manifest, annotations "
                                   "and the pretrained-top checkpoint")
    p.add_argument("--weights", required=True,
                   help="local directory with the pretrained dual encoder")
    p.add_argument("--videos", required=True,
                   help='JSON list of {"path": ..., "vid": ...}')
    p.add_argument("--annotations", required=True)
    p.add_argument("--cut-depth", type=int, required=True,
                   help="trainable-top depth; must equal the engine's top_depth")
    p.add_argument("--clip-len", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("check", help="re-read an exported dataset with the "
                                     "engine readers and verify it")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("zero-shot", help="report zero-shot sanity scores on an "
                                         "exported dataset")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_zero_shot)
    return parser


def cmd_run(args) -> int:
    import json

    with open(args.videos, "r", encoding="utf-8") as fh:
        videos = json.load(fh)
    spec = ExportSpec(videos=videos, annotations=args.annotations,
                      cut_depth=args.cut_depth, out_dir=args.out,
                      weights=args.weights, clip_len=args.clip_len)
    result = export_activations(spec)
    print(result.summary())
    return 0 if result.n_clips and result.n_queries else 1


def cmd_check(args) -> int:
    problems = check_export(args.data)
    if problems:
        for problem in problems:
            print(f"FAIL: {problem}")
        return 1
    print("check PASS")
    return 0


def cmd_zero_shot(args) -> int:
    relevant_mean, overall_mean = zero_shot_scores(args.data)
    verdict = "PASS" if relevant_mean > overall_mean else "FAIL"
    print(f"relevant_mean={relevant_mean:.4f} overall_mean={overall_mean:.4f} "
          f"zero-shot {verdict}")
    return 0 if relevant_mean > overall_mean else 1


def run(argv) -> int:
    parser = build_parser()
    if not argv:
        print(parser.format_usage(), end="", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        print(parser.format_usage(), end="", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parseable failure
        print(f"error: {str(exc)}".replace("\n", " "), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
