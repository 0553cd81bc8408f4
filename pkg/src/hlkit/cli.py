"""Command-line entry point wiring the pipeline stages together.

Subcommands: gen-synth, train, predict, eval, compare-sp, gradcheck, bench.
Prediction and evaluation are separable stages with a file handoff, so the
evaluator can score externally produced predictions. All randomness flows
from the seeds in spec/config files; rerunning a subcommand with identical
inputs reproduces its outputs byte for byte (wall-clock fields in the
training log excepted).
"""

import argparse
import sys
import time
from pathlib import Path

from .data import (
    HighlightDataset,
    InMemoryStore,
    SyntheticSpec,
    generate_synthetic,
    load_annotations,
    load_predictions,
    write_predictions,
)
from .encoder import TransformerTopConfig, checkpoint_load
from .errors import HlkitError
from .estimator import pick_num_heads
from .evalhd import (
    compare_pooling_scores,
    evaluate_scores,
    format_pooling_table,
    predictions_to_map,
    score_dataset,
    write_pooling_csv,
    write_report,
)
from .saliency import measure_cosine_throughput
from .training import (
    TrainConfig,
    grad_check,
    load_train_config,
    save_train_config,
    tiny_train_config,
    train,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_radii(text: str) -> list:
    try:
        radii = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise _UsageError(f"--radii expects comma-separated integers, got {text!r}")
    if not radii or any(r < 0 for r in radii):
        raise _UsageError(f"--radii expects nonnegative integers, got {text!r}")
    return radii


def build_parser() -> _Parser:
    parser = _Parser(prog="hlkit",
                     description="Query-conditioned video highlight scoring pipeline")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-synth", help="generate a synthetic desk-scale dataset")
    p.add_argument("--spec", required=True, help="JSON generation spec")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="fine-tune both encoder tops")
    p.add_argument("--config", required=True, help="flat key=value training config")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoints and log")
    p.add_argument("--init-checkpoint",
                   help="warm-start from this checkpoint instead of random init")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score every (video, query) pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pool-radius", type=int, default=0)
    p.add_argument("--out", required=True, help="prediction file to write")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="evaluate a prediction file against annotations")
    p.add_argument("--predictions", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--pool-radius", type=int, default=0)
    p.add_argument("--report", help="JSON report to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-sp",
                       help="evaluate under several pooling radii (raw vs pooled)")
    p.add_argument("--checkpoint", help="checkpoint to score with")
    p.add_argument("--data", help="dataset directory (with --checkpoint)")
    p.add_argument("--predictions", help="prediction file (instead of --checkpoint)")
    p.add_argument("--annotations", help="annotation file (with --predictions)")
    p.add_argument("--radii", default="0,1,2")
    p.add_argument("--report", help="CSV table to write")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_compare_sp)

    p = sub.add_parser("gradcheck",
                       help="compare analytic gradients with finite differences")
    p.add_argument("--config", help="training config (default: tiny built-in sweep)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="measure scoring throughput")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--workers", type=int, default=2)
    p.set_defaults(func=cmd_bench)
    return parser


def cmd_gen_synth(args) -> int:
    spec = SyntheticSpec.from_json(args.spec)
    result = generate_synthetic(spec, args.out)
    tower = dict(model_dim=spec.model_dim, num_heads=pick_num_heads(spec.model_dim),
                 mlp_dim=4 * spec.model_dim, num_layers=1, joint_dim=spec.joint_dim,
                 seq_len_max=spec.tokens_per_item)
    config = TrainConfig(seed=spec.seed, top_depth=1,
                         vision=TransformerTopConfig(causal=False, **tower),
                         text=TransformerTopConfig(causal=True, **tower))
    save_train_config(Path(args.out) / "train_config.txt", config)
    print(f"wrote {len(result.manifest.items)} videos x {spec.clips_per_video} clips "
          f"to {args.out} (and a matching train_config.txt)")
    return 0


def cmd_train(args) -> int:
    config = load_train_config(args.config)
    dataset = HighlightDataset.open(args.data)
    if dataset.store.model_dim != config.vision.model_dim:
        raise HlkitError(
            f"dataset model_dim {dataset.store.model_dim} does not match "
            f"config vision.model_dim {config.vision.model_dim}")
    if dataset.query_store.model_dim != config.text.model_dim:
        raise HlkitError(
            f"query activations are {dataset.query_store.model_dim}-wide, "
            f"config text.model_dim is {config.text.model_dim}")
    store = InMemoryStore.from_store(dataset.store)
    query_store = store if dataset.query_store is dataset.store else \
        InMemoryStore.from_store(dataset.query_store)
    result = train(dataset.manifest, store, dataset.targets_by_qid(), config,
                   args.out, workers=args.workers, query_store=query_store,
                   init_from=args.init_checkpoint)
    final_loss = result.reports[-1].loss if result.reports else float("nan")
    print(f"trained {config.steps} steps, final loss {final_loss:.6f}, "
          f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_predict(args) -> int:
    bundle = checkpoint_load(args.checkpoint)
    dataset = HighlightDataset.open(args.data)
    predictions = score_dataset(bundle, dataset.manifest, dataset.store,
                                pool_radius=args.pool_radius, workers=args.workers,
                                query_store=dataset.query_store)
    write_predictions(args.out, predictions)
    print(f"wrote {len(predictions)} predictions to {args.out} "
          f"(pool radius {args.pool_radius})")
    return 0


def cmd_eval(args) -> int:
    predictions = load_predictions(args.predictions)
    records = load_annotations(args.annotations)
    report = evaluate_scores(predictions_to_map(predictions), records,
                             pool_radius=args.pool_radius)
    if args.report:
        write_report(args.report, report)
    print(f"queries={report.n_queries} pool_radius={report.pool_radius} "
          f"mAP={100 * report.map:.2f} HIT@1={100 * report.hit_at_1:.2f}")
    return 0


def cmd_compare_sp(args) -> int:
    radii = _parse_radii(args.radii)
    if args.predictions:
        if not args.annotations:
            raise _UsageError("--predictions requires --annotations")
        score_map = predictions_to_map(load_predictions(args.predictions))
        records = load_annotations(args.annotations)
    elif args.checkpoint:
        if not args.data:
            raise _UsageError("--checkpoint requires --data")
        bundle = checkpoint_load(args.checkpoint)
        dataset = HighlightDataset.open(args.data)
        predictions = score_dataset(bundle, dataset.manifest, dataset.store,
                                    pool_radius=0, workers=args.workers,
                                    query_store=dataset.query_store)
        score_map = predictions_to_map(predictions)
        records = dataset.records
    else:
        raise _UsageError("compare-sp needs --checkpoint/--data or "
                          "--predictions/--annotations")
    reports = compare_pooling_scores(score_map, records, radii)
    if args.report:
        write_pooling_csv(args.report, reports)
    print(format_pooling_table(reports))
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        configs = [load_train_config(args.config)]
    else:
        configs = [tiny_train_config(top_depth=depth) for depth in (0, 1, 2)]
    all_passed = True
    for config in configs:
        report = grad_check(config, seed=args.seed)
        status = "PASS" if report.passed else "FAIL"
        all_passed &= report.passed
        print(f"L={config.top_depth} coords={report.num_coordinates} "
              f"max_rel_err={report.max_relative_error:.3e} "
              f"worst={report.worst_tensor or '-'} {status}")
    print("gradcheck PASS" if all_passed else "gradcheck FAIL")
    return 0 if all_passed else 1


def cmd_bench(args) -> int:
    bundle = checkpoint_load(args.checkpoint)
    dataset = HighlightDataset.open(args.data)
    store = InMemoryStore.from_store(dataset.store)
    query_store = store if dataset.query_store is dataset.store else \
        InMemoryStore.from_store(dataset.query_store)
    n_clips = sum(item.num_clips for item in dataset.manifest.items)

    timings = []
    for workers in sorted({1, max(1, args.workers)}):
        start = time.perf_counter()
        score_dataset(bundle, dataset.manifest, store, pool_radius=0,
                      workers=workers, query_store=query_store)
        elapsed = time.perf_counter() - start
        timings.append((workers, elapsed))
        print(f"workers={workers} clips={n_clips} wall={elapsed:.3f}s "
              f"rate={n_clips / elapsed:.1f} clips/s")

    joint_dim = bundle.config_vision.joint_dim
    for dim in sorted({joint_dim, 512}):
        rate = measure_cosine_throughput(joint_dim=dim)
        print(f"cosine d_e={dim}: {rate:.0f} clip-query evals/s per worker")
    return 0


def run(argv) -> int:
    parser = build_parser()
    if not argv:
        print(parser.format_usage(), end="", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if not getattr(args, "func", None):
        print(parser.format_usage(), end="", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (HlkitError, OSError, KeyError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {message}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
