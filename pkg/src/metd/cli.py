"""Command-line entry point.

Commands: synth, train, eval, decode, compare, fdcheck.  Every command
reads a flat key=value config (--config; optional where noted, defaults
apply).  Exit codes: 0 success, 1 check failure (fdcheck tolerance
breach), 2 usage/config/data errors.  All primary outputs are
deterministic for a fixed config and seed; only wall-time measurements
vary between runs.
"""

import argparse
import os
import sys
from dataclasses import replace

from .config import RunConfig, parse_config, parse_config_text
from .data import (
    generate_synthetic,
    load_dataset,
    load_vocabulary,
    nearest_words,
    oversample_balance,
    save_dataset,
)
from .errors import (
    ConfigError,
    ContractViolation,
    InfeasibleConfigError,
    ParseError,
)
from .harness import compare_all, format_comparison
from .inference import evaluate, format_eval_report, subclass_report
from .model import build_model, load_checkpoint, save_checkpoint
from .training import (
    fd_check,
    format_metrics_log,
    random_fd_instance,
    run_stage1,
    run_stage2,
)


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return parse_config(args.config)
    return parse_config_text("")


def cmd_synth(args) -> int:
    config = _load_config(args)
    train, test = generate_synthetic(config.synth_config())
    os.makedirs(args.out_dir, exist_ok=True)
    for name, dataset in (("train.tsv", train), ("test.tsv", test)):
        path = os.path.join(args.out_dir, name)
        save_dataset(dataset, path)
        print(
            f"wrote {path} ({len(dataset)} samples, dim={dataset.feature_dim}, "
            f"classes={dataset.n_classes})"
        )
    return 0


def _build_model_from_config(config: RunConfig):
    return build_model(
        n_classes=config.n_classes,
        n_subclasses=config.n_subclasses,
        n_tokens=config.n_tokens,
        token_dim=config.token_dim,
        embed_dim=config.embed_dim,
        feature_dim=config.feature_dim,
        context_length=config.context_length,
        encoder_kind=config.encoder_kind,
        residual=config.residual_adapter,
        temperature=config.temperature,
        seed=config.seed,
    )


def cmd_train(args) -> int:
    config = _load_config(args)
    train = load_dataset(os.path.join(args.data_dir, "train.tsv"))
    if train.feature_dim != config.feature_dim:
        raise ContractViolation(
            f"dataset dim {train.feature_dim} != config feature_dim "
            f"{config.feature_dim}"
        )
    if train.n_classes != config.n_classes:
        raise ContractViolation(
            f"dataset classes {train.n_classes} != config n_classes "
            f"{config.n_classes}"
        )
    if config.oversample:
        train = oversample_balance(train, config.seed)
    model = _build_model_from_config(config)
    _, trace1 = run_stage1(model, train, config.stage_config(1))
    _, trace2 = run_stage2(model, train, config.stage_config(2))
    save_checkpoint(model, args.out_checkpoint)
    offset = len(trace1)
    combined = list(trace1) + [
        replace(stats, epoch=stats.epoch + offset) for stats in trace2
    ]
    log_path = args.out_checkpoint + ".log"
    with open(log_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_metrics_log(combined))
    for stage, trace in ((1, trace1), (2, trace2)):
        if trace:
            last = trace[-1]
            print(
                f"stage {stage}: {len(trace)} epochs, final total={last.total:.6g} "
                f"war={last.war:.4f}"
            )
        else:
            print(f"stage {stage}: 0 epochs")
    print(f"wrote {args.out_checkpoint}")
    print(f"wrote {log_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(dataset, model)
    subclasses = subclass_report(dataset, model)
    text = format_eval_report(report, subclasses)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text + "\n")
    return 0


def cmd_decode(args) -> int:
    config = _load_config(args)
    model = load_checkpoint(args.checkpoint)
    vocab = load_vocabulary(args.vocab)
    if vocab.dim != model.bank.token_dim:
        raise ContractViolation(
            f"vocabulary dim {vocab.dim} != token dim {model.bank.token_dim}"
        )
    bank = model.bank
    print("class\t(k,m)\tnearest words")
    for i in range(bank.n_classes):
        for k in range(bank.n_subclasses):
            for m in range(bank.n_tokens):
                ranked = nearest_words(vocab, bank.tokens[i, k, m], config.decode_top_n)
                words = "\t".join(f"{word}:{dist:.6f}" for word, dist in ranked)
                print(f"{i}\t({k + 1},{m + 1})\t{words}")
    return 0


def cmd_compare(args) -> int:
    config = _load_config(args)
    train = load_dataset(os.path.join(args.data_dir, "train.tsv"))
    test = load_dataset(os.path.join(args.data_dir, "test.tsv"))
    report = compare_all(
        (train, test),
        config.strategy_list(),
        config.seed,
        config.harness_settings(),
    )
    print(format_comparison(report))
    return 0


def cmd_fdcheck(args) -> int:
    config = _load_config(args)
    tolerance = config.fdcheck_tolerance
    overall_worst = ("", -1.0)
    lines = []
    for stage in (1, 2):
        totals: dict[str, list] = {}
        for instance in range(config.fdcheck_instances):
            model, sample, counts = random_fd_instance(
                seed=config.seed + instance, stage=stage
            )
            report = fd_check(
                model,
                sample,
                h=config.fdcheck_step,
                tolerance=tolerance,
                target_counts=counts,
                stage=stage,
                corrupt=config.fdcheck_corrupt,
            )
            for group in report.groups:
                entry = totals.setdefault(group.name, [0, 0.0])
                entry[0] += group.n_entries
                entry[1] = max(entry[1], group.max_rel_err)
        for name in sorted(totals):
            entries, worst = totals[name]
            lines.append(
                f"stage {stage}\t{name}\tinstances={config.fdcheck_instances}"
                f"\tentries={entries}\tmax_rel_err={worst:.3e}"
            )
            if worst > overall_worst[1]:
                overall_worst = (f"stage {stage} {name}", worst)
    for line in lines:
        print(line)
    if overall_worst[1] < tolerance:
        print(f"fdcheck: PASS (max_rel_err={overall_worst[1]:.3e}, tolerance={tolerance:g})")
        return 0
    print(
        f"fdcheck: FAIL {overall_worst[0]} max_rel_err={overall_worst[1]:.3e} "
        f"exceeds tolerance {tolerance:g}"
    )
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metd",
        description="Multi-descriptor cosine classifier: synthesis, training, "
        "evaluation, decoding, comparison, and gradient checking.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--config", required=True, help="run config path")
    p.add_argument("out_dir", help="output directory for train.tsv/test.tsv")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the two-stage training pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("data_dir", help="directory containing train.tsv")
    p.add_argument("out_checkpoint", help="checkpoint output path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--config", required=False, help="optional run config")
    p.add_argument("--out", required=False, help="also write the report here")
    p.add_argument("checkpoint")
    p.add_argument("data", help="dataset file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="print nearest vocabulary words per token")
    p.add_argument("--config", required=False)
    p.add_argument("checkpoint")
    p.add_argument("vocab", help="vocabulary file")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("compare", help="run the strategy comparison harness")
    p.add_argument("--config", required=True)
    p.add_argument("data_dir", help="directory containing train.tsv and test.tsv")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("fdcheck", help="verify analytic gradients numerically")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_fdcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    except (ContractViolation, InfeasibleConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
