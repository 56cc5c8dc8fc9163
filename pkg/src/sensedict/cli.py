"""Command-line entry point for the full pipeline.

Subcommands: build, replace, distill, infer, wordsim, word-build,
stats, validate. Exit codes: 0 success, 1 usage error, 2 input-format
error, 3 numerical/contract failure. Data goes to files, progress and
diagnostics to stderr; output files are written to a temp path and
renamed on success so failures never leave partial outputs.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import tempfile
import time

import numpy as np

from . import dictionary as dict_mod
from . import distillation as distill_mod
from . import replacement as replace_mod
from . import stream as stream_mod
from . import wordsim as wordsim_mod
from .clustering import AdaptivePolicy, KmeansConfig, MclConfig
from .errors import ContractError, FormatError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FORMAT = 2
EXIT_CONTRACT = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems via exit code 1."""

    def error(self, message):
        raise _UsageError(message)


def _log(message: str) -> None:
    print(message, file=sys.stderr)


@contextlib.contextmanager
def _atomic_output(path: str, mode: str = "wb"):
    """Write to a sibling temp file; rename over `path` only on success."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, mode) as handle:
            yield handle
        os.replace(tmp_path, path)
    except BaseException:
        with contextlib.suppress(OSError):
            os.unlink(tmp_path)
        raise


def _positive(kind, name: str):
    def convert(text: str):
        value = kind(text)
        if value <= 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive")
        return value

    return convert


def _build_parser() -> _Parser:
    parser = _Parser(prog="sensedict", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_parser(name: str, help_text: str):
        return sub.add_parser(
            name,
            help=help_text,
            formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        )

    p = add_parser("build", "cluster a .semb stream into a .sdict dictionary")
    p.add_argument("--input", required=True, help=".semb embedding stream")
    p.add_argument("--out", required=True, help=".sdict output path")
    p.add_argument("--k", type=_positive(int, "--k"), default=15,
                   help="senses per token in fixed-k mode")
    p.add_argument("--adaptive", action="store_true",
                   help="derive per-token k from MCL cluster counts")
    p.add_argument("--inflation", type=float, default=1.65, help="MCL inflation")
    p.add_argument("--expansion", type=int, default=2, help="MCL expansion power")
    p.add_argument("--knn", type=_positive(int, "--knn"), default=10,
                   help="mutual-kNN graph degree")
    p.add_argument("--mcl-threshold", type=_positive(int, "--mcl-threshold"),
                   default=900, help="cluster-count cutoff between coefficients")
    p.add_argument("--coef-low", type=float, default=0.1,
                   help="scaling coefficient at or below the threshold")
    p.add_argument("--coef-high", type=float, default=0.4,
                   help="scaling coefficient above the threshold")
    p.add_argument("--max-per-token", type=_positive(int, "--max-per-token"),
                   default=8000, help="per-token sampling cap")
    p.add_argument("--dtype", choices=("f32", "f16"), default="f32",
                   help="dictionary storage precision")
    p.add_argument("--seed", type=int, default=0, help="master random seed")
    p.add_argument("--threads", type=_positive(int, "--threads"), default=1,
                   help="parallel token builds")

    p = add_parser("replace", "quantize a stream by nearest-sense replacement")
    p.add_argument("--dict", required=True, dest="dict_path", help=".sdict dictionary")
    p.add_argument("--input", required=True, help=".semb input stream")
    p.add_argument("--out", required=True, help=".semb quantized output")
    p.add_argument("--report", required=True, help="JSON fidelity report path")

    p = add_parser("distill", "train a student by sense classification")
    p.add_argument("--dict", required=True, dest="dict_path", help=".sdict dictionary")
    p.add_argument("--teacher", required=True, help=".semb teacher embeddings")
    p.add_argument("--features", required=True, help=".semb student features")
    p.add_argument("--out", required=True, help=".skdm model output path")
    p.add_argument("--epochs", type=_positive(int, "--epochs"), required=True,
                   help="training epochs")
    p.add_argument("--lr", type=_positive(float, "--lr"), default=1e-3,
                   help="learning rate")
    p.add_argument("--batch", type=_positive(int, "--batch"), default=32,
                   help="mini-batch size")
    p.add_argument("--hidden", type=int, default=0,
                   help="hidden width, 0 = pure linear alignment")
    p.add_argument("--activation", choices=("identity", "relu", "tanh"),
                   default="relu", help="hidden-layer activation")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="adam",
                   help="weight update rule")
    p.add_argument("--seed", type=int, default=0, help="shuffle and init seed")

    p = add_parser("infer", "sense selection by a trained student")
    p.add_argument("--dict", required=True, dest="dict_path", help=".sdict dictionary")
    p.add_argument("--model", required=True, help=".skdm student model")
    p.add_argument("--features", required=True, help=".semb student features")
    p.add_argument("--out", required=True,
                   help="text output, one sense index per record (-1 = fallback)")

    p = add_parser("wordsim", "score word pairs and report Spearman correlation")
    p.add_argument("--dict", required=True, dest="dict_path", help=".sdict dictionary")
    p.add_argument("--vocab", required=True, help="id<TAB>surface sidecar")
    p.add_argument("--pairs", required=True, help="word1<TAB>word2<TAB>score benchmark")
    p.add_argument("--report", required=True, help="JSON report path")

    p = add_parser("word-build", "build word-level senses from a word stream")
    p.add_argument("--input", required=True, help=".semb word-keyed stream")
    p.add_argument("--k", type=_positive(int, "--k"), default=5,
                   help="senses per word")
    p.add_argument("--out", required=True, help=".sdict output path")
    p.add_argument("--seed", type=int, default=0, help="master random seed")

    p = add_parser("stats", "summarize a dictionary")
    p.add_argument("--dict", required=True, dest="dict_path", help=".sdict dictionary")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")

    p = add_parser("validate", "structurally scan a .semb stream")
    p.add_argument("--input", required=True, help=".semb stream to scan")
    return parser


def _load_dictionary(path: str) -> dict_mod.SenseDictionary:
    with open(path, "rb") as handle:
        return dict_mod.deserialize(handle)


def _cmd_build(args) -> int:
    adaptive = None
    if args.adaptive:
        adaptive = AdaptivePolicy(
            mcl=MclConfig(inflation=args.inflation, expansion=args.expansion, knn=args.knn),
            threshold=args.mcl_threshold,
            coef_low=args.coef_low,
            coef_high=args.coef_high,
        )
    config = dict_mod.BuildConfig(
        kmeans=KmeansConfig(k=args.k, seed=args.seed),
        adaptive=adaptive,
        max_per_token=args.max_per_token,
        seed=args.seed,
        dtype="float16" if args.dtype == "f16" else "float32",
    )
    start = time.monotonic()
    with open(args.input, "rb") as source:
        built = dict_mod.build_dictionary(source, config, threads=args.threads)
    with _atomic_output(args.out) as sink:
        size = dict_mod.serialize(built, sink)
    _log(
        f"built {len(built)} tokens (dim {built.dim}) in "
        f"{time.monotonic() - start:.2f}s, {size} bytes -> {args.out}"
    )
    return EXIT_OK


def _cmd_replace(args) -> int:
    built = _load_dictionary(args.dict_path)
    with open(args.input, "rb") as source, _atomic_output(args.out) as sink:
        report = replace_mod.replace_stream(built, source, sink)
    with _atomic_output(args.report, "w") as handle:
        handle.write(report.to_json() + "\n")
    offenders = dict_mod.non_self_dominant_senses(built)
    bad = sum(len(v) for v in offenders.values())
    _log(
        f"replaced {report.replaced}/{report.records} records "
        f"({report.fallbacks} fallbacks), mse {report.mean_sq_error:.6g}; "
        f"{bad} non-self-dominant senses in dictionary"
    )
    return EXIT_OK


def _cmd_distill(args) -> int:
    built = _load_dictionary(args.dict_path)
    if args.hidden < 0:
        raise _UsageError("--hidden must be >= 0")
    config = distill_mod.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        optimizer=args.optimizer,
    )
    with open(args.teacher, "rb") as teacher, open(args.features, "rb") as features:
        model, trace = distill_mod.train(
            teacher,
            features,
            built,
            config,
            hidden_dim=args.hidden,
            activation=args.activation,
        )
    for entry in trace.epochs:
        _log(
            f"epoch {entry.epoch:4d}  loss {entry.mean_loss:.6f}  "
            f"agreement {entry.agreement:.4f}"
        )
    if trace.skipped_records:
        _log(f"skipped {trace.skipped_records} records with no dictionary entry")
    with _atomic_output(args.out) as sink:
        distill_mod.save_model(model, sink)
    return EXIT_OK


def _cmd_infer(args) -> int:
    built = _load_dictionary(args.dict_path)
    with open(args.model, "rb") as handle:
        model = distill_mod.load_model(handle)
    with open(args.features, "rb") as features:
        labels, fallbacks = distill_mod.infer_labels(model, built, features)
    with _atomic_output(args.out, "w") as sink:
        for label in labels:
            sink.write(f"{int(label)}\n")
    _log(f"inferred {labels.shape[0]} records, {fallbacks} fallbacks")
    return EXIT_OK


def _cmd_wordsim(args) -> int:
    built = _load_dictionary(args.dict_path)
    with open(args.vocab, "r", encoding="utf-8") as handle:
        vocab = wordsim_mod.read_vocab_tsv(handle)
    with open(args.pairs, "r", encoding="utf-8") as handle:
        benchmark = wordsim_mod.read_benchmark_tsv(handle)
    scored = wordsim_mod.score_pairs(built, vocab, benchmark)
    rho = wordsim_mod.spearman(scored.predicted, scored.gold)
    payload = {
        "pairs_scored": len(scored.predicted),
        "pairs_missing": scored.missing,
        "spearman": rho,
    }
    with _atomic_output(args.report, "w") as sink:
        sink.write(json.dumps(payload, indent=2) + "\n")
    _log(
        f"scored {len(scored.predicted)} pairs ({scored.missing} missing), "
        f"spearman {rho:.4f}"
    )
    return EXIT_OK


def _cmd_word_build(args) -> int:
    with open(args.input, "rb") as source:
        built = wordsim_mod.build_word_senses(source, k=args.k, seed=args.seed)
    with _atomic_output(args.out) as sink:
        size = dict_mod.serialize(built, sink)
    _log(f"built {len(built)} words, {size} bytes -> {args.out}")
    return EXIT_OK


def _cmd_stats(args) -> int:
    built = _load_dictionary(args.dict_path)
    summary = dict_mod.stats(built)
    if args.json:
        print(
            json.dumps(
                {
                    "token_count": summary.token_count,
                    "sense_histogram": {
                        str(k): v for k, v in summary.sense_histogram.items()
                    },
                    "tokens_at_max": summary.tokens_at_max,
                    "storage_bytes": summary.storage_bytes,
                },
                indent=2,
            )
        )
    else:
        print(f"tokens:        {summary.token_count}")
        print(f"storage bytes: {summary.storage_bytes}")
        print(f"tokens at max: {summary.tokens_at_max}")
        print("sense histogram:")
        for senses, count in summary.sense_histogram.items():
            print(f"  {senses:5d} senses: {count} tokens")
    return EXIT_OK


def _cmd_validate(args) -> int:
    with open(args.input, "rb") as source:
        summary = stream_mod.validate_stream(source)
    print(
        f"records={summary.records} distinct_tokens={summary.distinct_tokens} "
        f"dim={summary.dim}"
    )
    return EXIT_OK


_COMMANDS = {
    "build": _cmd_build,
    "replace": _cmd_replace,
    "distill": _cmd_distill,
    "infer": _cmd_infer,
    "wordsim": _cmd_wordsim,
    "word-build": _cmd_word_build,
    "stats": _cmd_stats,
    "validate": _cmd_validate,
}


def run(argv: list[str]) -> int:
    """Dispatch one invocation; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        _log(f"usage error: {exc}")
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        _log(f"cannot open file: {exc}")
        return EXIT_USAGE
    except FormatError as exc:
        _log(f"input format error: {exc}")
        return EXIT_FORMAT
    except ContractError as exc:
        _log(f"contract failure: {exc}")
        return EXIT_CONTRACT
    except (ValueError, OSError) as exc:
        _log(f"error: {exc}")
        return EXIT_FORMAT


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
