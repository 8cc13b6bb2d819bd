"""Command-line entry points.

Subcommands mirror the pipeline: corpus synthesis, training, scoring,
ablation sweeps, embedding dumps, and plot rendering. Every command is
driven by JSON config files so runs are reproducible from the shell.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import (
    CorpusConfig,
    ExperimentConfig,
    experiment_from_dict,
    load_experiment,
    save_experiment,
)
from .errors import DivergenceError, FormatError, InvalidInputError


def _load_corpus_for(config: ExperimentConfig, override_dir=None):
    from .store import load_corpus
    from .synth import make_corpus

    if override_dir is not None:
        return load_corpus(override_dir)
    if config.corpus_dir is not None and Path(config.corpus_dir).exists():
        return load_corpus(config.corpus_dir)
    return make_corpus(config.corpus)


def _experiment_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return load_experiment(path)


def cmd_corpus_make(args) -> int:
    from .store import save_corpus
    from .synth import corpus_stats, make_corpus

    if args.config is None:
        corpus_cfg = CorpusConfig()
    else:
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
        if "corpus" in data:
            corpus_cfg = experiment_from_dict(data).corpus
        else:
            corpus_cfg = CorpusConfig(**data)
    corpus = make_corpus(corpus_cfg)
    save_corpus(corpus, args.out)
    stats = corpus_stats(corpus)
    print(f"wrote corpus to {args.out}")
    for split, info in stats.items():
        lo, hi = info["snr_db_range"]
        print(
            f"  {split}: {info['n_utterances']} utterances, "
            f"{info['n_tokens']} tokens, snr [{lo:.1f}, {hi:.1f}] dB"
        )
    return 0


def cmd_train(args) -> int:
    from .training import run_training

    config = _experiment_config(args.config)
    corpus = _load_corpus_for(config, args.corpus)
    result = run_training(config, corpus, args.out, seed=args.seed)
    save_experiment(result.config, Path(args.out) / "config.json")
    print(f"metrics log: {result.metrics_path}")
    print(f"checkpoint:  {result.checkpoint_path}")
    if result.best_valid_ter is not None:
        print(
            f"best valid TER {result.best_valid_ter:.4f} at epoch {result.best_epoch}"
        )
    return 0


def cmd_eval(args) -> int:
    from .evaluation import run_eval
    from .training import load_checkpoint

    _, config, _ = load_checkpoint(args.checkpoint)
    corpus = _load_corpus_for(config, args.corpus)
    result = run_eval(args.checkpoint, corpus, split=args.split)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_ablate(args) -> int:
    from .evaluation import ablation_spec_from_dict, run_ablation

    with open(args.spec, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    spec = ablation_spec_from_dict(data)
    base = (
        experiment_from_dict(data["base"]) if "base" in data else ExperimentConfig()
    )
    corpus = _load_corpus_for(base, args.corpus)
    result = run_ablation(spec, corpus, args.out, base_config=base)
    print(result.table_path.read_text(encoding="utf-8"), end="")
    print(f"results: {result.results_path}")
    return 0


def cmd_dump_embeddings(args) -> int:
    from .evaluation import dump_embeddings
    from .training import load_checkpoint

    _, config, _ = load_checkpoint(args.checkpoint)
    corpus = _load_corpus_for(config, args.corpus)
    out_path = args.out
    if out_path is None:
        out_path = Path(args.checkpoint).parent / f"embeddings-{args.utt}.bin"
    dump = dump_embeddings(
        args.checkpoint, corpus, args.utt, layers=args.layers, out_path=out_path
    )
    print(f"wrote {len(dump.arrays)} arrays to {dump.path}")
    for name, arr in dump.arrays.items():
        print(f"  {name}: {'x'.join(str(s) for s in arr.shape)}")
    return 0


def cmd_plot(args) -> int:
    from .plots import render_plots

    written = render_plots(args.input, args.out)
    if not written:
        print("nothing to plot")
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualpath",
        description="Dual-path noise-robust speech recognition at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_corpus = sub.add_parser("corpus", help="corpus utilities")
    corpus_sub = p_corpus.add_subparsers(dest="corpus_command", required=True)
    p_make = corpus_sub.add_parser("make", help="synthesize a corpus")
    p_make.add_argument("--config", default=None, help="corpus or experiment JSON")
    p_make.add_argument("--out", required=True, help="output directory")
    p_make.set_defaults(func=cmd_corpus_make)

    p_train = sub.add_parser("train", help="run one training")
    p_train.add_argument("--config", default=None, help="experiment JSON")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--seed", type=int, default=None, help="seed override")
    p_train.add_argument("--corpus", default=None, help="corpus directory override")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p_eval.add_argument("--corpus", default=None, help="corpus directory override")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="run an ablation sweep")
    p_ablate.add_argument("--spec", required=True, help="ablation spec JSON")
    p_ablate.add_argument("--out", required=True, help="output directory")
    p_ablate.add_argument("--corpus", default=None, help="corpus directory override")
    p_ablate.set_defaults(func=cmd_ablate)

    p_dump = sub.add_parser("dump-embeddings", help="dump recognizer embeddings")
    p_dump.add_argument("--checkpoint", required=True)
    p_dump.add_argument("--utt", required=True, help="utterance id")
    p_dump.add_argument("--layers", default="all", help='"all", "lo-hi", or index')
    p_dump.add_argument("--out", default=None, help="output file")
    p_dump.add_argument("--corpus", default=None, help="corpus directory override")
    p_dump.set_defaults(func=cmd_dump_embeddings)

    p_plot = sub.add_parser("plot", help="render plots from artifacts")
    p_plot.add_argument("--in", dest="input", required=True, help="input artifact")
    p_plot.add_argument("--out", required=True, help="output directory")
    p_plot.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InvalidInputError, FormatError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        if err.components:
            for name, value in err.components.items():
                print(f"  {name} = {value}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
