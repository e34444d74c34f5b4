"""Command-line interface.

Subcommands: synth (build a synthetic corpus), train, generate, eval,
gradcheck (finite-difference verification), and ablate (train and compare
named configuration variants side by side).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from .autodiff import Rng
from .corpus import (EOS_ID, EmotionCategory, Vocab, build_vocab,
                     detokenize, encode_corpus, encode_record, labels_for,
                     load_corpus, make_record, save_corpus, synth_corpus,
                     tokenize_char)
from .decoding import SearchConfig, generate
from .errors import (CheckpointError, ConfigError, CorpusFormatError,
                     DataError, DimensionError, TrainingError, UsageError)
from .gradsuite import format_results, run_suite
from .metrics import MetricReport, build_report, train_tagger
from .model import ModelConfig
from .trainer import (TrainConfig, analytic_parameter_count,
                      apply_full_scale, load_checkpoint, save_checkpoint,
                      train)

_DECODE_MODES = {"greedy": "greedy", "beam": "beam", "rbs": "rbs",
                 "hard": "hard_norepeat"}


# ------------------------------------------------------------ parser set-up

def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE", default=None,
                        help="flat key = value file supplying flag defaults "
                             "(command-line flags override it)")
    parser.add_argument("--seed", type=int, default=0,
                        help="random seed (default 0)")


def _model_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("model")
    group.add_argument("--granularity", choices=["coarse", "fine"],
                       default="fine",
                       help="emotion label set (default fine)")
    group.add_argument("--fusion", choices=["none", "simple", "dynamic"],
                       default="dynamic",
                       help="emotion fusion mode (default dynamic)")
    group.add_argument("--copy", choices=["off", "hierarchical"],
                       default="hierarchical",
                       help="copy mechanism (default hierarchical)")
    group.add_argument("--emo-weight", type=float, default=0.01,
                       help="emotion loss weight (default 0.01)")
    group.add_argument("--topk", type=int, default=50,
                       help="top-k cutoff for the emotion loss (default 50)")
    group.add_argument("--d-emb", type=int, default=64,
                       help="embedding size (default 64)")
    group.add_argument("--d-h", type=int, default=64,
                       help="hidden state size (default 64)")
    group.add_argument("--n-layers", type=int, default=1,
                       help="LSTM layers per level (default 1)")
    group.add_argument("--dropout", type=float, default=0.0,
                       help="dropout rate on decoder inputs (default 0.0)")


def _train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training")
    group.add_argument("--batch-size", type=int, default=16,
                       help="examples per batch (default 16)")
    group.add_argument("--lr", type=float, default=1e-3,
                       help="Adam learning rate (default 0.001)")
    group.add_argument("--epochs", type=int, default=10,
                       help="training epochs (default 10)")
    group.add_argument("--full-scale", action="store_true",
                       help="use the full-size dims: d_h=512, d_emb=512, "
                            "dropout 0.3, batch 64")
    group.add_argument("--log", metavar="FILE", default=None,
                       help="append one JSON line per training step")


def _search_flags(parser: argparse.ArgumentParser,
                  default_mode: str = "beam") -> None:
    group = parser.add_argument_group("decoding")
    group.add_argument("--decode", choices=sorted(_DECODE_MODES),
                       default=default_mode,
                       help=f"search mode (default {default_mode})")
    group.add_argument("--beam-size", type=int, default=5,
                       help="beam width (default 5)")
    group.add_argument("--rbs-n", type=int, default=1,
                       help="n-gram order penalized by rbs/hard (default 1)")
    group.add_argument("--rbs-eta", type=float, default=0.5,
                       help="per-repeat probability decay for rbs "
                            "(default 0.5)")
    group.add_argument("--max-len", type=int, default=40,
                       help="maximum generated tokens (default 40)")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="emocomment",
        description="Emotion-controlled article commenting: synthesize "
                    "corpora, train, generate, and evaluate.")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    commands: dict[str, argparse.ArgumentParser] = {}

    sp = subparsers.add_parser(
        "synth", help="write a synthetic labelled corpus",
        description="Generate a deterministic synthetic corpus of "
                    "article/comment pairs with emotion labels.")
    _common_flags(sp)
    sp.add_argument("--out", metavar="FILE",
                    help="output corpus path (JSON lines) [required]")
    sp.add_argument("--n", type=int, default=2000,
                    help="number of examples (default 2000)")
    sp.add_argument("--granularity", choices=["coarse", "fine"],
                    default="fine",
                    help="emotion label set (default fine)")
    sp.set_defaults(func=cmd_synth)
    commands["synth"] = sp

    sp = subparsers.add_parser(
        "train", help="train a model on a corpus",
        description="Train the hierarchical encoder/decoder and write a "
                    "checkpoint plus its vocabulary file.")
    _common_flags(sp)
    sp.add_argument("--corpus", metavar="FILE",
                    help="training corpus (JSON lines) [required]")
    sp.add_argument("--out", metavar="FILE",
                    help="checkpoint output path [required]")
    sp.add_argument("--vocab", metavar="FILE", default=None,
                    help="vocabulary output path (default OUT.vocab)")
    _model_flags(sp)
    _train_flags(sp)
    sp.set_defaults(func=cmd_train)
    commands["train"] = sp

    sp = subparsers.add_parser(
        "generate", help="generate comments from a checkpoint",
        description="Print one comment per (article, emotion) pair. The "
                    "article file holds one article per line; sentences "
                    "are separated by ' | '.")
    _common_flags(sp)
    sp.add_argument("--checkpoint", metavar="FILE",
                    help="trained checkpoint path [required]")
    sp.add_argument("--vocab", metavar="FILE", default=None,
                    help="vocabulary path (default CHECKPOINT.vocab)")
    sp.add_argument("--articles", metavar="FILE",
                    help="articles, one per line, sentences split on ' | ' "
                         "[required]")
    sp.add_argument("--emotion",
                    help="emotion label, comma-separated labels, or 'all' "
                         "(case-insensitive) [required]")
    _search_flags(sp)
    sp.set_defaults(func=cmd_generate)
    commands["generate"] = sp

    sp = subparsers.add_parser(
        "eval", help="evaluate a checkpoint on a corpus",
        description="Generate one comment per article with round-robin "
                    "requested emotions and report quality, diversity, "
                    "and emotion-accuracy metrics.")
    _common_flags(sp)
    sp.add_argument("--checkpoint", metavar="FILE",
                    help="trained checkpoint path [required]")
    sp.add_argument("--vocab", metavar="FILE", default=None,
                    help="vocabulary path (default CHECKPOINT.vocab)")
    sp.add_argument("--corpus", metavar="FILE",
                    help="evaluation corpus with reference comments "
                         "[required]")
    sp.add_argument("--tagger-corpus", metavar="FILE", default=None,
                    help="labelled corpus for fitting the emotion tagger "
                         "(default: the evaluation corpus)")
    sp.add_argument("--requested", choices=["round-robin", "reference"],
                    default="round-robin",
                    help="how requested emotions are assigned "
                         "(default round-robin)")
    sp.add_argument("--out", metavar="FILE", default=None,
                    help="write the JSON report here instead of stdout")
    sp.add_argument("--table", action="store_true",
                    help="also print an aligned text table")
    _search_flags(sp)
    sp.set_defaults(func=cmd_eval)
    commands["eval"] = sp

    sp = subparsers.add_parser(
        "gradcheck", help="finite-difference check of all gradients",
        description="Compare analytic gradients against central "
                    "differences for every differentiable component; "
                    "exits nonzero if any check exceeds the tolerance.")
    _common_flags(sp)
    sp.set_defaults(func=cmd_gradcheck)
    commands["gradcheck"] = sp

    sp = subparsers.add_parser(
        "ablate", help="train and compare configuration variants",
        description="Train each named variant on the same corpus and "
                    "render a comparison table over quality, diversity, "
                    "and emotion accuracy.")
    _common_flags(sp)
    sp.add_argument("--corpus", metavar="FILE",
                    help="training corpus (JSON lines) [required]")
    sp.add_argument("--eval-corpus", metavar="FILE", default=None,
                    help="held-out corpus for evaluation "
                         "(default: the training corpus)")
    sp.add_argument("--names", default=None,
                    help="comma-separated variant names to run "
                         "(default: all)")
    sp.add_argument("--out", metavar="FILE", default=None,
                    help="write per-variant JSON reports here")
    sp.add_argument("--parallel", type=int, default=0, metavar="N",
                    help="run variants in N worker processes (default: "
                         "sequential)")
    _model_flags(sp)
    _train_flags(sp)
    _search_flags(sp, default_mode="rbs")
    sp.set_defaults(func=cmd_ablate)
    commands["ablate"] = sp
    return parser, commands


# ------------------------------------------------------------- config files

def read_config_file(path: str) -> dict[str, str]:
    """Parse a flat key = value file; '#' starts a comment."""
    pairs: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(
                    f"{path} line {line_no}: expected 'key = value'")
            key, _, value = line.partition("=")
            pairs[key.strip().replace("-", "_")] = value.strip()
    return pairs


def _coerce_flag_value(action: argparse.Action, raw: str):
    if isinstance(action.default, bool):
        lowered = raw.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(
                f"config value for '{action.dest}' must be boolean, "
                f"got {raw!r}")
        return lowered in ("true", "1", "yes")
    if action.choices is not None and raw not in action.choices:
        raise UsageError(
            f"config value for '{action.dest}' must be one of "
            f"{sorted(action.choices)}, got {raw!r}")
    if action.type is not None:
        return action.type(raw)
    return raw


def apply_config_defaults(commands: dict, pairs: dict[str, str]) -> None:
    """Install file values as parser defaults so flags still override."""
    recognized = set()
    for sub in commands.values():
        overrides = {}
        for action in sub._actions:
            if action.dest in pairs:
                overrides[action.dest] = _coerce_flag_value(
                    action, pairs[action.dest])
                recognized.add(action.dest)
        sub.set_defaults(**overrides)
    unknown = sorted(set(pairs) - recognized)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")


# ---------------------------------------------------------------- utilities

def _require(args, *names: str) -> None:
    """Reject a command invocation missing flags it cannot run without."""
    missing = [f"--{name.replace('_', '-')}" for name in names
               if getattr(args, name) is None]
    if missing:
        raise UsageError(
            f"'{args.command}' needs {', '.join(missing)} (on the command "
            "line or in the --config file)")


def _model_config(args, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size, granularity=args.granularity,
        d_emb=args.d_emb, d_h=args.d_h, n_layers=args.n_layers,
        fusion=args.fusion, copy=args.copy, topk=args.topk,
        emo_weight=args.emo_weight, dropout=args.dropout)


def _train_config(args, vocab_size: int) -> TrainConfig:
    config = TrainConfig(
        model=_model_config(args, vocab_size), batch_size=args.batch_size,
        lr=args.lr, epochs=args.epochs, seed=args.seed)
    if args.full_scale:
        config = apply_full_scale(config)
    return config


def _search_config(args) -> SearchConfig:
    return SearchConfig(
        mode=_DECODE_MODES[args.decode], beam_size=args.beam_size,
        max_len=args.max_len, ngram_order=args.rbs_n, eta=args.rbs_eta)


def _vocab_path(args) -> str:
    if args.vocab is not None:
        return args.vocab
    base = args.checkpoint if hasattr(args, "checkpoint") else args.out
    return base + ".vocab"


def _load_model(args):
    loaded = load_checkpoint(args.checkpoint)
    vocab = Vocab.load(_vocab_path(args))
    loaded.require_vocab(vocab)
    return loaded, vocab


def _resolve_labels(spec: str, valid: tuple[str, ...]) -> list[int]:
    """Map 'all' or comma-separated label names to indices."""
    if spec.strip().lower() == "all":
        return list(range(len(valid)))
    lowered = [name.lower() for name in valid]
    indices = []
    for part in spec.split(","):
        name = part.strip().lower()
        if name not in lowered:
            raise DataError(
                f"unknown emotion label {part.strip()!r}; valid labels: "
                f"{', '.join(valid)}")
        indices.append(lowered.index(name))
    return indices


def _read_articles(path: str) -> list[list[str]]:
    articles = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if not line:
                continue
            articles.append([s.strip() for s in line.split("|") if s.strip()])
    if not articles:
        raise DataError(f"no articles found in {path}")
    return articles


def _generate_text(model, example, emotion_id, search_config,
                   vocab: Vocab) -> str:
    hyps = generate(model, example, emotion_id, search_config)
    ids = hyps[0].text_tokens(EOS_ID)
    return detokenize([vocab.decode(i) for i in ids])


# ----------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    _require(args, "out")
    records = synth_corpus(Rng(args.seed), args.n, args.granularity)
    save_corpus(records, args.out)
    print(f"wrote {len(records)} {args.granularity}-grained examples "
          f"to {args.out}")
    return 0


def cmd_train(args) -> int:
    _require(args, "corpus", "out")
    records = load_corpus(args.corpus)
    vocab = build_vocab(records)
    config = _train_config(args, len(vocab))
    print(f"{len(records)} examples, vocabulary {len(vocab)}, "
          f"{analytic_parameter_count(config.model)} parameters")

    def report(epoch):
        print(f"epoch {epoch.epoch}/{config.epochs}  "
              f"mle {epoch.mle:.4f}  emo {epoch.emo:.4f}  "
              f"total {epoch.total:.4f}")

    examples = encode_corpus(records, vocab)
    result = train(examples, config, log_path=args.log, on_epoch=report)
    vocab.save(_vocab_path(args))
    save_checkpoint(args.out, result.model, config, vocab.content_hash(),
                    step=result.step, optimizer=result.optimizer)
    print(f"saved checkpoint to {args.out}")
    return 0


def cmd_generate(args) -> int:
    _require(args, "checkpoint", "articles", "emotion")
    loaded, vocab = _load_model(args)
    model_config = loaded.train_config.model
    valid = labels_for(model_config.granularity)
    label_ids = _resolve_labels(args.emotion, valid)
    search_config = _search_config(args)
    for sentences in _read_articles(args.articles):
        record = make_record(
            sentences, "", EmotionCategory(model_config.granularity, 0))
        example = encode_record(record, vocab)
        for label_id in label_ids:
            emotion = None if model_config.fusion == "none" else label_id
            text = _generate_text(loaded.model, example, emotion,
                                  search_config, vocab)
            print(f"{valid[label_id]}\t{text}")
    return 0


def cmd_eval(args) -> int:
    _require(args, "checkpoint", "corpus")
    loaded, vocab = _load_model(args)
    model_config = loaded.train_config.model
    labels = labels_for(model_config.granularity)
    records = load_corpus(args.corpus)
    tagger_records = (load_corpus(args.tagger_corpus)
                      if args.tagger_corpus else records)
    tagger = train_tagger(
        [tokenize_char(r.comment) for r in tagger_records],
        [r.emotion.label for r in tagger_records], len(labels))

    search_config = _search_config(args)
    generated = []
    requested = []
    for i, record in enumerate(records):
        if args.requested == "round-robin":
            label_id = i % len(labels)
        else:
            label_id = record.emotion.label
        requested.append(label_id)
        example = encode_record(record, vocab)
        emotion = None if model_config.fusion == "none" else label_id
        generated.append(_generate_text(loaded.model, example, emotion,
                                        search_config, vocab))
    report = build_report(
        [tokenize_char(text) for text in generated],
        [tokenize_char(r.comment) for r in records],
        requested, tagger, list(labels))
    payload = report.to_json()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as handle:
            handle.write(payload + "\n")
    else:
        print(payload)
    if args.table:
        print(report.to_table())
    return 0


def cmd_gradcheck(args) -> int:
    results = run_suite(args.seed)
    print(format_results(results))
    return 0 if all(r.passed for r in results) else 1


# ---------------------------------------------------------------- ablations

@dataclass(frozen=True)
class AblationSpec:
    """A named delta over the base training and search configuration."""

    name: str
    model_overrides: tuple = ()
    search_overrides: tuple = ()


ABLATIONS = (
    AblationSpec("full"),
    AblationSpec("fusion-simple", (("fusion", "simple"),)),
    AblationSpec("fusion-none", (("fusion", "none"), ("emo_weight", 0.0))),
    AblationSpec("copy-off", (("copy", "off"),)),
    AblationSpec("plain-beam", (), (("mode", "beam"),)),
    AblationSpec("greedy", (), (("mode", "greedy"),)),
)


def resolve_ablations(names: str | None) -> list[AblationSpec]:
    by_name = {spec.name: spec for spec in ABLATIONS}
    if len(by_name) != len(ABLATIONS):
        raise ConfigError("ablation names must be unique")
    if names is None:
        return list(ABLATIONS)
    chosen = []
    for part in names.split(","):
        name = part.strip()
        if name not in by_name:
            raise UsageError(
                f"unknown ablation {name!r}; available: "
                f"{', '.join(by_name)}")
        chosen.append(by_name[name])
    return chosen


def run_ablation(spec: AblationSpec, corpus_path: str,
                 eval_path: str | None, train_dict: dict,
                 search_dict: dict) -> MetricReport:
    """Train one variant and evaluate it; used by both execution modes."""
    base = TrainConfig.from_dict(train_dict)
    config = replace(base, model=replace(base.model,
                                         **dict(spec.model_overrides)))
    search = SearchConfig(**{**search_dict, **dict(spec.search_overrides)})

    records = load_corpus(corpus_path)
    vocab = build_vocab(records)
    config = replace(config, model=replace(config.model,
                                           vocab_size=len(vocab)))
    result = train(encode_corpus(records, vocab), config)

    eval_records = load_corpus(eval_path) if eval_path else records
    labels = labels_for(config.model.granularity)
    tagger = train_tagger(
        [tokenize_char(r.comment) for r in records],
        [r.emotion.label for r in records], len(labels))
    generated = []
    requested = []
    for i, record in enumerate(eval_records):
        label_id = i % len(labels)
        requested.append(label_id)
        example = encode_record(record, vocab)
        emotion = None if config.model.fusion == "none" else label_id
        generated.append(_generate_text(result.model, example, emotion,
                                        search, vocab))
    return build_report(
        [tokenize_char(text) for text in generated],
        [tokenize_char(r.comment) for r in eval_records],
        requested, tagger, list(labels))


def _ablation_worker(payload) -> tuple[str, MetricReport]:
    spec, corpus_path, eval_path, train_dict, search_dict = payload
    return spec.name, run_ablation(spec, corpus_path, eval_path,
                                   train_dict, search_dict)


def ablation_table(reports: dict[str, MetricReport]) -> str:
    header = (f"{'variant':<15} {'BLEU':>7} {'ROUGE-L':>8} "
              f"{'D1':>7} {'D2':>7} {'D3':>7} {'Rep-1':>7} {'Rep-3':>7} "
              f"{'EmoAcc':>7}")
    group = (f"{'':<15} {'-- quality --':>16} "
             f"{'---------- diversity ----------':>39} {'emotion':>8}")
    lines = [group, header]
    for name, r in reports.items():
        lines.append(
            f"{name:<15} {r.bleu:>7.4f} {r.rouge_l:>8.4f} "
            f"{r.d1:>7.4f} {r.d2:>7.4f} {r.d3:>7.4f} "
            f"{r.rep.get(1, 0.0):>7.4f} {r.rep.get(3, 0.0):>7.4f} "
            f"{r.emotion_acc:>7.4f}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    _require(args, "corpus")
    specs = resolve_ablations(args.names)
    records = load_corpus(args.corpus)
    vocab = build_vocab(records)
    train_dict = _train_config(args, len(vocab)).to_dict()
    search_dict = {
        "mode": _DECODE_MODES[args.decode], "beam_size": args.beam_size,
        "max_len": args.max_len, "ngram_order": args.rbs_n,
        "eta": args.rbs_eta}
    payloads = [(spec, args.corpus, args.eval_corpus, train_dict,
                 search_dict) for spec in specs]
    reports: dict[str, MetricReport] = {}
    if args.parallel > 0:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for name, report in pool.map(_ablation_worker, payloads):
                reports[name] = report
    else:
        for payload in payloads:
            name, report = _ablation_worker(payload)
            print(f"finished {name}", file=sys.stderr)
            reports[name] = report
    print(ablation_table(reports))
    if args.out:
        blob = {name: json.loads(r.to_json()) for name, r in reports.items()}
        with open(args.out, "w", encoding="utf-8") as handle:
            json.dump(blob, handle, indent=2)
            handle.write("\n")
    return 0


# --------------------------------------------------------------- entry point

_KNOWN_ERRORS = (CheckpointError, ConfigError, CorpusFormatError, DataError,
                 DimensionError, TrainingError, UsageError, OSError)


def main(argv=None) -> int:
    parser, commands = build_parser()
    preview, _ = parser.parse_known_args(argv)
    try:
        if getattr(preview, "config", None):
            apply_config_defaults(commands, read_config_file(preview.config))
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 2
        return args.func(args)
    except _KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
