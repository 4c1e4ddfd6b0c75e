"""Command-line entry points: gen-synth, train, transfer, evaluate, ablate.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 I/O or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .checkpoint import CheckpointFormatError, load_checkpoint
from .corpus import CorpusError, StyledCorpus, SubstitutionOracle, detokenize, load_styled_corpus, tokenize, write_synth
from .training import LOG_HEADER, NumericalError, TrainConfig, config_dict, train

log = logging.getLogger("cyclestyle")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, line: int | None = None):
        self.key = key
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {message}")


@dataclass
class RunConfig:
    """TrainConfig fields plus corpus handling and evaluation resources."""

    train: TrainConfig = field(default_factory=TrainConfig)
    min_frequency: int = 1
    split_seed: int = 0
    lm_emb: int = 100
    lm_hidden: int = 200
    lm_lr: float = 0.0005
    lm_max_epochs: int = 10
    judge_epochs: int = 5
    judge_lr: float = 0.003
    workers: int = 1

    @staticmethod
    def keys() -> dict[str, object]:
        """Every accepted key with its default value."""
        out = {f.name: getattr(TrainConfig(), f.name) for f in fields(TrainConfig)}
        base = RunConfig()
        out.update({f.name: getattr(base, f.name) for f in fields(RunConfig) if f.name != "train"})
        return out

    def with_values(self, values: dict[str, object]) -> "RunConfig":
        train_keys = set(TrainConfig.field_names())
        own = {k: v for k, v in values.items() if k not in train_keys}
        tr = replace(self.train, **{k: v for k, v in values.items() if k in train_keys})
        return replace(self, train=tr, **own)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def convert(key: str, raw: str, default, line: int | None = None):
    """Parse ``raw`` to the type of ``default``."""
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() in _TRUE:
                return True
            if raw.lower() in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            vals = tuple(int(x) for x in raw.replace(",", " ").split())
            if not vals:
                raise ValueError(raw)
            return vals
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(default).__name__}", line) from None
    return raw


def parse_config(path) -> dict[str, object]:
    """Read ``key = value`` lines; ``#`` starts a comment. Unknown keys and bad values raise ConfigError."""
    known = RunConfig.keys()
    values: dict[str, object] = {}
    text = Path(path).read_text(encoding="utf-8")
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, "expected 'key = value'", n)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(key, "unknown key", n)
        values[key] = convert(key, raw, known[key], n)
    return values


def _validate(cfg: RunConfig) -> None:
    t = cfg.train
    positive = {"hidden": t.hidden, "emb": t.emb, "filters": t.filters, "batch_size": t.batch_size,
                "max_epochs": t.max_epochs, "max_gen_len": t.max_gen_len, "lm_emb": cfg.lm_emb,
                "lm_hidden": cfg.lm_hidden, "min_frequency": cfg.min_frequency, "workers": cfg.workers}
    for key, v in positive.items():
        if v < 1:
            raise ConfigError(key, f"must be >= 1, got {v}")
    for key in ("lr", "temperature", "temperature_floor"):
        if getattr(t, key) <= 0:
            raise ConfigError(key, "must be positive")
    if not 0 < t.temperature_decay <= 1:
        raise ConfigError("temperature_decay", "must be in (0, 1]")
    if t.patience < 1 or t.warmup_epochs < 0 or t.ae_warmup_epochs < 0:
        raise ConfigError("patience", "patience must be >= 1 and warm-up epochs >= 0")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value file; flags override it")
    for key, default in RunConfig.keys().items():
        if isinstance(default, bool):
            p.add_argument(_flag(key), dest=key, action="store_const", const="true", default=None)
        else:
            p.add_argument(_flag(key), dest=key, default=None, metavar=type(default).__name__.upper())


def run_config(args) -> RunConfig:
    values = parse_config(args.config) if getattr(args, "config", None) else {}
    known = RunConfig.keys()
    for key, default in known.items():
        raw = getattr(args, key, None)
        if raw is not None:
            values[key] = convert(key, raw, default)
    cfg = RunConfig().with_values(values)
    _validate(cfg)
    return cfg


def _load_corpus(data: Path, cfg: RunConfig) -> StyledCorpus:
    return load_styled_corpus(data / "style0.txt", data / "style1.txt", min_frequency=cfg.min_frequency,
                              seed=cfg.split_seed)


def _read_lines(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").splitlines()


def _write_lines(path: Path, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_gen_synth(args) -> int:
    out = Path(args.out)
    names = ("style0.txt", "style1.txt", "oracle.tsv", "manifest.json")
    existing = [n for n in names if (out / n).exists()]
    if existing and not args.force:
        log.error("%s already contains %s; pass --force to overwrite", out, ", ".join(existing))
        return EXIT_IO
    paths = write_synth(out, args.vocab, args.marked, args.per_style, args.seed)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = run_config(args)
    corpus = _load_corpus(Path(args.data), cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log")
    corpus.vocab.save(out.with_name(out.name + ".vocab"))
    out.with_name(out.name + ".config.json").write_text(
        json.dumps(config_dict(cfg.train), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(LOG_HEADER + "\n")

        def on_epoch(rec):
            fh.write(rec.line() + "\n")
            fh.flush()

        result = train(corpus, cfg.train, checkpoint_path=out, on_epoch=on_epoch)
    log.info("best epoch %d (dev %.4f); checkpoint %s", result.best_epoch, result.best_dev, out)
    return EXIT_OK


def cmd_transfer(args) -> int:
    from .models import transfer

    model, vocab = load_checkpoint(args.model)
    if args.input:
        lines = _read_lines(Path(args.input))
        sources = [vocab.encode(tokenize(line)) for line in lines]
    else:
        cfg = run_config(args)
        sources = _load_corpus(Path(args.data), cfg).split("test", 0)
        _write_lines(Path(args.output).with_name(Path(args.output).name + ".source"),
                     [detokenize(vocab.decode(s)) for s in sources])
    outputs = transfer(model, sources, 0, 1)
    _write_lines(Path(args.output), [detokenize(vocab.decode(s)) for s in outputs])
    return EXIT_OK


def _eval_kit(corpus: StyledCorpus, cfg: RunConfig, oracle_path, embeddings_path):
    from .evaluation import EmbeddingTable, LMConfig, build_eval_kit

    oracle = SubstitutionOracle.load(oracle_path, corpus.vocab) if oracle_path else None
    embeddings = EmbeddingTable.load(embeddings_path) if embeddings_path else None
    t = cfg.train
    lm_config = LMConfig(cfg.lm_emb, cfg.lm_hidden, cfg.lm_lr, t.batch_size, cfg.lm_max_epochs, seed=t.seed)
    judge_kwargs = dict(emb=t.emb, filters=t.filters, widths=t.widths, epochs=cfg.judge_epochs, lr=cfg.judge_lr,
                        batch_size=t.batch_size, seed=t.seed)
    return build_eval_kit(corpus, lm_config, oracle, oracle is not None, embeddings, judge_kwargs)


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate_transfer

    cfg = run_config(args)
    src_lines, out_lines = _read_lines(Path(args.source)), _read_lines(Path(args.transferred))
    if len(src_lines) != len(out_lines):
        raise CorpusError(f"{args.source} has {len(src_lines)} lines but {args.transferred} has {len(out_lines)}")
    corpus = _load_corpus(Path(args.data), cfg)
    kit = _eval_kit(corpus, cfg, args.oracle, args.embeddings)
    enc = corpus.vocab.encode
    report = evaluate_transfer([enc(tokenize(x)) for x in src_lines], [enc(tokenize(x)) for x in out_lines],
                               corpus.vocab, kit.judge, kit.lm, kit.embeddings)
    report.write(Path(args.report))
    print(report.summary())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import ablation_table, run_ablations

    cfg = run_config(args)
    corpus = _load_corpus(Path(args.data), cfg)
    kit = _eval_kit(corpus, cfg, args.oracle, args.embeddings)
    rows = run_ablations(corpus, cfg.train, kit, workers=cfg.workers)
    table = ablation_table(rows)
    if args.out:
        _write_lines(Path(args.out), table.splitlines())
    print(table, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cyclestyle", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic two-style corpus and its oracle")
    p.add_argument("--vocab", type=int, default=60)
    p.add_argument("--marked", type=int, default=8)
    p.add_argument("--per-style", type=int, default=2000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a transfer model")
    p.add_argument("--data", required=True, help="directory with style0.txt and style1.txt")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="epoch log path (default <out>.log)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", help="greedy transfer from style 0 to style 1")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="one sentence per line")
    src.add_argument("--data", help="corpus directory; transfers its style-0 test split")
    p.add_argument("--output", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("evaluate", help="accuracy, content preservation and perplexity")
    p.add_argument("--source", required=True)
    p.add_argument("--transferred", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--oracle", help="oracle.tsv: judge style with the exact rule oracle")
    p.add_argument("--embeddings", help="word vector file (default: vectors of the trained LM)")
    p.add_argument("--report", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score the four attention/back-transfer variants")
    p.add_argument("--data", required=True)
    p.add_argument("--oracle")
    p.add_argument("--embeddings")
    p.add_argument("--out", help="write the table here as well")
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, CorpusError, CheckpointFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
