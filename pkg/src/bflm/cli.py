"""Command-line interface: ``bflm <command> [options]``.

Every tunable option can also come from an INI file (``--config``), one
section per command.  Precedence is flag > file > built-in default, and
``--dump-config`` prints the effective settings in the same format.
Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric fault.
"""

import argparse
import configparser
import difflib
import io
import logging
import math
import os
import re
import sys

import numpy as np

from .corpus import (UNK_ID, Vocabulary, encode_records, make_splits, parse_tsv,
                     preprocess, read_lines, sentences_to_text, tokenize)
from .decoding import DecodeConfig, Decoder
from .errors import BFLMError, ConfigError, DataError
from .evaluation import evaluate, position_curve_csv, table_text
from .models import ModelConfig, SplitSentence, build_model
from .synthetic import synthetic_corpus
from .training import TrainConfig, Trainer

log = logging.getLogger("bflm")


def _bool(value):
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _opt_int(value):
    return None if value in (None, "", "auto") else int(value)


# name -> (type, default, help); defaults are the standard training recipe
MODEL_OPTIONS = {
    "variant": (str, "seq", "seq, info_init, info_all, sep_bf, syn_bf or asyn_bf"),
    "hidden": (_opt_int, None, "hidden units per RNN (default 100; 200 for syn_bf)"),
    "embedding": (int, 50, "embedding size"),
}
TRAIN_OPTIONS = {
    "batch_size": (int, 50, "sentences per batch"),
    "lr0": (float, 0.002, "initial learning rate"),
    "lr_decay": (float, 0.97, "multiplicative learning-rate decay per epoch"),
    "rms_decay": (float, 0.99, "rmsprop moving-average decay"),
    "epsilon": (float, 1e-8, "rmsprop damping term"),
    "clip": (float, 5.0, "element-wise gradient clip"),
    "max_epochs": (int, 50, "epoch budget"),
    "patience": (int, 5, "early-stopping patience in epochs"),
    "seed": (int, 0, "seed for initialisation, splits and batching"),
    "embedding_lr_mode": (str, "tied", "tied or paper-literal"),
}
DECODE_OPTIONS = {
    "strategy": (str, "greedy", "greedy, sample or beam"),
    "temperature": (float, 1.0, "sampling temperature"),
    "width": (int, 5, "beam width"),
    "max_len": (int, 20, "maximum tokens per chain"),
    "n": (int, 1, "number of generations"),
    "seed": (int, 0, "sampling seed"),
    "ban_unk": (_bool, False, "never emit <unk>"),
    "strict": (_bool, False, "refuse out-of-vocabulary words"),
}
EVAL_OPTIONS = {
    "oracle": (_bool, False, "treat the split word as given (p(w_s)=1)"),
    "seed": (int, 0, "seed of the evaluation split draw"),
}
VOCAB_OPTIONS = {
    "min_count": (int, 10, "tokens seen at most this often become <unk>"),
    "max_unk": (int, 3, "drop sentences with more <unk> than this"),
}
COMMAND_OPTIONS = {
    "build-vocab": VOCAB_OPTIONS,
    "synth": {"n": (int, 6000, "sentences to generate"),
              "seed": (int, 0, "grammar seed")},
    "split": {"valid": (int, 1455, "validation sentences"),
              "test": (int, 1455, "test sentences"),
              "seed": (int, 0, "shuffle seed")},
    "train": {**MODEL_OPTIONS, **TRAIN_OPTIONS},
    "eval": EVAL_OPTIONS,
    "report": EVAL_OPTIONS,
    "generate": DECODE_OPTIONS,
    "score": {},
}

BOOL_FLAGS = {"oracle", "ban_unk", "strict"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_options(p, options):
    for name, (typ, default, helptext) in options.items():
        flag = "--" + name.replace("_", "-")
        if name in BOOL_FLAGS:
            p.add_argument(flag, dest=name, action="store_const", const=True, default=None,
                           help=helptext)
        else:
            p.add_argument(flag, dest=name, type=typ, default=None,
                           help=f"{helptext} (default: {default})")
    p.add_argument("--config", help="INI file with a [<command>] section")
    p.add_argument("--dump-config", action="store_true",
                   help="print the effective configuration and exit")


def read_config(path, command):
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc
    unknown_sections = set(parser.sections()) - set(COMMAND_OPTIONS)
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")
    if not parser.has_section(command):
        return {}
    options = COMMAND_OPTIONS[command]
    out = {}
    for key, raw in parser.items(command):
        if key not in options:
            raise ConfigError(f"unknown key {key!r} in [{command}]")
        try:
            out[key] = options[key][0](raw)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"[{command}] {key}: {exc}") from exc
    return out


def resolve(args, command):
    """Effective settings: flag > config file > default."""
    options = COMMAND_OPTIONS[command]
    from_file = read_config(args.config, command) if args.config else {}
    eff = {}
    for name, (_, default, _) in options.items():
        flag = getattr(args, name, None)
        eff[name] = flag if flag is not None else from_file.get(name, default)
    return eff


def dump_config(command, eff):
    parser = configparser.ConfigParser(interpolation=None)
    parser[command] = {k: ("auto" if v is None else str(v).lower() if isinstance(v, bool)
                           else repr(v) if isinstance(v, float) else str(v))
                       for k, v in eff.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _load_vocab(path):
    try:
        return Vocabulary.load(path)
    except OSError as exc:
        raise DataError(f"cannot read vocabulary {path}: {exc}") from exc


def _load_corpus(path, vocab):
    return encode_records(vocab, parse_tsv(read_lines(path), source=str(path)))


def _load_trainer(path, vocab, overrides=None):
    trainer = Trainer.load(path, overrides)
    if trainer.vocab_hash is not None and trainer.vocab_hash != vocab.hash():
        raise DataError("vocabulary does not match the one the checkpoint was trained with")
    if trainer.model.config.vocab != len(vocab):
        raise DataError("vocabulary size does not match the checkpoint")
    return trainer


# commands -----------------------------------------------------------------

def cmd_build_vocab(args, eff, out):
    lines = read_lines(args.corpus)
    vocab, sents = preprocess(lines, eff["min_count"], eff["max_unk"])
    vocab.save(args.out)
    if args.clean_out:
        with open(args.clean_out, "w", encoding="utf-8", newline="\n") as f:
            f.write(sentences_to_text(sents))
    n_in = sum(1 for line in lines if line.split())
    out.write(f"vocab_size={len(vocab)} sentences_in={n_in} kept={len(sents)} "
              f"dropped={n_in - len(sents)} min_count={eff['min_count']} "
              f"max_unk={eff['max_unk']}\n")


def cmd_synth(args, eff, out):
    lines = synthetic_corpus(eff["n"], eff["seed"])
    with open(args.out, "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(line + "\n" for line in lines))
    out.write(f"sentences={len(lines)} out={args.out}\n")


def cmd_split(args, eff, out):
    lines = [line for line in read_lines(args.corpus) if line.split()]
    splits = make_splits(lines, eff["valid"], eff["test"], seed=eff["seed"], source=args.corpus)
    os.makedirs(args.out_dir, exist_ok=True)
    for name in ("train", "validation", "test"):
        rows = getattr(splits, name)
        with open(os.path.join(args.out_dir, f"{name}.txt"), "w", encoding="utf-8",
                  newline="\n") as f:
            f.write("".join(line + "\n" for line in rows))
        out.write(f"split={name} sentences={len(rows)}\n")


def cmd_train(args, eff, out):
    vocab = _load_vocab(args.vocab)
    train = _load_corpus(args.train, vocab)
    valid = _load_corpus(args.valid, vocab) if args.valid else None
    os.makedirs(args.out, exist_ok=True)
    handler = logging.FileHandler(os.path.join(args.out, "train.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(message)s"))
    logging.getLogger("bflm").addHandler(handler)
    try:
        if args.resume:
            # the flag is the total epoch budget of the resumed run
            trainer = _load_trainer(args.resume, vocab, {"max_epochs": eff["max_epochs"]})
            remaining = eff["max_epochs"] - trainer.opt.epoch
        else:
            train_cfg = TrainConfig(**{k: eff[k] for k in TRAIN_OPTIONS})
            model = build_model(ModelConfig(variant=eff["variant"], vocab=len(vocab),
                                            hidden=eff["hidden"], embedding=eff["embedding"],
                                            seed=eff["seed"]))
            trainer = Trainer(model, train_cfg, vocab.hash())
            remaining = eff["max_epochs"]
        c = trainer.model.config
        log.info("event=start variant=%s hidden=%d embedding=%d vocab=%d params=%d "
                 "train_sentences=%d", c.variant, c.hidden, c.embedding, c.vocab,
                 trainer.model.store.num_params(), len(train))
        trainer.fit(train, valid, epochs=max(remaining, 0), out_dir=args.out)
    finally:
        logging.getLogger("bflm").removeHandler(handler)
        handler.close()
    last = trainer.history[-1] if trainer.history else None
    out.write(f"epochs={trainer.opt.epoch} "
              f"train_loss={'nan' if last is None else f'{last.train_loss:.6f}'} "
              f"best_valid_ppl={trainer.best_valid:.6f} out={args.out}\n")


def cmd_eval(args, eff, out):
    vocab = _load_vocab(args.vocab)
    model = _load_trainer(args.checkpoint, vocab).model
    corpus = _load_corpus(args.corpus, vocab)
    report = evaluate(model, corpus, oracle=eff["oracle"], seed=eff["seed"], vocab=vocab)
    if args.curve:
        position_curve_csv(report, args.curve)
    out.write(report.to_text())
    return report


def file_stem(name):
    """Row name made safe for a file name: "sep-B/F" -> "sep-B_F"."""
    return re.sub(r"[^A-Za-z0-9_.+-]+", "_", name).strip("_") or "model"


def cmd_report(args, eff, out):
    vocab = _load_vocab(args.vocab)
    corpus = _load_corpus(args.corpus, vocab)
    os.makedirs(args.out_dir, exist_ok=True)
    reports = []
    for spec in args.model:
        name, sep, path = spec.partition("=")
        if not sep:
            raise ConfigError(f"--model expects NAME=CHECKPOINT, got {spec!r}")
        model = _load_trainer(path, vocab).model
        rep = evaluate(model, corpus, oracle=eff["oracle"], seed=eff["seed"], vocab=vocab)
        reports.append((name, rep))
        stem = file_stem(name)
        with open(os.path.join(args.out_dir, f"report_{stem}.txt"), "w", encoding="utf-8") as f:
            f.write(rep.to_text())
        position_curve_csv(rep, os.path.join(args.out_dir, f"curve_{stem}.csv"))
    table = table_text(reports)
    with open(os.path.join(args.out_dir, "table.tsv"), "w", encoding="utf-8") as f:
        f.write(table)
    out.write(table)
    return reports


def _wanted_id(word, vocab, strict):
    toks = tokenize(word)
    if len(toks) != 1:
        raise DataError(f"--word must be a single token, got {word!r}")
    tok = toks[0]
    if tok in vocab:
        return vocab.id(tok)
    if strict:
        close = difflib.get_close_matches(tok, vocab.words, n=5)
        raise DataError(f"{tok!r} is not in the vocabulary; nearest: {', '.join(close) or '-'}")
    log.warning("event=oov word=%s mapped=<unk>", tok)
    return UNK_ID


def cmd_generate(args, eff, out):
    vocab = _load_vocab(args.vocab)
    model = _load_trainer(args.checkpoint, vocab).model
    wanted = _wanted_id(args.word, vocab, eff["strict"])
    n = eff["n"]
    cfg = DecodeConfig(strategy=eff["strategy"], temperature=eff["temperature"],
                       seed=eff["seed"], width=max(eff["width"], n) if eff["strategy"] == "beam"
                       else eff["width"], max_len=eff["max_len"],
                       banned={UNK_ID} if eff["ban_unk"] else ())
    dec = Decoder(model)
    if cfg.strategy == "beam":
        gens = dec.beam(wanted, cfg)[:n]
    else:
        rng = np.random.default_rng(cfg.seed)
        gens = [dec.generate(wanted, cfg, rng) for _ in range(n)]
    for g in gens:
        out.write(g.to_line(vocab) + "\n")
    rate = sum(g.contains for g in gens) / max(len(gens), 1)
    log.info("event=generate variant=%s n=%d containment=%.3f", model.variant, len(gens), rate)
    return gens


def cmd_score(args, eff, out):
    vocab = _load_vocab(args.vocab)
    model = _load_trainer(args.checkpoint, vocab).model
    toks = tokenize(" ".join(args.sentence))
    if not toks:
        raise DataError("empty sentence")
    unknown = [t for t in toks if t not in vocab]
    if unknown:
        log.warning("event=oov tokens=%s mapped=<unk>", ",".join(unknown))
    ids = vocab.encode(toks)
    if args.marginal:
        marginal = model.marginal_logprob(ids, prior=args.prior, cap=args.cap)
        totals = model.per_split_logprob(ids)
        out.write("split\tlogprob\n")
        for s, total in enumerate(totals, 1):
            out.write(f"{s}\t{total:.6f}\n")
        out.write(f"marginal\t{marginal:.6f}\n")
        return marginal
    if not 1 <= args.split <= len(ids):
        raise DataError(f"--split {args.split} outside [1, {len(ids)}]")
    total, terms = model.joint_logprob(SplitSentence(ids, args.split), oracle=args.oracle)
    out.write("chain\tt\ttoken\tkind\tlogprob\tlog2prob\n")
    for x in terms:
        out.write(f"{x.chain}\t{x.t}\t{vocab.token(x.token)}\t{x.kind}\t"
                  f"{x.logprob:.6f}\t{x.logprob / math.log(2):.6f}\n")
    out.write(f"total\t\t\t\t{total:.6f}\t{total / math.log(2):.6f}\n")
    return total


def build_parser():
    p = _Parser(prog="bflm", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("build-vocab", help="build a vocabulary from a corpus")
    q.add_argument("corpus")
    q.add_argument("--out", required=True, help="vocabulary file to write")
    q.add_argument("--clean-out", help="also write the <unk>-substituted corpus")
    _add_options(q, VOCAB_OPTIONS)

    q = sub.add_parser("synth", help="write a synthetic title-like corpus")
    q.add_argument("--out", required=True)
    _add_options(q, COMMAND_OPTIONS["synth"])

    q = sub.add_parser("split", help="partition a corpus into train/validation/test")
    q.add_argument("corpus")
    q.add_argument("--out-dir", required=True)
    _add_options(q, COMMAND_OPTIONS["split"])

    q = sub.add_parser("train", help="train a model")
    q.add_argument("--train", required=True, help="training corpus (text or TSV)")
    q.add_argument("--valid", help="validation corpus for early stopping")
    q.add_argument("--vocab", required=True)
    q.add_argument("--out", required=True, help="directory for checkpoints and train.log")
    q.add_argument("--resume", help="continue from this checkpoint")
    _add_options(q, COMMAND_OPTIONS["train"])

    q = sub.add_parser("eval", help="perplexity report for a checkpoint")
    q.add_argument("checkpoint")
    q.add_argument("--corpus", required=True)
    q.add_argument("--vocab", required=True)
    q.add_argument("--curve", help="write the per-position curve CSV here")
    _add_options(q, EVAL_OPTIONS)

    q = sub.add_parser("report", help="comparison table and curves for several checkpoints")
    q.add_argument("--model", action="append", required=True, help="NAME=CHECKPOINT")
    q.add_argument("--corpus", required=True)
    q.add_argument("--vocab", required=True)
    q.add_argument("--out-dir", required=True)
    _add_options(q, EVAL_OPTIONS)

    q = sub.add_parser("generate", help="generate sentences containing a word")
    q.add_argument("checkpoint")
    q.add_argument("--word", required=True)
    q.add_argument("--vocab", required=True)
    _add_options(q, DECODE_OPTIONS)

    q = sub.add_parser("score", help="log-probability breakdown of a sentence")
    q.add_argument("checkpoint")
    q.add_argument("sentence", nargs="+")
    q.add_argument("--vocab", required=True)
    mode = q.add_mutually_exclusive_group(required=True)
    mode.add_argument("--split", type=int, help="1-based split position")
    mode.add_argument("--marginal", action="store_true", help="sum over all split positions")
    q.add_argument("--oracle", action="store_true", help="drop the split-word term")
    q.add_argument("--prior", default="model", choices=("model", "uniform"))
    q.add_argument("--cap", type=int, default=50, help="longest sentence --marginal accepts")
    _add_options(q, {})
    return p


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "synth": cmd_synth,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "generate": cmd_generate,
    "score": cmd_score,
}


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code
    logging.basicConfig(format="%(message)s", stream=sys.stderr)
    try:
        logging.getLogger("bflm").setLevel(args.log_level.upper())
    except ValueError:
        print(f"bflm: error: unknown log level {args.log_level!r}", file=sys.stderr)
        return 1
    try:
        eff = resolve(args, args.command)
        if args.dump_config:
            out.write(dump_config(args.command, eff))
            return 0
        COMMANDS[args.command](args, eff, out)
    except BFLMError as exc:
        print(f"bflm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FloatingPointError as exc:
        print(f"bflm: numeric fault: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
