"""Command-line entry point.

Subcommands: scan, train, predict, eval, gradcheck, inspect.  Exit codes:
0 success, 1 usage error, 2 data error, 3 failed gradient check.

Options may come from a YAML config file (``--config``); explicit flags
override file values.  The file has nested sections::

    encoder: {d_e: 100, n_filters: 100, dropout: 0.5}
    training: {lr: 0.001, ablation: "+AWC", seeds: [1, 2, 3, 4, 5]}
    paths: {corpus: train.conll, test_corpus: test.conll, lexicon: words.txt}
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import autodiff as ad
from .corpus import (CorpusError, EmbeddingTable, Sentence, TagScheme,
                     bioes_to_spans, load_embeddings, make_batches, parse_conll,
                     write_conll, write_split_manifest, split_validation)
from .encoder import EncoderConfig
from .lexicon import Lexicon, LexiconError, candidate_positions, scan_candidates
from .model import Model, build_table
from .training import (ErrorBreakdown, TrainConfig, bucket_by_length,
                       categorize_errors, evaluate, report_to_dict, run_seeds,
                       train)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_GRADCHECK = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


@dataclass
class RunConfig:
    """Everything a run needs: model dims, training protocol, file paths."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "training": self.training.to_dict(),
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = data or {}
        enc = EncoderConfig(**(data.get("encoder") or {}))
        trc = data.get("training") or {}
        if "seeds" in trc:
            trc["seeds"] = tuple(trc["seeds"])
        return cls(enc, TrainConfig(**trc), dict(data.get("paths") or {}))

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, allow_unicode=True, sort_keys=False)


def _require(path, what: str) -> str:
    if not path:
        raise UsageError(f"missing required {what}")
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    return path


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_file(_require(args.config, "config file")) \
        if getattr(args, "config", None) else RunConfig()
    for key in ("corpus", "test_corpus", "lexicon", "embeddings", "output_dir",
                "checkpoint"):
        val = getattr(args, key.replace("-", "_"), None)
        if val:
            cfg.paths[key] = val
    return cfg


def _fmt_matrix(mat: np.ndarray, row_labels, col_labels) -> str:
    width = 8
    head = " " * 4 + "".join(f"{c:>{width}}" for c in col_labels)
    lines = [head]
    for lab, row in zip(row_labels, mat):
        cells = "".join(f"{v:>{width}.4f}" for v in row)
        lines.append(f"{lab:<4}{cells}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_scan(args) -> int:
    lex = Lexicon.from_file(_require(args.lexicon, "lexicon file"))
    text = args.text
    if not text:
        raise UsageError("scan needs --text")
    print(f"text: {text}")
    print("candidate words:")
    for cand in scan_candidates(text, lex):
        print(f"  [{cand.start},{cand.end}) {cand.surface}")
    mat = candidate_positions(text, lex)
    print("candidacy matrix (B I E S):")
    for ch, row in zip(text, mat):
        bits = " ".join(str(int(v)) for v in row)
        print(f"  {ch} {bits}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    paths = cfg.paths
    corpus_path = _require(paths.get("corpus"), "training corpus")
    sentences = parse_conll(corpus_path)
    lex = Lexicon.from_file(_require(paths.get("lexicon"), "lexicon file"))
    test_sentences = None
    if paths.get("test_corpus"):
        test_sentences = parse_conll(_require(paths["test_corpus"], "test corpus"))
    table = None
    if paths.get("embeddings"):
        table = load_embeddings(_require(paths["embeddings"], "embeddings file"),
                                cfg.encoder.d_e)
    out_dir = paths.get("output_dir") or "."
    os.makedirs(out_dir, exist_ok=True)

    split_seed = cfg.training.split_seed
    _, val_idx = split_validation(len(sentences), cfg.training.val_fraction, split_seed)
    write_split_manifest(corpus_path + ".val_split.txt", val_idx)

    if test_sentences is not None:
        agg, results, _ = run_seeds(sentences, test_sentences, lex, cfg.encoder,
                                    cfg.training, table=table, quiet=args.quiet)
    else:
        results = [train(sentences, lex, cfg.encoder, cfg.training, seed,
                         table=table, quiet=args.quiet)
                   for seed in cfg.training.seeds]
        agg = None

    for seed, res in zip(cfg.training.seeds, results):
        ckpt = os.path.join(out_dir, f"model_seed{seed}.ckpt")
        res.model.save(ckpt)
        with open(os.path.join(out_dir, f"train_seed{seed}.log"), "w",
                  encoding="utf-8") as fh:
            fh.write("# epoch train_loss val_loss val_F elapsed_s\n")
            fh.write("\n".join(res.log_lines) + "\n")
        print(f"seed {seed}: best val loss {res.best_val_loss:.6f} "
              f"at epoch {res.best_epoch}; saved {ckpt}")

    if agg is not None:
        report = report_to_dict(agg)
        report_path = os.path.join(out_dir, "report.yaml")
        with open(report_path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(report, fh, allow_unicode=True, sort_keys=False)
        print(f"test F over seeds: mean {agg.mean_f:.4f} std {agg.std_f:.4f} "
              f"-> {report_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = Model.load(_require(args.checkpoint, "checkpoint"))
    sentences = parse_conll(_require(args.input, "input corpus"))
    pred_tags = model.decode_sentences(sentences)
    write_conll(args.output, sentences, predictions=pred_tags)
    with open(args.output, "a", encoding="utf-8") as fh:
        for k, tags in enumerate(pred_tags):
            for span in bioes_to_spans(tags):
                surface = sentences[k].chars[span.start : span.end]
                fh.write(f"# sentence {k} entity [{span.start},{span.end}) "
                         f"{span.label} {surface}\n")
    print(f"wrote {args.output}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = Model.load(_require(args.checkpoint, "checkpoint"))
    sentences = parse_conll(_require(args.corpus, "eval corpus"))
    report = evaluate(model, sentences)
    pred = [bioes_to_spans(t) for t in model.decode_sentences(sentences)]
    gold = [s.gold_spans for s in sentences]
    breakdown = sum((categorize_errors(g, p) for g, p in zip(gold, pred)),
                    start=ErrorBreakdown())
    buckets = bucket_by_length(gold, pred)
    doc = report_to_dict(report, breakdown, buckets)
    text = yaml.safe_dump(doc, allow_unicode=True, sort_keys=False)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"wrote {args.output}")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args) if args.config else RunConfig()
    tol = 1e-4
    worst = 0.0
    rng = np.random.default_rng(args.seed)
    for trial in range(args.n):
        enc_dict = cfg.encoder.to_dict()
        enc_dict["dropout"] = 0.0  # finite differences need a deterministic loss
        enc_cfg = EncoderConfig(**enc_dict)
        chars = [chr(ord("a") + i) for i in range(8)]
        table = EmbeddingTable.random(chars, enc_cfg.d_e, seed=int(rng.integers(2**31)))
        scheme = TagScheme(["PER", "LOC", "ORG"])
        words = ["ab", "bcd", "cd", "f", "abc", "gh"]
        model = Model(table, scheme, enc_cfg, ablation="+AWC",
                      seed=int(rng.integers(2**31)), precision="double",
                      lexicon=Lexicon(words))
        # nudge biases so no relu pre-activation sits on its kink
        for p in model.params:
            if p.name.endswith("_b"):
                p.data = p.data + 1e-3
        # plant lexicon words so the candidacy path carries real gradient
        text = "ab" + "".join(rng.choice(chars, size=2)) + "cd"
        spans = [(0, 2, "PER"), (3, 6, "LOC")]
        sent = Sentence(text, spans)
        batch = make_batches([sent], model.lexicon, scheme, table, 1, None)[0]
        err = ad.finite_diff_check(lambda: model.loss_on_batch(batch),
                                   model.params, max_coords_per_param=8,
                                   rng=np.random.default_rng(trial))
        worst = max(worst, err)
        print(f"instance {trial}: max relative error {err:.3e}")
    print(f"max relative error over {args.n} instances: {worst:.3e} "
          f"({'OK' if worst < tol else 'FAIL'}, tolerance {tol:g})")
    return EXIT_OK if worst < tol else EXIT_GRADCHECK


def cmd_inspect(args) -> int:
    model = Model.load(_require(args.checkpoint, "checkpoint"))
    if args.lexicon:
        model.lexicon = Lexicon.from_file(_require(args.lexicon, "lexicon file"))
    text = args.text
    if not text:
        raise UsageError("inspect needs --text")
    trace = model.trace(text)
    chars = list(text)
    print("position attention v (rows sum to 1):")
    print(_fmt_matrix(trace.v, chars, ["B", "I", "E", "S"]))
    print()
    print("subword fusion alpha (rows sum to 1):")
    cols = ["<3", "<2", "<1", "self", ">1", ">2", ">3"]
    print(_fmt_matrix(trace.alpha, chars, cols))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="segner", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scan", help="show candidate words and the candidacy matrix")
    p.add_argument("--lexicon", required=True)
    p.add_argument("--text", required=True)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("train", help="train over the configured seeds")
    p.add_argument("--config")
    p.add_argument("--corpus")
    p.add_argument("--test-corpus")
    p.add_argument("--lexicon")
    p.add_argument("--embeddings")
    p.add_argument("--output-dir")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="tag a corpus with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="entity-level evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check on tiny instances")
    p.add_argument("--config")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect", help="dump attention matrices for a sentence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--lexicon")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, LexiconError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
