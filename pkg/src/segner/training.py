"""Training loop, multi-seed orchestration, and entity-level evaluation.

Optimization follows the fixed protocol: Adam at lr 0.001, dropout 0.5,
at most 120 epochs, early stop after 20 consecutive epochs without a new
validation-loss minimum, best-validation parameters retained.  Every run
is fully determined by (seed, config, corpus, lexicon).
"""

from __future__ import annotations

import multiprocessing
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import Span, TagScheme, bioes_to_spans, make_batches, split_validation
from .encoder import EncoderConfig, ablation_rank
from .model import Model, build_table


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, value: float):
        self.epoch = epoch
        self.batch_index = batch_index
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch_index}")


@dataclass
class TrainConfig:
    lr: float = 0.001
    dropout: float = 0.5
    max_epochs: int = 120
    patience: int = 20
    batch_size: int = 32
    seeds: tuple = (1, 2, 3, 4, 5)
    val_fraction: float = 0.2
    ablation: str = "+AWC"
    precision: str = "single"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    split_seed: int = 9973  # validation draw; fixed across seeds by default
    resplit_per_seed: bool = False

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        ablation_rank(self.ablation)  # validates the name
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "dropout": self.dropout, "max_epochs": self.max_epochs,
            "patience": self.patience, "batch_size": self.batch_size,
            "seeds": list(self.seeds), "val_fraction": self.val_fraction,
            "ablation": self.ablation, "precision": self.precision,
            "adam_beta1": self.adam_beta1, "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps, "split_seed": self.split_seed,
            "resplit_per_seed": self.resplit_per_seed,
        }


class Adam:
    """Adam with bias correction; step order follows the param list."""

    def __init__(self, params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 / (1 - b1 ** self.t)
        c2 = 1.0 / (1 - b2 ** self.t)
        for i, p in enumerate(self.params):
            g = p.grad
            m, v = self.m[i], self.v[i]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.value.data -= self.lr * (m * c1) / (np.sqrt(v * c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# entity-level metrics
# ---------------------------------------------------------------------------


def _prf(tp: int, n_pred: int, n_gold: int):
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


@dataclass
class EvalReport:
    """Exact span+type match P/R/F, overall and per entity type.

    When produced by run_seeds, the per-seed F list and its mean and
    population std are filled in as well.
    """

    precision: float
    recall: float
    f1: float
    per_class: dict = field(default_factory=dict)
    n_gold: int = 0
    n_pred: int = 0
    per_seed_f: list = field(default_factory=list)
    mean_f: float | None = None
    std_f: float | None = None


def evaluate_spans(gold: list[list[Span]], pred: list[list[Span]]) -> EvalReport:
    tp = n_gold = n_pred = 0
    classes: dict[str, list[int]] = {}
    for g_spans, p_spans in zip(gold, pred):
        g_set, p_set = set(g_spans), set(p_spans)
        tp += len(g_set & p_set)
        n_gold += len(g_set)
        n_pred += len(p_set)
        labels = {s.label for s in g_set | p_set}
        for lab in labels:
            cnt = classes.setdefault(lab, [0, 0, 0])
            g_lab = {s for s in g_set if s.label == lab}
            p_lab = {s for s in p_set if s.label == lab}
            cnt[0] += len(g_lab & p_lab)
            cnt[1] += len(p_lab)
            cnt[2] += len(g_lab)
    p, r, f = _prf(tp, n_pred, n_gold)
    per_class = {
        lab: dict(zip(("precision", "recall", "f1"), _prf(c[0], c[1], c[2])))
        for lab, c in sorted(classes.items())
    }
    return EvalReport(p, r, f, per_class, n_gold, n_pred)


def evaluate(model: Model, sentences) -> EvalReport:
    """Decode and score a corpus (predicted spans always parse: the CRF
    never emits an illegal sequence)."""
    pred_tags = model.decode_sentences(sentences)
    gold = [s.gold_spans for s in sentences]
    pred = [bioes_to_spans(t) for t in pred_tags]
    return evaluate_spans(gold, pred)


@dataclass
class ErrorBreakdown:
    boundary_errors: int = 0
    type_errors: int = 0
    correct: int = 0

    def __add__(self, other):
        return ErrorBreakdown(
            self.boundary_errors + other.boundary_errors,
            self.type_errors + other.type_errors,
            self.correct + other.correct,
        )


def categorize_errors(gold_spans, pred_spans) -> ErrorBreakdown:
    """Classify each predicted span of one sentence.

    Exact matches count as correct.  A prediction whose boundaries match
    no gold span is a boundary error; a type discrepancy against the gold
    span with matching boundaries, or against the best-overlapping gold
    span otherwise, is a type error.  A prediction can incur both, and is
    then counted twice.
    """
    gold = [Span(*s) for s in gold_spans]
    out = ErrorBreakdown()
    for p in (Span(*s) for s in pred_spans):
        if p in gold:
            out.correct += 1
            continue
        same_bounds = [g for g in gold if (g.start, g.end) == (p.start, p.end)]
        if same_bounds:
            if same_bounds[0].label != p.label:
                out.type_errors += 1
            continue
        out.boundary_errors += 1
        overlaps = [
            (min(g.end, p.end) - max(g.start, p.start), g)
            for g in gold
            if min(g.end, p.end) > max(g.start, p.start)
        ]
        if overlaps:
            best = max(overlaps, key=lambda t: (t[0], -t[1].start))[1]
            if best.label != p.label:
                out.type_errors += 1
    return out


LENGTH_BUCKETS = ("1", "2", "3", ">=4")


def _bucket_of(span: Span) -> str:
    n = span.end - span.start
    return str(n) if n <= 3 else ">=4"


@dataclass
class LengthBuckets:
    """P/R/F per entity-length bucket; buckets with no gold and no
    predicted entities are absent rather than zero."""

    buckets: dict = field(default_factory=dict)


def bucket_by_length(gold: list[list[Span]], pred: list[list[Span]]) -> LengthBuckets:
    stats = {b: [0, 0, 0] for b in LENGTH_BUCKETS}  # tp, n_pred, n_gold
    for g_spans, p_spans in zip(gold, pred):
        g_set, p_set = set(g_spans), set(p_spans)
        for s in g_set & p_set:
            stats[_bucket_of(s)][0] += 1
        for s in p_set:
            stats[_bucket_of(s)][1] += 1
        for s in g_set:
            stats[_bucket_of(s)][2] += 1
    out = LengthBuckets()
    for b in LENGTH_BUCKETS:
        tp, n_pred, n_gold = stats[b]
        if n_pred == 0 and n_gold == 0:
            continue
        p, r, f = _prf(tp, n_pred, n_gold)
        out.buckets[b] = {"precision": p, "recall": r, "f1": f,
                          "n_gold": n_gold, "n_pred": n_pred}
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class EarlyStopper:
    """Strict new-minimum tracking: stop after ``patience`` consecutive
    epochs without a lower validation loss (absolute comparison)."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.since_best = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; True means the new value is a new minimum."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.since_best = 0
            return True
        self.since_best += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.since_best >= self.patience


@dataclass
class TrainResult:
    model: Model
    log_lines: list
    best_val_loss: float
    best_epoch: int
    val_indices: np.ndarray
    stopped_epoch: int


def train(sentences, lexicon, enc_config: EncoderConfig, config: TrainConfig,
          seed: int, table=None, quiet: bool = True) -> TrainResult:
    """Train one model on one seed; returns the best-validation model.

    The validation split is drawn from ``config.split_seed`` (or from the
    run seed when resplit_per_seed is set) so multi-seed runs compare on
    one fixed split by default.
    """
    split_seed = seed if config.resplit_per_seed else config.split_seed
    train_idx, val_idx = split_validation(len(sentences), config.val_fraction, split_seed)
    train_sents = [sentences[i] for i in train_idx]
    val_sents = [sentences[i] for i in val_idx]

    scheme = TagScheme.from_sentences(sentences)
    enc_config = EncoderConfig(**{**enc_config.to_dict(), "dropout": config.dropout})
    table = build_table(sentences, table, enc_config.d_e, seed)
    model = Model(table, scheme, enc_config, ablation=config.ablation,
                  seed=seed, precision=config.precision, lexicon=lexicon)
    opt = Adam(model.params, config.lr, config.adam_beta1, config.adam_beta2,
               config.adam_eps)
    drop_rng = np.random.default_rng([seed, 1])

    val_batches = make_batches(val_sents, lexicon, scheme, table,
                               config.batch_size, shuffle_seed=None)
    gold_val = [s.gold_spans for s in val_sents]

    stopper = EarlyStopper(config.patience)
    best_state = model.state_copy()
    log_lines = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        batches = make_batches(train_sents, lexicon, scheme, table,
                               config.batch_size, shuffle_seed=[seed, 2, epoch])
        total_loss = 0.0
        total_sents = 0
        for b_idx, batch in enumerate(batches):
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = model.loss_on_batch(batch, train=True, rng=drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteLoss(epoch, b_idx, value)
            tape.backward(loss)
            model.encoder.char_embed.grad[0] = 0.0  # pad row stays zero
            opt.step()
            total_loss += value * len(batch)
            total_sents += len(batch)
        train_loss = total_loss / total_sents

        val_loss = 0.0
        pred = []
        for batch in val_batches:
            nll, tag_ids = model.eval_batch(batch)
            val_loss += nll * len(batch)
            pred.extend(bioes_to_spans([model.scheme.id_to_tag[i] for i in ids])
                        for ids in tag_ids)
        val_loss /= len(val_sents)
        val_f = evaluate_spans(gold_val, pred).f1

        elapsed = time.perf_counter() - t0
        line = f"{epoch} {train_loss:.6f} {val_loss:.6f} {val_f:.4f} {elapsed:.2f}"
        log_lines.append(line)
        if not quiet:
            print(line)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = model.state_copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break

    model.load_state(best_state)
    return TrainResult(model, log_lines, float(best_val), best_epoch,
                       val_idx, epoch)


_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _train_one_seed(payload):
    sentences, lexicon, enc_config, config, seed, table = payload
    return train(sentences, lexicon, enc_config, config, seed, table=table)


def run_seeds(train_sentences, test_sentences, lexicon,
              enc_config: EncoderConfig, config: TrainConfig,
              table=None, quiet: bool = True, n_jobs: int = 1):
    """Train once per seed and aggregate test F (mean and population std).

    Seeds are independent parameter universes, so with ``n_jobs > 1`` they
    run as parallel worker processes (single-threaded BLAS each, for
    reproducibility); results are joined in seed order either way.
    """
    if not config.seeds:
        raise ValueError("need at least one seed")
    n_jobs = min(n_jobs, len(config.seeds))
    if n_jobs > 1:
        payloads = [(train_sentences, lexicon, enc_config, config, seed, table)
                    for seed in config.seeds]
        saved = {k: os.environ.get(k) for k in _THREAD_ENV}
        os.environ.update({k: "1" for k in _THREAD_ENV})
        try:
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=n_jobs, mp_context=ctx) as pool:
                results = list(pool.map(_train_one_seed, payloads))
        finally:
            for k, v in saved.items():
                if v is None:
                    os.environ.pop(k, None)
                else:
                    os.environ[k] = v
    else:
        results = [train(train_sentences, lexicon, enc_config, config, seed,
                         table=table, quiet=quiet)
                   for seed in config.seeds]
    reports = [evaluate(res.model, test_sentences) for res in results]
    fs = [r.f1 for r in reports]
    agg = EvalReport(
        precision=float(np.mean([r.precision for r in reports])),
        recall=float(np.mean([r.recall for r in reports])),
        f1=float(np.mean(fs)),
        per_class=reports[0].per_class if len(reports) == 1 else {},
        n_gold=reports[0].n_gold,
        n_pred=int(np.mean([r.n_pred for r in reports])),
        per_seed_f=[float(f) for f in fs],
        mean_f=float(np.mean(fs)),
        std_f=float(np.std(fs)),  # population std over the seed runs
    )
    return agg, results, reports


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------


def report_to_dict(report: EvalReport, breakdown: ErrorBreakdown | None = None,
                   buckets: LengthBuckets | None = None) -> dict:
    """Stable-keyed nested dict for the YAML report files."""
    out = {
        "overall": {
            "precision": report.precision,
            "recall": report.recall,
            "f1": report.f1,
            "n_gold": report.n_gold,
            "n_pred": report.n_pred,
        },
        "per_class": report.per_class,
    }
    if report.mean_f is not None:
        out["seeds"] = {
            "per_seed_f": report.per_seed_f,
            "mean_f": report.mean_f,
            "std_f": report.std_f,
        }
    if breakdown is not None:
        out["errors"] = {
            "boundary": breakdown.boundary_errors,
            "type": breakdown.type_errors,
            "correct": breakdown.correct,
        }
    if buckets is not None:
        out["length_buckets"] = buckets.buckets
    return out
