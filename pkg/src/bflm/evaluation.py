"""Perplexity accounting: overall, first-word, subsequent and per-position.

Terms are bucketed by their position label ``t``.  The first-word bucket is
``t = 0``: ``w_1`` for the sequential models, the split word for the B/F
models.  ``<eos>`` and pad terms never enter a bucket.  In oracle mode the split
word keeps its place in the counts but contributes ``log 1 = 0``.
"""

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .corpus import Record, SplitSentence, draw_splits
from .errors import ContractViolation
from .models import SPLIT

LN2 = math.log(2.0)


def perplexity(log2probs):
    """``2 ** -mean(log2 p)``; any ``-inf`` entry gives ``inf``."""
    vals = np.asarray(list(log2probs), dtype=np.float64)
    if vals.size == 0:
        raise ContractViolation("perplexity of an empty list")
    if np.any(np.isneginf(vals)):
        return float("inf")
    return float(2.0 ** (-vals.mean()))


@dataclass
class Bucket:
    nll2: float = 0.0  # sum of -log2 p
    count: int = 0

    def add(self, logprob):
        self.nll2 -= logprob / LN2
        self.count += 1

    def merge(self, other):
        self.nll2 += other.nll2
        self.count += other.count

    @property
    def ppl(self):
        if self.count == 0:
            return float("nan")
        return float(2.0 ** (self.nll2 / self.count))


@dataclass
class EvalReport:
    variant: str
    oracle: bool
    overall: Bucket = field(default_factory=Bucket)
    first: Bucket = field(default_factory=Bucket)
    subsequent: Bucket = field(default_factory=Bucket)
    oracle_overall: Bucket = field(default_factory=Bucket)
    positions: dict = field(default_factory=lambda: defaultdict(Bucket))
    excluded_eos: int = 0
    sentences: int = 0

    @property
    def overall_ppl(self):
        return self.overall.ppl

    @property
    def first_word_ppl(self):
        return self.first.ppl

    @property
    def subsequent_ppl(self):
        return self.subsequent.ppl

    @property
    def oracle_overall_ppl(self):
        return self.oracle_overall.ppl

    @property
    def position_curve(self):
        """[(t, mean -log2 p, count)] for non-empty positions, t ascending."""
        return [(t, b.nll2 / b.count, b.count)
                for t, b in sorted(self.positions.items()) if b.count]

    def add_terms(self, terms):
        self.sentences += 1
        for term in terms:
            if not term.is_word:
                self.excluded_eos += 1
                continue
            # under the oracle the split word is still a counted word, with p = 1
            given = 0.0 if term.kind == SPLIT else term.logprob
            lp = given if self.oracle else term.logprob
            self.overall.add(lp)
            (self.first if term.t == 0 else self.subsequent).add(lp)
            self.positions[term.t].add(lp)
            self.oracle_overall.add(given)

    def to_dict(self):
        return {
            "variant": self.variant,
            "oracle": self.oracle,
            "sentences": self.sentences,
            "overall_ppl": self.overall_ppl,
            "first_word_ppl": self.first_word_ppl,
            "subsequent_ppl": self.subsequent_ppl,
            "oracle_overall_ppl": self.oracle_overall_ppl,
            "words": self.overall.count,
            "first_words": self.first.count,
            "subsequent_words": self.subsequent.count,
            "excluded_eos": self.excluded_eos,
        }

    def to_text(self):
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, float):
                value = f"{value:.6f}"
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"


def fixed_splits(records, seed):
    """Split assignment for an evaluation run: one seeded draw, reused."""
    rng = np.random.default_rng(seed)
    recs = [r if isinstance(r, Record) else Record(list(r)) for r in records]
    return draw_splits(recs, rng)


def evaluate(model, corpus, oracle=False, seed=0, batch_size=100, vocab=None):
    """Score ``corpus`` term by term and fill an EvalReport.

    ``corpus`` holds SplitSentences, Records, or plain id lists; anything
    without a split is assigned one by a seeded draw (identical per call).
    """
    if vocab is not None and len(vocab) != model.config.vocab:
        raise ContractViolation(
            f"vocabulary size {len(vocab)} does not match model vocab {model.config.vocab}")
    if corpus and isinstance(corpus[0], SplitSentence):
        sents = list(corpus)
    else:
        sents = fixed_splits(corpus, seed)
    report = EvalReport(model.variant, oracle)
    for i in range(0, len(sents), batch_size):
        for terms in model.score(sents[i:i + batch_size]):
            report.add_terms(terms)
    return report


def position_curve_text(report):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "ppl", "count"])
    for t, nll2, count in report.position_curve:
        writer.writerow([t, f"{2.0 ** nll2:.6f}", count])
    return buf.getvalue()


def position_curve_csv(report, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(position_curve_text(report))


TABLE_COLUMNS = ("method", "overall_ppl", "first_word_ppl", "subsequent_ppl")


def table_rows(reports):
    """Rows shaped like the usual comparison table: each model, then its
    oracle row for B/F variants (first/subsequent left as ``--``)."""
    rows = []
    for name, rep in reports:
        rows.append((name, rep.overall_ppl, rep.first_word_ppl, rep.subsequent_ppl))
        if rep.variant.endswith("_bf"):
            rows.append((f"{name} (oracle)", rep.oracle_overall_ppl, None, None))
    return rows


def table_text(reports):
    buf = io.StringIO()
    buf.write("\t".join(TABLE_COLUMNS) + "\n")
    for row in table_rows(reports):
        cells = [row[0]] + ["--" if v is None else f"{v:.1f}" for v in row[1:]]
        buf.write("\t".join(cells) + "\n")
    return buf.getvalue()
