"""Corpus ingestion, vocabulary building and split-word assignment."""

import hashlib
import io
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataError

EOS, UNK, BOS = "<eos>", "<unk>", "<bos>"
EOS_ID, UNK_ID, BOS_ID = 0, 1, 2
RESERVED = (EOS, UNK, BOS)


class Vocabulary:
    """Bijective token <-> id map with reserved ids 0=<eos>, 1=<unk>, 2=<bos>."""

    def __init__(self, tokens=(), min_count=None):
        self.min_count = min_count
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok in self.stoi:
                raise DataError(f"duplicate vocabulary token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def token(self, idx):
        return self.itos[idx]

    def encode(self, tokens):
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids):
        return [self.itos[i] for i in ids]

    @property
    def words(self):
        return self.itos[len(RESERVED):]

    def to_text(self):
        lines = [f"#{tok[1:-1]} {i}" for i, tok in enumerate(RESERVED)]
        lines.extend(self.words)
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())

    @classmethod
    def from_text(cls, text):
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        expected = [f"#{tok[1:-1]} {i}" for i, tok in enumerate(RESERVED)]
        if lines[:3] != expected:
            raise DataError("vocabulary header must be '#eos 0', '#unk 1', '#bos 2'")
        return cls(lines[3:])

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read())


@dataclass(frozen=True)
class SplitSentence:
    """Token ids w_1..w_m with a 1-based split index s."""

    tokens: tuple
    split: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ContractViolation("empty sentence")
        if not 1 <= self.split <= len(self.tokens):
            raise ContractViolation(
                f"split {self.split} outside [1, {len(self.tokens)}]")

    @property
    def m(self):
        return len(self.tokens)

    @property
    def word(self):
        return self.tokens[self.split - 1]

    def backward_chain(self):
        """(w_s, w_{s-1}, ..., w_1): s tokens."""
        return self.tokens[self.split - 1::-1]

    def forward_chain(self):
        """(w_s, w_{s+1}, ..., w_m): m - s + 1 tokens."""
        return self.tokens[self.split - 1:]


@dataclass
class Record:
    """A sentence as loaded, with the annotated split index if one was given."""

    tokens: list
    split: int = None


@dataclass
class CorpusSplits:
    train: list
    validation: list
    test: list
    meta: dict = field(default_factory=dict)


def tokenize(line):
    return line.lower().split()


def detokenize(tokens):
    return " ".join(tokens)


def preprocess(lines, min_count=10, max_unk=3, line_filter=None):
    """Lowercase, replace rare tokens by <unk> and drop <unk>-heavy sentences.

    A token whose corpus frequency (counted after lowercasing) is
    ``<= min_count`` becomes ``<unk>``.  Sentences with more than
    ``max_unk`` unknowns are dropped.  Returns ``(Vocabulary, sentences)``
    where sentences are token lists after substitution.
    """
    raw = []
    for line in lines:
        if line_filter is not None and not line_filter(line):
            continue
        toks = tokenize(line)
        if toks:
            raw.append(toks)
    counts = Counter(t for toks in raw for t in toks)
    sentences = []
    for toks in raw:
        mapped = [t if counts[t] > min_count and t not in RESERVED else UNK for t in toks]
        if sum(t == UNK for t in mapped) > max_unk:
            continue
        sentences.append(mapped)
    kept = Counter(t for toks in sentences for t in toks if t != UNK)
    # frequency desc, then lexical, so identical input gives identical ids
    ordered = sorted(kept, key=lambda t: (-kept[t], t))
    return Vocabulary(ordered, min_count=min_count), sentences


def read_lines(path):
    try:
        with open(path, encoding="utf-8") as f:
            return f.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def parse_tsv(lines, source="<input>"):
    """Parse ``s<TAB>tok tok ...`` or bare-token lines into (split, tokens)."""
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if "\t" in line:
            head, _, rest = line.partition("\t")
            try:
                s = int(head)
            except ValueError:
                raise DataError(f"{source}:{lineno}: split index {head!r} is not an integer")
            toks = tokenize(rest)
            if not toks:
                raise DataError(f"{source}:{lineno}: no tokens after split index")
            if not 1 <= s <= len(toks):
                raise DataError(
                    f"{source}:{lineno}: split index {s} out of range for {len(toks)} tokens")
            records.append((s, toks))
        else:
            records.append((None, tokenize(line)))
    return records


def load_tsv(path):
    return parse_tsv(read_lines(path), source=str(path))


def encode_records(vocab, parsed):
    return [Record(vocab.encode(toks), s) for s, toks in parsed]


def assign_split(sentence, policy="random", rng=None, index=None):
    """Choose the split word of a sentence.

    ``policy`` is ``"random"`` (uniform over 1..m from ``rng``), ``"fixed"``
    (use ``index``) or ``"annotated"`` (``sentence`` is a Record carrying its
    own split).
    """
    if isinstance(sentence, Record):
        tokens, annotated = sentence.tokens, sentence.split
    else:
        tokens, annotated = sentence, None
    m = len(tokens)
    if m == 0:
        raise ContractViolation("cannot split an empty sentence")
    if policy == "random":
        if rng is None:
            raise ContractViolation("random split policy needs an rng")
        s = int(rng.integers(1, m + 1))
    elif policy == "fixed":
        if index is None or not 1 <= index <= m:
            raise ContractViolation(f"fixed split {index} outside [1, {m}]")
        s = index
    elif policy == "annotated":
        if annotated is None:
            raise ContractViolation("record carries no annotated split")
        s = annotated
    else:
        raise ContractViolation(f"unknown split policy {policy!r}")
    return SplitSentence(tokens, s)


def draw_splits(records, rng):
    """Annotated records keep their split; the rest get a fresh random one."""
    out = []
    for rec in records:
        if rec.split is not None:
            out.append(SplitSentence(rec.tokens, rec.split))
        else:
            out.append(assign_split(rec.tokens, "random", rng))
    return out


def make_splits(records, n_valid, n_test, seed=0, source=None, vocab=None):
    """Disjoint train/validation/test partition by a seeded permutation."""
    if n_valid + n_test > len(records):
        raise ContractViolation("not enough sentences for the requested splits")
    order = np.random.default_rng(seed).permutation(len(records))
    valid = [records[i] for i in order[:n_valid]]
    test = [records[i] for i in order[n_valid:n_valid + n_test]]
    train = [records[i] for i in order[n_valid + n_test:]]
    meta = {"source": source, "seed": seed, "vocab_hash": vocab.hash() if vocab else None}
    return CorpusSplits(train, valid, test, meta)


def sentences_to_text(sentences):
    buf = io.StringIO()
    for toks in sentences:
        buf.write(detokenize(toks) + "\n")
    return buf.getvalue()
