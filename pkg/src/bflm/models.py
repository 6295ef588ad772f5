"""Sequential, conditioned and backward/forward GRU language models.

Every variant turns a :class:`~bflm.corpus.SplitSentence` into one
teacher-forced :class:`~bflm.gru.Program` per network it owns.  Each scored
target carries a :class:`Term` label, so the same run serves training,
scoring, perplexity buckets and the step-count checks.

Positions follow the distance from the anchor word: in the sequential
models ``w_i`` sits at ``t = i - 1``; in the B/F models ``w_s`` sits at
``t = 0`` and ``w_{s-k}``/``w_{s+k}`` at ``t = k``.
"""

import math
from dataclasses import dataclass, fields

import numpy as np

from .corpus import BOS_ID, EOS_ID, SplitSentence
from .errors import ContractViolation
from .gru import GruNet, pack_programs
from .nn import ParamStore, softmax

VARIANTS = ("seq", "info_init", "info_all", "sep_bf", "syn_bf", "asyn_bf")
BF_VARIANTS = ("sep_bf", "syn_bf", "asyn_bf")

SPLIT, WORD, END, PAD = "split", "word", "eos", "pad"


@dataclass
class ModelConfig:
    variant: str = "seq"
    vocab: int = 0
    hidden: int = None
    embedding: int = 50
    seed: int = 0
    init_scale: float = 0.08

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.hidden is None:
            self.hidden = 200 if self.variant == "syn_bf" else 100
        for name in ("vocab", "hidden", "embedding"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class Term:
    """One scored conditional: ``log p(token | context)`` in natural log."""

    chain: str
    t: int
    token: int
    kind: str
    logprob: float = float("nan")

    @property
    def is_word(self):
        return self.kind in (SPLIT, WORD)


def _step(inputs, labels, aug=-1):
    return inputs, aug, None, labels


class LanguageModel:
    """Base class: owns a ParamStore and one or more GruNets."""

    variant = None
    bidirectional = False

    def __init__(self, config):
        if config.variant != self.variant:
            raise ContractViolation(f"config variant {config.variant} for {type(self).__name__}")
        self.config = config
        self.store = ParamStore()
        self.rng = np.random.default_rng(config.seed)
        self.nets = {}
        self._build()

    def _net(self, name, **kw):
        c = self.config
        net = GruNet(self.store, f"{name}." if name else "", c.vocab, c.embedding, c.hidden,
                     rng=self.rng, init_scale=c.init_scale, **kw)
        self.nets[name] = net
        return net

    # subclasses: _build() and _rows(sentence) -> {net: [step, ...]}
    def _rows(self, sentence):
        raise NotImplementedError

    def _check(self, sentence):
        if not isinstance(sentence, SplitSentence):
            raise ContractViolation("expected a SplitSentence")
        V = self.config.vocab
        if any(not 0 <= t < V for t in sentence.tokens):
            raise ContractViolation("token id outside the model vocabulary")

    def _programs(self, sentences):
        per_net = {name: [] for name in self.nets}
        labels = {name: [] for name in self.nets}
        counts = np.zeros(len(sentences))
        for b, sent in enumerate(sentences):
            self._check(sent)
            rows = self._rows(sent)
            for name in self.nets:
                steps = rows[name]
                per_net[name].append(steps)
                labels[name].append([lab for _, _, _, lab in steps])
                counts[b] += sum(lab is not None for _, _, _, labs in steps for lab in labs)
        weights = 1.0 / (counts * len(sentences))
        progs = {}
        for name, net in self.nets.items():
            rows = []
            for b, steps in enumerate(per_net[name]):
                rows.append([(inp, aug, [lab.token if lab else -1 for lab in labs],
                              [weights[b] if lab else 0.0 for lab in labs])
                             for inp, aug, _, labs in steps])
            progs[name] = pack_programs(rows, net.n_slots, len(net.heads), net.augment)
        return progs, labels

    def _collect(self, sentences, logps, labels):
        out = [[] for _ in sentences]
        for name in self.nets:
            for b in range(len(sentences)):
                for t, labs in enumerate(labels[name][b]):
                    for k, lab in enumerate(labs):
                        if lab is not None:
                            out[b].append(Term(lab.chain, lab.t, lab.token, lab.kind,
                                               float(logps[name][t, b, k])))
        for terms in out:
            terms.sort(key=lambda x: (x.t, x.chain != "bw"))
        return out

    def loss_and_grad(self, sentences):
        """Mean-per-token loss averaged over the batch; grads left in store."""
        progs, _ = self._programs(sentences)
        self.store.zero_grad()
        loss = 0.0
        for name, net in self.nets.items():
            prog = progs[name]
            logp, cache = net.run(prog)
            loss -= float(np.sum(prog.weights * np.nan_to_num(logp)))
            net.backward(prog, cache)
        return loss

    def loss(self, sentences):
        """Same value as :meth:`loss_and_grad`, kept in the parameters' dtype."""
        progs, _ = self._programs(sentences)
        loss = 0.0
        for name, net in self.nets.items():
            logp, _ = net.run(progs[name], keep_cache=False)
            loss = loss - np.sum(progs[name].weights * np.nan_to_num(logp))
        return loss

    def score(self, sentences):
        """Per-sentence lists of labelled Terms from one teacher-forced run."""
        if not sentences:
            return []
        progs, labels = self._programs(sentences)
        logps = {name: net.run(progs[name], keep_cache=False)[0]
                 for name, net in self.nets.items()}
        return self._collect(sentences, logps, labels)

    def joint_logprob(self, sentence, oracle=False):
        """Log-probability of a sentence under its split, with term breakdown.

        ``oracle=True`` drops the split-word term (``p(w_s) = 1``).  A
        zero-probability term makes the total ``-inf``.
        """
        terms = self.score([sentence])[0]
        if oracle:
            terms = [x for x in terms if x.kind != SPLIT]
        return float(sum(x.logprob for x in terms)), terms

    def marginal_logprob(self, tokens, prior="model", cap=50):
        """log sum_s p(sentence, split s), by log-sum-exp over all splits."""
        tokens = tuple(tokens)
        m = len(tokens)
        if m == 0:
            raise ContractViolation("empty sentence")
        if m > cap:
            raise ContractViolation(f"sentence length {m} exceeds marginal cap {cap}")
        if prior not in ("model", "uniform"):
            raise ContractViolation(f"unknown prior {prior!r}")
        if self.variant == "seq":
            return self.joint_logprob(SplitSentence(tokens, 1))[0]
        if not self.bidirectional:
            prior = "uniform"
        sents = [SplitSentence(tokens, s) for s in range(1, m + 1)]
        totals = []
        for terms in self.score(sents):
            if prior == "uniform":
                totals.append(sum(x.logprob for x in terms if x.kind != SPLIT) - math.log(m))
            else:
                totals.append(sum(x.logprob for x in terms))
        return logsumexp(totals)

    def per_split_logprob(self, tokens):
        sents = [SplitSentence(tuple(tokens), s) for s in range(1, len(tokens) + 1)]
        return [sum(x.logprob for x in terms) for terms in self.score(sents)]


def logsumexp(values):
    values = np.asarray(values, dtype=np.float64)
    top = values.max()
    if not np.isfinite(top):
        return float(top)
    return float(top + math.log(np.exp(values - top).sum()))


def _seq_rows(sent, wanted_aug=None):
    """Left-to-right steps; wanted_aug(t) gives the augmentation id per step."""
    toks = sent.tokens
    steps = []
    prev = BOS_ID
    for i, tok in enumerate(toks + (EOS_ID,)):
        kind = END if i == len(toks) else WORD
        aug = -1 if wanted_aug is None else wanted_aug(i)
        steps.append(_step((prev,), (Term("seq", i, tok, kind),), aug))
        prev = tok
    return steps


class SequentialLM(LanguageModel):
    """Plain left-to-right GRU language model."""

    variant = "seq"

    def _build(self):
        self.net = self._net("seq")

    def _rows(self, sent):
        return {"seq": _seq_rows(sent)}

    def step(self, prev_token, h=None, wanted=None, t=0):
        """(distribution over V, new state) after feeding ``prev_token``."""
        h = self.net.zero_state() if h is None else h
        aug = self._aug(wanted, t)
        h, logits = self.net.step([prev_token], h, None if aug is None else [aug])
        return softmax(logits["fw"][0]), h

    def _aug(self, wanted, t):
        return None


class InfoInitLM(SequentialLM):
    """Sequential LM whose first step also sees the wanted word's embedding."""

    variant = "info_init"

    def _build(self):
        self.net = self._net("seq", augment=True)

    def _aug(self, wanted, t):
        return wanted if t == 0 else -1

    def _rows(self, sent):
        w = sent.word
        return {"seq": _seq_rows(sent, lambda i: self._aug(w, i))}


class InfoAllLM(InfoInitLM):
    """Sequential LM fed the wanted word's embedding at every step."""

    variant = "info_all"

    def _aug(self, wanted, t):
        return wanted


def _bw_rows(sent, predict_split):
    """Backward half-LM: <bos> (-> w_s), w_s -> w_{s-1}, ..., w_1 -> <eos>."""
    chain = sent.backward_chain()
    first = (Term("bw", 0, chain[0], SPLIT),) if predict_split else (None,)
    steps = [_step((BOS_ID,), first)]
    for k, tok in enumerate(chain[1:] + (EOS_ID,), 1):
        kind = END if k == len(chain) else WORD
        steps.append(_step((chain[k - 1],), (Term("bw", k, tok, kind),)))
    return steps


def _fw_rows(sent, predict_split):
    """Forward half-LM: <bos> (-> w_s), w_s -> w_{s+1}, ..., w_m -> <eos>."""
    chain = sent.forward_chain()
    first = (Term("fw", 0, chain[0], SPLIT),) if predict_split else (None,)
    steps = [_step((BOS_ID,), first)]
    for k, tok in enumerate(chain[1:] + (EOS_ID,), 1):
        kind = END if k == len(chain) else WORD
        steps.append(_step((chain[k - 1],), (Term("fw", k, tok, kind),)))
    return steps


class _ChainPairLM(LanguageModel):
    """Shared helpers for the two-network B/F variants."""

    bidirectional = True

    def _build(self):
        self.bw = self._net("bw")
        self.fw = self._net("fw")

    @staticmethod
    def _dists(net, inputs, h=None):
        h = net.zero_state() if h is None else h
        out = []
        for tok in inputs:
            h, logits = net.step([tok], h)
            out.append(softmax(logits["fw"][0]))
        return out, h


class SepBF(_ChainPairLM):
    """Two independent half-LMs, both started from <bos> then the split word.

    The forward network carries the split-word term.
    """

    variant = "sep_bf"

    def _rows(self, sent):
        return {"bw": _bw_rows(sent, False), "fw": _fw_rows(sent, True)}

    def run(self, split_word, backward_tokens, forward_tokens):
        """Teacher-forced distributions for each chain after <bos>, w_s.

        Entry ``k`` of a chain's list is the distribution over its ``k+1``-th
        generated token (the last one should put mass on <eos>).
        """
        bw, _ = self._dists(self.bw, [BOS_ID, split_word, *backward_tokens])
        fw, _ = self._dists(self.fw, [BOS_ID, split_word, *forward_tokens])
        return {"split": fw[0], "bw": bw[1:], "fw": fw[1:]}


class AsynBF(_ChainPairLM):
    """Backward half-LM first, then a forward RNN that re-reads w_1..w_s."""

    variant = "asyn_bf"

    def _rows(self, sent):
        fw = []
        s, toks = sent.split, sent.tokens
        for i in range(s - 1):
            fw.append(_step((toks[i],), (None,)))
        chain = sent.forward_chain()
        for k, tok in enumerate(chain[1:] + (EOS_ID,), 1):
            kind = END if k == len(chain) else WORD
            fw.append(_step((chain[k - 1],), (Term("fw", k, tok, kind),)))
        return {"bw": _bw_rows(sent, True), "fw": fw}

    def run(self, split_word, backward_tokens, forward_tokens):
        """Phase 1 distributions (w_s, then backward chain) and phase 2
        distributions (forward chain after reading w_1..w_s)."""
        bw, _ = self._dists(self.bw, [BOS_ID, split_word, *backward_tokens])
        prefix = list(reversed(backward_tokens)) + [split_word]
        _, h = self._dists(self.fw, prefix[:-1])
        fw, _ = self._dists(self.fw, [split_word, *forward_tokens], h)
        return {"split": bw[0], "bw": bw[1:], "fw": fw}


def syn_schedule(m, s):
    """Joint steps after the split-word step for a length-m sentence split at s.

    Returns ``[(bw_kind, fw_kind), ...]``.  Chains emit words, then their
    terminating <eos>, then pad <eos> while the other chain is still going.
    The final step is the one in which the longer chain terminates.
    """
    if not 1 <= s <= m:
        raise ContractViolation(f"split {s} outside [1, {m}]")
    n_bw, n_fw = s, m - s + 1
    sched = []
    for t in range(1, max(n_bw, n_fw) + 1):
        kinds = []
        for n in (n_bw, n_fw):
            kinds.append(WORD if t < n else END if t == n else PAD)
        sched.append(tuple(kinds))
    return sched


class SynBF(LanguageModel):
    """One GRU reading [emb(fw); emb(bw)] and emitting both chains jointly.

    Step 0 feeds [<bos>; <bos>] and only the forward head predicts w_s.  At
    joint step t the backward head predicts w_{s-t} and the forward head
    w_{s+t}; an exhausted chain keeps predicting (and being fed) <eos>.
    """

    variant = "syn_bf"
    bidirectional = True

    def _build(self):
        self.net = self._net("syn", n_slots=2, heads=("fw", "bw"))

    def _rows(self, sent):
        toks, s, m = sent.tokens, sent.split, sent.m

        def fw_tok(t):
            return toks[s + t - 1] if s + t <= m else EOS_ID

        def bw_tok(t):
            return toks[s - t - 1] if s - t >= 1 else EOS_ID

        steps = [_step((BOS_ID, BOS_ID), (Term("fw", 0, toks[s - 1], SPLIT), None))]
        for t, (bk, fk) in enumerate(syn_schedule(m, s), 1):
            labels = (Term("fw", t, fw_tok(t), fk), Term("bw", t, bw_tok(t), bk))
            steps.append(_step((fw_tok(t - 1), bw_tok(t - 1)), labels))
        return {"syn": steps}

    def joint_steps(self, sentence):
        """Labels of the joint steps after the w_s step, as (bw Term, fw Term)."""
        rows = self._rows(sentence)["syn"][1:]
        return [(labs[1], labs[0]) for _, _, _, labs in rows]

    def step(self, prev_bw, prev_fw, h=None):
        """(dist_bw, dist_fw, new state) after feeding [emb(fw); emb(bw)]."""
        h = self.net.zero_state() if h is None else h
        h, logits = self.net.step([prev_fw, prev_bw], h)
        return softmax(logits["bw"][0]), softmax(logits["fw"][0]), h


MODEL_CLASSES = {cls.variant: cls for cls in
                 (SequentialLM, InfoInitLM, InfoAllLM, SepBF, SynBF, AsynBF)}


def build_model(config):
    return MODEL_CLASSES[config.variant](config)
