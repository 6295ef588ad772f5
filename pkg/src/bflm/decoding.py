"""Constrained generation: greedy, temperature sampling and beam search.

The B/F variants decode with the wanted word injected as the split word
(its own prediction step is skipped), so every output contains it.  The
sequential baselines decode left to right from ``<bos>`` and merely report
whether the wanted word showed up.

Scores are natural-log probabilities under the model at temperature 1,
summed in emission order; every hypothesis also keeps its per-term list so
it can be compared with teacher-forced scoring.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS_ID, EOS_ID
from .errors import ContractViolation
from .nn import log_softmax

STRATEGIES = ("greedy", "sample", "beam")


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    temperature: float = 1.0
    seed: int = 0
    width: int = 5
    max_len: int = 20
    banned: frozenset = frozenset()

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractViolation(f"strategy must be one of {STRATEGIES}")
        if self.temperature <= 0:
            raise ContractViolation("temperature must be positive")
        if self.width < 1 or self.max_len < 1:
            raise ContractViolation("width and max_len must be at least 1")
        self.banned = frozenset(self.banned)
        if EOS_ID in self.banned:
            raise ContractViolation("<eos> cannot be banned")


@dataclass
class Generation:
    """A decoded sentence.  ``split`` is 1-based, None if the wanted word is
    absent; ``terms`` lists (chain, logprob) in emission order."""

    tokens: list
    logprob: float
    split: int
    wanted: int
    terminated: dict
    terms: list = field(default_factory=list)

    @property
    def contains(self):
        return self.wanted in self.tokens

    @property
    def truncated(self):
        return not all(self.terminated.values())

    def to_record(self, vocab=None):
        words = vocab.decode(self.tokens) if vocab else [str(t) for t in self.tokens]
        return {
            "tokens": " ".join(words),
            "split": self.split,
            "logprob": self.logprob,
            "wanted": vocab.token(self.wanted) if vocab else self.wanted,
            "contains": self.contains,
            "terminated": self.terminated,
        }

    def to_line(self, vocab=None):
        return json.dumps(self.to_record(vocab), sort_keys=True)


@dataclass
class _Hyp:
    score: float
    tokens: list
    h: np.ndarray
    prev: int
    terms: list
    done: bool = False


def _masked(lp, banned):
    if not banned:
        return lp
    lp = lp.copy()
    lp[..., sorted(banned)] = -np.inf
    return lp


def sample_tokens(logits, temperature, rng, banned=frozenset()):
    """Draw one id per row from softmax(logits / temperature)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    p = np.exp(_masked(log_softmax(logits / temperature), banned))
    cdf = np.cumsum(p, axis=1)
    u = rng.random(len(logits))[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), logits.shape[1] - 1)


class _Chain:
    """One recurrent chain of a network: a start state and input rule."""

    def __init__(self, net, h, first, aug=None, head="fw", name="fw", t0=0):
        self.net, self.h, self.first = net, h, first
        self.aug, self.head, self.name, self.t0 = aug, head, name, t0

    def step(self, hyps):
        H = np.concatenate([x.h for x in hyps])
        prev = [x.prev for x in hyps]
        aug = None
        if self.aug is not None:
            t = self.t0 + len(hyps[0].tokens)
            aug = [self.aug(t)] * len(hyps)
        Hn, logits = self.net.step(prev, H, aug)
        return Hn, log_softmax(logits[self.head])

    def start(self):
        return _Hyp(0.0, [], self.h, self.first, [])


def _choose(lp, cfg, rng):
    if cfg.strategy == "sample":
        return int(sample_tokens(lp, cfg.temperature, rng, cfg.banned)[0])
    return int(np.argmax(_masked(lp, cfg.banned)))


def _chain_single(chain, cfg, rng):
    """Greedy or sampled decode of one chain -> (hyp, terminated)."""
    hyp = chain.start()
    for _ in range(cfg.max_len):
        Hn, lp = chain.step([hyp])
        lp = lp[0]
        tok = _choose(lp, cfg, rng)
        hyp.score += lp[tok]
        hyp.terms.append((chain.name, float(lp[tok])))
        if tok == EOS_ID:
            return hyp, True
        hyp.tokens.append(tok)
        hyp.h, hyp.prev = Hn, tok
    return hyp, False


def _chain_beam(chain, cfg):
    """Beam over one chain -> top-``width`` [(hyp, terminated)] by score."""
    width = cfg.width
    alive, finished = [chain.start()], []
    for k in range(cfg.max_len):
        Hn, lp = chain.step(alive)
        scores = np.array([x.score for x in alive])[:, None] + _masked(lp, cfg.banned)
        flat = scores.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:width]
        nxt = []
        for idx in order:
            if not np.isfinite(flat[idx]):
                break
            i, tok = divmod(int(idx), lp.shape[1])
            src = alive[i]
            term = (chain.name, float(lp[i, tok]))
            if tok == EOS_ID:
                finished.append((_Hyp(flat[idx], list(src.tokens), src.h, tok,
                                      src.terms + [term], True), True))
            else:
                nxt.append(_Hyp(flat[idx], src.tokens + [tok], Hn[i:i + 1], tok,
                                src.terms + [term]))
        if k == cfg.max_len - 1:
            finished.extend((x, False) for x in nxt)
            nxt = []
        alive = nxt
        if not alive:
            break
    finished.sort(key=lambda x: -x[0].score)
    return finished[:width]


def _combine(pairs, width):
    """Top-``width`` (bw, fw) combinations by summed score."""
    pairs.sort(key=lambda p: -(p[0][0].score + p[1][0].score))
    return pairs[:width]


class Decoder:
    """Variant-aware generation for a trained model."""

    def __init__(self, model):
        self.model = model
        self.variant = model.variant

    # chain factories -------------------------------------------------
    def _seq_chain(self, wanted):
        net = self.model.net
        aug = None
        if self.variant == "info_init":
            aug = lambda t: wanted if t == 0 else -1  # noqa: E731
        elif self.variant == "info_all":
            aug = lambda t: wanted  # noqa: E731
        return _Chain(net, net.zero_state(), BOS_ID, aug, name="seq")

    def _half_chain(self, net, wanted, name):
        """Half-LM chain whose state has already consumed ``<bos>``."""
        h, _ = net.step([BOS_ID], net.zero_state())
        return _Chain(net, h, wanted, name=name)

    def _read(self, net, tokens):
        h = net.zero_state()
        for tok in tokens:
            h, _ = net.step([tok], h)
        return h

    # assembly --------------------------------------------------------
    def _finish(self, wanted, bw_hyp, bw_done, fw_hyp, fw_done):
        bw_tokens = list(reversed(bw_hyp.tokens))
        tokens = bw_tokens + [wanted] + fw_hyp.tokens
        score = bw_hyp.score + fw_hyp.score
        return Generation(tokens, float(score), len(bw_tokens) + 1, wanted,
                          {"bw": bw_done, "fw": fw_done}, bw_hyp.terms + fw_hyp.terms)

    def _seq_result(self, wanted, hyp, done):
        split = hyp.tokens.index(wanted) + 1 if wanted in hyp.tokens else None
        return Generation(list(hyp.tokens), float(hyp.score), split, wanted,
                          {"seq": done}, hyp.terms)

    def _check_wanted(self, wanted):
        if not 0 <= wanted < self.model.config.vocab:
            raise ContractViolation(f"wanted id {wanted} outside the vocabulary")

    # public ----------------------------------------------------------
    def generate(self, wanted, config=None, rng=None):
        cfg = config or DecodeConfig()
        self._check_wanted(wanted)
        if cfg.strategy == "beam":
            return self.beam(wanted, cfg)[0]
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        m, v = self.model, self.variant
        if v in ("seq", "info_init", "info_all"):
            return self._seq_result(wanted, *_chain_single(self._seq_chain(wanted), cfg, rng))
        if v == "syn_bf":
            return self._syn_single(wanted, cfg, rng)
        bw = _chain_single(self._half_chain(m.bw, wanted, "bw"), cfg, rng)
        if v == "sep_bf":
            fw_chain = self._half_chain(m.fw, wanted, "fw")
        else:
            prefix = list(reversed(bw[0].tokens))
            fw_chain = _Chain(m.fw, self._read(m.fw, prefix), wanted, name="fw")
        fw = _chain_single(fw_chain, cfg, rng)
        return self._finish(wanted, *bw, *fw)

    def beam(self, wanted, config=None):
        """Top-``width`` Generations, scores non-increasing."""
        cfg = config or DecodeConfig(strategy="beam")
        self._check_wanted(wanted)
        m, v = self.model, self.variant
        if v in ("seq", "info_init", "info_all"):
            return [self._seq_result(wanted, h, d)
                    for h, d in _chain_beam(self._seq_chain(wanted), cfg)]
        if v == "syn_bf":
            return self._syn_beam(wanted, cfg)
        bws = _chain_beam(self._half_chain(m.bw, wanted, "bw"), cfg)
        pairs = []
        if v == "sep_bf":
            fws = _chain_beam(self._half_chain(m.fw, wanted, "fw"), cfg)
            pairs = [(b, f) for b in bws for f in fws]
        else:
            for b in bws:
                prefix = list(reversed(b[0].tokens))
                chain = _Chain(m.fw, self._read(m.fw, prefix), wanted, name="fw")
                pairs.extend((b, f) for f in _chain_beam(chain, cfg))
        return [self._finish(wanted, *b, *f) for b, f in _combine(pairs, cfg.width)]

    # syn-B/F: one state, two heads, pad rule --------------------------
    def _syn_start(self, wanted):
        net = self.model.net
        h, _ = net.step([BOS_ID, BOS_ID], net.zero_state())
        return {"score": 0.0, "h": h, "prev": (wanted, wanted), "bw": [], "fw": [],
                "done": (False, False), "terms": []}

    def _syn_step(self, hyps):
        net = self.model.net
        H = np.concatenate([x["h"] for x in hyps])
        # slot order is [fw; bw]
        inputs = [(x["prev"][1], x["prev"][0]) for x in hyps]
        Hn, logits = net.step(inputs, H)
        return Hn, log_softmax(logits["bw"]), log_softmax(logits["fw"])

    def _syn_advance(self, x, Hrow, lpb, lpf, b, f):
        score = x["score"] + lpb[b] + lpf[f]
        terms = x["terms"] + [("bw", float(lpb[b])), ("fw", float(lpf[f]))]
        bw = x["bw"] + ([] if b == EOS_ID else [b])
        fw = x["fw"] + ([] if f == EOS_ID else [f])
        done = (x["done"][0] or b == EOS_ID, x["done"][1] or f == EOS_ID)
        return {"score": score, "h": Hrow, "prev": (b, f), "bw": bw, "fw": fw,
                "done": done, "terms": terms}

    def _syn_choices(self, lp, done, banned):
        if done:
            out = np.full_like(lp, -np.inf)
            out[EOS_ID] = 0.0
            return out
        return _masked(np.zeros_like(lp), banned)

    def _syn_single(self, wanted, cfg, rng):
        x = self._syn_start(wanted)
        for _ in range(cfg.max_len):
            Hn, lpb, lpf = self._syn_step([x])
            picks = []
            for lp, done in ((lpb[0], x["done"][0]), (lpf[0], x["done"][1])):
                picks.append(EOS_ID if done else _choose(lp, cfg, rng))
            x = self._syn_advance(x, Hn, lpb[0], lpf[0], *picks)
            if all(x["done"]):
                break
        return self._syn_result(wanted, x)

    def _syn_beam(self, wanted, cfg):
        alive, finished = [self._syn_start(wanted)], []
        for k in range(cfg.max_len):
            Hn, lpb, lpf = self._syn_step(alive)
            V = lpb.shape[1]
            cand = []
            for i, x in enumerate(alive):
                mb = self._syn_choices(lpb[i], x["done"][0], cfg.banned)
                mf = self._syn_choices(lpf[i], x["done"][1], cfg.banned)
                cand.append(x["score"] + (lpb[i] + mb)[:, None] + (lpf[i] + mf)[None, :])
            flat = np.stack(cand).reshape(-1)
            order = np.argsort(-flat, kind="stable")[:cfg.width]
            nxt = []
            for idx in order:
                if not np.isfinite(flat[idx]):
                    break
                i, rem = divmod(int(idx), V * V)
                b, f = divmod(rem, V)
                y = self._syn_advance(alive[i], Hn[i:i + 1], lpb[i], lpf[i], b, f)
                y["score"] = flat[idx]
                (finished if all(y["done"]) else nxt).append(y)
            if k == cfg.max_len - 1:
                finished.extend(nxt)
                nxt = []
            alive = nxt
            if not alive:
                break
        finished.sort(key=lambda y: -y["score"])
        return [self._syn_result(wanted, y) for y in finished[:cfg.width]]

    def _syn_result(self, wanted, x):
        bw_tokens = list(reversed(x["bw"]))
        return Generation(bw_tokens + [wanted] + x["fw"], float(x["score"]),
                          len(bw_tokens) + 1, wanted,
                          {"bw": x["done"][0], "fw": x["done"][1]}, x["terms"])


def generate(model, wanted, config=None, rng=None):
    return Decoder(model).generate(wanted, config, rng)


def beam_decode(model, wanted, width, max_len=20, banned=frozenset()):
    cfg = DecodeConfig(strategy="beam", width=width, max_len=max_len, banned=banned)
    return Decoder(model).beam(wanted, cfg)


def sample_decode(model, wanted, temperature, seed, max_len=20):
    cfg = DecodeConfig(strategy="sample", temperature=temperature, seed=seed, max_len=max_len)
    return Decoder(model).generate(wanted, cfg)
