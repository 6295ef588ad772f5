"""Seeded generator of title-like sentences for offline experiments.

A small probabilistic grammar over research-title vocabulary.  Word choice
depends on the head noun's topic, so both left and right context carry
information about a given word.
"""

import numpy as np

TOPICS = {
    "vision": {
        "noun": ["image", "images", "object", "scene", "video", "segmentation", "detection",
                 "pixel", "camera", "pose", "depth", "texture"],
        "adj": ["visual", "semantic", "dense", "spatial", "stereo", "low-level"],
        "verb": ["recognizing", "segmenting", "tracking", "detecting", "reconstructing"],
    },
    "language": {
        "noun": ["language", "text", "translation", "parsing", "word", "words", "sentence",
                 "dialogue", "speech", "grammar", "documents", "summarization"],
        "adj": ["lexical", "syntactic", "multilingual", "neural", "statistical", "discourse"],
        "verb": ["parsing", "translating", "generating", "modeling", "summarizing"],
    },
    "learning": {
        "noun": ["networks", "learning", "models", "features", "kernels", "classifiers",
                 "representations", "optimization", "inference", "regression", "clustering",
                 "embeddings"],
        "adj": ["deep", "sparse", "recurrent", "convolutional", "bayesian", "probabilistic",
                "scalable", "robust"],
        "verb": ["learning", "training", "optimizing", "regularizing", "approximating"],
    },
    "systems": {
        "noun": ["systems", "graphs", "robots", "control", "planning", "search", "data",
                 "databases", "queries", "networks", "sensors", "agents"],
        "adj": ["distributed", "efficient", "online", "adaptive", "real-time", "parallel"],
        "verb": ["scheduling", "controlling", "planning", "indexing", "routing"],
    },
}
GENERIC_ADJ = ["new", "fast", "simple", "unsupervised", "supervised", "general", "joint",
               "hierarchical", "structured", "large-scale"]
HEADS = ["approach", "framework", "method", "analysis", "study", "algorithm", "model"]
PREPS = ["for", "with", "in", "of", "using", "via", "from"]
CONNECT = ["and", "for", "with"]


def _pick(rng, items):
    return items[int(rng.integers(len(items)))]


class TitleGrammar:
    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.topics = sorted(TOPICS)

    def _np(self, topic, max_adj=2):
        lex, rng = TOPICS[topic], self.rng
        words = []
        for _ in range(int(rng.integers(0, max_adj + 1))):
            words.append(_pick(rng, lex["adj"] if rng.random() < 0.7 else GENERIC_ADJ))
        if rng.random() < 0.3:
            words.append(_pick(rng, lex["noun"]))
        words.append(_pick(rng, lex["noun"]))
        return words

    def sentence(self):
        rng = self.rng
        topic = _pick(rng, self.topics)
        other = topic if rng.random() < 0.6 else _pick(rng, self.topics)
        form = rng.random()
        if form < 0.35:
            words = [_pick(rng, TOPICS[topic]["verb"])] + self._np(topic)
            words += [_pick(rng, PREPS)] + self._np(other)
        elif form < 0.65:
            words = self._np(topic, 1) + [_pick(rng, HEADS), _pick(rng, PREPS)]
            words += self._np(other)
        elif form < 0.85:
            words = self._np(topic) + [_pick(rng, CONNECT)] + self._np(other)
            if rng.random() < 0.5:
                words += [_pick(rng, PREPS)] + self._np(topic, 1)
        else:
            words = ["on"] + self._np(topic) + [_pick(rng, PREPS)] + self._np(other, 1)
        return words

    def corpus(self, n):
        return [self.sentence() for _ in range(n)]


def synthetic_corpus(n, seed=0):
    """``n`` sentences as space-joined strings."""
    return [" ".join(words) for words in TitleGrammar(seed).corpus(n)]
