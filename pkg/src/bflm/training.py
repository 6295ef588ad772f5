"""Mini-batch training: rmsprop on dense tensors, sparse SGD on embeddings.

One epoch draws fresh random split words, groups sentences of similar
length into batches, and for each batch clips the gradient element-wise
before updating.  The learning rate decays multiplicatively per epoch.
"""

import logging
import math
import os
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, dumps, load_checkpoint, save_checkpoint
from .corpus import draw_splits
from .errors import CheckpointError, ContractViolation, NumericFault
from .evaluation import evaluate
from .models import ModelConfig, build_model
from .nn import DENSE, EMBEDDING, clip_elementwise

log = logging.getLogger(__name__)

EMBEDDING_LR_MODES = ("paper-literal", "tied")


@dataclass
class TrainConfig:
    batch_size: int = 50
    lr0: float = 0.002
    lr_decay: float = 0.97
    rms_decay: float = 0.99
    epsilon: float = 1e-8
    clip: float = 5.0
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    embedding_lr_mode: str = "tied"
    bucket_batches: int = 20

    def __post_init__(self):
        if not 0 < self.lr_decay <= 1:
            raise ContractViolation("lr_decay must lie in (0, 1]")
        if not 0 < self.rms_decay < 1:
            raise ContractViolation("rms_decay must lie in (0, 1)")
        if self.epsilon <= 0 or self.clip <= 0 or self.lr0 <= 0:
            raise ContractViolation("epsilon, clip and lr0 must be positive")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be at least 1")
        if self.embedding_lr_mode not in EMBEDDING_LR_MODES:
            raise ContractViolation(f"embedding_lr_mode must be one of {EMBEDDING_LR_MODES}")


def rmsprop_update(param, grad, cache, lr, rms_decay, epsilon, name="param"):
    """In place: cache <- d*cache + (1-d)*g^2; param <- param - lr*g/sqrt(cache+eps)."""
    if param.shape != grad.shape or param.shape != cache.shape:
        raise ContractViolation(f"{name}: param, grad and cache shapes differ")
    new_cache = rms_decay * cache + (1.0 - rms_decay) * grad * grad
    step = lr * grad / np.sqrt(new_cache + epsilon)
    if not np.all(np.isfinite(step)):
        raise NumericFault(f"non-finite rmsprop update for {name}")
    cache[...] = new_cache
    param -= step


def embedding_rate(lr, epsilon, mode):
    if mode == "paper-literal":
        return lr / math.sqrt(epsilon)
    if mode == "tied":
        return lr
    raise ContractViolation(f"unknown embedding lr mode {mode!r}")


def embedding_sgd_update(table, grad, lr, epsilon, mode="tied", name="emb"):
    """Plain SGD on the rows of ``table`` whose gradient is non-zero.

    Works on a single row too (1-D ``table`` and ``grad``).  Returns the
    indices of the touched rows.
    """
    rate = embedding_rate(lr, epsilon, mode)
    if table.ndim == 1:
        if np.any(grad != 0):
            step = rate * grad
            if not np.all(np.isfinite(step)):
                raise NumericFault(f"non-finite embedding update for {name}")
            table -= step
            return np.array([0])
        return np.array([], dtype=np.int64)
    rows = np.nonzero(np.any(grad != 0, axis=1))[0]
    step = rate * grad[rows]
    if not np.all(np.isfinite(step)):
        raise NumericFault(f"non-finite embedding update for {name}")
    table[rows] -= step
    return rows


@dataclass
class OptimizerState:
    cache: OrderedDict
    lr: float
    epoch: int = 0
    updates: int = 0


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    grad_norm_mean: float
    grad_norm_max: float
    batches: int
    seconds: float
    valid_ppl: float = float("nan")

    def to_log(self):
        parts = []
        for f in fields(self):
            v = getattr(self, f.name)
            parts.append(f"{f.name}={v:.6g}" if isinstance(v, float) else f"{f.name}={v}")
        return " ".join(parts)


def make_batches(lengths, batch_size, rng, bucket_batches=20):
    """Shuffle, sort by length inside pools of ``bucket_batches`` batches,
    cut into batches, then shuffle the batch order."""
    order = rng.permutation(len(lengths))
    pool = batch_size * bucket_batches
    batches = []
    for i in range(0, len(order), pool):
        chunk = sorted(order[i:i + pool], key=lambda j: lengths[j])
        batches.extend(chunk[k:k + batch_size] for k in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


class Trainer:
    """Owns the model, optimizer state, RNG stream and progress counters."""

    def __init__(self, model, config=None, vocab_hash=None):
        self.model = model
        self.config = config or TrainConfig()
        self.vocab_hash = vocab_hash
        store = model.store
        self.opt = OptimizerState(
            cache=OrderedDict((k, np.zeros_like(v)) for k, v in store.items()
                              if store.tags[k] == DENSE),
            lr=self.config.lr0)
        self.rng = np.random.default_rng(self.config.seed)
        self.best_valid = float("inf")
        self.bad_epochs = 0
        self.history = []

    def apply_gradients(self):
        c, store = self.config, self.model.store
        clip_elementwise(store, c.clip)
        for name, value in store.items():
            grad = store.grads[name]
            if store.tags[name] == EMBEDDING:
                embedding_sgd_update(value, grad, self.opt.lr, c.epsilon,
                                     c.embedding_lr_mode, name=name)
            else:
                rmsprop_update(value, grad, self.opt.cache[name], self.opt.lr,
                               c.rms_decay, c.epsilon, name=name)
        self.opt.updates += 1

    def train_epoch(self, records):
        if not records:
            raise ContractViolation("no training data")
        c = self.config
        start = time.perf_counter()
        sents = draw_splits(records, self.rng)
        batches = make_batches([s.m for s in sents], c.batch_size, self.rng, c.bucket_batches)
        total, norms = 0.0, []
        for idx in batches:
            batch = [sents[i] for i in idx]
            loss = self.model.loss_and_grad(batch)
            if not math.isfinite(loss):
                raise NumericFault(f"non-finite training loss at epoch {self.opt.epoch + 1}")
            norms.append(math.sqrt(sum(float(np.sum(g * g))
                                       for g in self.model.store.grads.values())))
            self.apply_gradients()
            total += loss * len(batch)
        lr_used = self.opt.lr
        self.opt.lr *= c.lr_decay
        self.opt.epoch += 1
        return EpochMetrics(self.opt.epoch, lr_used, total / len(sents),
                            float(np.mean(norms)), float(np.max(norms)), len(batches),
                            time.perf_counter() - start)

    def fit(self, train, valid=None, epochs=None, out_dir=None, on_epoch=None):
        """Train up to ``epochs`` more epochs with early stopping on
        validation PPL.  Writes ``latest.ckpt`` and ``best.ckpt`` to
        ``out_dir`` when given."""
        c = self.config
        epochs = c.max_epochs if epochs is None else epochs
        for _ in range(epochs):
            good = self.to_bytes()
            try:
                metrics = self.train_epoch(train)
            except NumericFault:
                if out_dir:
                    with open(os.path.join(out_dir, "latest.ckpt"), "wb") as f:
                        f.write(good)
                raise
            improved = False
            if valid:
                rep = evaluate(self.model, valid, seed=c.seed)
                metrics.valid_ppl = rep.overall_ppl
                if metrics.valid_ppl < self.best_valid:
                    self.best_valid, self.bad_epochs, improved = metrics.valid_ppl, 0, True
                else:
                    self.bad_epochs += 1
            self.history.append(metrics)
            log.info(metrics.to_log())
            if on_epoch:
                on_epoch(metrics)
            if out_dir:
                save_checkpoint(os.path.join(out_dir, "latest.ckpt"), self.checkpoint())
                if improved or not valid:
                    save_checkpoint(os.path.join(out_dir, "best.ckpt"), self.checkpoint())
            if valid and self.bad_epochs >= c.patience:
                log.info("early_stop=1 epoch=%d best_valid_ppl=%.6g", self.opt.epoch, self.best_valid)
                break
        return self.history

    def checkpoint(self):
        meta = {
            "format": "bflm-checkpoint",
            "package_version": __version__,
            "model": self.model.config.to_dict(),
            "train": asdict(self.config),
            "vocab_hash": self.vocab_hash,
            "rng_state": self.rng.bit_generator.state,
            "counters": {"epoch": self.opt.epoch, "updates": self.opt.updates,
                         "lr": self.opt.lr, "best_valid": _finite_or_none(self.best_valid),
                         "bad_epochs": self.bad_epochs},
        }
        tensors = OrderedDict()
        for name, value in self.model.store.items():
            tensors["param/" + name] = value
        for name, value in self.opt.cache.items():
            tensors["rms/" + name] = value
        return Checkpoint(meta, tensors)

    def to_bytes(self):
        return dumps(self.checkpoint())

    @classmethod
    def from_checkpoint(cls, ckpt, train_overrides=None):
        meta = ckpt.meta
        try:
            model = build_model(ModelConfig(**meta["model"]))
            train_cfg = dict(meta["train"])
            train_cfg.update(train_overrides or {})
            trainer = cls(model, TrainConfig(**train_cfg), meta.get("vocab_hash"))
            params = OrderedDict((k[len("param/"):], v) for k, v in ckpt.tensors.items()
                                 if k.startswith("param/"))
            model.store.load_values(params)
            for k, v in ckpt.tensors.items():
                if k.startswith("rms/"):
                    trainer.opt.cache[k[len("rms/"):]][...] = v
            counters = meta["counters"]
            trainer.rng.bit_generator.state = meta["rng_state"]
        except (KeyError, TypeError, ContractViolation) as exc:
            raise CheckpointError("metadata", f"incompatible checkpoint: {exc}") from exc
        trainer.opt.epoch = counters["epoch"]
        trainer.opt.updates = counters["updates"]
        trainer.opt.lr = counters["lr"]
        best = counters["best_valid"]
        trainer.best_valid = float("inf") if best is None else best
        trainer.bad_epochs = counters["bad_epochs"]
        return trainer

    @classmethod
    def load(cls, path, train_overrides=None):
        return cls.from_checkpoint(load_checkpoint(path), train_overrides)


def _finite_or_none(x):
    return x if math.isfinite(x) else None


def load_model(path):
    """Model (and checkpoint metadata) from a checkpoint file."""
    trainer = Trainer.load(path)
    return trainer.model, trainer
