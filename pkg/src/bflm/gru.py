"""GRU cell and a batched embedding -> GRU -> softmax-heads network.

The cell follows

    r  = sigmoid(W_r x + U_r h + b_r)
    z  = sigmoid(W_z x + U_z h + b_z)
    h~ = tanh(W_x x + U_x (r * h) + b_x)
    h' = (1 - z) * h + z * h~

Gradients are derived by hand; :class:`GruNet` keeps per-step caches from a
teacher-forced run and accumulates into the owning ParamStore.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericFault
from .nn import EMBEDDING, log_softmax, sigmoid

GATES = ("r", "z", "x")


@dataclass
class StepState:
    h: np.ndarray
    r: np.ndarray = None
    z: np.ndarray = None
    h_tilde: np.ndarray = None
    x: np.ndarray = None
    h_prev: np.ndarray = None


def _cell_params(p, prefix):
    return {k: p[prefix + k] for k in
            ("W_r", "U_r", "b_r", "W_z", "U_z", "b_z", "W_x", "U_x", "b_x")}


def cell_forward(c, X, H):
    """Batched cell: X (B, in), H (B, hidden) -> h, (r, z, h~)."""
    r = sigmoid(X @ c["W_r"].T + H @ c["U_r"].T + c["b_r"])
    z = sigmoid(X @ c["W_z"].T + H @ c["U_z"].T + c["b_z"])
    ht = np.tanh(X @ c["W_x"].T + (r * H) @ c["U_x"].T + c["b_x"])
    h = (1.0 - z) * H + z * ht
    return h, r, z, ht


def cell_backward(c, g, X, H, r, z, ht, dh):
    """Accumulate parameter grads into ``g``; return (dX, dH)."""
    dz = dh * (ht - H)
    dht = dh * z
    dH = dh * (1.0 - z)
    dax = dht * (1.0 - ht * ht)
    rH = r * H
    g["W_x"] += dax.T @ X
    g["U_x"] += dax.T @ rH
    g["b_x"] += dax.sum(axis=0)
    drH = dax @ c["U_x"]
    dr = drH * H
    dH += drH * r
    dX = dax @ c["W_x"]
    daz = dz * z * (1.0 - z)
    g["W_z"] += daz.T @ X
    g["U_z"] += daz.T @ H
    g["b_z"] += daz.sum(axis=0)
    dX += daz @ c["W_z"]
    dH += daz @ c["U_z"]
    dar = dr * r * (1.0 - r)
    g["W_r"] += dar.T @ X
    g["U_r"] += dar.T @ H
    g["b_r"] += dar.sum(axis=0)
    dX += dar @ c["W_r"]
    dH += dar @ c["U_r"]
    return dX, dH


def gru_step(params, x, h_prev):
    """Single-vector GRU step.  ``params`` maps W_r, U_r, b_r, ... to arrays.

    Missing biases are treated as zero.
    """
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    hidden = h_prev.shape[0]
    c = {}
    for gate in GATES:
        W, U = np.asarray(params["W_" + gate], float), np.asarray(params["U_" + gate], float)
        if W.shape != (hidden, x.shape[0]) or U.shape != (hidden, hidden):
            raise ContractViolation(
                f"gate {gate}: W {W.shape}, U {U.shape} vs input {x.shape[0]}, hidden {hidden}")
        c["W_" + gate], c["U_" + gate] = W, U
        c["b_" + gate] = np.asarray(params.get("b_" + gate, np.zeros(hidden)), float)
    h, r, z, ht = cell_forward(c, x[None, :], h_prev[None, :])
    for name, v in (("r", r), ("z", z), ("h~", ht), ("h", h)):
        if not np.all(np.isfinite(v)):
            raise NumericFault(f"non-finite value in GRU gate {name}")
    return StepState(h=h[0], r=r[0], z=z[0], h_tilde=ht[0], x=x, h_prev=h_prev)


@dataclass
class Program:
    """A teacher-forced run over a batch, laid out time-major.

    inputs:  (T, B, slots) token ids fed at each step
    aug:     (T, B) wanted-word ids for the augmentation block, -1 = zeros
    active:  (T, B) bool; inactive rows carry their hidden state unchanged
    targets: (T, B, heads) ids to score, -1 = nothing scored
    weights: (T, B, heads) loss weight of each scored target
    """

    inputs: np.ndarray
    active: np.ndarray
    targets: np.ndarray
    weights: np.ndarray
    aug: np.ndarray = None


def pack_programs(rows, n_slots, n_heads, augment):
    """Pack per-sentence step lists into a time-major Program.

    Each row is a list of ``(inputs, aug, targets, weights)`` tuples.
    """
    B = len(rows)
    T = max(len(r) for r in rows)
    inputs = np.zeros((T, B, n_slots), dtype=np.int64)
    aug = np.full((T, B), -1, dtype=np.int64) if augment else None
    active = np.zeros((T, B), dtype=bool)
    targets = np.full((T, B, n_heads), -1, dtype=np.int64)
    weights = np.zeros((T, B, n_heads))
    for b, steps in enumerate(rows):
        for t, (inp, a, tgt, w) in enumerate(steps):
            inputs[t, b] = inp
            active[t, b] = True
            targets[t, b] = tgt
            weights[t, b] = w
            if augment:
                aug[t, b] = a
    return Program(inputs, active, targets, weights, aug)


class GruNet:
    """Embedding table, one GRU layer and one or more softmax output heads.

    The step input is the concatenation of the embeddings of ``n_slots``
    tokens, optionally followed by an augmentation block holding the
    embedding of a wanted word (zeros when absent).
    """

    def __init__(self, store, prefix, vocab_size, emb_dim, hidden, n_slots=1,
                 augment=False, heads=("fw",), rng=None, init_scale=0.08, emb_name=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.store = store
        self.prefix = prefix
        self.V, self.d, self.H = vocab_size, emb_dim, hidden
        self.n_slots = n_slots
        self.augment = augment
        self.heads = tuple(heads)
        self.in_dim = emb_dim * (n_slots + (1 if augment else 0))

        def u(*shape):
            return rng.uniform(-init_scale, init_scale, size=shape)

        if emb_name is None:
            emb_name = prefix + "emb"
            store.add(emb_name, u(vocab_size, emb_dim), tag=EMBEDDING)
        self.emb_name = emb_name
        for gate in GATES:
            store.add(f"{prefix}W_{gate}", u(hidden, self.in_dim))
            store.add(f"{prefix}U_{gate}", u(hidden, hidden))
            store.add(f"{prefix}b_{gate}", np.zeros(hidden))
        for head in self.heads:
            store.add(f"{prefix}out_{head}.W", u(vocab_size, hidden))
            store.add(f"{prefix}out_{head}.b", np.zeros(vocab_size))

    # parameter views, looked up on each call so external reloads are seen
    def _cell(self):
        return _cell_params(self.store, self.prefix)

    def _head(self, head):
        return (self.store[f"{self.prefix}out_{head}.W"],
                self.store[f"{self.prefix}out_{head}.b"])

    def zero_state(self, batch=1):
        return np.zeros((batch, self.H), dtype=self.store[self.emb_name].dtype)

    def embed(self, tokens, aug=None):
        E = self.store[self.emb_name]
        parts = [E[tokens[:, k]] for k in range(self.n_slots)]
        if self.augment:
            block = np.zeros((tokens.shape[0], self.d))
            if aug is not None:
                has = aug >= 0
                block[has] = E[aug[has]]
            parts.append(block)
        return np.concatenate(parts, axis=1)

    def step(self, tokens, h, aug=None):
        """One step for a batch.  Returns (new h, {head: logits (B, V)})."""
        tokens = np.asarray(tokens, dtype=np.int64).reshape(len(h), self.n_slots)
        if aug is not None:
            aug = np.asarray(aug, dtype=np.int64).reshape(len(h))
        X = self.embed(tokens, aug)
        h_new, *_ = cell_forward(self._cell(), X, h)
        logits = {}
        for head in self.heads:
            W, b = self._head(head)
            logits[head] = h_new @ W.T + b
        return h_new, logits

    def run(self, prog, keep_cache=True):
        """Teacher-forced run.  Returns (logp (T, B, heads) with NaN where
        unscored, cache or None)."""
        T, B, _ = prog.inputs.shape
        cell = self._cell()
        h = self.zero_state(B)
        logp = np.full((T, B, len(self.heads)), np.nan, dtype=self.store[self.emb_name].dtype)
        steps = []
        for t in range(T):
            act = prog.active[t]
            X = self.embed(prog.inputs[t], None if prog.aug is None else prog.aug[t])
            hn, r, z, ht = cell_forward(cell, X, h)
            hn = np.where(act[:, None], hn, h)
            head_cache = []
            for k, head in enumerate(self.heads):
                rows = np.nonzero(prog.targets[t, :, k] >= 0)[0]
                if rows.size == 0:
                    head_cache.append(None)
                    continue
                W, b = self._head(head)
                lsm = log_softmax(hn[rows] @ W.T + b)
                tgt = prog.targets[t, rows, k]
                logp[t, rows, k] = lsm[np.arange(rows.size), tgt]
                head_cache.append((rows, np.exp(lsm)))
            if keep_cache:
                steps.append((X, h, r, z, ht, hn, act, head_cache))
            h = hn
        return logp, (steps if keep_cache else None)

    def backward(self, prog, steps):
        """Accumulate d(-sum weights * logp) into store.grads."""
        cell = self._cell()
        g = {k: self.store.grads[self.prefix + k] for k in cell}
        dE = self.store.grads[self.emb_name]
        T, B, _ = prog.inputs.shape
        dh_next = np.zeros((B, self.H))
        for t in range(T - 1, -1, -1):
            X, H, r, z, ht, hn, act, head_cache = steps[t]
            dh = dh_next
            for k, head in enumerate(self.heads):
                if head_cache[k] is None:
                    continue
                rows, probs = head_cache[k]
                w = prog.weights[t, rows, k][:, None]
                dl = probs * w
                dl[np.arange(rows.size), prog.targets[t, rows, k]] -= w[:, 0]
                W, _ = self._head(head)
                self.store.grads[f"{self.prefix}out_{head}.W"] += dl.T @ hn[rows]
                self.store.grads[f"{self.prefix}out_{head}.b"] += dl.sum(axis=0)
                np.add.at(dh, rows, dl @ W)
            m = act[:, None].astype(np.float64)
            dX, dH = cell_backward(cell, g, X, H, r, z, ht, dh * m)
            dh_next = dH + dh * (1.0 - m)
            rows = np.nonzero(act)[0]
            if rows.size == 0:
                continue
            d = self.d
            for s in range(self.n_slots):
                np.add.at(dE, prog.inputs[t, rows, s], dX[rows, s * d:(s + 1) * d])
            if self.augment and prog.aug is not None:
                a = prog.aug[t, rows]
                has = a >= 0
                if has.any():
                    off = self.n_slots * d
                    np.add.at(dE, a[has], dX[rows[has], off:off + d])
