"""Dense numeric primitives and parameter storage.

Tensors are plain float64 numpy arrays.  The activation functions keep a
wider input dtype (``np.longdouble``) so gradient checks can evaluate the
numeric side in extended precision.
"""

from collections import OrderedDict

import numpy as np

from .errors import ContractViolation, NumericFault

DENSE = "dense"
EMBEDDING = "embedding"


class ParamStore:
    """Ordered name -> tensor map with a shape-aligned gradient per entry.

    Each entry carries an optimizer tag: ``"dense"`` tensors are updated by
    rmsprop, ``"embedding"`` tables by sparse row-wise SGD.
    """

    def __init__(self):
        self.entries = OrderedDict()
        self.grads = OrderedDict()
        self.tags = OrderedDict()

    def add(self, name, value, tag=DENSE):
        if name in self.entries:
            raise ContractViolation(f"duplicate parameter {name!r}")
        if tag not in (DENSE, EMBEDDING):
            raise ContractViolation(f"unknown tag {tag!r}")
        value = np.array(value, dtype=np.float64)
        self.entries[name] = value
        self.grads[name] = np.zeros_like(value)
        self.tags[name] = tag
        return value

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def num_params(self):
        return sum(v.size for v in self.entries.values())

    def copy_values(self):
        return OrderedDict((k, v.copy()) for k, v in self.entries.items())

    def load_values(self, values):
        if list(values) != list(self.entries):
            raise ContractViolation("parameter names do not match the store")
        for name, v in values.items():
            target = self.entries[name]
            if target.shape != np.shape(v):
                raise ContractViolation(
                    f"shape mismatch for {name}: {target.shape} vs {np.shape(v)}")
            target[...] = v


def matvec(W, x):
    W = np.asarray(W, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if W.ndim != 2 or x.ndim != 1 or W.shape[1] != x.shape[0]:
        raise ContractViolation(f"matvec shapes {W.shape} and {x.shape} do not conform")
    return W @ x


def _floating(a):
    a = np.asarray(a)
    return a.astype(np.result_type(a.dtype, np.float64), copy=False)


def sigmoid(a):
    # split by sign so large |a| never overflows exp
    a = _floating(a)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_softmax(z, axis=-1):
    z = _floating(z)
    if z.size == 0 or z.shape[axis] == 0:
        raise ContractViolation("softmax over an empty vector")
    shifted = z - z.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(z, axis=-1):
    z = _floating(z)
    if z.size == 0 or z.shape[axis] == 0:
        raise ContractViolation("softmax over an empty vector")
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(p, target):
    """Natural-log cross-entropy ``-ln p[target]``; ``inf`` when p[target] == 0."""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= target < p.shape[-1]:
        raise ContractViolation(f"target {target} outside [0, {p.shape[-1]})")
    pt = p[target]
    if pt <= 0.0:
        return float("inf")
    return float(-np.log(pt))


def clip_elementwise(grads, c):
    """Clamp every gradient component into [-c, c] in place.

    ``grads`` is a ParamStore (its ``.grads`` are clipped) or a mapping of
    arrays.
    """
    if c <= 0:
        raise ContractViolation("clip threshold must be positive")
    tensors = grads.grads if isinstance(grads, ParamStore) else grads
    for g in tensors.values():
        np.clip(g, -c, c, out=g)
    return grads


def finite_diff_check(loss, store, eps=1e-5, samples=None, rng=None, extended=False):
    """Compare ``store.grads`` against central differences of ``loss(store)``.

    The analytic gradients must already be in ``store.grads``.  With
    ``samples=None`` every coordinate is checked; otherwise ``samples``
    coordinates are drawn per tensor.  Returns the max relative error
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    ``extended=True`` evaluates the loss with the parameters cast to
    ``np.longdouble``.  At float64 the differences carry ~1e-11 absolute
    noise, which the 1e-8 floor turns into relative errors near 1e-3 for
    coordinates whose true gradient happens to be tiny.  ``loss`` must then
    keep numpy scalars rather than converting to ``float``.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    if extended:
        saved = store.entries
        store.entries = OrderedDict((k, v.astype(np.longdouble)) for k, v in saved.items())
        try:
            return finite_diff_check(loss, store, np.longdouble(eps), samples, rng)
        finally:
            store.entries = saved
    worst = 0.0
    for name, value in store.items():
        if value.size == 0:
            continue
        flat = value.reshape(-1)
        grad = store.grads[name].reshape(-1)
        if samples is None or samples >= flat.size:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=samples, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss(store)
            flat[i] = orig - eps
            down = loss(store)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericFault(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (up - down) / (2 * eps)
            analytic = grad[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, float(abs(analytic - numeric) / denom))
    return worst
