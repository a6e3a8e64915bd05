"""Reference implementations the tests compare the package against.

Everything here is written with plain numpy and explicit loops, no imports
from the package, so a bug in the library cannot hide in its own test oracle.
Values are exact (direct summation) or finite-difference approximations.
"""

from __future__ import annotations

import numpy as np

FLOOR = 1e-12


def fd_gradients(f, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of in-place arrays.

    ``f`` takes no arguments and must read the arrays in ``arrays`` each call;
    entries are wiggled one at a time and restored.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            ix = it.multi_index
            old = a[ix]
            a[ix] = old + h
            fp = f()
            a[ix] = old - h
            fm = f()
            a[ix] = old
            g[ix] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(approx: list[np.ndarray], exact: list[np.ndarray]) -> float:
    num = np.sqrt(sum(float(((a - e) ** 2).sum()) for a, e in zip(approx, exact)))
    den = np.sqrt(sum(float((e**2).sum()) for e in exact))
    return num / max(den, 1e-300)


# distributions ---------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    p = softmax(logits)
    total = 0.0
    for i, label in enumerate(y):
        total += -np.log(p[i, label])
    return total / len(y)


def jsd(p: np.ndarray, q: np.ndarray) -> float:
    """Mean over rows of the Jensen-Shannon divergence, floor applied inside
    the logs only (matching the clamp the library uses)."""
    total = 0.0
    for i in range(p.shape[0]):
        m = 0.5 * (p[i] + q[i])
        kl_p = kl_q = 0.0
        for c in range(p.shape[1]):
            lp = np.log(max(p[i, c], FLOOR))
            lq = np.log(max(q[i, c], FLOOR))
            lm = np.log(max(m[c], FLOOR))
            kl_p += p[i, c] * (lp - lm)
            kl_q += q[i, c] * (lq - lm)
        total += 0.5 * (kl_p + kl_q)
    return total / p.shape[0]


def contrastive(z1: np.ndarray, z2: np.ndarray, y: np.ndarray, temperature: float) -> float:
    """Symmetrized supervised contrastive loss, anchors weighted uniformly
    over those with at least one same-label counterpart (self included)."""

    def normalize(z):
        return z / np.sqrt(np.maximum((z**2).sum(axis=1, keepdims=True), 1e-30))

    a, b = normalize(z1), normalize(z2)
    n = len(y)

    def direction(anchors, candidates):
        sims = anchors @ candidates.T / temperature
        logp = sims - np.log(np.exp(sims - sims.max(axis=1, keepdims=True)).sum(axis=1, keepdims=True)) - sims.max(axis=1, keepdims=True)
        valid = []
        for i in range(n):
            positives = [k for k in range(n) if y[k] == y[i]]
            if positives:
                valid.append(np.mean([logp[i, k] for k in positives]))
        return np.mean(valid)

    return -0.5 * (direction(a, b) + direction(b, a))


def mlp_forward(x: np.ndarray, weights: list[tuple[np.ndarray, np.ndarray]], activation: str) -> np.ndarray:
    act = {"relu": lambda v: np.maximum(v, 0.0), "tanh": np.tanh}[activation]
    for i, (w, bias) in enumerate(weights):
        x = x @ w + bias
        if i < len(weights) - 1:
            x = act(x)
    return x


# discrete information quantities ---------------------------------------------


def _entropy(p: np.ndarray) -> float:
    total = 0.0
    for v in p.reshape(-1):
        if v > 0:
            total -= v * np.log(v)
    return total


def mi_quantities(p: np.ndarray) -> dict[str, float]:
    """All five information quantities from a joint table p[x1, x2, y],
    assembled from marginal entropies (a different route than ratio sums)."""
    h1 = _entropy(p.sum(axis=(1, 2)))
    h2 = _entropy(p.sum(axis=(0, 2)))
    hy = _entropy(p.sum(axis=(0, 1)))
    h12 = _entropy(p.sum(axis=2))
    h1y = _entropy(p.sum(axis=1))
    h2y = _entropy(p.sum(axis=0))
    h123 = _entropy(p)
    return {
        "I(X1;X2)": h1 + h2 - h12,
        "I(X1;X2|Y)": h1y + h2y - h123 - hy,
        "I(X1;Y|X2)": h12 + h2y - h123 - h2,
        "I(X2;Y|X1)": h12 + h1y - h123 - h1,
        "I(X1,X2;Y)": h12 + hy - h123,
    }


# prediction accounting ---------------------------------------------------------


def error_matrix(uni_preds: list[np.ndarray], mm_preds: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.zeros((2, len(uni_preds) + 1), dtype=np.int64)
    for i in range(len(y)):
        k = sum(int(up[i] == y[i]) for up in uni_preds)
        row = 0 if mm_preds[i] == y[i] else 1
        out[row, k] += 1
    return out


def logistic_probe_accuracy(
    z_train, y_train, z_eval, y_eval, n_classes, steps=200, lr=0.5
) -> float:
    """Full-batch softmax regression from zeros, mirrored step by step."""
    n = len(y_train)
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y_train] = 1.0
    w = np.zeros((z_train.shape[1], n_classes))
    b = np.zeros(n_classes)
    for _ in range(steps):
        p = softmax(z_train @ w + b)
        g = (p - onehot) / n
        w = w - lr * (z_train.T @ g)
        b = b - lr * g.sum(axis=0)
    return float(np.mean(np.argmax(z_eval @ w + b, axis=1) == y_eval))
