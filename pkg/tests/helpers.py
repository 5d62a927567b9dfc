import numpy as np


def central_diff(loss_fn, array, eps=1e-6):
    """Central finite differences of a scalar ``loss_fn()`` w.r.t. ``array`` (modified in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = array[i]
        array[i] = old + eps
        up = loss_fn()
        array[i] = old - eps
        down = loss_fn()
        array[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def pair_count_auc(scores, labels):
    """Exhaustive Mann-Whitney count over all positive/negative pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))
