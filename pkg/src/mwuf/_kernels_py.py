"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def scatter_add_rows(dst, index, src):
    np.add.at(dst, index, src)


def sparse_adam_rows(param, grad, m, v, rows, lr, beta1, beta2, eps, bias1, bias2):
    dt = param.dtype.type
    b1, b2 = dt(beta1), dt(beta2)
    c1, c2 = dt(1.0 - beta1), dt(1.0 - beta2)
    step, e, bc1, bc2 = dt(lr), dt(eps), dt(bias1), dt(bias2)
    g = grad[rows]
    mm = b1 * m[rows] + c1 * g
    vv = b2 * v[rows] + c2 * g * g
    m[rows] = mm
    v[rows] = vv
    denom = np.sqrt(vv / bc2) + e
    param[rows] = param[rows] - step * (mm / bc1) / denom


def rank_auc_sorted(scores, labels):
    n = scores.shape[0]
    # boundaries of tied runs
    starts = np.flatnonzero(np.r_[True, scores[1:] != scores[:-1]])
    ends = np.r_[starts[1:], n]
    avg = 0.5 * ((starts + 1).astype(np.float64) + ends.astype(np.float64))
    pos_per_run = np.add.reduceat(labels.astype(np.int64), starts)
    n_pos = int(pos_per_run.sum())
    n_neg = n - n_pos
    rank_sum = float(np.dot(avg, pos_per_run.astype(np.float64)))
    return (rank_sum - 0.5 * n_pos * (n_pos + 1)) / (float(n_pos) * float(n_neg))
