"""Independent reference implementations used as test oracles.

Nothing here imports the package's tensor or layer code: every routine is a
direct loop over the textbook definition, in double precision.
"""

import math

import numpy as np


def conv2d_loop(x, w, b=None, stride=1, padding=0):
    """Cross-correlation by explicit loops over output positions."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, height, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((n, cin, height + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + height, padding : padding + wd] = x
    ho = (height + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for s in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[s, :, i * stride : i * stride + k, j * stride : j * stride + k]
                    out[s, o, i, j] = float(np.sum(patch * w[o]))
            if b is not None:
                out[s, o] += b[o]
    return out


def align_loop(mix, w):
    cout = w.shape[0]
    out = np.zeros_like(w, dtype=np.float64)
    for o in range(cout):
        for q in range(cout):
            out[o] += mix[o, q] * w[q]
    return out


def gate_loop(reduce_w, reduce_b, expand_w, expand_b, feat):
    """One gate value per sample: sigmoid(expand(relu(reduce(mean over space))))."""
    vals = []
    for sample in np.asarray(feat, dtype=np.float64):
        pooled = sample.reshape(sample.shape[0], -1).mean(axis=1)
        hidden = [max(0.0, float(np.dot(reduce_w[r], pooled) + reduce_b[r])) for r in range(len(reduce_b))]
        z = float(np.dot(expand_w[0], hidden) + expand_b[0])
        vals.append(1.0 / (1.0 + math.exp(-z)))
    return np.array(vals)


def adaagg_loop(feat, sources, mixes, gates, stride=1, padding=0):
    """Sum over sources of gate * conv(feat, aligned source), one sample at a time.

    ``gates`` is [m] (shared) or [N, m] (per sample); ``mixes`` may be None.
    """
    feat = np.asarray(feat, dtype=np.float64)
    gates = np.asarray(gates, dtype=np.float64)
    outs = []
    for s in range(feat.shape[0]):
        coeffs = gates[s] if gates.ndim == 2 else gates
        acc = None
        for i, w in enumerate(sources):
            wt = align_loop(mixes[i], w) if mixes is not None else np.asarray(w, dtype=np.float64)
            term = coeffs[i] * conv2d_loop(feat[s : s + 1], wt, None, stride, padding)
            acc = term if acc is None else acc + term
        outs.append(acc)
    return np.concatenate(outs)


def te_replay(means, decay):
    """Moving average replayed step by step; the first batch seeds the average."""
    avg = None
    for mu in means:
        mu = np.asarray(mu, dtype=np.float64)
        avg = mu.copy() if avg is None else decay * avg + (1.0 - decay) * mu
    return avg


def cross_entropy_loop(logits, labels):
    total = 0.0
    for row, y in zip(np.asarray(logits, dtype=np.float64), labels):
        total += math.log(sum(math.exp(v) for v in row)) - row[y]
    return total / len(labels)


def rel_err(a, b):
    """Max absolute difference scaled by the largest reference magnitude."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))
