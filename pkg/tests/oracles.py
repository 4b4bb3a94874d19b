"""Naive reference implementations used as test oracles.

Written with explicit Python loops over plain floats so they share no code
path with the vectorised library implementations.
"""

import math

import numpy as np


def _dot(a, b):
    return sum(float(x) * float(y) for x, y in zip(a, b))


def naive_pair_loss(Z, T, j, tau, n_anchor, n_text):
    """-log softmax over texts for anchor j, plus -log softmax over anchors for text j."""
    pos = math.exp(_dot(Z[j], T[j]) / tau)
    row = sum(math.exp(_dot(Z[j], T[k]) / tau) for k in range(n_text))
    col = sum(math.exp(_dot(Z[k], T[j]) / tau) for k in range(n_anchor))
    return -math.log(pos / row) - math.log(pos / col)


def naive_clip_loss(V, T, tau):
    n = len(V)
    return sum(naive_pair_loss(V, T, i, tau, n, n) for i in range(n)) / n


def naive_organ_text_loss(Z, T, tau):
    m = len(Z)
    return sum(naive_pair_loss(Z, T, j, tau, m, m) for j in range(m)) / m


def naive_abnormality_text_loss(Z, T, tau):
    m = len(Z)
    return sum(naive_pair_loss(Z, T, j, tau, m, len(T)) for j in range(m)) / m


def naive_segmentation_loss(logits, labels, eps):
    """logits: (C, D, H, W) nested floats; labels: (D, H, W) ints."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    C = logits.shape[0]
    D, H, W = labels.shape
    ce_sum = 0.0
    inter = [0.0] * C
    psum = [0.0] * C
    gsum = [0.0] * C
    for z in range(D):
        for y in range(H):
            for x in range(W):
                col = [float(logits[c, z, y, x]) for c in range(C)]
                mx = max(col)
                exps = [math.exp(v - mx) for v in col]
                s = sum(exps)
                probs = [e / s for e in exps]
                g = int(labels[z, y, x])
                ce_sum += -math.log(probs[g])
                for c in range(C):
                    psum[c] += probs[c]
                    if c == g:
                        inter[c] += probs[c]
                        gsum[c] += 1.0
    n = D * H * W
    dice = [(2 * inter[c] + eps) / (psum[c] + gsum[c] + eps) for c in range(1, C)]
    return ce_sum / n + (1 - sum(dice) / len(dice))


def naive_pool(fm, labels):
    """Per-label mean feature vectors via an explicit voxel loop."""
    fm = np.asarray(fm, dtype=np.float64)
    labels = np.asarray(labels)
    C = fm.shape[0]
    sums, counts = {}, {}
    for idx in np.ndindex(labels.shape):
        lab = int(labels[idx])
        if lab == 0:
            continue
        acc = sums.setdefault(lab, [0.0] * C)
        for c in range(C):
            acc[c] += float(fm[(c,) + idx])
        counts[lab] = counts.get(lab, 0) + 1
    return {lab: [v / counts[lab] for v in sums[lab]] for lab in sorted(sums)}


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def naive_dice(a, b, cls):
    a = np.asarray(a).ravel().tolist()
    b = np.asarray(b).ravel().tolist()
    na = nb = both = 0
    for u, v in zip(a, b):
        na += u == cls
        nb += v == cls
        both += (u == cls) and (v == cls)
    if na + nb == 0:
        return 1.0
    return 2.0 * both / (na + nb)


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar f at array x (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def random_unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
