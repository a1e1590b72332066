"""Brute-force reference implementations used as test oracles."""

import itertools

import numpy as np


def brute_qwk(t, p, c):
    o = np.zeros((c, c))
    for a, b in zip(t, p):
        o[a, b] += 1
    n = len(t)
    num = den = 0.0
    for i in range(c):
        for j in range(c):
            w = (i - j) ** 2 / (c - 1) ** 2
            num += w * o[i, j]
            den += w * o[i].sum() * o[:, j].sum() / n
    return 1 - num / den


def brute_auc(t, probs):
    aucs = []
    for c in range(probs.shape[1]):
        pos = [probs[i, c] for i in range(len(t)) if t[i] == c]
        neg = [probs[i, c] for i in range(len(t)) if t[i] != c]
        if not pos or not neg:
            continue
        score = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
        aucs.append(score / (len(pos) * len(neg)))
    return float(np.mean(aucs))


def brute_accuracy(t, p):
    hits = 0
    for a, b in zip(t, p):
        hits += int(a == b)
    return hits / len(t)
