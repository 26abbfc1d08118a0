"""Brute-force reference implementations, written with plain Python loops so
they share no code path with the library."""
import math

import numpy as np


def class_means(emb, labels, order=None):
    emb = np.asarray(emb, dtype=np.float64)
    labels = [int(v) for v in labels]
    if order is None:
        order = []
        for c in labels:
            if c not in order:
                order.append(c)
    rows = []
    for c in order:
        acc = [0.0] * emb.shape[1]
        n = 0
        for e, y in zip(emb, labels):
            if y == c:
                n += 1
                for k in range(len(acc)):
                    acc[k] += float(e[k])
        rows.append([a / n for a in acc])
    return np.array(rows), list(order)


def cosine(a, b):
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    na = math.sqrt(sum(float(x) ** 2 for x in a))
    nb = math.sqrt(sum(float(y) ** 2 for y in b))
    return dot / (na * nb)


def neg_sq_dist(a, b):
    return -sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)) / len(a)


def score_table(emb, rows, fn):
    return np.array([[fn(e, w) for w in rows] for e in np.asarray(emb)])


def softmax_row(z, s):
    m = max(s * float(v) for v in z)
    ex = [math.exp(s * float(v) - m) for v in z]
    tot = sum(ex)
    return [e / tot for e in ex]


def mean_xent(probs, targets):
    return -sum(math.log(float(p[t])) for p, t in zip(probs, targets)) / len(targets)


def first_argmax(row):
    best, arg = -math.inf, -1
    for i, v in enumerate(row):
        if v > best:
            best, arg = v, i
    return arg


def ensemble_labels(f1, w1, f2, w2, registry):
    out = []
    for a, b in zip(np.asarray(f1), np.asarray(f2)):
        row = [cosine(a, r1) + neg_sq_dist(b, r2) for r1, r2 in zip(w1, w2)]
        out.append(registry[first_argmax(row)])
    return out


def nearest_mean_accuracy(train_x, train_y, test_x, test_y):
    means, order = class_means(np.asarray(train_x).reshape(len(train_x), -1), train_y)
    hits = 0
    for x, y in zip(np.asarray(test_x).reshape(len(test_x), -1), test_y):
        d = [sum((float(a) - float(b)) ** 2 for a, b in zip(x, m)) for m in means]
        hits += order[int(np.argmin(d))] == int(y)
    return hits / len(test_y)
