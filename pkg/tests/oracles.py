"""Independent pure-python reference implementations used as test oracles."""

import math


def dist(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def center(points):
    n = len(points)
    return [sum(float(p[t]) for p in points) / n for t in range(len(points[0]))]


def naive_acm(classes):
    """ACM by exhaustive loops; ``classes`` is a list of point lists."""
    k = len(classes)
    sig, rad = [], []
    for pts in classes:
        c = center(pts)
        ds = [dist(p, c) for p in pts]
        sig.append(sum(ds) / len(ds))
        rad.append(max(ds))
    total = 0.0
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            low = min(dist(p, q) for p in classes[i] for q in classes[j])
            total += low / (rad[i] * sig[i] + rad[j] * sig[j])
    return total / (k * (k - 1))
