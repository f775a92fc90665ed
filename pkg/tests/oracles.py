"""Brute-force references for the agreement statistics.

Written directly from the per-unit definitions, without contingency tables,
so they share no code path with ``ecdmas.analytics``.
"""

from __future__ import annotations


def brute_pa(r1, r2, w):
    n = len(r1)
    return sum(w[a][b] for a, b in zip(r1, r2)) / n


def brute_pe(r1, r2, w):
    k = len(w)
    n = len(r1)
    t_w = 0.0
    for row in w:
        for x in row:
            t_w += x
    total = 0.0
    for cat in range(k):
        share = (r1.count(cat) + r2.count(cat)) / (2 * n)
        total += share * (1 - share)
    return t_w / (k * (k - 1)) * total


def brute_ac(r1, r2, w):
    pa, pe = brute_pa(r1, r2, w), brute_pe(r1, r2, w)
    return (pa - pe) / (1 - pe)


def brute_jackknife_se(r1, r2, w):
    n = len(r1)
    loo = [brute_ac(r1[:i] + r1[i + 1:], r2[:i] + r2[i + 1:], w) for i in range(n)]
    mean = sum(loo) / n
    return ((n - 1) / n * sum((x - mean) ** 2 for x in loo)) ** 0.5


def identity(k):
    return [[1.0 if i == j else 0.0 for j in range(k)] for i in range(k)]


def quadratic(k):
    return [[1 - (i - j) ** 2 / (k - 1) ** 2 for j in range(k)] for i in range(k)]
