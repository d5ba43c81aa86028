"""Independent reference implementations used only by the tests.

They are written for obviousness rather than speed and share no code with
the package.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def reachability(n: int, edges, nodes=None) -> np.ndarray:
    """Boolean reachability matrix by repeated squaring, restricted to ``nodes``."""
    keep = set(range(n)) if nodes is None else set(nodes)
    m = np.eye(n, dtype=bool)
    for a, b in edges:
        if a in keep and b in keep:
            m[a, b] = m[b, a] = True
    for _ in range(max(1, math.ceil(math.log2(max(n, 2)))) + 1):
        m = (m.astype(int) @ m.astype(int)) > 0
    return m


def tables_connected(n: int, edges, chosen, through_others: bool) -> bool:
    chosen = sorted(set(chosen))
    if len(chosen) <= 1:
        return True
    reach = reachability(n, edges, None if through_others else chosen)
    return all(reach[chosen[0], t] for t in chosen[1:])


def connectivity_oracle(n: int, edges, options, through_others: bool) -> int:
    """options: per phrase, the list of table indices it may map to."""
    options = [o for o in options if o]
    if not options:
        return 1
    for combo in itertools.product(*options):
        if tables_connected(n, edges, combo, through_others):
            return 1
    return 0


def coverage_oracle(n: float, na: int, total: int) -> float:
    # series expansion of exp(-x), independent of math.exp
    x = n * na / total
    term, acc = 1.0, 1.0
    for i in range(1, 200):
        term *= -x / i
        acc += term
    return acc


def recall_oracle(ranked, gold, k) -> int:
    for i, db in enumerate(ranked):
        if i >= k:
            break
        if db == gold:
            return 1
    return 0


def ap_oracle(ranked, gold) -> float:
    # generic AP definition with a single relevant item
    hits, total = 0, 0.0
    for i, db in enumerate(ranked, start=1):
        if db == gold:
            hits += 1
            total += hits / i
    return total / 1 if hits else 0.0


def partition_cost(X: np.ndarray, labels) -> float:
    cost = 0.0
    for c in set(labels):
        pts = X[[i for i, l in enumerate(labels) if l == c]]
        cost += float(((pts - pts.mean(axis=0)) ** 2).sum())
    return cost


def best_bounded_partition(X: np.ndarray, k: int, lo: int, hi: int) -> float:
    """Exhaustive minimum within-cluster sum of squares under size bounds."""
    n = len(X)
    best = math.inf
    for labels in itertools.product(range(k), repeat=n):
        if labels[0] != 0:
            continue  # symmetry: first point in cluster 0
        sizes = [labels.count(c) for c in range(k)]
        if all(lo <= s <= hi for s in sizes):
            best = min(best, partition_cost(X, labels))
    return best
