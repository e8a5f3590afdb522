"""Naive HDBSCAN used as a test oracle.

Built from threshold graphs instead of an MST: a cluster is a connected
component of ``{(a, b): mreach(a, b) <= eps}``. Each cluster's split level is
the smallest threshold at which it is still connected, found by binary search
over the sorted edge weights, and the split yields the components of the
strictly-smaller threshold graph. Everything is plain loops and sets.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse.csgraph import connected_components


def mreach(points, k):
    x = np.asarray(points, float)
    n = len(x)
    d = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2))
    core = np.empty(n)
    for i in range(n):
        others = sorted(d[i, j] for j in range(n) if j != i)
        core[i] = others[k - 1]
    m = np.maximum(d, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(m, 0.0)
    return m


def components(m, members, below):
    """Components of ``members`` using edges with weight strictly below ``below``."""
    idx = np.array(sorted(members))
    sub = m[np.ix_(idx, idx)]
    adj = (sub < below) & ~np.eye(len(idx), dtype=bool)
    _, lab = connected_components(adj, directed=False)
    groups = {}
    for i, l in enumerate(lab):
        groups.setdefault(l, set()).add(int(idx[i]))
    return list(groups.values())


def connected_at(m, members, eps):
    idx = np.array(sorted(members))
    adj = m[np.ix_(idx, idx)] <= eps
    return connected_components(adj, directed=False)[0] == 1


def split_level(m, members):
    idx = np.array(sorted(members))
    vals = np.unique(m[np.ix_(idx, idx)][np.triu_indices(len(idx), 1)])
    lo, hi = 0, len(vals) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if connected_at(m, members, vals[mid]):
            hi = mid
        else:
            lo = mid + 1
    return float(vals[lo])


class Node:
    def __init__(self, members, birth, parent):
        self.members = frozenset(members)
        self.birth = birth
        self.parent = parent
        self.children = []
        self.leave = {}  # point -> lambda at which it left this node


def build_tree(m, min_cluster_size):
    n = len(m)
    root = Node(range(n), 0.0, None)
    nodes = [root]
    todo = [root]
    while todo:
        node = todo.pop(0)
        current = set(node.members)
        while True:
            level = split_level(m, current)
            lam = 1.0 / level
            parts = components(m, current, level)
            big = [p for p in parts if len(p) >= min_cluster_size]
            for p in parts:
                if len(p) < min_cluster_size:
                    for x in p:
                        node.leave[x] = lam
            if len(big) == 1:
                current = big[0]
                continue
            for p in big:
                child = Node(p, lam, node)
                for x in p:
                    node.leave[x] = lam
                node.children.append(child)
                nodes.append(child)
                todo.append(child)
            break
    return nodes


def stability(node):
    return sum(lam - node.birth for lam in node.leave.values())


def select(nodes):
    root = nodes[0]

    def best(node):
        if not node.children:
            return stability(node), [node]
        total, chosen = 0.0, []
        for c in node.children:
            s, ch = best(c)
            total += s
            chosen += ch
        if node is not root and stability(node) >= total:
            return stability(node), [node]
        return total, chosen

    return best(root)[1]


def reference_hdbscan(points, min_samples, min_cluster_size):
    """Labels (-1 noise) and the tree's nodes."""
    n = len(points)
    if n <= min_samples:
        return np.full(n, -1), []
    m = mreach(points, min_samples)
    nodes = build_tree(m, min_cluster_size)
    labels = np.full(n, -1)
    for i, node in enumerate(select(nodes)):
        for x in node.members:
            labels[x] = i
    return labels, nodes
