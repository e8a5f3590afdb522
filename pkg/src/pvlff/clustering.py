"""HDBSCAN over instance feature vectors.

Pipeline: core distances and mutual reachability, an exact minimum spanning
tree (Prim, quadratic), a single-linkage dendrogram, the condensed tree, and
excess-of-mass selection. The tree also supports cuts at any node, which
gives coarser or finer instance groupings on demand.

Tie conventions, for determinism:

* MST edges are ordered by ``(weight, min index, max index)``, which makes
  the tree unique.
* Dendrogram merges at exactly the same distance are condensed together, so
  a cluster whose bridges all have the same weight splits into all of its
  parts at one lambda rather than through zero-length intermediate clusters.
* A stability tie between a node and the best selection below it keeps the
  node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

NOISE = -1
LAMBDA_CAP = 1e-10  # distances are floored here before inverting


def pairwise_distances(points: np.ndarray) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    np.fill_diagonal(d, 0.0)
    return d


def core_distances(dist: np.ndarray, k: int) -> np.ndarray:
    """Distance to the k-th nearest neighbor, the point itself excluded."""
    n = dist.shape[0]
    if k < 1:
        raise ValueError("min_samples must be at least 1")
    if n <= k:
        raise ValueError(f"need more than {k} points for min_samples={k}, got {n}")
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def mutual_reachability(points: np.ndarray, min_samples: int) -> np.ndarray:
    """Dense symmetric matrix ``max(core(a), core(b), |a - b|)`` with a zero diagonal."""
    dist = pairwise_distances(points)
    core = core_distances(dist, min_samples)
    mr = np.maximum(dist, np.maximum(core[:, None], core[None, :]))
    np.fill_diagonal(mr, 0.0)
    return mr


def build_mst(mr: np.ndarray) -> np.ndarray:
    """Minimum spanning tree as ``(n-1, 3)`` rows ``(i, j, weight)`` with ``i < j``, in insertion order."""
    n = mr.shape[0]
    if n < 2:
        return np.zeros((0, 3))
    in_tree = np.zeros(n, dtype=bool)
    key = np.full(n, np.inf)
    # best edge endpoint packed as (lo, hi) for lexicographic tie breaks
    lo = np.full(n, n, dtype=np.int64)
    hi = np.full(n, n, dtype=np.int64)
    edges = np.empty((n - 1, 3))
    cur = 0
    in_tree[0] = True
    idx = np.arange(n)
    for e in range(n - 1):
        w = mr[cur]
        elo = np.minimum(idx, cur)
        ehi = np.maximum(idx, cur)
        better = (w < key) | ((w == key) & ((elo < lo) | ((elo == lo) & (ehi < hi))))
        better &= ~in_tree
        key[better], lo[better], hi[better] = w[better], elo[better], ehi[better]
        cand_key = np.where(in_tree, np.inf, key)
        best = cand_key.min()
        cand = np.flatnonzero(cand_key == best)
        if len(cand) > 1:
            order = np.lexsort((hi[cand], lo[cand]))
            cand = cand[order]
        nxt = int(cand[0])
        edges[e] = (lo[nxt], hi[nxt], key[nxt])
        in_tree[nxt] = True
        cur = nxt
    return edges


@dataclass
class Dendrogram:
    n: int
    left: np.ndarray
    right: np.ndarray
    dist: np.ndarray
    size: np.ndarray  # for all 2n-1 nodes
    min_leaf: np.ndarray

    @property
    def root(self) -> int:
        return 2 * self.n - 2

    def leaves(self, node: int) -> list[int]:
        out, stack = [], [node]
        while stack:
            x = stack.pop()
            if x < self.n:
                out.append(x)
            else:
                stack += [self.left[x - self.n], self.right[x - self.n]]
        return out


def single_linkage(edges: np.ndarray, n: int) -> Dendrogram:
    order = np.lexsort((edges[:, 1], edges[:, 0], edges[:, 2])) if len(edges) else np.zeros(0, np.int64)
    parent = np.arange(2 * n - 1)

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    left = np.empty(n - 1, np.int64)
    right = np.empty(n - 1, np.int64)
    dist = np.empty(n - 1)
    size = np.ones(2 * n - 1, np.int64)
    min_leaf = np.arange(2 * n - 1)
    for t, e in enumerate(order):
        a, b, w = int(edges[e, 0]), int(edges[e, 1]), edges[e, 2]
        ra, rb = find(a), find(b)
        node = n + t
        left[t], right[t], dist[t] = ra, rb, w
        size[node] = size[ra] + size[rb]
        min_leaf[node] = min(min_leaf[ra], min_leaf[rb])
        parent[ra] = parent[rb] = node
    return Dendrogram(n, left, right, dist, size, min_leaf)


# ---------------------------------------------------------------------------
# condensed tree
# ---------------------------------------------------------------------------


@dataclass
class CondensedTree:
    """Condensed hierarchy. Clusters are numbered from 0 (the root) in creation order.

    Each record ``(parent, child, lam, size)`` says that at density ``lam`` either
    point ``child`` left cluster ``parent`` (``is_point``) or cluster ``child``
    of ``size`` members split off from ``parent``.
    """

    n_points: int
    min_cluster_size: int
    parent: np.ndarray
    child: np.ndarray
    lam: np.ndarray
    size: np.ndarray
    is_point: np.ndarray
    n_clusters: int
    birth: np.ndarray = field(init=False)
    stability: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        birth = np.zeros(self.n_clusters)
        cl = ~self.is_point
        birth[self.child[cl]] = self.lam[cl]
        self.birth = birth
        contrib = (self.lam - birth[self.parent]) * self.size
        self.stability = np.bincount(self.parent, weights=contrib, minlength=self.n_clusters)

    def children(self, c: int) -> list[int]:
        m = (self.parent == c) & ~self.is_point
        return [int(x) for x in self.child[m]]

    def cluster_parent(self, c: int) -> int:
        if c == 0:
            return NOISE
        m = (self.child == c) & ~self.is_point
        return int(self.parent[m][0])

    def cluster_size(self, c: int) -> int:
        if c == 0:
            return self.n_points
        m = (self.child == c) & ~self.is_point
        return int(self.size[m][0])

    def death(self, c: int) -> float:
        m = self.parent == c
        return float(self.lam[m].max()) if m.any() else float(self.birth[c])

    def point_parent(self) -> np.ndarray:
        """Cluster each point fell out of."""
        out = np.full(self.n_points, NOISE, np.int64)
        m = self.is_point
        out[self.child[m]] = self.parent[m]
        return out

    def members(self, c: int) -> np.ndarray:
        """Sorted indices of every point in cluster ``c``'s subtree."""
        inside = np.zeros(self.n_clusters, bool)
        inside[c] = True
        for k in range(c + 1, self.n_clusters):  # children are numbered after parents
            inside[k] = inside[self.cluster_parent(k)]
        pp = self.point_parent()
        return np.flatnonzero(inside[pp])

    def outline(self) -> list[dict]:
        return [
            {
                "id": c,
                "parent": self.cluster_parent(c),
                "lambda_birth": float(self.birth[c]),
                "lambda_death": self.death(c),
                "size": self.cluster_size(c),
                "stability": float(self.stability[c]),
                "children": self.children(c),
            }
            for c in range(self.n_clusters)
        ]

    def to_json(self) -> str:
        return json.dumps({"n_points": self.n_points, "nodes": self.outline()}, indent=1)

    def to_text(self) -> str:
        lines = []

        def walk(c: int, depth: int) -> None:
            lines.append(
                f"{'  ' * depth}node {c}: size={self.cluster_size(c)} "
                f"lambda=[{self.birth[c]:.6g}, {self.death(c):.6g}] stability={self.stability[c]:.6g}"
            )
            for k in self.children(c):
                walk(k, depth + 1)

        walk(0, 0)
        return "\n".join(lines) + "\n"


def condense(dendro: Dendrogram, min_cluster_size: int) -> CondensedTree:
    if min_cluster_size < 2:
        raise ValueError("min_cluster_size must be at least 2")
    n, m = dendro.n, min_cluster_size
    recs_p, recs_c, recs_l, recs_s, recs_pt = [], [], [], [], []

    def record(p, c, lam, s, pt):
        recs_p.append(p)
        recs_c.append(c)
        recs_l.append(lam)
        recs_s.append(s)
        recs_pt.append(pt)

    n_clusters = 1
    queue = [(dendro.root, 0)] if n > 1 else []
    if n == 1:
        record(0, 0, 1.0 / LAMBDA_CAP, 1, True)
    head = 0
    while head < len(queue):
        node, cid = queue[head]
        head += 1
        w = dendro.dist[node - n]
        lam = 1.0 / max(w, LAMBDA_CAP)
        # all merges at exactly this distance form one split event
        parts, expand = [], [node]
        while expand:
            x = expand.pop()
            if x >= n and dendro.dist[x - n] == w:
                expand += [int(dendro.left[x - n]), int(dendro.right[x - n])]
            else:
                parts.append(x)
        parts.sort(key=lambda x: dendro.min_leaf[x])
        big = [x for x in parts if dendro.size[x] >= m]
        for x in parts:
            if dendro.size[x] < m:
                for pt in sorted(dendro.leaves(x)):
                    record(cid, pt, lam, 1, True)
        if len(big) == 1:
            if big[0] >= n:
                queue.append((big[0], cid))
            else:  # cannot happen for m >= 2, kept for safety
                record(cid, big[0], lam, 1, True)
        else:
            for x in big:
                new = n_clusters
                n_clusters += 1
                record(cid, new, lam, int(dendro.size[x]), False)
                queue.append((x, new))
    return CondensedTree(
        n,
        m,
        np.asarray(recs_p, np.int64),
        np.asarray(recs_c, np.int64),
        np.asarray(recs_l, float),
        np.asarray(recs_s, np.int64),
        np.asarray(recs_pt, bool),
        n_clusters,
    )


# ---------------------------------------------------------------------------
# labelings
# ---------------------------------------------------------------------------


@dataclass
class ClusterLabeling:
    labels: np.ndarray  # per point, NOISE or 0..K-1
    selected: list[int]  # tree node for each label

    @property
    def n_clusters(self) -> int:
        return len(self.selected)

    @property
    def noise(self) -> int:
        return int((self.labels == NOISE).sum())


def select_eom(tree: CondensedTree) -> list[int]:
    k = tree.n_clusters
    kids = [[] for _ in range(k)]
    for c in range(1, k):
        kids[tree.cluster_parent(c)].append(c)
    value = np.zeros(k)
    chosen: list[list[int]] = [[] for _ in range(k)]
    for c in range(k - 1, -1, -1):
        if not kids[c]:
            value[c], chosen[c] = tree.stability[c], [c]
            continue
        below = sum(value[x] for x in kids[c])
        sel = [s for x in kids[c] for s in chosen[x]]
        if c != 0 and tree.stability[c] >= below:
            value[c], chosen[c] = tree.stability[c], [c]
        else:
            value[c], chosen[c] = below, sel
    return sorted(chosen[0])


def label_selected(tree: CondensedTree, selected: list[int]) -> ClusterLabeling:
    label_of = np.full(tree.n_clusters, NOISE, np.int64)
    for i, c in enumerate(selected):
        label_of[c] = i
    # propagate down so every descendant cluster maps to its selected ancestor
    for c in range(1, tree.n_clusters):
        if label_of[c] == NOISE:
            label_of[c] = label_of[tree.cluster_parent(c)]
    pp = tree.point_parent()
    return ClusterLabeling(label_of[pp], list(selected))


def extract_eom(tree: CondensedTree) -> ClusterLabeling:
    return label_selected(tree, select_eom(tree))


def cut_tree(tree: CondensedTree, node: int) -> ClusterLabeling:
    """Label the members of ``node`` by its immediate child clusters.

    Points that left ``node`` directly are noise. A leaf gives one label over
    all its members. Non-members are noise.
    """
    if not 0 <= node < tree.n_clusters:
        raise ValueError(f"no tree node {node}")
    kids = tree.children(node)
    if not kids:
        labels = np.full(tree.n_points, NOISE, np.int64)
        labels[tree.members(node)] = 0
        return ClusterLabeling(labels, [node])
    labels = np.full(tree.n_points, NOISE, np.int64)
    for i, c in enumerate(kids):
        labels[tree.members(c)] = i
    return ClusterLabeling(labels, kids)


def assign_noise(labeling: ClusterLabeling, points: np.ndarray) -> ClusterLabeling:
    """Give each noise point the label of the nearest cluster centroid (lowest label on ties)."""
    labels = labeling.labels.copy()
    noise = labels == NOISE
    if not noise.any():
        return ClusterLabeling(labels, list(labeling.selected))
    if labeling.n_clusters == 0 or not (~noise).any():
        return ClusterLabeling(np.zeros_like(labels), list(labeling.selected) or [0])
    cents = cluster_centroids(points, labels, labeling.n_clusters)
    labels[noise] = nearest_centroid(points[noise], cents)
    return ClusterLabeling(labels, list(labeling.selected))


def cluster_centroids(points: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    x = np.asarray(points, float)
    out = np.zeros((k, x.shape[1]))
    for j in range(k):
        m = labels == j
        if m.any():
            out[j] = x[m].mean(axis=0)
        else:
            out[j] = np.inf
    return out


def nearest_centroid(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = np.sum((np.asarray(points, float)[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(d, axis=1)  # argmin returns the first minimum


@dataclass
class HDBSCANResult:
    labeling: ClusterLabeling
    tree: CondensedTree | None


def hdbscan(points: np.ndarray, min_samples: int = 10, min_cluster_size: int = 50) -> HDBSCANResult:
    """Cluster rows of ``points``. With ``min_samples`` or fewer points everything is noise."""
    x = np.asarray(points, dtype=np.float64)
    n = len(x)
    if n <= min_samples or n < 2:
        return HDBSCANResult(ClusterLabeling(np.full(n, NOISE, np.int64), []), None)
    mr = mutual_reachability(x, min_samples)
    tree = condense(single_linkage(build_mst(mr), n), min_cluster_size)
    return HDBSCANResult(extract_eom(tree), tree)


def normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, float)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), eps)
