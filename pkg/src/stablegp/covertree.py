"""Breadth-first cover tree construction for inducing point selection.

The tree is built top down: the root sits at the data mean and covers the
whole dataset, and each level halves the covering radius until the target
resolution is reached.  Nodes at level ell are pairwise separated by more
than R_ell, and every data point is within R_ell of the node it is
assigned to, so the node locations of any level form a separated covering
of the data.  Construction is local: a new node only ever competes with
children of its parent's R-neighbors, which is what keeps the build near
linear in N.

Every distance taken during construction and by the metric helpers below
goes through _cross_distances.  The separation/resolution guarantees are
asserted with no tolerance, so the builder and the checkers must see
bit-identical floating point values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

__all__ = [
    "CoverTreeNode",
    "CoverTree",
    "InducingSet",
    "ClusterAssignment",
    "build",
    "inducing_points",
    "separation",
    "spatial_resolution",
    "cluster_assign",
    "select_uniform",
    "select_kmeans",
]

# Row block for pairwise-distance scans; bounds peak memory, not results.
_BLOCK = 512


def _as_points(X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("points must form a nonempty (n, d) array")
    return X


def _cross_distances(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of A and rows of B.

    The single distance code path of this module: per-pair arithmetic must
    not depend on array shapes, otherwise the exact comparisons made during
    construction could disagree with the metric helpers.
    """
    diff = A[:, None, :] - B[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass
class CoverTreeNode:
    location: np.ndarray
    level: int
    parent: Optional[int]  # index within the previous level; None for root
    children: list[int] = field(default_factory=list)
    r_neighbors: list[int] = field(default_factory=list)
    assigned: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))


@dataclass
class CoverTree:
    epsilon: float
    d_max: float
    L: int
    radii: list[float]  # R_0 .. R_L with R_ell = 2^(L-ell) * epsilon
    neighbor_radii: list[float]  # 4 R_ell per level
    levels: list[list[CoverTreeNode]]
    seed: int
    lloyd_averaging: bool
    voronoi_repartition: bool

    def level_locations(self, level: int) -> np.ndarray:
        return np.vstack([node.location for node in self.levels[level]])

    def to_json(self) -> dict:
        nodes = []
        for level in self.levels:
            for idx, node in enumerate(level):
                nodes.append(
                    {
                        "level": node.level,
                        "index": idx,
                        "location": node.location.tolist(),
                        "parent": node.parent,
                        "children": list(node.children),
                        "r_neighbors": list(node.r_neighbors),
                        "assigned": node.assigned.tolist(),
                    }
                )
        return {
            "epsilon": self.epsilon,
            "d_max": self.d_max,
            "L": self.L,
            "radii": list(self.radii),
            "neighbor_radii": list(self.neighbor_radii),
            "seed": self.seed,
            "lloyd_averaging": self.lloyd_averaging,
            "voronoi_repartition": self.voronoi_repartition,
            "nodes": nodes,
        }


@dataclass(frozen=True)
class InducingSet:
    points: np.ndarray  # (M, d)
    provenance: dict

    def __post_init__(self):
        pts = _as_points(self.points)
        object.__setattr__(self, "points", pts)

    @property
    def m(self) -> int:
        return self.points.shape[0]

    def to_json(self) -> dict:
        return {"points": self.points.tolist(), "provenance": dict(self.provenance)}

    @staticmethod
    def from_json(obj: dict) -> "InducingSet":
        return InducingSet(np.asarray(obj["points"], dtype=float), dict(obj["provenance"]))


class ClusterAssignment(NamedTuple):
    labels: np.ndarray  # (N,) inducing index per datum
    counts: np.ndarray  # (M,) cluster sizes


def _points_of(z: Union[InducingSet, np.ndarray]) -> np.ndarray:
    return z.points if isinstance(z, InducingSet) else _as_points(z)


def build(
    data,
    epsilon: float,
    lloyd_averaging: bool = True,
    voronoi_repartition: bool = True,
    seed: int = 0,
) -> CoverTree:
    """Build the leveled cover tree of the dataset at resolution epsilon.

    Level 0 holds the root at the data mean.  Each subsequent level covers
    the data at half the previous radius; level L has radius exactly
    epsilon.  New node locations are unclaimed data points (or, with
    lloyd_averaging, local averages that keep their distance from existing
    nodes), so every level is separated by more than its radius.  With
    voronoi_repartition each level's assignment is tightened to the nearest
    node among the locally visible candidates.
    """
    X = _as_points(data)
    if not (epsilon > 0.0):
        raise ValueError("epsilon must be positive")
    n, dim = X.shape
    rng = np.random.default_rng(seed)
    # "Arbitrary" data point choices resolve to the lowest rank under one
    # seed-keyed permutation, making trees reproducible.
    rank = np.empty(n, dtype=int)
    rank[rng.permutation(n)] = np.arange(n)

    root_loc = X.mean(axis=0)
    dists_to_root = _cross_distances(X, root_loc[None, :])[:, 0]
    d_max = float(dists_to_root.max())

    if d_max <= epsilon:
        # Degenerate spread: one level-1 node at the mean already covers the
        # data at resolution epsilon, and log2(d_max/eps) is nonpositive.
        return _degenerate_tree(X, epsilon, d_max, root_loc, seed, lloyd_averaging, voronoi_repartition)

    L = max(1, math.ceil(math.log2(d_max / epsilon)))
    # The level-0 radius must dominate d_max in exact float comparison, not
    # merely up to log/exp rounding.
    while math.ldexp(epsilon, L) < d_max:
        L += 1
    radii = [math.ldexp(epsilon, L - ell) for ell in range(L + 1)]
    # Neighbor radius 4 R_ell: the smallest constant multiple that both
    # carries neighbor sets down the levels (a parent of anything within
    # 4 R_ell lies within 2 R_(ell-1) + 2 R_ell = 4 R_(ell-1)) and catches
    # every node able to compete with a new child (within 2.5 R_(ell-1)).
    neighbor_radii = [4.0 * radii[ell] for ell in range(L + 1)]

    root = CoverTreeNode(location=root_loc, level=0, parent=None, r_neighbors=[0], assigned=np.arange(n))
    levels = [[root]]

    for ell in range(1, L + 1):
        R = radii[ell]
        prev = levels[ell - 1]
        pools = [node.assigned.copy() for node in prev]
        children_of: list[list[int]] = [[] for _ in prev]
        new_nodes: list[CoverTreeNode] = []
        new_locs: list[np.ndarray] = []

        for p, parent in enumerate(prev):
            while pools[p].size > 0:
                pool = pools[p]
                zeta_idx = int(pool[np.argmin(rank[pool])])
                zeta = X[zeta_idx]
                if lloyd_averaging:
                    near = _cross_distances(X[pool], zeta[None, :])[:, 0] <= R
                    zeta_avg = X[pool[near]].mean(axis=0)
                    cand_ids = [c for r in parent.r_neighbors for c in children_of[r]]
                    ok_separated = True
                    if cand_ids:
                        cand_locs = np.vstack([new_locs[c] for c in cand_ids])
                        ok_separated = bool(
                            _cross_distances(zeta_avg[None, :], cand_locs)[0].min() > R
                        )
                    # The average of points within R of zeta stays within R of
                    # zeta in exact arithmetic; re-check in floats so the new
                    # node always claims its seed point and the loop advances.
                    covers_seed = bool(_cross_distances(zeta_avg[None, :], zeta[None, :])[0, 0] <= R)
                    if ok_separated and covers_seed:
                        zeta = zeta_avg
                node_loc = np.array(zeta, dtype=float)
                claimed = []
                for r in parent.r_neighbors:
                    rpool = pools[r]
                    if rpool.size == 0:
                        continue
                    within = _cross_distances(X[rpool], node_loc[None, :])[:, 0] <= R
                    if within.any():
                        claimed.append(rpool[within])
                        pools[r] = rpool[~within]
                c = len(new_nodes)
                assigned = np.sort(np.concatenate(claimed)) if claimed else np.empty(0, dtype=int)
                new_nodes.append(CoverTreeNode(location=node_loc, level=ell, parent=p, assigned=assigned))
                new_locs.append(node_loc)
                children_of[p].append(c)
                parent.children.append(c)

        locs = np.vstack(new_locs)
        # R-neighbors: only children of the parent's R-neighbors can be close
        # enough; within that candidate set, keep those inside the radius.
        cand_cache: dict[int, list[int]] = {}
        for p, parent in enumerate(prev):
            cand_cache[p] = sorted(c for r in parent.r_neighbors for c in children_of[r])
        nbr_R = neighbor_radii[ell]
        for c, node in enumerate(new_nodes):
            cand = cand_cache[node.parent]
            d = _cross_distances(node.location[None, :], locs[cand])[0]
            node.r_neighbors = [cand[i] for i in np.flatnonzero(d <= nbr_R)]

        if voronoi_repartition:
            regained: list[list[np.ndarray]] = [[] for _ in new_nodes]
            for r, prev_node in enumerate(prev):
                orig = prev_node.assigned
                if orig.size == 0:
                    continue
                cand = cand_cache[r]
                d = _cross_distances(X[orig], locs[cand])
                nearest = np.argmin(d, axis=1)  # ties resolve to the lowest node index
                for j, c in enumerate(cand):
                    mask = nearest == j
                    if mask.any():
                        regained[c].append(orig[mask])
            for c, node in enumerate(new_nodes):
                node.assigned = (
                    np.sort(np.concatenate(regained[c])) if regained[c] else np.empty(0, dtype=int)
                )

        levels.append(new_nodes)

    return CoverTree(
        epsilon=epsilon,
        d_max=d_max,
        L=L,
        radii=radii,
        neighbor_radii=neighbor_radii,
        levels=levels,
        seed=seed,
        lloyd_averaging=lloyd_averaging,
        voronoi_repartition=voronoi_repartition,
    )


def _degenerate_tree(X, epsilon, d_max, root_loc, seed, lloyd, voronoi) -> CoverTree:
    n = X.shape[0]
    L = 1
    radii = [math.ldexp(epsilon, 1), epsilon]
    neighbor_radii = [4.0 * radii[0], 4.0 * radii[1]]
    root = CoverTreeNode(location=root_loc, level=0, parent=None, children=[0], r_neighbors=[0], assigned=np.arange(n))
    only = CoverTreeNode(location=root_loc.copy(), level=1, parent=0, r_neighbors=[0], assigned=np.arange(n))
    return CoverTree(
        epsilon=epsilon,
        d_max=d_max,
        L=L,
        radii=radii,
        neighbor_radii=neighbor_radii,
        levels=[[root], [only]],
        seed=seed,
        lloyd_averaging=lloyd,
        voronoi_repartition=voronoi,
    )


def inducing_points(tree: CoverTree, level: Optional[int] = None) -> InducingSet:
    """Locations of all nodes at the given level (deepest level by default)."""
    if level is None:
        level = tree.L
    if not 0 <= level <= tree.L:
        raise ValueError(f"level must be in [0, {tree.L}], got {level}")
    return InducingSet(
        tree.level_locations(level),
        {"method": "covertree", "level": level, "epsilon": tree.epsilon, "seed": tree.seed},
    )


def separation(points: Union[InducingSet, np.ndarray]) -> float:
    """Minimum pairwise distance; +inf for a single point."""
    P = _points_of(points)
    m = P.shape[0]
    if m == 1:
        return math.inf
    best = math.inf
    for i0 in range(0, m, _BLOCK):
        block = P[i0 : i0 + _BLOCK]
        d = _cross_distances(block, P)
        for r in range(block.shape[0]):
            d[r, i0 + r] = math.inf
        best = min(best, float(d.min()))
    return best


def spatial_resolution(data, points: Union[InducingSet, np.ndarray]) -> float:
    """Maximum over the data of the distance to the nearest given point."""
    X = _as_points(data)
    P = _points_of(points)
    worst = 0.0
    for i0 in range(0, X.shape[0], _BLOCK):
        d = _cross_distances(X[i0 : i0 + _BLOCK], P)
        worst = max(worst, float(d.min(axis=1).max()))
    return worst


def cluster_assign(data, z: Union[InducingSet, np.ndarray]) -> ClusterAssignment:
    """Nearest-inducing-point labels and cluster sizes; ties pick the lowest index."""
    X = _as_points(data)
    P = _points_of(z)
    labels = np.empty(X.shape[0], dtype=int)
    for i0 in range(0, X.shape[0], _BLOCK):
        d = _cross_distances(X[i0 : i0 + _BLOCK], P)
        labels[i0 : i0 + d.shape[0]] = np.argmin(d, axis=1)
    counts = np.bincount(labels, minlength=P.shape[0])
    return ClusterAssignment(labels, counts)


def select_uniform(data, M: int, seed: int) -> InducingSet:
    """M distinct data points, sampled uniformly without replacement."""
    X = _as_points(data)
    n = X.shape[0]
    if not 1 <= M <= n:
        raise ValueError(f"M must be in [1, {n}], got {M}")
    idx = np.sort(np.random.default_rng(seed).choice(n, size=M, replace=False))
    return InducingSet(X[idx], {"method": "uniform", "seed": seed, "indices": idx.tolist()})


def select_kmeans(data, M: int, iters: int, seed: int) -> InducingSet:
    """Lloyd's K-means from a uniform-without-replacement initialization."""
    X = _as_points(data)
    n = X.shape[0]
    if not 1 <= M <= n:
        raise ValueError(f"M must be in [1, {n}], got {M}")
    centroids = np.array(select_uniform(X, M, seed).points)
    labels = cluster_assign(X, centroids).labels
    for _ in range(iters):
        for j in range(M):
            mask = labels == j
            if mask.any():  # empty clusters keep their previous centroid
                centroids[j] = X[mask].mean(axis=0)
        new_labels = cluster_assign(X, centroids).labels
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return InducingSet(centroids, {"method": "kmeans", "seed": seed, "iters": iters})
