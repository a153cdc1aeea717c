"""Balanced Gaussian search tree for fast component selection.

Built offline by repeatedly clustering the mixture components into
near-equal groups under the symmetric Kullback-Leibler divergence and
collapsing each group into a single zero-mean Gaussian (weights add,
covariances combine as the weight-normalized average).  At runtime a patch
descends from the root, scoring only the children of the current node, so
selection costs O(P * rank * log K) instead of O(P * rank * K).

Collapsed covariances are propagated as dense averages from the previous
level (never from the flattened snapshots), so the covariance stored at any
node equals, before flattening, the exact mixture covariance of the leaves
below it.

Tree file format (little-endian):

    magic      8 bytes  b"FEPLLTR1"
    node_count u32
    patch_dim  u32
    then per node in breadth-first order:
        component payload as in the model format
            (weight f64, rank u32, tail f64, eigenvalues, column-major basis)
        child_count  u32
        children     child_count * u32 (BFS indices)
        leaf_index   i32 (-1 for internal nodes)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .gmm import (
    Eigenbasis,
    FlatTailComponent,
    GmmModel,
    ScoreContext,
    eigen_from_covariance,
    flatten_component,
    score_flat_cost,
)
from .model_io import _read_component, _read_exact, _write_component

__all__ = [
    "TREE_MAGIC",
    "TreeNode",
    "GmmTree",
    "symmetric_kl",
    "pairwise_symmetric_kl",
    "clustering_objective",
    "balanced_cluster",
    "collapse",
    "auto_level_sizes",
    "build_tree",
    "tree_select",
    "tree_write",
    "tree_read",
]

TREE_MAGIC = b"FEPLLTR1"


# ---------------------------------------------------------------------------
# symmetric KL divergence
# ---------------------------------------------------------------------------

def _cov_and_inv(comp: FlatTailComponent) -> tuple[np.ndarray, np.ndarray]:
    P = comp.patch_dim
    spectrum_min = comp.kept_eigenvalues[-1] if comp.rank == P else \
        min(comp.tail_value, comp.kept_eigenvalues[-1] if comp.rank else comp.tail_value)
    if spectrum_min <= 0:
        raise DataError("singular covariance: symmetric KL undefined")
    cov = comp.covariance()
    U = comp.kept_basis
    if comp.rank == P:
        inv = (U / comp.kept_eigenvalues) @ U.T
    else:
        inv = (U * (1.0 / comp.kept_eigenvalues - 1.0 / comp.tail_value)) @ U.T
        inv += np.eye(P) / comp.tail_value
    return cov, inv


def symmetric_kl(c1: FlatTailComponent, c2: FlatTailComponent) -> float:
    """0.5 * Tr(C2^-1 C1 + C1^-1 C2 - 2 I); zero iff the covariances agree."""
    if c1.patch_dim != c2.patch_dim:
        raise DataError("components have different patch_dim")
    cov1, inv1 = _cov_and_inv(c1)
    cov2, inv2 = _cov_and_inv(c2)
    t12 = float(np.einsum("ij,ji->", inv2, cov1))
    t21 = float(np.einsum("ij,ji->", inv1, cov2))
    return 0.5 * (t12 + t21) - c1.patch_dim


def pairwise_symmetric_kl(components: Sequence[FlatTailComponent]) -> np.ndarray:
    """(K, K) symmetric KL matrix, zero diagonal."""
    covs = np.stack([_cov_and_inv(c)[0] for c in components])
    invs = np.stack([_cov_and_inv(c)[1] for c in components])
    t = np.einsum("aij,bji->ab", invs, covs)  # t[a, b] = Tr(Ca^-1 Cb)
    P = components[0].patch_dim
    kl = 0.5 * (t + t.T) - P
    np.fill_diagonal(kl, 0.0)
    return kl


# ---------------------------------------------------------------------------
# balanced clustering
# ---------------------------------------------------------------------------

def clustering_objective(divergences: np.ndarray,
                         partition: Sequence[np.ndarray]) -> float:
    """Sum over clusters of all ordered within-cluster divergences."""
    total = 0.0
    for members in partition:
        sub = divergences[np.ix_(members, members)]
        total += float(sub.sum())
    return total


def _cluster_medoid(divergences: np.ndarray, members: list[int]) -> int:
    sub = divergences[np.ix_(members, members)]
    return members[int(np.argmin(sub.sum(axis=1)))]


def balanced_cluster(components: Sequence[FlatTailComponent], n_clusters: int,
                     min_size: int, seed: int = 0, sweeps: int = 200,
                     divergences: np.ndarray | None = None) -> list[np.ndarray]:
    """Partition components into near-equal clusters with small
    within-cluster symmetric KL.

    Greedy balanced assignment (the smallest cluster repeatedly claims the
    unassigned component closest to its medoid) followed by pairwise-swap
    local search, at most ``sweeps`` passes.  Cluster sizes come out within
    one of each other, so every cluster has at least floor(n / L) members.
    """
    n = len(components)
    if n_clusters < 1:
        raise DataError("need at least one cluster")
    if n_clusters * min_size > n:
        raise DataError(f"cannot split {n} components into {n_clusters} "
                        f"clusters of at least {min_size}")
    if n // n_clusters < min_size:
        raise DataError(f"balanced clusters of {n} components into "
                        f"{n_clusters} groups violate min_size {min_size}")
    if divergences is None:
        divergences = pairwise_symmetric_kl(components)
    D = divergences
    rng = np.random.default_rng(seed)

    # farthest-first medoid seeding
    medoids = [int(rng.integers(n))]
    gap = D[medoids[0]].copy()
    while len(medoids) < n_clusters:
        gap[medoids] = -np.inf
        medoids.append(int(np.argmax(gap)))
        gap = np.minimum(gap, D[medoids[-1]])

    clusters: list[list[int]] = [[m] for m in medoids]
    assigned = np.zeros(n, dtype=bool)
    assigned[medoids] = True
    while not assigned.all():
        sizes = [len(c) for c in clusters]
        target = int(np.argmin(sizes))
        medoid = _cluster_medoid(D, clusters[target])
        dist = D[medoid].copy()
        dist[assigned] = np.inf
        pick = int(np.argmin(dist))
        clusters[target].append(pick)
        assigned[pick] = True

    # pairwise-swap local search on the within-cluster divergence objective
    cid = np.empty(n, dtype=np.int64)
    for l, members in enumerate(clusters):
        cid[members] = l
    rowsum = np.zeros((n, n_clusters))
    for l, members in enumerate(clusters):
        rowsum[:, l] = D[:, members].sum(axis=1)
    for _ in range(sweeps):
        improved = False
        for i in range(n):
            for j in range(i + 1, n):
                a, b = cid[i], cid[j]
                if a == b:
                    continue
                delta = 2.0 * (rowsum[i, b] - rowsum[i, a]
                               + rowsum[j, a] - rowsum[j, b]
                               - 2.0 * D[i, j])
                if delta < -1e-12:
                    cid[i], cid[j] = b, a
                    rowsum[:, a] += D[:, j] - D[:, i]
                    rowsum[:, b] += D[:, i] - D[:, j]
                    improved = True
        if not improved:
            break

    return [np.sort(np.where(cid == l)[0]) for l in range(n_clusters)]


def collapse(components: Sequence[FlatTailComponent],
             partition: Sequence[np.ndarray], rho: float) -> list[FlatTailComponent]:
    """Combine each cluster into one component: weights add, the covariance
    is the weight-normalized average of the dense reconstructions,
    re-eigendecomposed and flattened at ``rho``."""
    seen = np.zeros(len(components), dtype=bool)
    out = []
    for members in partition:
        members = np.asarray(members, dtype=np.int64)
        if members.size == 0:
            raise DataError("empty cluster in partition")
        if seen[members].any():
            raise DataError("partition reuses a component")
        seen[members] = True
        w = float(sum(components[k].weight for k in members))
        if w <= 0:
            raise DataError("zero-weight cluster")
        cov = np.zeros((components[0].patch_dim,) * 2)
        for k in members:
            cov += components[k].weight * components[k].covariance()
        cov /= w
        out.append(flatten_component(w, eigen_from_covariance(cov), rho))
    if not seen.all():
        raise DataError("partition does not cover every component")
    return out


# ---------------------------------------------------------------------------
# tree structure
# ---------------------------------------------------------------------------

@dataclass
class TreeNode:
    component: FlatTailComponent
    children: list["TreeNode"] = field(default_factory=list)
    leaf_index: int | None = None
    # dense covariance accumulated during construction (not serialized)
    dense_cov: np.ndarray | None = None

    @property
    def is_leaf(self) -> bool:
        return not self.children


@dataclass
class GmmTree:
    root: TreeNode
    level_sizes: tuple[int, ...]  # widths from the root level down to leaves
    patch_dim: int

    def bfs_nodes(self) -> list[TreeNode]:
        order = [self.root]
        i = 0
        while i < len(order):
            order.extend(order[i].children)
            i += 1
        return order

    def bfs_components(self) -> list[FlatTailComponent]:
        return [node.component for node in self.bfs_nodes()]

    def leaves(self) -> list[TreeNode]:
        return [node for node in self.bfs_nodes() if node.is_leaf]

    @property
    def n_leaves(self) -> int:
        return self.level_sizes[-1]

    @property
    def depth(self) -> int:
        return len(self.level_sizes) - 1

    def make_context(self, beta: float) -> ScoreContext:
        return ScoreContext(self.bfs_components(), beta)

    def validate(self, tol: float = 1e-10) -> None:
        nodes = self.bfs_nodes()
        widths: dict[int, int] = {}
        depths = {id(self.root): 0}
        leaf_ids = []
        for node in nodes:
            d = depths[id(node)]
            widths[d] = widths.get(d, 0) + 1
            node.component.validate(tol)
            if node.component.patch_dim != self.patch_dim:
                raise DataError("tree node patch_dim mismatch")
            if node.is_leaf:
                if node.leaf_index is None:
                    raise DataError("leaf node without leaf_index")
                leaf_ids.append(node.leaf_index)
            else:
                if node.leaf_index is not None:
                    raise DataError("internal node carries a leaf_index")
                if len(node.children) < 2:
                    raise DataError("internal node with fewer than 2 children")
                wsum = sum(c.component.weight for c in node.children)
                if abs(wsum - node.component.weight) > 1e-12:
                    raise DataError(f"node weight {node.component.weight!r} != "
                                    f"children sum {wsum!r}")
                for child in node.children:
                    depths[id(child)] = d + 1
        if sorted(leaf_ids) != list(range(len(leaf_ids))):
            raise DataError("leaf indices are not a permutation of "
                            f"0..{len(leaf_ids) - 1}")
        expected = tuple(widths[d] for d in sorted(widths))
        if expected != self.level_sizes:
            raise DataError(f"recorded level sizes {self.level_sizes} != "
                            f"actual {expected}")
        if abs(self.root.component.weight - 1.0) > 1e-12:
            raise DataError("root weight differs from 1")


def auto_level_sizes(n_components: int) -> tuple[int, ...]:
    """Default level widths: halving powers of two from the largest power
    that is at most K/2 (so every cluster can hold >= 2 members)."""
    if n_components < 2:
        return ()
    top = 1
    while top * 2 <= n_components // 2:
        top *= 2
    sizes = []
    while top >= 1:
        sizes.append(top)
        top //= 2
    return tuple(sizes)


def build_tree(model: GmmModel, level_sizes: Sequence[int] | None = None,
               rho: float | None = None, seed: int = 0) -> GmmTree:
    """Collapse the mixture level by level into a search tree.

    ``level_sizes`` lists the widths of the collapsed levels from just above
    the leaves down to 1 (the root), e.g. (64, 32, 16, 8, 4, 2, 1).  The
    leaf-adjacent clustering enforces clusters of at least 3 when feasible;
    all other levels use at least 2 (so the tree stays near-binary).
    """
    model.validate()
    K = model.n_components
    if level_sizes is None:
        level_sizes = auto_level_sizes(K)
    level_sizes = tuple(int(s) for s in level_sizes)
    if K == 1:
        if level_sizes:
            raise DataError("a single-component model admits only an empty level list")
        leaf = TreeNode(model.components[0], leaf_index=0,
                        dense_cov=model.components[0].covariance())
        return GmmTree(leaf, (1,), model.patch_dim)
    if not level_sizes or level_sizes[-1] != 1:
        raise DataError("level_sizes must end at 1")
    if level_sizes[0] >= K:
        raise DataError(f"first level size {level_sizes[0]} must be below K={K}")
    if any(a <= b for a, b in zip(level_sizes, level_sizes[1:])):
        raise DataError("level_sizes must be strictly decreasing")
    if rho is None:
        rho = model.rho

    nodes = [TreeNode(comp, leaf_index=k, dense_cov=comp.covariance())
             for k, comp in enumerate(model.components)]
    for depth_i, width in enumerate(level_sizes):
        comps = [node.component for node in nodes]
        min_size = 3 if depth_i == 0 and 3 * width <= len(nodes) else 2
        partition = balanced_cluster(comps, width, min_size, seed=seed + depth_i)
        next_nodes = []
        for members in partition:
            w = float(sum(comps[k].weight for k in members))
            dense = np.zeros((model.patch_dim,) * 2)
            for k in members:
                dense += comps[k].weight * nodes[k].dense_cov
            dense /= w
            comp = flatten_component(w, eigen_from_covariance(dense), rho)
            next_nodes.append(TreeNode(comp,
                                       children=[nodes[k] for k in members],
                                       dense_cov=dense))
        nodes = next_nodes

    tree = GmmTree(nodes[0], (*reversed(level_sizes), K), model.patch_dim)
    tree.validate()
    return tree


# ---------------------------------------------------------------------------
# descent
# ---------------------------------------------------------------------------

def tree_select(tree: GmmTree, patches: np.ndarray, ctx: ScoreContext,
                with_counters: bool = False):
    """Leaf (original component) index per patch by greedy best-child descent.

    ``ctx`` must be built over the tree's BFS components
    (``tree.make_context(beta)``).  With ``with_counters`` the per-patch
    number of score evaluations and multiply count are returned as well.
    """
    nodes = tree.bfs_nodes()
    if len(ctx.components) != len(nodes):
        raise DataError("score context does not match the tree (build it "
                        "with tree.make_context)")
    index_of = {id(node): i for i, node in enumerate(nodes)}
    children_idx = [np.array([index_of[id(c)] for c in node.children], dtype=np.int64)
                    for node in nodes]
    leaf_index = np.array([-1 if node.leaf_index is None else node.leaf_index
                           for node in nodes], dtype=np.int64)

    patches = np.asarray(patches, dtype=np.float64)
    single = patches.ndim == 1
    if single:
        patches = patches[None, :]
    n = patches.shape[0]
    sq = np.einsum("ij,ij->i", patches, patches)

    current = np.zeros(n, dtype=np.int64)
    evals = np.zeros(n, dtype=np.int64)
    mults = np.full(n, tree.patch_dim, dtype=np.int64)  # ||z||^2, shared
    active = leaf_index[current] < 0
    while active.any():
        for u in np.unique(current[active]):
            kids = children_idx[u]
            sel = np.where(active & (current == u))[0]
            scores = np.empty((sel.size, kids.size))
            cost = 0
            for j, k in enumerate(kids):
                scores[:, j] = ctx.score_flat(int(k), patches[sel], sq[sel])
                cost += score_flat_cost(ctx.components[int(k)].rank, tree.patch_dim)
            current[sel] = kids[np.argmin(scores, axis=1)]
            evals[sel] += kids.size
            mults[sel] += cost
        active = leaf_index[current] < 0

    leaves = leaf_index[current]
    if single:
        return (int(leaves[0]), int(evals[0]), int(mults[0])) if with_counters \
            else int(leaves[0])
    return (leaves, evals, mults) if with_counters else leaves


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def tree_write(tree: GmmTree, path: str | Path) -> None:
    tree.validate()
    nodes = tree.bfs_nodes()
    index_of = {id(node): i for i, node in enumerate(nodes)}
    with open(path, "wb") as fh:
        fh.write(TREE_MAGIC)
        fh.write(struct.pack("<II", len(nodes), tree.patch_dim))
        for node in nodes:
            _write_component(fh, node.component)
            kids = [index_of[id(c)] for c in node.children]
            fh.write(struct.pack("<I", len(kids)))
            if kids:
                fh.write(struct.pack(f"<{len(kids)}I", *kids))
            leaf = -1 if node.leaf_index is None else node.leaf_index
            fh.write(struct.pack("<i", leaf))


def tree_read(path: str | Path) -> GmmTree:
    with open(path, "rb") as fh:
        magic = fh.read(len(TREE_MAGIC))
        if magic != TREE_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}; not a tree file")
        n_nodes, patch_dim = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if n_nodes == 0 or patch_dim == 0:
            raise DataError(f"{path}: empty tree header")
        nodes: list[TreeNode] = []
        child_lists: list[list[int]] = []
        for i in range(n_nodes):
            comp = _read_component(fh, patch_dim, i)
            (n_child,) = struct.unpack("<I", _read_exact(fh, 4, f"node {i} child count"))
            kids = list(struct.unpack(f"<{n_child}I",
                                      _read_exact(fh, 4 * n_child, f"node {i} children"))) \
                if n_child else []
            (leaf,) = struct.unpack("<i", _read_exact(fh, 4, f"node {i} leaf index"))
            nodes.append(TreeNode(comp, leaf_index=None if leaf < 0 else leaf))
            child_lists.append(kids)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after last node")

    referenced = np.zeros(n_nodes, dtype=int)
    for i, kids in enumerate(child_lists):
        for j in kids:
            if j <= i or j >= n_nodes:
                raise DataError(f"{path}: node {i} references invalid child {j}")
            referenced[j] += 1
        nodes[i].children = [nodes[j] for j in kids]
    if referenced[0] != 0 or np.any(referenced[1:] != 1):
        raise DataError(f"{path}: nodes must form a single rooted tree")

    depths = np.zeros(n_nodes, dtype=int)
    for i, kids in enumerate(child_lists):
        for j in kids:
            depths[j] = depths[i] + 1
    widths = tuple(int((depths == d).sum()) for d in range(depths.max() + 1))
    tree = GmmTree(nodes[0], widths, patch_dim)
    tree.validate()
    return tree
