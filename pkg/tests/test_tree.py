"""Balanced search tree: KL divergence, clustering, collapse, descent, I/O."""

import itertools

import numpy as np
import pytest
from conftest import (
    grouped_model,
    random_spd,
    sample_from_component,
    sample_from_model,
    synthetic_model,
)

from fepll.errors import DataError
from fepll.gmm import (
    FlatTailComponent,
    ScoreContext,
    component_from_eigen,
    eigen_from_covariance,
    select_exhaustive,
)
from fepll.tree import (
    auto_level_sizes,
    balanced_cluster,
    build_tree,
    clustering_objective,
    collapse,
    pairwise_symmetric_kl,
    symmetric_kl,
    tree_read,
    tree_select,
    tree_write,
)


def _comp(cov, weight=1.0):
    return component_from_eigen(weight, eigen_from_covariance(cov))


class TestSymmetricKl:
    def test_zero_for_equal(self):
        rng = np.random.default_rng(0)
        c = _comp(random_spd(rng, 6))
        assert symmetric_kl(c, c) <= 1e-10

    def test_closed_form_diagonal(self):
        c1 = _comp(np.diag([2.0, 1.0]))
        c2 = _comp(np.diag([1.0, 2.0]))
        # 0.5 * (Tr(diag(2, .5)) + Tr(diag(.5, 2)) - 4) = 0.5
        assert abs(symmetric_kl(c1, c2) - 0.5) < 1e-12

    def test_symmetry_exact(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = _comp(random_spd(rng, 8))
            b = _comp(random_spd(rng, 8))
            assert symmetric_kl(a, b) == symmetric_kl(b, a)
            assert symmetric_kl(a, b) >= 0.0

    def test_matches_dense_inverse_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            cov1, cov2 = random_spd(rng, 8), random_spd(rng, 8)
            oracle = 0.5 * np.trace(np.linalg.inv(cov2) @ cov1
                                    + np.linalg.inv(cov1) @ cov2
                                    - 2 * np.eye(8))
            ours = symmetric_kl(_comp(cov1), _comp(cov2))
            assert abs(ours - oracle) < 1e-8

    def test_flat_components_use_reconstruction(self):
        rng = np.random.default_rng(3)
        from fepll.gmm import flatten_component
        a = flatten_component(1.0, eigen_from_covariance(random_spd(rng, 10)), 0.9)
        b = flatten_component(1.0, eigen_from_covariance(random_spd(rng, 10)), 0.9)
        oracle = 0.5 * np.trace(np.linalg.inv(b.covariance()) @ a.covariance()
                                + np.linalg.inv(a.covariance()) @ b.covariance()
                                - 2 * np.eye(10))
        assert abs(symmetric_kl(a, b) - oracle) < 1e-8

    def test_singular_rejected(self):
        sing = FlatTailComponent(1.0, np.zeros((4, 0)), np.zeros(0), 0.0)
        ok = _comp(np.eye(4))
        with pytest.raises(DataError):
            symmetric_kl(sing, ok)

    def test_pairwise_matrix(self):
        model = synthetic_model(5, 8, seed=4)
        D = pairwise_symmetric_kl(model.components)
        assert D.shape == (5, 5)
        np.testing.assert_allclose(D, D.T, atol=1e-9)
        assert np.abs(np.diag(D)).max() <= 1e-10
        for i, j in ((0, 1), (2, 4)):
            assert abs(D[i, j] - symmetric_kl(model.components[i],
                                              model.components[j])) < 1e-8


class TestBalancedCluster:
    def test_singletons(self):
        model = synthetic_model(4, 6, seed=5)
        part = balanced_cluster(model.components, 4, 1, seed=0)
        assert sorted(int(p[0]) for p in part) == [0, 1, 2, 3]
        D = pairwise_symmetric_kl(model.components)
        assert clustering_objective(D, part) == 0.0

    def test_recovers_obvious_pairs(self):
        rng = np.random.default_rng(6)
        base1, base2 = random_spd(rng, 6), random_spd(rng, 6) * 20.0
        comps = [_comp(base1, 0.25), _comp(base2, 0.25),
                 _comp(base1 + 1e-4 * np.eye(6), 0.25),
                 _comp(base2 + 1e-3 * np.eye(6), 0.25)]
        D = pairwise_symmetric_kl(comps)
        # exhaustive oracle over the three pairings of four items
        best, best_obj = None, np.inf
        for pairing in ([(0, 1), (2, 3)], [(0, 2), (1, 3)], [(0, 3), (1, 2)]):
            obj = clustering_objective(D, [np.array(p) for p in pairing])
            if obj < best_obj:
                best, best_obj = pairing, obj
        assert best == [(0, 2), (1, 3)]
        part = balanced_cluster(comps, 2, 2, seed=0)
        got = sorted(tuple(int(i) for i in p) for p in part)
        assert got == sorted(best)
        assert abs(clustering_objective(D, part) - best_obj) < 1e-12

    def test_sizes_balanced_200_into_64(self):
        model = synthetic_model(200, 16, seed=7)
        part = balanced_cluster(model.components, 64, 2, seed=0, sweeps=20)
        sizes = sorted(len(p) for p in part)
        assert set(sizes) <= {2, 3, 4}
        assert sum(sizes) == 200
        flat = np.sort(np.concatenate(part))
        np.testing.assert_array_equal(flat, np.arange(200))

    def test_beats_random_balanced_partitions(self):
        model = synthetic_model(24, 12, seed=8)
        D = pairwise_symmetric_kl(model.components)
        part = balanced_cluster(model.components, 6, 2, seed=0)
        ours = clustering_objective(D, part)
        rng = np.random.default_rng(99)
        rand_objs = []
        for _ in range(20):
            perm = rng.permutation(24)
            rand = [perm[i::6] for i in range(6)]
            rand_objs.append(clustering_objective(D, rand))
        assert ours <= np.mean(rand_objs)

    def test_infeasible_rejected(self):
        model = synthetic_model(5, 6, seed=9)
        with pytest.raises(DataError):
            balanced_cluster(model.components, 3, 2, seed=0)


class TestCollapse:
    def test_singletons_identity(self):
        model = synthetic_model(3, 8, seed=10).flatten(0.9)
        part = [np.array([k]) for k in range(3)]
        out = collapse(model.components, part, rho=0.9)
        for a, b in zip(model.components, out):
            assert a.rank == b.rank
            assert abs(a.weight - b.weight) < 1e-15
            np.testing.assert_allclose(a.covariance(), b.covariance(), atol=1e-10)

    def test_equal_weight_average(self):
        comps = [_comp(np.diag([2.0, 2.0]), 0.5), _comp(np.diag([4.0, 4.0]), 0.5)]
        out = collapse(comps, [np.array([0, 1])], rho=1.0)
        assert len(out) == 1
        np.testing.assert_allclose(out[0].covariance(), np.diag([3.0, 3.0]),
                                   atol=1e-12)
        assert abs(out[0].weight - 1.0) < 1e-15

    def test_matches_weighted_average_oracle(self):
        model = synthetic_model(6, 8, seed=11)
        part = [np.array([0, 2, 4]), np.array([1, 3, 5])]
        out = collapse(model.components, part, rho=1.0)
        for members, comp in zip(part, out):
            w = sum(model.components[k].weight for k in members)
            oracle = sum(model.components[k].weight * model.components[k].covariance()
                         for k in members) / w
            np.testing.assert_allclose(comp.covariance(), oracle, atol=1e-10)

    def test_incomplete_partition_rejected(self):
        model = synthetic_model(3, 4, seed=12)
        with pytest.raises(DataError):
            collapse(model.components, [np.array([0, 1])], rho=1.0)


class TestBuildTree:
    def test_two_leaves(self):
        model = synthetic_model(2, 6, seed=13)
        tree = build_tree(model, (1,), seed=0)
        assert tree.level_sizes == (1, 2)
        assert len(tree.root.children) == 2
        assert sorted(n.leaf_index for n in tree.root.children) == [0, 1]

    def test_binary_tree_from_eight(self):
        model = synthetic_model(8, 8, seed=14)
        tree = build_tree(model, (4, 2, 1), seed=0)
        assert tree.level_sizes == (1, 2, 4, 8)
        assert tree.depth == 3
        for node in tree.bfs_nodes():
            if not node.is_leaf:
                assert len(node.children) == 2

    def test_auto_levels(self):
        assert auto_level_sizes(200) == (64, 32, 16, 8, 4, 2, 1)
        assert auto_level_sizes(20) == (8, 4, 2, 1)
        assert auto_level_sizes(8) == (4, 2, 1)
        assert auto_level_sizes(2) == (1,)
        assert auto_level_sizes(1) == ()

    def test_leaf_adjacent_min_size_three_when_feasible(self):
        model = synthetic_model(30, 8, seed=15)
        tree = build_tree(model, (10, 4, 2, 1), seed=0)
        widths = tree.level_sizes
        assert widths == (1, 2, 4, 10, 30)
        leaf_parents = [n for n in tree.bfs_nodes()
                        if n.children and n.children[0].is_leaf]
        assert all(len(n.children) >= 3 for n in leaf_parents)

    def test_weight_conservation_everywhere(self):
        model = synthetic_model(12, 8, seed=16).flatten(0.9)
        tree = build_tree(model, (4, 2, 1), seed=0)
        assert abs(tree.root.component.weight - 1.0) <= 1e-12
        for node in tree.bfs_nodes():
            if not node.is_leaf:
                wsum = sum(c.component.weight for c in node.children)
                assert abs(node.component.weight - wsum) <= 1e-12

    def test_dense_chain_matches_children(self):
        model = synthetic_model(12, 8, seed=17).flatten(0.9)
        tree = build_tree(model, (4, 2, 1), seed=0)
        for node in tree.bfs_nodes():
            if node.is_leaf:
                continue
            w = node.component.weight
            oracle = sum(c.component.weight * c.dense_cov
                         for c in node.children) / w
            np.testing.assert_allclose(node.dense_cov, oracle, atol=1e-12)

    def test_root_equals_mixture_covariance_before_flattening(self):
        model = synthetic_model(12, 8, seed=18).flatten(0.9)
        tree = build_tree(model, (4, 2, 1), seed=0)
        np.testing.assert_allclose(tree.root.dense_cov,
                                   model.mixture_covariance(), atol=1e-8)

    def test_unflattened_tree_nodes_store_dense(self):
        model = synthetic_model(8, 8, seed=19)
        tree = build_tree(model, (4, 2, 1), rho=1.0, seed=0)
        for node in tree.bfs_nodes():
            np.testing.assert_allclose(node.component.covariance(),
                                       node.dense_cov, atol=1e-8)

    def test_single_component_model(self):
        model = synthetic_model(1, 4, seed=20)
        tree = build_tree(model, seed=0)
        assert tree.level_sizes == (1,)
        assert tree.root.is_leaf and tree.root.leaf_index == 0

    def test_invalid_levels_rejected(self):
        model = synthetic_model(8, 4, seed=21)
        for levels in ((8, 4, 2, 1), (2, 4, 1), (4, 2)):
            with pytest.raises(DataError):
                build_tree(model, levels, seed=0)


class TestTreeSelect:
    def test_single_leaf(self):
        model = synthetic_model(1, 4, seed=22)
        tree = build_tree(model, seed=0)
        ctx = tree.make_context(beta=2.0)
        k, evals, _ = tree_select(tree, np.ones(4), ctx, with_counters=True)
        assert k == 0 and evals == 0

    def test_prefers_generating_component(self):
        model = grouped_model(2, 1, 16, seed=23)  # two very different comps
        tree = build_tree(model, (1,), seed=0)
        rng = np.random.default_rng(23)
        beta = 50.0
        ctx = tree.make_context(beta)
        samples = sample_from_component(rng, model.components[0], 1000)
        ks = tree_select(tree, samples, ctx)
        assert (ks == 0).mean() >= 0.95

    def test_agreement_with_exhaustive_on_grouped_model(self):
        model = grouped_model(8, 2, 16, seed=24)
        D = pairwise_symmetric_kl(model.components)
        within, between = [], []
        for i in range(16):
            for j in range(i + 1, 16):
                (within if i // 2 == j // 2 else between).append(D[i, j])
        assert min(between) >= 10 * max(within)

        tree = build_tree(model, (8, 4, 2, 1), seed=0)
        rng = np.random.default_rng(24)
        patches, _ = sample_from_model(rng, model, 1000)
        beta = 30.0
        ks_tree = tree_select(tree, patches, tree.make_context(beta))
        ks_ex = select_exhaustive(ScoreContext(model.components, beta), patches)
        assert (ks_tree == ks_ex).mean() >= 0.90

    def test_descent_deterministic(self):
        model = synthetic_model(8, 8, seed=25)
        tree = build_tree(model, (4, 2, 1), seed=0)
        ctx = tree.make_context(beta=7.0)
        z = np.random.default_rng(25).standard_normal(8)
        assert tree_select(tree, z, ctx) == tree_select(tree, z, ctx)

    def test_eval_counters_bounded(self):
        model = synthetic_model(20, 16, seed=26)
        tree = build_tree(model, seed=0)  # levels (8, 4, 2, 1)
        rng = np.random.default_rng(26)
        patches = rng.standard_normal((200, 16)) * 0.3
        ctx = tree.make_context(beta=10.0)
        _, evals, _ = tree_select(tree, patches, ctx, with_counters=True)
        level_nodes: dict[int, list] = {}
        depth = {id(tree.root): 0}
        for node in tree.bfs_nodes():
            level_nodes.setdefault(depth[id(node)], []).append(node)
            for c in node.children:
                depth[id(c)] = depth[id(node)] + 1
        branching_sum = sum(max(len(n.children) for n in nodes)
                            for nodes in level_nodes.values() if
                            any(n.children for n in nodes))
        assert np.all(evals <= 2 + branching_sum)
        assert np.all(evals <= 4 * tree.depth)
        assert np.all(evals < model.n_components)

    def test_context_mismatch_rejected(self):
        model = synthetic_model(8, 8, seed=27)
        tree = build_tree(model, (4, 2, 1), seed=0)
        wrong = ScoreContext(model.components, beta=1.0)
        with pytest.raises(DataError):
            tree_select(tree, np.ones(8), wrong)


class TestTreeIo:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = synthetic_model(12, 9, seed=28).flatten(0.9)
        tree = build_tree(model, (4, 2, 1), seed=0)
        path = tmp_path / "t.tree"
        tree_write(tree, path)
        back = tree_read(path)
        assert back.level_sizes == tree.level_sizes
        assert back.patch_dim == tree.patch_dim
        for a, b in zip(tree.bfs_nodes(), back.bfs_nodes()):
            assert a.leaf_index == b.leaf_index
            assert len(a.children) == len(b.children)
            assert a.component.weight == b.component.weight
            assert a.component.tail_value == b.component.tail_value
            np.testing.assert_array_equal(a.component.kept_eigenvalues,
                                          b.component.kept_eigenvalues)
            np.testing.assert_array_equal(a.component.kept_basis,
                                          b.component.kept_basis)
        # selection behaves identically after the round trip
        rng = np.random.default_rng(28)
        patches = rng.standard_normal((50, 9))
        np.testing.assert_array_equal(
            tree_select(tree, patches, tree.make_context(5.0)),
            tree_select(back, patches, back.make_context(5.0)))

    def test_truncated_rejected(self, tmp_path):
        model = synthetic_model(4, 4, seed=29)
        tree = build_tree(model, (2, 1), seed=0)
        path = tmp_path / "t.tree"
        tree_write(tree, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 10])
        with pytest.raises(DataError):
            tree_read(path)

    def test_duplicate_leaf_index_rejected(self, tmp_path):
        model = synthetic_model(4, 4, seed=30)
        tree = build_tree(model, (2, 1), seed=0)
        path = tmp_path / "t.tree"
        tree_write(tree, path)
        blob = bytearray(path.read_bytes())
        # the trailing i32 of the file is the last leaf's index; duplicate
        # another leaf's index there
        blob[-4:] = (0).to_bytes(4, "little", signed=True)
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="permutation"):
            tree_read(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "t.tree"
        path.write_bytes(b"NOTATREE" + b"\0" * 16)
        with pytest.raises(DataError, match="magic"):
            tree_read(path)
