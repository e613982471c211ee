"""
Variance tree tests: decomposition identity, worked example, heights,
aggregation and top-k selection
"""

import itertools

import numpy as np
import pytest

from conftest import random_forest
from src.errors import InsufficientSamplesError, UnknownNodeError
from src.tracefmt import Invocation
from src.vartree import (CallProfile, Factor, FactorId, SelectionParams, aggregate_factors,
                         build_sample_matrix, build_variance_tree, compute_heights, decompose_variance,
                         factor_frame, factor_report, ranking_key, root_path, select_factors)


def closure_error(matrix, nodes):
    parent_var = float(np.var(matrix.parent_durations()))
    total = sum(n.weighted_value for n in nodes)
    return abs(parent_var - total) / max(abs(parent_var), 1.0)


class TestWorkedExample:
    def test_terms(self, worked_example):
        forest, _ = worked_example
        matrix = build_sample_matrix(forest, root_path(1))
        assert [c.label for c in matrix.columns] == ["2@1", "3@2", "body"]
        nodes = decompose_variance(matrix)
        values = {tuple(c.label for c in n.columns): n.value for n in nodes}
        assert values[("2@1",)] == pytest.approx(0.25)
        assert values[("3@2",)] == pytest.approx(1.0)
        assert values[("body",)] == pytest.approx(0.0)
        assert values[("2@1", "3@2")] == pytest.approx(0.5)
        assert values[("2@1", "body")] == pytest.approx(0.0)

    def test_contributions_sum_to_one(self, worked_example):
        forest, _ = worked_example
        tree = build_variance_tree(forest, 1)
        assert tree.root_variance == pytest.approx(2.25)
        assert sum(n.contribution for n in tree.terms[root_path(1)]) == pytest.approx(1.0)
        assert tree.contributions[((1, 0), (3, 2))] == pytest.approx(1.0 / 2.25)

    def test_top_one_is_var_c(self, worked_example):
        forest, registry = worked_example
        tree = build_variance_tree(forest, 1)
        (top,) = select_factors(tree, SelectionParams(k=1, d=0.0))
        assert top.identity == FactorId("var", ((3, False),))
        assert top.identity.label(registry) == "Var(C)"

    def test_report_document(self, worked_example):
        forest, registry = worked_example
        tree = build_variance_tree(forest, 1)
        factors = select_factors(tree, SelectionParams(k=3, d=0.0))
        report = factor_report(tree, factors, registry)
        assert report["root"] == "A"
        assert report["n_samples"] == 2
        assert [f["identity"] for f in report["factors"]] == ["Var(C)", "Cov(B, C)", "Var(B)"]
        frame = factor_frame(factors, registry)
        assert list(frame["identity"]) == ["Var(C)", "Cov(B, C)", "Var(B)"]


class TestDecompositionIdentity:
    def test_random_forests_close_exactly(self, rng):
        checked = 0
        for _ in range(1000):
            forest, _, _ = random_forest(rng, n_samples=int(rng.integers(10, 16)), max_depth=6,
                                         max_fanout=5, max_nodes=40)
            tree = build_variance_tree(forest, 1)
            for parent, nodes in tree.terms.items():
                matrix = build_sample_matrix(tree.profile, parent)
                assert closure_error(matrix, nodes) <= 1e-9
                checked += 1
        assert checked > 0

    def test_partial_presence_still_closes(self, rng):
        for _ in range(50):
            forest, _, _ = random_forest(rng, n_samples=30, max_depth=4, max_fanout=3, presence=0.6)
            tree = build_variance_tree(forest, 1)
            for parent, nodes in tree.terms.items():
                assert closure_error(build_sample_matrix(tree.profile, parent), nodes) <= 1e-9

    def test_child_terms_sum_to_parent_contribution(self, rng):
        forest, _, _ = random_forest(rng, n_samples=25, max_depth=4, max_fanout=3)
        tree = build_variance_tree(forest, 1)
        for parent, nodes in tree.terms.items():
            assert sum(n.contribution for n in nodes) == pytest.approx(tree.contributions[parent], abs=1e-9)

    def test_multithreaded_forest(self, rng):
        forest, _, _ = random_forest(rng, n_samples=40, max_depth=3, max_fanout=3, n_threads=4)
        tree = build_variance_tree(forest, 1)
        assert tree.n_samples == 40


class TestSampleMatrix:
    def test_rows_sum_to_parent_duration(self, rng):
        forest, _, _ = random_forest(rng, n_samples=10, max_depth=3, max_fanout=3)
        profile = CallProfile(forest, 1)
        matrix = build_sample_matrix(profile, root_path(1))
        np.testing.assert_array_equal(matrix.parent_durations(), profile.root_durations())

    def test_repeated_site_sums_per_sample(self):
        roots = []
        for i, durations in enumerate(([2, 3], [4, 1])):
            start = i * 100
            kids, cursor = [], start + 1
            for d in durations:
                kids.append(Invocation(2, 1, cursor, cursor + d))
                cursor += d
            roots.append(Invocation(1, 0, start, cursor + 1, 0, kids))
        matrix = build_sample_matrix({0: roots}, root_path(1))
        assert list(matrix.frame["2@1"]) == [5.0, 5.0]

    def test_absent_child_is_zero(self):
        roots = [Invocation(1, 0, 0, 10, 0, [Invocation(2, 1, 1, 4)]), Invocation(1, 0, 20, 25)]
        matrix = build_sample_matrix({0: roots}, root_path(1))
        assert list(matrix.frame["2@1"]) == [3.0, 0.0]
        assert list(matrix.frame["body"]) == [7.0, 5.0]

    def test_unknown_path(self, worked_example):
        forest, _ = worked_example
        with pytest.raises(UnknownNodeError):
            build_sample_matrix(forest, ((1, 0), (9, 9)))

    def test_single_sample(self):
        forest = {0: [Invocation(1, 0, 0, 10, 0, [Invocation(2, 1, 1, 4)])]}
        with pytest.raises(InsufficientSamplesError, match="insufficient samples"):
            build_sample_matrix(forest, root_path(1))
        with pytest.raises(InsufficientSamplesError, match="insufficient samples"):
            build_variance_tree(forest, 1)

    def test_unknown_root(self, worked_example):
        forest, _ = worked_example
        with pytest.raises(UnknownNodeError):
            build_variance_tree(forest, 7)

    def test_zero_variance_parent(self):
        roots = [Invocation(1, 0, i * 10, i * 10 + 5, 0, [Invocation(2, 1, i * 10 + 1, i * 10 + 3)])
                 for i in range(3)]
        tree = build_variance_tree({0: roots}, 1)
        assert tree.root_variance == 0.0
        assert all(n.contribution == 0.0 for n in tree.all_terms())


class TestHeights:
    def test_chain(self):
        roots = []
        for i in range(2):
            base = i * 100
            leaf = Invocation(3, 1, base + 2, base + 4 + i)
            mid = Invocation(2, 1, base + 1, base + 6 + i, 0, [leaf])
            roots.append(Invocation(1, 0, base, base + 8 + i, 0, [mid]))
        heights = compute_heights({0: roots}, 1)
        assert heights.functions == {1: 2, 2: 1, 3: 0}
        assert heights.graph == 2

    def test_function_takes_max_over_occurrences(self):
        roots = []
        for i in range(2):
            base = i * 100
            deep = Invocation(2, 1, base + 1, base + 5, 0, [Invocation(3, 1, base + 2, base + 3)])
            shallow = Invocation(2, 2, base + 6, base + 7 + i)
            roots.append(Invocation(1, 0, base, base + 10 + i, 0, [deep, shallow]))
        heights = compute_heights({0: roots}, 1)
        assert heights.functions[2] == 1


def brute_force(factors, k, d):
    eligible = [f for f in factors if f.contribution >= d]
    best = []
    for f in eligible:
        rank = sum(1 for g in eligible if (g.score, g.contribution) > (f.score, f.contribution)
                   or ((g.score, g.contribution) == (f.score, f.contribution) and g.identity < f.identity))
        best.append((rank, f))
    return [f for rank, f in sorted(best, key=lambda x: x[0]) if rank < k]


class TestSelection:
    def test_matches_brute_force(self, rng):
        for case in range(500):
            forest, _, _ = random_forest(rng, n_samples=12, max_depth=4, max_fanout=4, max_nodes=12)
            tree = build_variance_tree(forest, 1)
            factors = aggregate_factors(tree.all_terms(), tree.heights)
            k = int(rng.integers(1, 6))
            d = float(rng.choice([0.0, 0.01, 0.05, 0.2]))
            expected = brute_force(factors, k, d)
            assert select_factors(tree, SelectionParams(k, d)) == expected, case

    def test_threshold_filters(self, worked_example):
        forest, _ = worked_example
        tree = build_variance_tree(forest, 1)
        assert select_factors(tree, SelectionParams(k=5, d=1.0)) == []

    def test_fewer_than_k(self, worked_example):
        forest, _ = worked_example
        tree = build_variance_tree(forest, 1)
        selected = select_factors(tree, SelectionParams(k=50, d=0.1))
        assert len(selected) == 3

    def test_tie_breaks(self):
        def factor(func, score, contribution):
            return Factor(FactorId("var", ((func, False),)), score, contribution, 0, 1, score)

        factors = [factor(3, 10.0, 0.2), factor(2, 10.0, 0.2), factor(1, 10.0, 0.5), factor(4, 11.0, 0.1)]
        chosen = select_factors(factors, SelectionParams(k=3, d=0.0))
        assert [f.identity.func_ids[0] for f in chosen] == [4, 1, 2]

    def test_params_validated(self):
        with pytest.raises(ValueError):
            SelectionParams(k=0)
        with pytest.raises(ValueError):
            SelectionParams(d=1.5)

    def test_cross_site_aggregation(self):
        roots = []
        for i, (a, b) in enumerate(((1, 2), (3, 7))):
            base = i * 100
            kids = [Invocation(2, 1, base + 1, base + 1 + a), Invocation(2, 2, base + 20, base + 20 + b)]
            roots.append(Invocation(1, 0, base, base + 40, 0, kids))
        tree = build_variance_tree({0: roots}, 1)
        factors = {f.identity: f for f in aggregate_factors(tree.all_terms(), tree.heights)}
        var2 = factors[FactorId("var", ((2, False),))]
        assert len(var2.sites) == 2
        assert var2.total_value == pytest.approx(np.var([1, 3]) + np.var([2, 7]))
        cov22 = factors[FactorId("cov", ((2, False), (2, False)))]
        assert cov22.total_value == pytest.approx(np.mean((np.array([1, 3]) - 2) * (np.array([2, 7]) - 4.5)))

    def test_specificity_prefers_deeper_factors(self):
        roots = []
        for i, (outer, inner) in enumerate(((10, 1), (30, 3), (20, 2))):
            base = i * 1000
            leaf = Invocation(3, 1, base + 2, base + 2 + inner)
            mid = Invocation(2, 1, base + 1, base + 3 + inner + outer, 0, [leaf])
            roots.append(Invocation(1, 0, base, mid.end_ns + 1, 0, [mid]))
        tree = build_variance_tree({0: roots}, 1)
        factors = {f.identity: f for f in aggregate_factors(tree.all_terms(), tree.heights)}
        assert factors[FactorId("var", ((3, False),))].specificity == 4
        assert factors[FactorId("var", ((2, False),))].specificity == 1

    def test_ranking_key_orders_identity_last(self):
        a = Factor(FactorId("cov", ((1, False), (2, False))), 1.0, 0.1, 0, 1, 1.0)
        b = Factor(FactorId("var", ((1, False),)), 1.0, 0.1, 0, 1, 1.0)
        assert sorted([b, a], key=ranking_key) == [a, b]
