"""Graph pipeline tests: chordalization, MCS, junction trees, DAG orientations."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipmatch.graph import (
    Dag,
    JunctionTree,
    UndirectedGraph,
    build_junction_tree,
    chain_graph,
    check_chordal,
    complete_graph,
    cycle_graph,
    grid_graph,
    induced_subgraph,
    ladder_graph,
    max_cardinality_search,
    min_fill_chordalize,
    moral_graph,
    orient_pmap,
    random_graph,
    read_edge_list,
    running_intersection_holds,
    sample_imap,
    star_graph,
    sub_imap,
    verify_no_immoralities,
    write_edge_list,
)
from oracles import chordal_brute_force, maximal_cliques_brute_force


def imap_is_valid(imap, g):
    """Acyclic (Dag validates on build), immorality-free, chordal supergraph."""
    assert verify_no_immoralities(imap)
    assert check_chordal(imap.chordal)
    assert g.edges <= imap.chordal.edges
    # moral graph of the DAG equals its own skeleton
    assert moral_graph(imap.dag).edges == imap.chordal.edges
    # blanket(v) is exactly the chordal neighborhood
    for v in imap.vertices:
        assert imap.blanket[v] == imap.chordal.neighbors(v)


class TestUndirectedGraph:
    def test_from_edges_normalizes_pairs(self):
        g = UndirectedGraph.from_edges(4, [(2, 1), (1, 2), (0, 3)])
        assert g.edges == frozenset({(1, 2), (0, 3)})
        assert g.has_edge(2, 1) and g.has_edge(3, 0)

    def test_self_loop_rejected(self):
        with pytest.raises(ValueError):
            UndirectedGraph.from_edges(3, [(1, 1)])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            UndirectedGraph(2, frozenset({(0, 2)}))

    def test_neighbors_and_degree(self):
        g = star_graph(5)
        assert g.neighbors(0) == (1, 2, 3, 4)
        assert g.degree(0) == 4 and g.degree(3) == 1

    def test_constructors_edge_counts(self):
        assert len(chain_graph(6).edges) == 5
        assert len(cycle_graph(6).edges) == 6
        assert len(complete_graph(5).edges) == 10
        assert len(grid_graph(3, 4).edges) == 3 * 3 + 2 * 4
        # ladder with diagonals: rungs + 2*(r-1) rails + (r-1) chords
        assert len(ladder_graph(4).edges) == 4 + 2 * 3 + 3

    def test_edge_list_roundtrip(self, tmp_path):
        g = grid_graph(3, 3)
        path = str(tmp_path / "g.txt")
        write_edge_list(g, path)
        assert read_edge_list(path) == g

    def test_edge_list_comments_and_blanks(self, tmp_path):
        path = tmp_path / "g.txt"
        path.write_text("# header comment\n\nn 3\n0 1  # inline\n\n2 1\n")
        g = read_edge_list(str(path))
        assert g == UndirectedGraph.from_edges(3, [(0, 1), (1, 2)])

    def test_edge_list_missing_header(self, tmp_path):
        path = tmp_path / "g.txt"
        path.write_text("0 1\n")
        with pytest.raises(ValueError):
            read_edge_list(str(path))

    def test_induced_subgraph_local_ids(self):
        g = chain_graph(5)
        sub, mapping = induced_subgraph(g, [1, 2, 4])
        assert mapping == (1, 2, 4)
        assert sub.num_vars == 3
        assert sub.edges == frozenset({(0, 1)})  # only 1-2 survives


class TestDag:
    def test_arc_against_order_rejected(self):
        with pytest.raises(ValueError):
            Dag(num_vars=2, arcs=frozenset({(1, 0)}), topo_order=(0, 1))

    def test_parent_child_maps(self):
        d = Dag(num_vars=3, arcs=frozenset({(0, 1), (0, 2), (1, 2)}), topo_order=(0, 1, 2))
        assert d.parent_map[2] == (0, 1)
        assert d.child_map[0] == (1, 2)


class TestMinFill:
    def test_triangle_unchanged(self):
        g = complete_graph(3)
        assert min_fill_chordalize(g, 0) == g

    def test_four_cycle_gets_one_chord(self):
        g = cycle_graph(4)
        out = min_fill_chordalize(g, 3)
        added = out.edges - g.edges
        assert len(added) == 1
        assert added <= {(0, 2), (1, 3)}
        assert check_chordal(out)

    def test_four_cycle_both_chords_reachable(self):
        seen = set()
        for seed in range(40):
            out = min_fill_chordalize(cycle_graph(4), seed)
            seen |= out.edges - cycle_graph(4).edges
        assert seen == {(0, 2), (1, 3)}

    def test_chordal_inputs_returned_unchanged(self):
        for g in [chain_graph(7), complete_graph(5), ladder_graph(5), star_graph(6)]:
            assert min_fill_chordalize(g, 1) == g

    def test_diagonal_ladder_is_already_chordal(self):
        g = ladder_graph(8)
        assert check_chordal(g)
        assert min_fill_chordalize(g, 0) == g

    def test_random_outputs_chordal_supergraphs(self):
        rng = np.random.default_rng(7)
        for _ in range(40):
            n = int(rng.integers(2, 10))
            g = random_graph(n, float(rng.uniform(0.1, 0.7)), rng)
            out = min_fill_chordalize(g, rng)
            assert g.edges <= out.edges
            assert check_chordal(out)

    def test_deterministic_given_seed(self):
        g = random_graph(9, 0.3, 5)
        assert min_fill_chordalize(g, 11) == min_fill_chordalize(g, 11)

    def test_empty_graph(self):
        g = UndirectedGraph(0, frozenset())
        assert min_fill_chordalize(g, 0) == g


class TestCheckChordal:
    def test_known_cases(self):
        assert check_chordal(complete_graph(4))
        assert not check_chordal(cycle_graph(5))
        assert check_chordal(cycle_graph(4).with_extra_edges([(0, 2)]))
        assert not check_chordal(grid_graph(2, 3))
        assert check_chordal(chain_graph(10))

    def test_exhaustive_five_vertices(self):
        """Agreement with the induced-cycle oracle on every 5-vertex graph."""
        all_pairs = [(i, j) for i in range(5) for j in range(i + 1, 5)]
        for mask in range(1 << len(all_pairs)):
            edges = [e for k, e in enumerate(all_pairs) if (mask >> k) & 1]
            g = UndirectedGraph.from_edges(5, edges)
            assert check_chordal(g) == chordal_brute_force(g)

    @settings(max_examples=60, deadline=None)
    @given(
        n=st.integers(min_value=1, max_value=8),
        bits=st.integers(min_value=0),
        )
    def test_matches_oracle_on_random_graphs(self, n, bits):
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        edges = [e for k, e in enumerate(pairs) if (bits >> k) & 1]
        g = UndirectedGraph.from_edges(n, edges)
        assert check_chordal(g) == chordal_brute_force(g)


class TestMaxCardinalitySearch:
    def test_path_cliques(self):
        _, cliques = max_cardinality_search(chain_graph(3), 0)
        assert set(cliques) == {frozenset({0, 1}), frozenset({1, 2})}

    def test_triangle_single_clique(self):
        _, cliques = max_cardinality_search(complete_graph(3), 0)
        assert cliques == [frozenset({0, 1, 2})]

    def test_single_vertex(self):
        order, cliques = max_cardinality_search(UndirectedGraph(1, frozenset()), 0)
        assert order == [0]
        assert cliques == [frozenset({0})]

    def test_maximal_cliques_match_bruteforce_on_chordal(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n = int(rng.integers(2, 9))
            g = min_fill_chordalize(random_graph(n, 0.4, rng), rng)
            _, cliques = max_cardinality_search(g, rng)
            assert set(cliques) == maximal_cliques_brute_force(g)

    def test_cliques_cover_all_edges(self):
        g = random_graph(10, 0.3, 1)  # not necessarily chordal
        _, cliques = max_cardinality_search(g, 0)
        for u, v in g.edges:
            assert any(u in c and v in c for c in cliques)

    def test_visit_order_is_peo_on_chordal(self):
        g = min_fill_chordalize(random_graph(9, 0.35, 2), 0)
        order, _ = max_cardinality_search(g, 4)
        seen = set()
        for v in order:
            earlier = [w for w in g.neighbors(v) if w in seen]
            for i in range(len(earlier)):
                for j in range(i + 1, len(earlier)):
                    assert g.has_edge(earlier[i], earlier[j])
            seen.add(v)


class TestJunctionTree:
    def test_two_overlapping_cliques(self):
        jt = build_junction_tree([frozenset({0, 1}), frozenset({1, 2})], 0)
        assert sorted(jt.parent).count(-1) == 1
        assert jt.root in (0, 1)
        assert running_intersection_holds(jt)

    def test_three_clique_chain_prefers_heavy_edges(self):
        """{0,1}-{2,3} has separator weight 0 and must never be a tree edge."""
        cliques = [frozenset({0, 1}), frozenset({1, 2}), frozenset({2, 3})]
        for seed in range(20):
            jt = build_junction_tree(cliques, seed)
            for child, parent in enumerate(jt.parent):
                if parent != -1:
                    assert jt.cliques[child] & jt.cliques[parent]
            assert running_intersection_holds(jt)

    def test_disconnected_components_virtual_root(self):
        cliques = [frozenset({0, 1, 2}), frozenset({3, 4, 5})]
        jt = build_junction_tree(cliques, 0)
        assert jt.root == -1
        assert jt.parent == (-1, -1)
        assert running_intersection_holds(jt)

    def test_empty(self):
        jt = build_junction_tree([], 0)
        assert jt.cliques == () and jt.root == -1

    def test_running_intersection_on_random_chordal(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            n = int(rng.integers(2, 11))
            g = min_fill_chordalize(random_graph(n, 0.35, rng), rng)
            _, cliques = max_cardinality_search(g, rng)
            jt = build_junction_tree(cliques, rng)
            assert running_intersection_holds(jt)

    def test_running_intersection_checker_catches_violation(self):
        # vertex 1 appears in two cliques that are not adjacent in this tree
        jt = JunctionTree(
            cliques=(frozenset({0, 1}), frozenset({2, 3}), frozenset({1, 2})),
            parent=(-1, 0, 1),
            root=0,
        )
        assert not running_intersection_holds(jt)


class TestOrientPmap:
    def test_path_example_orientation(self):
        g = chain_graph(3)
        jt = JunctionTree(
            cliques=(frozenset({0, 1}), frozenset({1, 2})), parent=(-1, 0), root=0
        )
        outcomes = set()
        for seed in range(30):
            imap = orient_pmap(g, jt, seed)
            outcomes.add(frozenset(imap.dag.arcs))
            imap_is_valid(imap, g)
        # visit (0,1) gives 0->1, 1->2; visit (1,0) gives 1->0, 1->2
        assert frozenset({(0, 1), (1, 2)}) in outcomes
        assert outcomes <= {
            frozenset({(0, 1), (1, 2)}),
            frozenset({(1, 0), (1, 2)}),
        }

    def test_triangle_orientations_all_valid(self):
        g = complete_graph(3)
        _, cliques = max_cardinality_search(g, 0)
        arcsets = set()
        for seed in range(50):
            jt = build_junction_tree(cliques, seed)
            imap = orient_pmap(g, jt, seed)
            imap_is_valid(imap, g)
            arcsets.add(frozenset(imap.dag.arcs))
        assert len(arcsets) >= 2  # several of the 6 acyclic orientations appear


class TestSampleImap:
    def test_chain_multiple_topo_orders(self):
        g = chain_graph(5)
        orders = {sample_imap(g, seed).dag.topo_order for seed in range(20)}
        assert len(orders) >= 2

    def test_four_cycle_imap_has_five_edges(self):
        imap = sample_imap(cycle_graph(4), 0)
        assert len(imap.chordal.edges) == 5

    def test_random_graphs_valid(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            n = int(rng.integers(1, 11))
            g = random_graph(n, 0.35, rng)
            imap = sample_imap(g, int(rng.integers(1 << 31)))
            imap_is_valid(imap, g)
            assert imap.vertices == tuple(range(n))
            assert sorted(imap.dag.topo_order) == list(range(n))

    def test_chordal_completion_cached_across_seeds(self):
        g = grid_graph(3, 3)
        a = sample_imap(g, 1)
        b = sample_imap(g, 2)
        assert a.chordal is b.chordal  # same cached completion object

    def test_deterministic_given_seed(self):
        g = grid_graph(3, 3)
        assert sample_imap(g, 5).dag == sample_imap(g, 5).dag


class TestSubImap:
    def test_chain_interior_vertex(self):
        imap = sub_imap(chain_graph(4), 1, 0)
        assert imap.vertices == (0, 1, 2)
        assert set(imap.dag.topo_order) == {0, 1, 2}

    def test_isolated_vertex(self):
        g = UndirectedGraph.from_edges(3, [(0, 1)])
        imap = sub_imap(g, 2, 0)
        assert imap.vertices == (2,)
        assert imap.parents[2] == ()
        assert imap.blanket[2] == ()

    def test_lattice_center_size_is_one_plus_blanket(self):
        g = grid_graph(4, 4)
        full = sample_imap(g, 0)
        u = 5  # interior vertex
        local = sub_imap(g, u, 3)
        assert len(local.vertices) == 1 + len(full.blanket[u])
        assert set(local.vertices) == {u} | set(full.blanket[u])

    def test_sub_imap_valid_and_local(self):
        rng = np.random.default_rng(23)
        for _ in range(20):
            n = int(rng.integers(2, 11))
            g = random_graph(n, 0.4, rng)
            u = int(rng.integers(n))
            imap = sub_imap(g, u, rng)
            assert u in imap.vertices
            assert verify_no_immoralities(imap)
            assert check_chordal(imap.chordal)
            # arcs stay inside the covered set
            for a, b in imap.dag.arcs:
                assert a in imap.vertices and b in imap.vertices

    def test_blankets_within_sub_match_chordal_neighborhoods(self):
        g = grid_graph(3, 3)
        imap = sub_imap(g, 4, 1)
        for v in imap.vertices:
            assert imap.blanket[v] == imap.chordal.neighbors(v)
