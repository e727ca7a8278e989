from itertools import combinations
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from raysfm.graph import (DEFAULT_S_SIM, Descriptor, FileBackend, FrontierExhausted, SeedSelectionError,
                          SimilarityGraph, SyntheticCovisBackend, build_graph, compute_descriptor,
                          read_descriptors, select_reference, select_seed, write_descriptors)


class FakeScene:
    def __init__(self, sets, n_points):
        self.sets = sets
        self.point_ids = np.arange(1, n_points + 1, dtype=np.uint64)

    def observed_ids(self, i):
        return np.array(sorted(self.sets[i]), dtype=np.uint64)


def _graph(edges, nodes):
    adj = {n: {} for n in nodes}
    for i, j in edges:
        adj[i][j] = adj[j][i] = 1.0
    return SimilarityGraph(tuple(sorted(nodes)), adj, 0.3)


def _cos(a, b):
    return float(a.vector @ b.vector)


def test_descriptor_normalized():
    d = Descriptor(0, [3.0, 4.0])
    assert abs(np.linalg.norm(d.vector) - 1) < 1e-12
    with pytest.raises(ValueError):
        Descriptor(1, [0.0, 0.0])


def test_covis_backend_examples():
    sets = {0: set(range(1, 101)), 1: set(range(1, 101)), 2: set(range(101, 201)), 3: set(range(51, 151))}
    be = SyntheticCovisBackend(FakeScene(sets, 300))
    d = {i: compute_descriptor(be, i) for i in sets}
    assert abs(_cos(d[0], d[1]) - 1) < 1e-9
    assert abs(_cos(d[0], d[2])) < 1e-9
    oracle = len(sets[0] & sets[3]) / np.sqrt(len(sets[0]) * len(sets[3]))
    assert abs(_cos(d[0], d[3]) - oracle) < 1e-12 and abs(oracle - 0.5) < 1e-12


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30)
def test_covis_similarity_equals_set_overlap(seed):
    rng = np.random.default_rng(seed)
    sets = {i: set((rng.choice(500, size=rng.integers(1, 200), replace=False) + 1).tolist()) for i in range(2)}
    be = SyntheticCovisBackend(FakeScene(sets, 500))
    oracle = len(sets[0] & sets[1]) / np.sqrt(len(sets[0]) * len(sets[1]))
    assert abs(_cos(be(0), be(1)) - oracle) < 1e-12


def test_file_backend(tmp_path):
    write_descriptors(tmp_path / "d.txt", [Descriptor(2, [1, 1]), Descriptor(0, [0, 5])])
    assert sorted(read_descriptors(tmp_path / "d.txt")) == [0, 2]
    be = FileBackend(tmp_path / "d.txt")
    assert np.allclose(be(0).vector, [0, 1])
    with pytest.raises(KeyError, match="image 7"):
        be(7)
    with pytest.raises(FileNotFoundError):
        FileBackend(tmp_path / "none.txt")


def test_build_graph_threshold_example():
    G = np.array([[1, 0.9, 0.2], [0.9, 1, 0.5], [0.2, 0.5, 1]])
    L = np.linalg.cholesky(G)
    g = build_graph([Descriptor(i, L[i]) for i in range(3)], 0.3)
    assert [(i, j) for i, j, _ in g.edges] == [(0, 1), (1, 2)]
    assert abs(g.weight(0, 1) - 0.9) < 1e-12
    assert DEFAULT_S_SIM == 0.3


def test_build_graph_complete_at_zero():
    rng = np.random.default_rng(0)
    ds = [Descriptor(i, rng.uniform(0.1, 1, size=8)) for i in range(9)]
    assert len(build_graph(ds, 0.0).edges) == 9 * 8 // 2


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
@settings(max_examples=50)
def test_build_graph_matches_bruteforce(seed, s_sim):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 12))
    ds = [Descriptor(i, rng.normal(size=5)) for i in range(n)]
    g = build_graph(ds, s_sim)
    expect = set()
    for a, b in combinations(ds, 2):
        if max(0.0, min(1.0, _cos(a, b))) >= s_sim:
            expect.add((a.image_id, b.image_id))
    assert {(i, j) for i, j, _ in g.edges} == expect
    for i in g.nodes:
        assert i not in g.adjacency[i]
        for j, w in g.adjacency[i].items():
            assert g.adjacency[j][i] == w and w >= s_sim
    perm = [ds[k] for k in rng.permutation(n)]
    assert build_graph(perm, s_sim).edges == g.edges


def test_select_seed_examples():
    a, b, c, d = 1, 2, 3, 4
    g = _graph([(a, b), (b, c), (b, d), (a, d)], [a, b, c, d])
    assert [g.degree(x) for x in (a, b, c, d)] == [2, 3, 1, 2]
    assert select_seed(g) == b
    ring = _graph([(i, (i + 1) % 5) for i in range(5)], range(5))
    assert select_seed(ring) == 0
    star = _graph([(50, i) for i in range(100) if i != 50], range(100))
    assert select_seed(star) == 50


def test_select_seed_no_edges():
    with pytest.raises(SeedSelectionError, match="lower threshold"):
        select_seed(_graph([], [0, 1, 2]))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_select_seed_max_degree(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 15))
    edges = [(i, j) for i, j in combinations(range(n), 2) if rng.random() < 0.3] or [(0, 1)]
    g = _graph(edges, range(n))
    s = select_seed(g)
    assert all(g.degree(s) >= g.degree(x) for x in g.nodes)
    assert s == min(x for x in g.nodes if g.degree(x) == g.degree(s))


def test_select_reference_examples():
    g = _graph([(0, 1), (1, 2), (2, 3)], range(4))
    assert select_reference(g, {0, 1}, {2, 3}) == 1
    with pytest.raises(FrontierExhausted):
        select_reference(g, {0, 1, 2, 3}, set())
    with pytest.raises(ValueError):
        select_reference(g, set(), {0})


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_select_reference_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 15))
    edges = [(i, j) for i, j in combinations(range(n), 2) if rng.random() < 0.3]
    g = _graph(edges, range(n))
    reg = {int(x) for x in rng.choice(n, size=rng.integers(1, n), replace=False)}
    unreg = set(range(n)) - reg
    counts = {r: sum((r, u) in edges or (u, r) in edges for u in unreg) for r in sorted(reg)}
    best = max(counts.values())
    if best == 0:
        with pytest.raises(FrontierExhausted):
            select_reference(g, reg, unreg)
    else:
        assert select_reference(g, reg, unreg) == min(r for r, c in counts.items() if c == best)
