"""Mesh construction, MC placement, routing, and serialization checks."""

import json

import numpy as np
import pytest

from nocguard.errors import ConfigError, TopologyError
from nocguard.topology import (Topology, adjacency_matrix, build_mesh_2d,
                               build_mesh_3d, route)


def manhattan(topo, a, b):
    ca, cb = topo.coords[a], topo.coords[b]
    return sum(abs(x - y) for x, y in zip(ca, cb))


def test_mesh_2d_basic_counts():
    topo = build_mesh_2d(4)
    assert topo.num_nodes == 16
    # 2 * n * (n - 1) bidirectional links in an n x n mesh
    assert len(topo.edges) == 24
    assert set(topo.mc_nodes) == {0, 3, 12, 15}


def test_mesh_2d_8x8_mc_corners():
    topo = build_mesh_2d(8)
    assert topo.num_nodes == 64
    assert set(topo.mc_nodes) == {0, 7, 56, 63}


def test_mesh_3d_counts_and_mc():
    topo = build_mesh_3d(4)
    assert topo.num_nodes == 64
    # 3 * n^2 * (n - 1) links in an n^3 mesh
    assert len(topo.edges) == 144
    assert set(topo.mc_nodes) == {0, 15, 51, 60}


def test_mesh_3d_mc_spread_across_layers():
    topo = build_mesh_3d(4)
    layers = sorted(topo.coords[m][2] for m in topo.mc_nodes)
    # no two controllers share a vertical TSV column
    cols = {(topo.coords[m][0], topo.coords[m][1]) for m in topo.mc_nodes}
    assert len(cols) == 4
    assert layers[0] == 0 and layers[-1] == 3


def test_adjacency_matrix_properties():
    for topo in (build_mesh_2d(4), build_mesh_3d(3)):
        a = adjacency_matrix(topo)
        assert a.shape == (topo.num_nodes, topo.num_nodes)
        assert np.array_equal(a, a.T)
        assert not a.diagonal().any()
        assert int(a.sum()) == 2 * len(topo.edges)
        for u, v in topo.edges:
            assert a[u, v] == 1.0


def test_neighbors_match_edges():
    topo = build_mesh_2d(5)
    for u in range(topo.num_nodes):
        for v in topo.neighbors(u):
            assert (min(u, v), max(u, v)) in topo.edges


def test_route_worked_examples():
    assert route(build_mesh_2d(4), 0, 6) == [0, 1, 2, 6]
    assert route(build_mesh_3d(4), 0, 21) == [0, 1, 5, 21]


@pytest.mark.parametrize("topo", [build_mesh_2d(4), build_mesh_3d(3)])
def test_route_exhaustive_dimension_order(topo):
    n = topo.num_nodes
    edges = topo.edges
    for s in range(n):
        for d in range(n):
            path = route(topo, s, d)
            assert path[0] == s and path[-1] == d
            assert len(path) == manhattan(topo, s, d) + 1
            seen_dims = []
            for u, v in zip(path, path[1:]):
                assert (min(u, v), max(u, v)) in edges
                cu, cv = topo.coords[u], topo.coords[v]
                dim = next(i for i in range(len(cu)) if cu[i] != cv[i])
                seen_dims.append(dim)
            # dimension-ordered: once a later axis starts, never go back
            assert seen_dims == sorted(seen_dims)


def test_digest_stable_and_distinct():
    a, b = build_mesh_2d(4), build_mesh_2d(4)
    assert a.digest() == b.digest()
    assert build_mesh_2d(5).digest() != a.digest()
    assert build_mesh_3d(4).digest() != build_mesh_2d(8).digest()


def test_json_round_trip():
    for topo in (build_mesh_2d(4), build_mesh_3d(3)):
        doc = json.loads(topo.to_json())
        back = Topology.from_json(json.dumps(doc))
        assert back == topo
        assert back.digest() == topo.digest()


def test_invalid_sizes():
    with pytest.raises(ConfigError):
        build_mesh_2d(0)
    with pytest.raises(TopologyError):
        build_mesh_2d(1)
    with pytest.raises(ConfigError):
        build_mesh_3d(-2)
