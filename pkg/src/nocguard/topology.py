"""Mesh topologies, adjacency matrices, and dimension-ordered routes.

Node ids are row-major: id = x + y*n for 2D meshes and id = x + y*n + z*n^2
for 3D TSV meshes. Topology values are immutable after construction and can
be shared freely between threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TopologyError

MESH2D = "mesh2d"
MESH3D = "mesh3d"


@dataclass(frozen=True)
class Topology:
    kind: str                      # MESH2D or MESH3D
    n: int                         # side length
    num_nodes: int
    edges: frozenset               # frozenset of sorted (i, j) tuples
    mc_nodes: tuple                # exactly 4 memory-controller node ids
    coords: tuple = field(repr=False)  # per-node (x, y, z) tuples

    @property
    def dims(self) -> int:
        return 3 if self.kind == MESH3D else 2

    def neighbors(self, node: int):
        x, y, z = self.coords[node]
        n = self.n
        out = []
        if x > 0:
            out.append(node - 1)
        if x < n - 1:
            out.append(node + 1)
        if y > 0:
            out.append(node - n)
        if y < n - 1:
            out.append(node + n)
        if self.kind == MESH3D:
            if z > 0:
                out.append(node - n * n)
            if z < n - 1:
                out.append(node + n * n)
        return out

    def digest(self) -> bytes:
        """8-byte digest of the canonical JSON form, used by file headers."""
        return hashlib.sha256(self.to_json().encode()).digest()[:8]

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "n": self.n,
            "N": self.num_nodes,
            "edges": sorted(list(e) for e in self.edges),
            "mc_nodes": list(self.mc_nodes),
        }
        return json.dumps(doc, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Topology":
        doc = json.loads(text)
        if doc["kind"] == MESH2D:
            topo = build_mesh_2d(doc["n"])
        elif doc["kind"] == MESH3D:
            topo = build_mesh_3d(doc["n"])
        else:
            raise TopologyError(f"unknown topology kind {doc['kind']!r}")
        want = {tuple(e) for e in doc["edges"]}
        if want != set(topo.edges) or list(topo.mc_nodes) != doc["mc_nodes"]:
            raise TopologyError("topology document does not match its kind/n")
        return topo


def _coords_2d(n):
    return tuple((i % n, i // n, 0) for i in range(n * n))


def _coords_3d(n):
    return tuple((i % n, (i // n) % n, i // (n * n)) for i in range(n ** 3))


def build_mesh_2d(n: int) -> Topology:
    """n x n mesh with memory controllers at the four corners."""
    if n < 1:
        raise ConfigError(f"mesh side must be >= 1, got {n}")
    if n < 2:
        raise TopologyError("mesh too small to place 4 distinct memory controllers")
    edges = set()
    for y in range(n):
        for x in range(n):
            i = x + y * n
            if x < n - 1:
                edges.add((i, i + 1))
            if y < n - 1:
                edges.add((i, i + n))
    mc = (0, n - 1, n * (n - 1), n * n - 1)
    return Topology(MESH2D, n, n * n, frozenset(edges), mc, _coords_2d(n))


def build_mesh_3d(n: int) -> Topology:
    """n x n x n mesh; z-adjacent links are TSVs.

    Memory controllers sit at diagonally alternating corners: (0,0,0) and
    (n-1,n-1,0) on the bottom layer, (n-1,0,n-1) and (0,n-1,n-1) on top.
    """
    if n < 1:
        raise ConfigError(f"mesh side must be >= 1, got {n}")
    if n < 2:
        raise TopologyError("mesh too small to place 4 distinct memory controllers")
    edges = set()
    nn = n * n
    for z in range(n):
        for y in range(n):
            for x in range(n):
                i = x + y * n + z * nn
                if x < n - 1:
                    edges.add((i, i + 1))
                if y < n - 1:
                    edges.add((i, i + n))
                if z < n - 1:
                    edges.add((i, i + nn))
    top = n - 1
    mc = (
        0,
        (n - 1) + (n - 1) * n,
        (n - 1) + top * nn,
        (n - 1) * n + top * nn,
    )
    return Topology(MESH3D, n, n ** 3, frozenset(edges), tuple(sorted(mc)), _coords_3d(n))


def adjacency_matrix(topo: Topology) -> np.ndarray:
    """Dense symmetric 0/1 adjacency with zero diagonal."""
    a = np.zeros((topo.num_nodes, topo.num_nodes), dtype=np.float64)
    for i, j in topo.edges:
        a[i, j] = 1.0
        a[j, i] = 1.0
    return a


def route(topo: Topology, src: int, dst: int):
    """Dimension-ordered (X, then Y, then Z) minimal route, endpoints inclusive."""
    n = topo.num_nodes
    if not (0 <= src < n and 0 <= dst < n):
        raise TopologyError(f"node id out of range: src={src} dst={dst} N={n}")
    sx, sy, sz = topo.coords[src]
    dx, dy, dz = topo.coords[dst]
    side = topo.n
    hops = [src]
    cur = src
    while sx != dx:
        sx += 1 if dx > sx else -1
        cur = sx + sy * side + sz * side * side
        hops.append(cur)
    while sy != dy:
        sy += 1 if dy > sy else -1
        cur = sx + sy * side + sz * side * side
        hops.append(cur)
    while sz != dz:
        sz += 1 if dz > sz else -1
        cur = sx + sy * side + sz * side * side
        hops.append(cur)
    return hops
