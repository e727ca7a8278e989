"""Global-descriptor similarity graph, seed choice and reference choice."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_S_SIM = 0.3


class SeedSelectionError(RuntimeError):
    pass


class FrontierExhausted(RuntimeError):
    """No registered image has an edge into the unregistered set."""


@dataclass(frozen=True, eq=False)
class Descriptor:
    image_id: int
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float).ravel()
        n = np.linalg.norm(v)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError(f"descriptor of image {self.image_id} has zero or non-finite norm")
        object.__setattr__(self, "vector", v / n)


class SyntheticCovisBackend:
    """Descriptors from ground-truth landmark visibility.

    Each image gets the normalized indicator of the landmark buckets it sees,
    so cosine similarity approximates the co-visible fraction.
    """

    def __init__(self, scene, n_buckets=None):
        self.scene = scene
        self.n_buckets = n_buckets or len(scene.point_ids)

    def __call__(self, image_id):
        ids = self.scene.observed_ids(image_id).astype(np.int64) - 1
        v = np.bincount(ids % self.n_buckets, minlength=self.n_buckets).astype(float)
        return Descriptor(image_id, v)


class FileBackend:
    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise FileNotFoundError(f"missing descriptor file: {self.path}")
        self.vectors = read_descriptors(self.path)

    def __call__(self, image_id):
        if image_id not in self.vectors:
            raise KeyError(f"descriptor file {self.path} has no entry for image {image_id}")
        return Descriptor(image_id, self.vectors[image_id])


def compute_descriptor(backend, image_id):
    return backend(image_id)


def write_descriptors(path, descriptors):
    lines = []
    for d in sorted(descriptors, key=lambda d: d.image_id):
        lines.append(f"{d.image_id} " + " ".join(repr(float(x)) for x in d.vector) + "\n")
    Path(path).write_text("".join(lines))


def read_descriptors(path):
    out = {}
    dim = None
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        vec = np.array([float(x) for x in parts[1:]])
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise ValueError(f"{path}:{lineno}: descriptor length {len(vec)} differs from {dim}")
        out[int(parts[0])] = vec
    return out


@dataclass(frozen=True)
class SimilarityGraph:
    nodes: tuple
    # {i: {j: weight}}, symmetric
    adjacency: dict
    s_sim: float

    @property
    def edges(self):
        return sorted((i, j, w) for i, nb in self.adjacency.items() for j, w in nb.items() if i < j)

    def degree(self, node):
        return len(self.adjacency[node])

    def neighbors(self, node):
        return sorted(self.adjacency[node])

    def weight(self, i, j):
        return self.adjacency[i].get(j, 0.0)


def build_graph(descriptors, s_sim=DEFAULT_S_SIM):
    """Threshold the complete cosine-similarity graph at ``s_sim``."""
    descriptors = sorted(descriptors, key=lambda d: d.image_id)
    ids = [d.image_id for d in descriptors]
    if len(ids) < 2:
        raise ValueError("need at least two descriptors to build a graph")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids among descriptors")
    V = np.stack([d.vector for d in descriptors])
    S = np.clip(V @ V.T, 0.0, 1.0)
    adjacency = {i: {} for i in ids}
    a, b = np.nonzero(np.triu(S >= s_sim, k=1))
    for x, y in zip(a.tolist(), b.tolist()):
        w = float(S[x, y])
        adjacency[ids[x]][ids[y]] = w
        adjacency[ids[y]][ids[x]] = w
    return SimilarityGraph(tuple(ids), adjacency, float(s_sim))


def select_seed(graph):
    """Node of maximum degree, smallest id on ties."""
    if not graph.nodes:
        raise SeedSelectionError("similarity graph is empty")
    best = max(graph.nodes, key=lambda n: (graph.degree(n), -n))
    if graph.degree(best) == 0:
        raise SeedSelectionError(
            f"similarity graph has no edges at s_sim={graph.s_sim}; try a lower threshold")
    return best


def select_reference(graph, registered, unregistered):
    """Registered node with the most edges into ``unregistered``."""
    if not registered:
        raise ValueError("registered set is empty")
    unregistered = set(unregistered)
    best, best_count = None, 0
    for node in sorted(registered):
        count = sum(1 for j in graph.adjacency[node] if j in unregistered)
        if count > best_count:
            best, best_count = node, count
    if best is None:
        raise FrontierExhausted(
            f"{len(unregistered)} image(s) unreachable from the {len(registered)} registered image(s)")
    return best
