"""Multi-view point tracks from per-image keypoint predictions.

Observations from all registered images are stacked into one table. Matches
are proposed as pairs of table rows, joined with union-find, and each
connected component spanning two or more images becomes a track.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)

MODES = ("oracle", "proximity")


@dataclass(frozen=True, eq=False)
class Observation:
    image_id: int
    uv: np.ndarray
    point: np.ndarray


@dataclass(eq=False)
class Track:
    track_id: int
    point: np.ndarray
    image_ids: np.ndarray
    uv: np.ndarray
    # per-observation predicted points
    predictions: np.ndarray

    def __len__(self):
        return len(self.image_ids)

    @property
    def observations(self):
        return [Observation(int(i), u, p) for i, u, p in zip(self.image_ids, self.uv, self.predictions)]

    def key(self):
        """Hashable observation set, independent of order."""
        rows = sorted(zip(self.image_ids.tolist(), self.uv[:, 0].tolist(), self.uv[:, 1].tolist()))
        return tuple(rows)


class DisjointSet:
    def __init__(self, n):
        self.parent = list(range(n))
        self.rank = [0] * n

    def find(self, x):
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return ra

    def labels(self):
        return np.array([self.find(i) for i in range(len(self.parent))], dtype=np.int64)


@dataclass(eq=False)
class ObservationTable:
    image_ids: np.ndarray
    uv: np.ndarray
    points: np.ndarray
    corr_id: np.ndarray | None

    def __len__(self):
        return len(self.image_ids)


@dataclass(eq=False)
class MatchSet:
    table: ObservationTable
    # (m, 2) row indices into the table, first < second
    pairs: np.ndarray


def stack_observations(keypoint_sets):
    sets = sorted(keypoint_sets, key=lambda k: k.image_id)
    if not sets:
        return ObservationTable(np.zeros(0, np.int64), np.zeros((0, 2)), np.zeros((0, 3)), None)
    has_corr = all(k.corr_id is not None for k in sets)
    return ObservationTable(
        np.concatenate([np.full(len(k), k.image_id, dtype=np.int64) for k in sets]),
        np.concatenate([np.asarray(k.uv, float).reshape(-1, 2) for k in sets]),
        np.concatenate([np.asarray(k.points, float).reshape(-1, 3) for k in sets]),
        np.concatenate([np.asarray(k.corr_id, np.uint64) for k in sets]) if has_corr else None,
    )


def _chain(groups, image_ids):
    """Link every row to the next row of its group (rows sorted by image)."""
    order = np.lexsort((np.arange(len(groups)), image_ids, groups))
    g = groups[order]
    same = g[1:] == g[:-1]
    return np.stack([order[:-1][same], order[1:][same]], axis=1)


def propose_matches(keypoint_sets, mode="oracle", tau_merge=1e-6):
    """Observation pairs that see the same scene point.

    ``oracle`` pairs rows sharing a non-zero ``corr_id``. ``proximity`` pairs
    rows whose predicted points are mutual nearest neighbors across two
    images within ``tau_merge``. Both modes link each observation only to
    its partner in the next image that has one, so at zero noise they return
    the same pairs.
    """
    if mode not in MODES:
        raise ValueError(f"unknown match mode {mode!r}, expected one of {MODES}")
    table = stack_observations(keypoint_sets)
    n = len(table)
    if mode == "oracle":
        if table.corr_id is None:
            raise ValueError("oracle matching needs pointmaps with correspondence ids")
        keep = np.flatnonzero(table.corr_id != 0)
        p = _chain(table.corr_id[keep], table.image_ids[keep])
        pairs = keep[p] if len(p) else np.zeros((0, 2), np.int64)
    else:
        pairs = _proximity_pairs(table, tau_merge) if n else np.zeros((0, 2), np.int64)
    pairs = np.sort(pairs, axis=1)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))] if len(pairs) else pairs.reshape(0, 2)
    return MatchSet(table, pairs.astype(np.int64))


def _proximity_pairs(table, tau):
    if not tau > 0:
        return np.zeros((0, 2), np.int64)
    tree = cKDTree(table.points)
    cand = tree.query_pairs(tau, output_type="ndarray")
    if len(cand) == 0:
        return np.zeros((0, 2), np.int64)
    img = table.image_ids
    cand = cand[img[cand[:, 0]] != img[cand[:, 1]]]
    if len(cand) == 0:
        return np.zeros((0, 2), np.int64)
    d = np.linalg.norm(table.points[cand[:, 0]] - table.points[cand[:, 1]], axis=1)
    # directed edges a -> b, keep the nearest b per (a, image of b); ties go to the lower row
    a = np.concatenate([cand[:, 0], cand[:, 1]])
    b = np.concatenate([cand[:, 1], cand[:, 0]])
    dd = np.concatenate([d, d])
    order = np.lexsort((b, dd, img[b], a))
    a, b = a[order], b[order]
    first = np.ones(len(a), bool)
    first[1:] = (a[1:] != a[:-1]) | (img[b][1:] != img[b][:-1])
    a, b = a[first], b[first]
    n = np.int64(len(table))
    mutual = np.isin(b * n + a, a * n + b)
    a, b = a[mutual], b[mutual]
    # forward edges only, then the partner in the next image
    fwd = img[b] > img[a]
    a, b = a[fwd], b[fwd]
    order = np.lexsort((img[b], a))
    a, b = a[order], b[order]
    first = np.ones(len(a), bool)
    first[1:] = a[1:] != a[:-1]
    return np.stack([a[first], b[first]], axis=1)


def build_tracks(matches):
    """Connected components of the pairing graph spanning at least two images."""
    table, pairs = matches.table, matches.pairs
    if len(pairs) == 0:
        return []
    ds = DisjointSet(len(table))
    for a, b in pairs.tolist():
        ds.union(a, b)
    involved = np.unique(pairs)
    roots = np.array([ds.find(i) for i in involved.tolist()], dtype=np.int64)
    order = np.lexsort((involved, roots))
    involved, roots = involved[order], roots[order]
    starts = np.flatnonzero(np.r_[True, roots[1:] != roots[:-1]])
    groups = np.split(involved, starts[1:])
    # stable track ids: order components by their smallest row
    groups.sort(key=lambda g: g[0])
    tracks = []
    for g in groups:
        ids = table.image_ids[g]
        if len(np.unique(ids)) < 2:
            continue
        pts = table.points[g]
        tracks.append(Track(len(tracks), pts.mean(axis=0), ids, table.uv[g], pts))
    return tracks


def filter_ambiguous(tracks):
    """Drop tracks observed twice in one image; keep the first of identical tracks."""
    out, seen = [], set()
    for t in tracks:
        if len(t) < 2 or len(np.unique(t.image_ids)) != len(t.image_ids):
            continue
        k = t.key()
        if k in seen:
            continue
        seen.add(k)
        out.append(t)
    return out


def default_tau_merge(sigma):
    return max(3.0 * float(sigma), 1e-6)


def write_tracks(path, tracks):
    lines = []
    for t in tracks:
        obs = " ".join(f"{int(i)} {u!r} {v!r}" for i, (u, v) in zip(t.image_ids, t.uv.tolist()))
        x, y, z = t.point.tolist()
        lines.append(f"{t.track_id} {x!r} {y!r} {z!r} {len(t)} {obs}\n")
    Path(path).write_text("".join(lines))


def read_tracks(path):
    tracks = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        n = int(parts[4])
        body = parts[5:]
        if len(body) != 3 * n:
            raise ValueError(f"{path}:{lineno}: expected {n} observations, got {len(body) / 3:g}")
        obs = np.array(body, dtype=float).reshape(n, 3)
        point = np.array([float(x) for x in parts[1:4]])
        tracks.append(Track(int(parts[0]), point, obs[:, 0].astype(np.int64), obs[:, 1:],
                            np.tile(point, (n, 1))))
    return tracks
