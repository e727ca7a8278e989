"""Pointmap sources standing in for a learned pair-wise scene regressor.

Two backends share one duck-typed interface (``image_ids``, ``intrinsics``,
``query``, ``query_target``, ``observe``, ``anchor``, ``effective_sigma``):

* :class:`SyntheticProvider` renders ground-truth pointmaps of a procedural
  scene and corrupts them with Gaussian noise and uniform outliers. The
  per-epoch finetuning of the regressor is *modeled*, not performed: each
  time an image is observed its noise level is multiplied by ``gamma``.
* :class:`FileProvider` serves pointmaps stored as PMAP files, e.g. exported
  from a real network.

Synthetic pointmaps mix two kinds of valid pixels. Ordinary pixels carry the
ray-cast surface point seen through the pixel center. *Keypoint* pixels
carry a discrete landmark (with a stable ``corr_id``) together with the
sub-pixel location where that landmark projects, stored as an offset from
the pixel center. Both kinds project exactly onto their own pixel coordinates
at zero noise, and keypoints give multi-view tracks exact shared points.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose, SimTransform, read_intrinsics, rotvec_to_matrix

logger = logging.getLogger(__name__)

NO_CORR = 0


class PointmapFormatError(ValueError):
    pass


@dataclass(eq=False)
class Pointmap:
    """Per-pixel 3D points in a global frame.

    ``subpixel`` (optional) holds ``(du, dv)`` offsets from the pixel center
    for keypoint pixels and NaN elsewhere.
    """

    points: np.ndarray
    valid: np.ndarray
    corr_id: np.ndarray | None = None
    subpixel: np.ndarray | None = None

    def __post_init__(self):
        h, w = self.valid.shape
        if self.points.shape != (h, w, 3):
            raise ValueError(f"points grid {self.points.shape} does not match mask {self.valid.shape}")
        if self.corr_id is not None and self.corr_id.shape != (h, w):
            raise ValueError("corr_id grid does not match mask")
        if self.subpixel is not None and self.subpixel.shape != (h, w, 2):
            raise ValueError("subpixel grid does not match mask")

    @property
    def height(self):
        return self.valid.shape[0]

    @property
    def width(self):
        return self.valid.shape[1]

    def keypoint_mask(self):
        if self.subpixel is None:
            return np.zeros_like(self.valid)
        return self.valid & np.isfinite(self.subpixel[..., 0])

    def pixel_coords(self, rows, cols):
        """Pixel coordinates ``(u, v)`` of the given grid cells."""
        uv = np.stack([cols, rows], axis=-1).astype(float)
        if self.subpixel is not None:
            off = self.subpixel[rows, cols]
            off = np.where(np.isfinite(off), off, 0.0)
            uv = uv + off
        return uv


@dataclass(eq=False)
class KeypointSet:
    """Sparse per-image observations: pixel, predicted point and landmark id."""

    image_id: int
    uv: np.ndarray
    points: np.ndarray
    corr_id: np.ndarray | None
    rows: np.ndarray
    cols: np.ndarray

    def __len__(self):
        return len(self.uv)


# ---------------------------------------------------------------------------
# PMAP files

_MAGIC = b"PMAP"
_HEADER = struct.Struct("<4sHIIH")
_FLAG_CORR = 1
_FLAG_SUBPIXEL = 2
_MAX_PIXELS = 1 << 28


def save_pointmap(pm, path):
    """Write ``pm`` as little-endian PMAP (points are stored as float32)."""
    flags = (_FLAG_CORR if pm.corr_id is not None else 0) | (_FLAG_SUBPIXEL if pm.subpixel is not None else 0)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, 1, pm.width, pm.height, flags))
        f.write(np.ascontiguousarray(pm.points, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(pm.valid, dtype="u1").tobytes())
        if pm.corr_id is not None:
            f.write(np.ascontiguousarray(pm.corr_id, dtype="<u8").tobytes())
        if pm.subpixel is not None:
            f.write(np.ascontiguousarray(pm.subpixel, dtype="<f8").tobytes())


def load_pointmap(path):
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise PointmapFormatError(
            f"{path}: truncated header at offset 0: expected {_HEADER.size} bytes, got {len(data)}")
    magic, version, width, height, flags = _HEADER.unpack_from(data, 0)
    if magic != _MAGIC:
        raise PointmapFormatError(f"{path}: bad magic {magic!r} at offset 0, expected {_MAGIC!r}")
    if version != 1:
        raise PointmapFormatError(f"{path}: unsupported version {version} at offset 4")
    n = width * height
    if n > _MAX_PIXELS:
        raise PointmapFormatError(f"{path}: dimensions {width}x{height} at offset 6 exceed {_MAX_PIXELS} pixels")

    sections = [("points", "<f4", n * 3), ("valid", "u1", n)]
    if flags & _FLAG_CORR:
        sections.append(("corr_id", "<u8", n))
    if flags & _FLAG_SUBPIXEL:
        sections.append(("subpixel", "<f8", n * 2))
    expected = _HEADER.size + sum(np.dtype(dt).itemsize * cnt for _, dt, cnt in sections)
    if len(data) != expected:
        raise PointmapFormatError(
            f"{path}: payload size mismatch at offset {_HEADER.size}: "
            f"expected {expected} bytes in total, got {len(data)}")

    arrays = {}
    offset = _HEADER.size
    for name, dt, cnt in sections:
        arrays[name] = np.frombuffer(data, dtype=dt, count=cnt, offset=offset).copy()
        offset += np.dtype(dt).itemsize * cnt
    return Pointmap(
        points=arrays["points"].astype(np.float32).reshape(height, width, 3),
        valid=arrays["valid"].reshape(height, width).astype(bool),
        corr_id=arrays["corr_id"].astype(np.uint64).reshape(height, width) if "corr_id" in arrays else None,
        subpixel=arrays["subpixel"].astype(float).reshape(height, width, 2) if "subpixel" in arrays else None,
    )


# ---------------------------------------------------------------------------
# synthetic scenes

TRAJECTORIES = ("orbit", "forward")


@dataclass(frozen=True)
class SceneConfig:
    n_images: int = 20
    n_points: int = 3000
    trajectory: str = "orbit"
    width: int = 512
    height: int = 512
    focal: float = 600.0
    # fy = focal * aspect
    aspect: float = 1.0
    object_radius: float = 1.0
    camera_distance: float = 3.0
    # forward-facing ring radius / orbit height oscillation amplitude
    ring_radius: float = 0.6
    orbit_height: float = 0.4
    arc_degrees: float = 360.0
    position_jitter: float = 0.02
    look_jitter_deg: float = 1.0
    min_covisibility: float = 0.3
    min_points_per_image: int = 50
    n_isolated: int = 0

    def validate(self):
        if self.trajectory not in TRAJECTORIES:
            raise ValueError(f"unknown trajectory {self.trajectory!r}, expected one of {TRAJECTORIES}")
        if self.n_images < 2:
            raise ValueError("need at least 2 images")
        if not 0.0 <= self.min_covisibility <= 1.0:
            raise ValueError(f"co-visibility fraction must lie in [0, 1], got {self.min_covisibility}")
        if self.n_points < 1 or self.min_points_per_image < 0 or self.n_isolated < 0:
            raise ValueError("point and image counts must be non-negative")


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float


@dataclass(eq=False)
class SyntheticScene:
    config: SceneConfig
    rng_seed: int
    surface_points: np.ndarray
    point_ids: np.ndarray
    spheres: list
    gt_poses: dict
    intrinsics: dict
    visibility: dict
    adjacent_pairs: list

    @property
    def image_ids(self):
        return sorted(self.gt_poses)

    @property
    def scale(self):
        return self.config.object_radius

    def bounding_box(self):
        return self.surface_points.min(axis=0), self.surface_points.max(axis=0)

    @functools.lru_cache(maxsize=6)
    def render(self, image_id, dense=True):
        """Exact pointmap of ``image_id`` in the ground-truth world frame.

        With ``dense=False`` only keypoint pixels are valid, which skips the
        per-pixel ray casting.
        """
        K = self.intrinsics[image_id]
        pose = self.gt_poses[image_id]
        R, C = pose.R, pose.center
        shape = (K.height, K.width)
        if dense:
            dirs = _pixel_rays(K) @ R                       # rows R.T @ d
            depth = np.full(shape, np.inf)
            for s in self.spheres:
                depth = np.minimum(depth, _ray_sphere(C, dirs, s))
            valid = np.isfinite(depth)
            points = np.zeros(shape + (3,))
            points[valid] = C + depth[valid, None] * dirs[valid]
        else:
            valid = np.zeros(shape, dtype=bool)
            points = np.zeros(shape + (3,))

        kp = self.keypoints(image_id)
        r, c = kp.rows, kp.cols
        points[r, c] = kp.points
        valid[r, c] = True
        corr = np.zeros(valid.shape, dtype=np.uint64)
        corr[r, c] = kp.corr_id
        sub = np.full(valid.shape + (2,), np.nan)
        sub[r, c] = kp.uv - np.stack([c, r], axis=1)
        return Pointmap(points, valid, corr, sub)

    @functools.lru_cache(maxsize=None)
    def keypoints(self, image_id):
        """Landmark observations of ``image_id``, one per pixel, row-major order.

        When several landmarks fall into the same pixel the nearest one wins.
        """
        K = self.intrinsics[image_id]
        pose = self.gt_poses[image_id]
        idx = self.visibility[image_id]
        X = self.surface_points[idx]
        Xc = X @ pose.R.T + pose.t
        u = K.fx * Xc[:, 0] / Xc[:, 2] + K.cx
        v = K.fy * Xc[:, 1] / Xc[:, 2] + K.cy
        col = np.rint(u).astype(int)
        row = np.rint(v).astype(int)
        lin = row * K.width + col
        order = np.lexsort((Xc[:, 2], lin))
        _, first = np.unique(lin[order], return_index=True)
        keep = order[first]
        return KeypointSet(image_id, np.stack([u[keep], v[keep]], axis=1), X[keep],
                           self.point_ids[idx[keep]], row[keep], col[keep])

    def observed_ids(self, image_id):
        return self.point_ids[self.visibility[image_id]]


@functools.lru_cache(maxsize=8)
def _pixel_rays(K):
    cols, rows = np.meshgrid(np.arange(K.width, dtype=float), np.arange(K.height, dtype=float))
    return np.stack([(cols - K.cx) / K.fx, (rows - K.cy) / K.fy, np.ones_like(cols)], axis=-1)


def _ray_sphere(origin, dirs, sphere):
    """Depth along each (z-normalized) ray to the first hit, inf on a miss."""
    oc = origin - sphere.center
    a = np.einsum("...i,...i->...", dirs, dirs)
    b = dirs @ oc
    c = oc @ oc - sphere.radius ** 2
    disc = b * b - a * c
    hit = disc > 0
    t = np.full(disc.shape, np.inf)
    t[hit] = (-b[hit] - np.sqrt(disc[hit])) / a[hit]
    t[~(t > 0)] = np.inf
    return t


def _look_at(C, target, up):
    z = target - C
    z = z / np.linalg.norm(z)
    y = -(up - (up @ z) * z)
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    return Pose.from_center(np.stack([x, y, z]), C)


def _random_rotation_small(rng, max_deg):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(max_deg) * rng.uniform(-1, 1)
    return rotvec_to_matrix(axis * angle)


def _landmark_visibility(X, spheres, owner, C, pose, K):
    R = pose.R
    Xc = (X - C) @ R.T
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[:, 0] / z + K.cx
        v = K.fy * Xc[:, 1] / z + K.cy
    ok = (z > 1e-6) & (u > -0.5) & (u < K.width - 0.5) & (v > -0.5) & (v < K.height - 0.5)
    # facing test against the owning sphere; grazing views are dropped
    centers = np.array([s.center for s in spheres])[owner]
    normal = X - centers
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    view = C - X
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    ok &= np.einsum("ij,ij->i", normal, view) > 0.1
    # occlusion by other spheres along the segment X -> C
    for si, s in enumerate(spheres):
        cand = ok & (owner != si)
        if not np.any(cand):
            continue
        d = C - X[cand]
        length = np.linalg.norm(d, axis=1)
        d /= length[:, None]
        oc = X[cand] - s.center
        b = np.einsum("ij,ij->i", d, oc)
        c = np.einsum("ij,ij->i", oc, oc) - s.radius ** 2
        disc = b * b - c
        t = -b - np.sqrt(np.maximum(disc, 0))
        blocked = (disc > 0) & (t > 0) & (t < length)
        ok[np.flatnonzero(cand)[blocked]] = False
    return np.flatnonzero(ok)


def generate_scene(config, rng_seed):
    """Procedural scene: a textured sphere seen from an orbit or a forward ring.

    Isolated images (``n_isolated``) look at private distractor spheres that
    no other camera sees, so they are unreachable in the similarity graph.
    """
    config.validate()
    rng = np.random.default_rng(rng_seed)
    r = config.object_radius
    spheres = [Sphere(np.zeros(3), r)]
    for j in range(config.n_isolated):
        spheres.append(Sphere(np.array([50.0 + 20.0 * j, 0.0, 50.0]), r))

    n_main = config.n_points
    n_extra = max(config.min_points_per_image * 4, 200) if config.n_isolated else 0
    owner = np.concatenate([np.zeros(n_main, int)] + [np.full(n_extra, j + 1) for j in range(config.n_isolated)])
    dirs = rng.normal(size=(len(owner), 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centers = np.array([s.center for s in spheres])
    X = centers[owner] + r * dirs
    point_ids = np.arange(1, len(X) + 1, dtype=np.uint64)

    K = Intrinsics(config.focal, config.focal * config.aspect, (config.width - 1) / 2.0,
                   (config.height - 1) / 2.0, config.width, config.height)
    D = config.camera_distance
    poses = {}
    n = config.n_images
    arc = np.radians(config.arc_degrees)
    closed = config.arc_degrees >= 360.0
    for k in range(n):
        frac = k / n if closed else k / max(n - 1, 1)
        theta = arc * frac
        if config.trajectory == "orbit":
            C = np.array([D * np.cos(theta), D * np.sin(theta),
                          config.orbit_height * np.sin(3 * theta)])
            up = np.array([0.0, 0.0, 1.0])
        else:
            C = np.array([config.ring_radius * np.cos(theta), config.ring_radius * np.sin(theta), -D])
            up = np.array([0.0, 1.0, 0.0])
        C = C + config.position_jitter * rng.normal(size=3)
        base = _look_at(C, np.zeros(3), up)
        Rj = _random_rotation_small(rng, config.look_jitter_deg)
        poses[k] = Pose.from_center(Rj @ base.R, C)
    for j in range(config.n_isolated):
        c0 = spheres[j + 1].center
        C = c0 - np.array([0.0, 0.0, D])
        poses[n + j] = _look_at(C, c0, np.array([0.0, 1.0, 0.0]))

    intrinsics = {i: K for i in poses}
    visibility = {i: _landmark_visibility(X, spheres, owner, poses[i].center, poses[i], K) for i in poses}
    for i, vis in visibility.items():
        if len(vis) < config.min_points_per_image:
            raise ValueError(
                f"image {i} observes {len(vis)} surface points, fewer than the required "
                f"{config.min_points_per_image}")

    pairs = [(k, k + 1) for k in range(n - 1)]
    if closed and n > 2:
        pairs.append((n - 1, 0))
    for a, b in pairs:
        va, vb = set(visibility[a].tolist()), set(visibility[b].tolist())
        frac = len(va & vb) / max(1, min(len(va), len(vb)))
        if frac < config.min_covisibility:
            raise ValueError(
                f"unsatisfiable co-visibility: adjacent images {a} and {b} share {frac:.3f} "
                f"of their points, below {config.min_covisibility}")

    return SyntheticScene(config, int(rng_seed), X, point_ids, spheres, poses, intrinsics, visibility, pairs)


# ---------------------------------------------------------------------------
# provider state and queries

@dataclass(frozen=True)
class ProviderState:
    noise_sigma0: float = 0.0
    outlier_fraction: float = 0.0
    gamma: float = 1.0
    counts: dict = field(default_factory=dict)
    rng_seed: int = 0
    # world -> output frame, set when the seed image becomes the reference frame
    frame: SimTransform = field(default_factory=SimTransform)

    def __post_init__(self):
        if self.noise_sigma0 < 0:
            raise ValueError("noise sigma must be non-negative")
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError(f"outlier fraction must lie in [0, 1), got {self.outlier_fraction}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"attenuation must lie in (0, 1], got {self.gamma}")

    def effective_sigma(self, image_id):
        return self.noise_sigma0 * self.gamma ** self.counts.get(image_id, 0)


def observe(state, image_ids, rounds=1):
    """Record that the regressor was finetuned on ``image_ids``."""
    counts = dict(state.counts)
    for i in image_ids:
        counts[i] = counts.get(i, 0) + rounds
    return dataclasses.replace(state, counts=counts)


def _corrupt_points(points, corr, state, scene, image_id, rng):
    points = state.frame.apply(points)
    sigma = state.effective_sigma(image_id)
    if sigma > 0:
        points = points + rng.normal(scale=sigma, size=points.shape)
    corr = corr.copy()
    if state.outlier_fraction > 0:
        out = rng.random(len(points)) < state.outlier_fraction
        lo, hi = scene.bounding_box()
        corners = state.frame.apply(np.array([[x, y, z] for x in (lo[0], hi[0])
                                             for y in (lo[1], hi[1]) for z in (lo[2], hi[2])]))
        lo, hi = corners.min(axis=0), corners.max(axis=0)
        points[out] = rng.uniform(lo, hi, size=(int(out.sum()), 3))
        corr[out] = NO_CORR
    return points, corr


def _corrupt(gt, state, scene, image_id, rng):
    # noise is drawn only for valid pixels, in row-major order
    points, flat = _corrupt_points(gt.points[gt.valid], gt.corr_id[gt.valid], state, scene, image_id, rng)
    full = np.zeros(gt.points.shape)
    full[gt.valid] = points
    corr = np.zeros_like(gt.corr_id)
    corr[gt.valid] = flat
    return Pointmap(full, gt.valid.copy(), corr, gt.subpixel.copy())


def _query_rng(state, ref_id, tgt_id, which):
    c_ref = state.counts.get(ref_id, 0)
    c_tgt = state.counts.get(tgt_id, 0)
    return np.random.default_rng([state.rng_seed, ref_id, tgt_id, c_ref, c_tgt, which])


def _check_ids(scene, *ids):
    for i in ids:
        if i not in scene.gt_poses:
            raise KeyError(f"unknown image id {i!r}")


def query_pointmaps(state, scene, ref_id, tgt_id):
    """Pointmaps of the (reference, target) pair at the current noise level."""
    _check_ids(scene, ref_id, tgt_id)
    ref = _corrupt(scene.render(ref_id), state, scene, ref_id, _query_rng(state, ref_id, tgt_id, 0))
    tgt = _corrupt(scene.render(tgt_id), state, scene, tgt_id, _query_rng(state, ref_id, tgt_id, 1))
    return ref, tgt


def query_keypoints(state, scene, ref_id, tgt_id):
    """Keypoint observations of the target at the current noise level."""
    _check_ids(scene, ref_id, tgt_id)
    kp = scene.keypoints(tgt_id)
    points, corr = _corrupt_points(kp.points, kp.corr_id, state, scene, tgt_id,
                                   _query_rng(state, ref_id, tgt_id, 2))
    return KeypointSet(tgt_id, kp.uv.copy(), points, corr, kp.rows, kp.cols)


def query_target(state, scene, ref_id, tgt_id, keypoints_only=False):
    """Target half of :func:`query_pointmaps`, bit-identical to it.

    ``keypoints_only`` returns a sparse pointmap holding just the keypoint
    pixels, with the same values as :func:`query_keypoints`.
    """
    _check_ids(scene, ref_id, tgt_id)
    if keypoints_only:
        K = scene.intrinsics[tgt_id]
        kp = query_keypoints(state, scene, ref_id, tgt_id)
        shape = (K.height, K.width)
        points = np.zeros(shape + (3,))
        valid = np.zeros(shape, dtype=bool)
        corr = np.zeros(shape, dtype=np.uint64)
        sub = np.full(shape + (2,), np.nan)
        points[kp.rows, kp.cols] = kp.points
        valid[kp.rows, kp.cols] = True
        corr[kp.rows, kp.cols] = kp.corr_id
        sub[kp.rows, kp.cols] = kp.uv - np.stack([kp.cols, kp.rows], axis=1)
        return Pointmap(points, valid, corr, sub)
    return _corrupt(scene.render(tgt_id), state, scene, tgt_id, _query_rng(state, ref_id, tgt_id, 1))


class SyntheticProvider:
    """Stateful wrapper used by the pipeline."""

    def __init__(self, scene, state):
        self.scene = scene
        self.state = state

    @property
    def image_ids(self):
        return self.scene.image_ids

    def intrinsics(self, image_id):
        return self.scene.intrinsics[image_id]

    def query(self, ref_id, tgt_id):
        return query_pointmaps(self.state, self.scene, ref_id, tgt_id)

    def query_target(self, ref_id, tgt_id, keypoints_only=False):
        return query_target(self.state, self.scene, ref_id, tgt_id, keypoints_only)

    def query_keypoints(self, ref_id, tgt_id):
        return query_keypoints(self.state, self.scene, ref_id, tgt_id)

    def observe(self, image_ids, rounds=1):
        self.state = observe(self.state, image_ids, rounds)

    def effective_sigma(self, image_id):
        return self.state.effective_sigma(image_id)

    def anchor(self, seed_id):
        """Express all future predictions in the seed camera's frame."""
        T = self.scene.gt_poses[seed_id]
        self.state = dataclasses.replace(self.state, frame=SimTransform(1.0, T.q, T.t))
        return Pose.identity()

    @property
    def ground_truth(self):
        return dict(self.scene.gt_poses)


class FileProvider:
    """Serves ``pointmaps/<image_id>.pmap`` files with ``intrinsics.txt``.

    Files hold one pointmap per image in a shared frame; the pair structure of
    queries is ignored. Anchoring estimates the seed pose in the file frame by
    robust PnP and re-expresses every pointmap in the seed camera frame.
    """

    def __init__(self, root, noise_sigma=0.0):
        self.root = Path(root)
        path = self.root / "intrinsics.txt"
        if not path.exists():
            raise FileNotFoundError(f"missing intrinsics file: {path}")
        self._intrinsics = read_intrinsics(path)
        self._pm_dir = self.root / "pointmaps"
        for i in self._intrinsics:
            p = self._pm_dir / f"{i}.pmap"
            if not p.exists():
                raise FileNotFoundError(f"missing pointmap file: {p}")
        self.counts = {}
        self.frame = SimTransform()
        self.noise_sigma = noise_sigma

    @property
    def image_ids(self):
        return sorted(self._intrinsics)

    def intrinsics(self, image_id):
        return self._intrinsics[image_id]

    @functools.lru_cache(maxsize=16)
    def _load(self, image_id):
        if image_id not in self._intrinsics:
            raise KeyError(f"unknown image id {image_id!r}")
        return load_pointmap(self._pm_dir / f"{image_id}.pmap")

    def query_target(self, ref_id, tgt_id, keypoints_only=False):
        self._load(ref_id)
        pm = self._load(tgt_id)
        pts = np.zeros(pm.points.shape)
        pts[pm.valid] = self.frame.apply(pm.points[pm.valid].astype(float))
        return Pointmap(pts, pm.valid, pm.corr_id, pm.subpixel)

    def query(self, ref_id, tgt_id):
        return self.query_target(ref_id, ref_id), self.query_target(ref_id, tgt_id)

    def query_keypoints(self, ref_id, tgt_id, downsample=4):
        """Keypoint pixels when the file has a sub-pixel channel, else strided samples."""
        pm = self.query_target(ref_id, tgt_id)
        mask = pm.keypoint_mask()
        if not mask.any():
            off = downsample // 2
            mask = np.zeros_like(pm.valid)
            mask[off::downsample, off::downsample] = pm.valid[off::downsample, off::downsample]
        rows, cols = np.nonzero(mask)
        corr = pm.corr_id[rows, cols] if pm.corr_id is not None else None
        return KeypointSet(tgt_id, pm.pixel_coords(rows, cols), pm.points[rows, cols], corr, rows, cols)

    def observe(self, image_ids, rounds=1):
        for i in image_ids:
            self.counts[i] = self.counts.get(i, 0) + rounds

    def effective_sigma(self, image_id):
        return self.noise_sigma

    def anchor(self, seed_id, ransac_cfg=None, downsample=4):
        from .registration import RansacConfig, build_correspondences, ransac_pnp

        cfg = ransac_cfg or RansacConfig(min_inliers=4)
        pm = self._load(seed_id)
        pm = Pointmap(pm.points.astype(float), pm.valid, pm.corr_id, pm.subpixel)
        corr = build_correspondences(pm, downsample)
        res = ransac_pnp(corr.uv, corr.points, self._intrinsics[seed_id], cfg)
        if res.inlier_count == 0:
            raise RuntimeError(f"could not estimate the seed pose of image {seed_id} in the file frame")
        T = res.pose
        self.frame = SimTransform(1.0, T.q, T.t)
        return Pose.identity()

    ground_truth = None
