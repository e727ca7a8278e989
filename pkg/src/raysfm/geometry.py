"""Rigid and similarity transforms, pinhole projection and pose metrics.

Conventions used throughout the package:

* A :class:`Pose` maps world points into the camera frame,
  ``x_cam = R @ x_world + t``; the camera center is ``C = -R.T @ t``.
* Quaternions are stored scalar-first ``(w, x, y, z)`` and kept in the
  ``w >= 0`` hemisphere so that serialized poses are canonical.
* Pixel centers sit at integer coordinates (``u = fx * x / z + cx``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation


class CheiralityError(ValueError):
    """Raised when a point lies on or behind the image plane."""


class DegenerateConfigurationError(ValueError):
    """Raised when a point configuration cannot determine a transform."""


# ---------------------------------------------------------------------------
# quaternion helpers

def _canonical(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError(f"invalid quaternion {q!r}")
    q = q / n
    # pick the w >= 0 hemisphere; break w == 0 ties on the first nonzero entry
    for v in q:
        if v != 0.0:
            return q if v > 0 else -q
    return q


def quat_multiply(a, b):
    """Hamilton product ``a ⊗ b`` of scalar-first quaternions."""
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R):
    x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()
    return _canonical([w, x, y, z])


def rotvec_to_matrix(v):
    return Rotation.from_rotvec(np.asarray(v, dtype=float)).as_matrix()


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def project_to_so3(M):
    """Nearest rotation matrix to ``M`` in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(M)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    return U @ D @ Vt


# ---------------------------------------------------------------------------
# types

@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", _canonical(self.q))
        t = np.array(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError(f"non-finite translation {t!r}")
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, R, t):
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_center(cls, R, C):
        R = np.asarray(R, dtype=float)
        return cls(matrix_to_quat(R), -R @ np.asarray(C, dtype=float))

    @property
    def R(self):
        return quat_to_matrix(self.q)

    @property
    def center(self):
        return -self.R.T @ self.t

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.q, other.q)
        return Pose(q, self.R @ other.t + self.t)

    def inverse(self):
        qi = quat_conjugate(self.q)
        return Pose(qi, -quat_to_matrix(qi) @ self.t)

    def apply(self, X):
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.q, other.q) and np.array_equal(self.t, other.t))

    def __hash__(self):
        return hash((self.q.tobytes(), self.t.tobytes()))

    def __repr__(self):
        return f"Pose(q={self.q.tolist()}, t={self.t.tolist()})"


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, uv):
        """Pixel coordinates to normalized image-plane coordinates."""
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)

    def scaled(self, factor):
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)), int(round(self.height * factor)))


@dataclass(frozen=True, eq=False)
class SimTransform:
    """``x -> scale * R @ x + t``."""

    scale: float = 1.0
    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "q", _canonical(self.q))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(3))

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def apply(self, X):
        return self.scale * np.asarray(X, dtype=float) @ self.R.T + self.t

    def unapply(self, Y):
        return (np.asarray(Y, dtype=float) - self.t) @ self.R / self.scale

    def inverse(self):
        Ri = self.R.T
        return SimTransform(1.0 / self.scale, matrix_to_quat(Ri), -Ri @ self.t / self.scale)

    def apply_to_pose(self, pose):
        """Re-express a world-to-camera pose in the transformed world frame.

        The camera frame is scaled along with the world so that rotations are
        unchanged up to the frame change and centers map like points.
        """
        R = pose.R @ self.R.T
        t = self.scale * pose.t - R @ self.t
        return Pose.from_matrix(R, t)


# ---------------------------------------------------------------------------
# projection

def project_points(K, R, t, X):
    """Vectorized pinhole projection; returns ``(uv, z)`` without cheirality checks."""
    Xc = np.asarray(X, dtype=float) @ np.asarray(R).T + t
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = K.fx * Xc[..., 0] / z + K.cx
        v = K.fy * Xc[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1), z


def project(K, T, X):
    """Project world point(s) ``X`` through camera ``(K, T)``.

    Raises :class:`CheiralityError` if any point has ``z_cam <= 1e-9``.
    """
    uv, z = project_points(K, T.R, T.t, X)
    bad = ~(z > 1e-9)
    if np.any(bad):
        idx = np.flatnonzero(np.atleast_1d(bad))
        raise CheiralityError(f"point(s) behind camera at index {idx[:5].tolist()}")
    return uv


# ---------------------------------------------------------------------------
# alignment and metrics

def umeyama_align(src, dst):
    """Least-squares similarity ``dst ≈ s R src + t`` (Umeyama 1991)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"expected two (N, 3) arrays of equal shape, got {src.shape} and {dst.shape}")
    n = len(src)
    if n < 3:
        raise DegenerateConfigurationError(f"need at least 3 point pairs, got {n}")

    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = (xs ** 2).sum() / n
    sv_src = np.linalg.svd(xs, compute_uv=False)
    if var_s == 0.0 or sv_src[1] <= 1e-10 * sv_src[0]:
        raise DegenerateConfigurationError("source points are collinear or coincident")

    cov = xd.T @ xs / n
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise DegenerateConfigurationError("rank-deficient cross-covariance")
    R = U @ S @ Vt
    s = float(np.trace(np.diag(d) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return SimTransform(s, matrix_to_quat(R), t)


def rotation_angle_deg(qa, qb):
    """Geodesic angle between two unit quaternions, in degrees."""
    dq = quat_multiply(qa, quat_conjugate(qb))
    return math.degrees(2.0 * math.asin(min(1.0, float(np.linalg.norm(dq[1:])))))


def pose_error(pred, gt):
    """``(rotation error in degrees, camera-center distance)``."""
    return rotation_angle_deg(pred.q, gt.q), float(np.linalg.norm(pred.center - gt.center))


@dataclass
class Evaluation:
    per_image: dict
    mean_rotation_deg: float
    mean_translation: float
    transform: SimTransform

    def as_dict(self):
        return {
            "mean_rotation_deg": self.mean_rotation_deg,
            "mean_translation": self.mean_translation,
            "per_image": {str(k): {"rotation_deg": r, "translation": t}
                          for k, (r, t) in sorted(self.per_image.items())},
        }


def align_and_evaluate(pred, gt):
    """Align predicted camera centers to ground truth, then score each pose.

    ``pred`` and ``gt`` map image ids to :class:`Pose`. Translation errors are
    reported in the ground-truth frame after the similarity alignment.
    """
    ids = sorted(set(pred) & set(gt))
    if len(ids) < 3:
        raise DegenerateConfigurationError(
            f"need at least 3 common image ids for alignment, got {len(ids)}")
    src = np.array([pred[i].center for i in ids])
    dst = np.array([gt[i].center for i in ids])
    sim = umeyama_align(src, dst)
    per_image = {i: pose_error(sim.apply_to_pose(pred[i]), gt[i]) for i in ids}
    rot = np.array([v[0] for v in per_image.values()])
    trans = np.array([v[1] for v in per_image.values()])
    return Evaluation(per_image, float(rot.mean()), float(trans.mean()), sim)


# ---------------------------------------------------------------------------
# pose text files

def write_poses(path, poses):
    """Write ``image_id qw qx qy qz tx ty tz`` lines sorted by id."""
    lines = []
    for image_id in sorted(poses):
        p = poses[image_id]
        vals = " ".join(repr(float(v)) for v in (*p.q, *p.t))
        lines.append(f"{image_id} {vals}\n")
    Path(path).write_text("".join(lines))


def read_poses(path):
    poses = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        vals = [float(v) for v in parts[1:]]
        poses[int(parts[0])] = Pose(vals[:4], vals[4:])
    return poses


def write_intrinsics(path, intrinsics):
    """Write ``image_id fx fy cx cy width height`` lines sorted by id."""
    lines = []
    for image_id in sorted(intrinsics):
        K = intrinsics[image_id]
        lines.append(f"{image_id} {K.fx!r} {K.fy!r} {K.cx!r} {K.cy!r} {K.width} {K.height}\n")
    Path(path).write_text("".join(lines))


def read_intrinsics(path):
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
        fx, fy, cx, cy = (float(v) for v in parts[1:5])
        out[int(parts[0])] = Intrinsics(fx, fy, cx, cy, int(parts[5]), int(parts[6]))
    return out
