"""Small synthetic refinement scenes shared by several test modules."""

from types import SimpleNamespace

import numpy as np

from raysfm.geometry import Intrinsics, Pose, project_points, rotvec_to_matrix
from raysfm.refinement import ScaleAnchor
from raysfm.tracks import Track

K_REF = Intrinsics(300.0, 280.0, 127.5, 119.5, 256, 240)


def _look_at(C, target=np.zeros(3)):
    z = target - C
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 0.0, 1.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_center(np.stack([x, y, z]), C)


def ring_scene(rng, n_cams=6, n_pts=60, arc=np.pi / 2, radius=3.0):
    """Cameras on an arc looking at a unit ball of points, in the frame of camera 0."""
    poses = {}
    for k in range(n_cams):
        th = arc * k / max(n_cams - 1, 1)
        C = np.array([radius * np.cos(th), radius * np.sin(th), 0.3 * rng.normal()])
        poses[k] = _look_at(C, rng.normal(scale=0.05, size=3))
    X = rng.uniform(-1, 1, (n_pts * 3, 3))
    X = X[np.linalg.norm(X, axis=1) < 1][:n_pts]
    T0 = poses[0]
    poses = {k: p.compose(T0.inverse()) for k, p in poses.items()}
    X = T0.apply(X)
    tracks = []
    for i, x in enumerate(X):
        ids, uvs = [], []
        for k, p in poses.items():
            uv, z = project_points(K_REF, p.R, p.t, x[None])
            if z[0] > 0:
                ids.append(k)
                uvs.append(uv[0])
        tracks.append(Track(i, x.copy(), np.array(ids), np.array(uvs), np.tile(x, (len(ids), 1))))
    return poses, X, tracks


def make_state(poses, tracks, seed_id=0, anchor_id=1, gt=None):
    gt = gt or poses
    anchor = ScaleAnchor(seed_id, anchor_id, float(np.linalg.norm(gt[anchor_id].center - gt[seed_id].center)))
    return SimpleNamespace(poses=dict(poses), intrinsics={k: K_REF for k in poses}, tracks=tracks,
                           seed_id=seed_id, scale_anchor=anchor, cost_curves=[])


def perturb(rng, pose, deg, rel_t):
    dR = rotvec_to_matrix(np.radians(deg) * _unit(rng))
    C = pose.center
    return Pose.from_center(dR @ pose.R, C + rel_t * max(np.linalg.norm(C), 1.0) * _unit(rng))


def _unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def copy_tracks(tracks, points=None):
    return [Track(t.track_id, (t.point if points is None else points[k]).copy(), t.image_ids.copy(), t.uv.copy(),
                  t.predictions.copy()) for k, t in enumerate(tracks)]


def gradient_config(rng):
    """Random (R, C, X, bearing) with the point in front of the ray."""
    from raysfm.geometry import rotvec_to_matrix as rv

    R = rv(rng.normal(size=3))
    C = rng.normal(scale=2.0, size=3)
    b = np.r_[rng.uniform(-0.5, 0.5, 2), 1.0]
    b /= np.linalg.norm(b)
    depth = rng.uniform(0.5, 8.0)
    # offsets on both sides of the Huber threshold
    off = rng.normal(size=3) * rng.choice([0.01, 0.05, 0.3, 1.0])
    X = C + depth * (b @ R) + off
    return R, C, X, b


def gradient_errors(R, C, X, b, delta=0.1, h=1e-6):
    """Max relative error of analytic vs central-difference derivatives.

    Checks the raw residual Jacobians (phi, C, X) and the robust gradient.
    """
    from raysfm.refinement import huber, observation_jacobian, perturb_rotation, robust_gradient

    def resid(p):
        return observation_jacobian(perturb_rotation(R, p[:3]), p[3:6], p[6:9], b)[0]

    def loss(p):
        return np.atleast_1d(huber(np.linalg.norm(resid(p)), delta))

    p0 = np.r_[np.zeros(3), C, X]
    scale = np.r_[np.ones(3), np.full(6, max(1.0, np.abs(np.r_[C, X]).max()))]
    steps = h * scale

    def fd(f):
        cols = []
        for i in range(9):
            e = np.zeros(9)
            e[i] = steps[i]
            cols.append((f(p0 + e) - f(p0 - e)) / (2 * steps[i]))
        return np.stack(cols, axis=-1)

    _, Jp, Jc, Jx = observation_jacobian(R, C, X, b)
    J = np.concatenate([Jp, Jc, Jx], axis=1)
    Jn = fd(resid)
    g = np.concatenate(robust_gradient(R, C, X, b, delta))
    gn = fd(loss)[0]
    rel_j = np.linalg.norm(J - Jn) / max(np.linalg.norm(Jn), 1e-12)
    rel_g = np.linalg.norm(g - gn) / max(np.linalg.norm(gn), 1e-12)
    return rel_j, rel_g
