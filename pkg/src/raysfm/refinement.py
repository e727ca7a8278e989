"""Pose and point refinement with the point-to-ray consistency loss.

Each observation of track ``i`` in camera ``k`` contributes
``rho(|d * nu - (X_i - C_k)|)`` where ``nu`` is the world-frame viewing ray
through the observed pixel and ``rho`` is the Huber loss. The ray scale ``d``
is eliminated in closed form, which leaves the residual
``-(I - nu nu^T)(X - C)`` whenever the point is in front of the camera.

Cameras are parameterized by rotation and center. A rotation increment
``phi`` acts on world-frame rays as ``nu <- exp([phi]x) nu``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, rotvec_to_matrix

logger = logging.getLogger(__name__)


class RefinementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    huber_delta: float = 0.1
    max_iters: int = 200
    anchor_weight: float = 1e4
    optimize_rotations: bool = True
    rel_tol: float = 1e-9
    step_tol: float = 1e-10

    def __post_init__(self):
        if not self.huber_delta > 0:
            raise ValueError("huber_delta must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if self.anchor_weight < 0:
            raise ValueError("anchor_weight must be non-negative")


@dataclass(frozen=True)
class ScaleAnchor:
    seed_id: int
    other_id: int
    distance: float


@dataclass(frozen=True, eq=False)
class RayObservation:
    track: int
    camera: int
    uv: np.ndarray
    ray: np.ndarray
    scale: float


# ---------------------------------------------------------------------------
# elementary pieces

def backproject_ray(K, pose, uv):
    """Unit world-frame direction from the camera center through pixel ``uv``."""
    xy = K.normalize(np.asarray(uv, dtype=float))
    b = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    b = b / np.linalg.norm(b, axis=-1, keepdims=True)
    return b @ pose.R


def ray_residual(d, nu, X, C):
    return d * np.asarray(nu, float) - (np.asarray(X, float) - np.asarray(C, float))


def optimal_scale(nu, X, C):
    """Non-negative ``d`` minimizing ``|d nu - (X - C)|``."""
    w = np.asarray(X, float) - np.asarray(C, float)
    return np.maximum(0.0, np.sum(np.asarray(nu, float) * w, axis=-1))


def huber(r, delta):
    r = np.asarray(r, dtype=float)
    return np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))


def huber_derivative(r, delta):
    r = np.asarray(r, dtype=float)
    return np.where(r <= delta, r, delta)


def huber_weight(r, delta):
    """IRLS weight ``rho'(r) / r``; equals 1 in the quadratic zone."""
    r = np.asarray(r, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(r <= delta, 1.0, delta / np.maximum(r, delta))


def _skew_batch(v):
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -v[..., 2], v[..., 1]
    S[..., 1, 0], S[..., 1, 2] = v[..., 2], -v[..., 0]
    S[..., 2, 0], S[..., 2, 1] = -v[..., 1], v[..., 0]
    return S


def residuals_and_jacobians(nu, X, C, need_jac=True):
    """Variable-projection residuals for world rays ``nu`` (``m x 3``).

    Returns ``r`` and, when requested, the Jacobians with respect to the
    rotation increment, the camera center and the point.
    """
    w = X - C
    d = np.maximum(0.0, np.einsum("ij,ij->i", nu, w))
    r = d[:, None] * nu - w
    if not need_jac:
        return r, d
    front = d > 0
    P = np.einsum("ij,ik->ijk", nu, nu) * front[:, None, None] - np.eye(3)
    J_X = P
    J_C = -P
    nxw = np.cross(nu, w)
    J_phi = -d[:, None, None] * _skew_batch(nu) + np.einsum("ij,ik->ijk", nu, nxw) * front[:, None, None]
    return r, d, J_phi, J_C, J_X


def observation_jacobian(R, C, X, bearing):
    """Single-observation residual and Jacobians ``(r, J_phi, J_C, J_X)``."""
    nu = (np.asarray(bearing, float) @ np.asarray(R, float))[None]
    r, _, Jp, Jc, Jx = residuals_and_jacobians(nu, np.asarray(X, float)[None], np.asarray(C, float)[None])
    return r[0], Jp[0], Jc[0], Jx[0]


def robust_gradient(R, C, X, bearing, delta):
    """Gradient of ``rho(|r|)`` for one observation, split as (phi, C, X)."""
    r, Jp, Jc, Jx = observation_jacobian(R, C, X, bearing)
    s = np.linalg.norm(r)
    w = float(huber_weight(s, delta)) if s > 0 else 1.0
    return w * Jp.T @ r, w * Jc.T @ r, w * Jx.T @ r


def perturb_rotation(R, phi):
    """Apply a world-frame rotation increment to a world-to-camera rotation."""
    return R @ rotvec_to_matrix(-np.asarray(phi, float))


# ---------------------------------------------------------------------------
# problem

@dataclass(eq=False)
class RefineProblem:
    camera_ids: list
    R: np.ndarray
    C: np.ndarray
    free_camera: np.ndarray
    points: np.ndarray
    obs_track: np.ndarray
    obs_camera: np.ndarray
    # unit bearings in the camera frame
    bearings: np.ndarray
    obs_uv: np.ndarray
    fixed_ids: frozenset
    seed_id: int
    anchor: ScaleAnchor | None = None
    huber_delta: float = 0.1
    track_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.seed_id not in self.fixed_ids:
            raise ValueError(f"seed camera {self.seed_id} must be fixed")
        nc, n_pts = len(self.camera_ids), len(self.points)
        if len(self.obs_track) and (self.obs_track.max() >= n_pts or self.obs_camera.max() >= nc):
            raise ValueError("observation references an unknown track or camera")
        if self.anchor is not None:
            for i in (self.anchor.seed_id, self.anchor.other_id):
                if i not in self.camera_ids:
                    raise ValueError(f"scale anchor camera {i} is not part of the problem")

    @property
    def observations(self):
        nu = np.einsum("mi,mij->mj", self.bearings, self.R[self.obs_camera])
        w = self.points[self.obs_track] - self.C[self.obs_camera]
        d = np.maximum(0.0, np.einsum("ij,ij->i", nu, w))
        return [RayObservation(int(t), int(c), u, v, float(s))
                for t, c, u, v, s in zip(self.obs_track, self.obs_camera, self.obs_uv, nu, d)]

    def poses(self):
        return {cid: Pose.from_center(self.R[k], self.C[k]) for k, cid in enumerate(self.camera_ids)}


def build_problem(poses, intrinsics, tracks, free_ids, seed_id, anchor=None, huber_delta=0.1):
    """Problem over ``tracks`` restricted to cameras in ``poses``.

    Cameras in ``free_ids`` are variables; all other posed cameras that
    observe the tracks are held fixed. Tracks keep at least two observations
    in posed cameras or are dropped.
    """
    free_ids = set(free_ids)
    if seed_id in free_ids:
        raise ValueError("the seed camera cannot be free")
    rows_t, rows_c, uvs, pts, kept = [], [], [], [], []
    for t in tracks:
        sel = np.array([int(i) in poses for i in t.image_ids], dtype=bool)
        if sel.sum() < 2:
            continue
        rows_t.append(np.full(int(sel.sum()), len(pts)))
        rows_c.append(t.image_ids[sel])
        uvs.append(t.uv[sel])
        pts.append(np.asarray(t.point, float))
        kept.append(t.track_id)
    if pts:
        obs_track = np.concatenate(rows_t)
        img = np.concatenate(rows_c).astype(np.int64)
        uv = np.concatenate(uvs)
    else:
        obs_track, img, uv = np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 2))
    cams = sorted(set(img.tolist()) | ({seed_id} if seed_id in poses else set()))
    if anchor is not None:
        cams = sorted(set(cams) | {anchor.seed_id, anchor.other_id})
    index = {c: k for k, c in enumerate(cams)}
    obs_camera = np.array([index[i] for i in img.tolist()], dtype=np.int64)
    bearings = np.zeros((len(img), 3))
    for c in cams:
        m = img == c
        if m.any():
            K = intrinsics[c] if not callable(intrinsics) else intrinsics(c)
            xy = K.normalize(uv[m])
            b = np.concatenate([xy, np.ones((len(xy), 1))], axis=1)
            bearings[m] = b / np.linalg.norm(b, axis=1, keepdims=True)
    R = np.array([poses[c].R for c in cams]).reshape(-1, 3, 3)
    C = np.array([poses[c].center for c in cams]).reshape(-1, 3)
    free = np.array([c in free_ids for c in cams], dtype=bool)
    fixed = frozenset(c for c in cams if c not in free_ids) | {seed_id}
    return RefineProblem(cams, R, C, free, np.array(pts).reshape(-1, 3), obs_track, obs_camera, bearings, uv,
                         fixed, seed_id, anchor, huber_delta, kept)


# ---------------------------------------------------------------------------
# solver

@dataclass(eq=False)
class SolveResult:
    poses: dict
    points: np.ndarray
    scales: np.ndarray
    initial_cost: float
    cost: float
    costs: list
    iterations: int
    reason: str


def _rays(prob, R):
    return np.einsum("mi,mij->mj", prob.bearings, R[prob.obs_camera])


def _anchor_terms(prob, C, options):
    a = prob.anchor
    if a is None or options.anchor_weight == 0:
        return None
    ks, ko = prob.camera_ids.index(a.seed_id), prob.camera_ids.index(a.other_id)
    if not prob.free_camera[ko] and not prob.free_camera[ks]:
        return None
    diff = C[ko] - C[ks]
    dist = np.linalg.norm(diff)
    e = dist - a.distance
    grad = diff / dist if dist > 0 else np.zeros(3)
    return ks, ko, e, grad


def evaluate_cost(prob, R, C, X, options):
    nu = _rays(prob, R)
    r, _ = residuals_and_jacobians(nu, X[prob.obs_track], C[prob.obs_camera], need_jac=False)
    s = np.linalg.norm(r, axis=1)
    bad = ~np.isfinite(s)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise RefinementError(
            f"non-finite residual at observation {i} (track {prob.obs_track[i]}, "
            f"camera {prob.camera_ids[prob.obs_camera[i]]})")
    cost = float(np.sum(huber(s, options.huber_delta)))
    an = _anchor_terms(prob, C, options)
    if an is not None:
        cost += 0.5 * options.anchor_weight * an[2] ** 2
    return cost


def _block_add(n, idx, blocks):
    flat = blocks.reshape(len(blocks), int(np.prod(blocks.shape[1:])))
    out = np.empty((n, flat.shape[1]))
    for j in range(flat.shape[1]):
        out[:, j] = np.bincount(idx, weights=flat[:, j], minlength=n)
    return out.reshape((n,) + blocks.shape[1:])


def _gram(A, B, w):
    """Per-observation ``w * A^T B``."""
    return w[:, None, None] * np.matmul(A.transpose(0, 2, 1), B)


def _linearize(prob, R, C, X, options, free_cam_idx, free_pt_idx, cp):
    nu = _rays(prob, R)
    r, d, J_phi, J_C, J_X = residuals_and_jacobians(nu, X[prob.obs_track], C[prob.obs_camera])
    if not (np.all(np.isfinite(J_phi)) and np.all(np.isfinite(J_X))):
        i = int(np.flatnonzero(~np.isfinite(J_phi).all(axis=(1, 2)) | ~np.isfinite(J_X).all(axis=(1, 2)))[0])
        raise RefinementError(f"non-finite Jacobian at observation {i}")
    s = np.linalg.norm(r, axis=1)
    w = huber_weight(s, options.huber_delta)
    Jc = np.concatenate([J_phi, J_C], axis=2) if cp == 6 else J_C

    fc = free_cam_idx[prob.obs_camera]
    fp = free_pt_idx[prob.obs_track]
    mc, mp = fc >= 0, fp >= 0
    nfc, nfp = int(free_cam_idx.max() + 1) if len(free_cam_idx) else 0, int(free_pt_idx.max() + 1) if len(free_pt_idx) else 0
    nfc, nfp = max(nfc, 0), max(nfp, 0)

    wr = w[:, None] * r
    Hcc = _block_add(nfc, fc[mc], _gram(Jc[mc], Jc[mc], w[mc]))
    gc = _block_add(nfc, fc[mc], np.matmul(wr[mc, None, :], Jc[mc])[:, 0])
    Hpp = _block_add(nfp, fp[mp], _gram(J_X[mp], J_X[mp], w[mp]))
    gp = _block_add(nfp, fp[mp], np.matmul(wr[mp, None, :], J_X[mp])[:, 0])
    both = mc & mp
    Hcp_blocks = _gram(Jc[both], J_X[both], w[both])
    an = _anchor_terms(prob, C, options)
    if an is not None:
        ks, ko, e, grad = an
        wa = options.anchor_weight
        for k, sign in ((ko, 1.0), (ks, -1.0)):
            j = free_cam_idx[k]
            if j < 0:
                continue
            # C occupies the last three slots of a camera block
            g3 = sign * grad
            Hcc[j, cp - 3:, cp - 3:] += wa * np.outer(g3, g3)
            gc[j, cp - 3:] += wa * e * g3
    Hcp = None
    if nfc and nfp and len(Hcp_blocks):
        # dense camera-point coupling; desk-scale camera counts keep this small
        rows = (fc[both] * cp)[:, None, None] + np.arange(cp)[None, :, None]
        cols = (fp[both] * 3)[:, None, None] + np.arange(3)[None, None, :]
        rows, cols = np.broadcast_arrays(rows, cols)
        Hcp = np.zeros((nfc * cp, nfp * 3))
        key = fc[both] * nfp + fp[both]
        if len(np.unique(key)) == len(key):
            Hcp[rows, cols] = Hcp_blocks
        else:
            np.add.at(Hcp, (rows, cols), Hcp_blocks)
    return Hcc, gc, Hpp, gp, Hcp


def _solve_damped(Hcc, gc, Hpp, gp, cp_blocks, lam, cp):
    """Damped normal equations, points eliminated by the Schur complement."""
    nfc, nfp = len(Hcc), len(Hpp)
    Hpp_inv = np.linalg.inv(Hpp + lam * np.eye(3)) if nfp else Hpp
    if nfc == 0:
        return np.zeros((0, cp)), -np.matmul(Hpp_inv, gp[:, :, None])[:, :, 0]
    S = np.zeros((nfc * cp, nfc * cp))
    for j in range(nfc):
        S[j * cp:(j + 1) * cp, j * cp:(j + 1) * cp] = Hcc[j] + lam * np.eye(cp)
    rhs = -gc.ravel()
    Hcp = None
    if cp_blocks is not None:
        Hcp = cp_blocks
        Y = np.matmul(Hcp.reshape(nfc * cp, nfp, 3).transpose(1, 0, 2), Hpp_inv)
        Y = Y.transpose(1, 0, 2).reshape(nfc * cp, nfp * 3)
        S -= Y @ Hcp.T
        rhs += Y @ gp.ravel()
    S = 0.5 * (S + S.T)
    dc = np.linalg.solve(S, rhs)
    if nfp:
        back = -gp.ravel()
        if Hcp is not None:
            back = back - Hcp.T @ dc
        dp = np.matmul(Hpp_inv, back.reshape(nfp, 3, 1))[:, :, 0]
    else:
        dp = np.zeros((0, 3))
    return dc.reshape(nfc, cp), dp


def solve(prob, options=SolverOptions()):
    """Levenberg-Marquardt on free camera and point parameters.

    Steps are accepted only when the robust cost decreases, so the returned
    cost never exceeds the initial one.
    """
    R, C, X = prob.R.copy(), prob.C.copy(), prob.points.copy()
    cp = 6 if options.optimize_rotations else 3
    free_cam_idx = np.full(len(prob.camera_ids), -1)
    free_cam_idx[prob.free_camera] = np.arange(int(prob.free_camera.sum()))
    touched = np.zeros(len(X), dtype=bool)
    touched[prob.obs_track] = True
    free_pt_idx = np.full(len(X), -1)
    free_pt_idx[touched] = np.arange(int(touched.sum()))
    cost = evaluate_cost(prob, R, C, X, options)
    initial = cost
    costs = [cost]
    reason = "max_iters"
    it = 0
    lam = None
    n_free = int(prob.free_camera.sum()) * cp + int(touched.sum()) * 3
    if n_free == 0:
        reason = "no_free_variables"
    elif cost == 0.0:
        reason = "zero_cost"
    while reason == "max_iters" and it < options.max_iters:
        it += 1
        Hcc, gc, Hpp, gp, cp_blocks = _linearize(prob, R, C, X, options, free_cam_idx, free_pt_idx, cp)
        diag = np.concatenate([np.einsum("nii->ni", Hcc).ravel(), np.einsum("nii->ni", Hpp).ravel()])
        if lam is None:
            lam = 1e-4 * float(diag.max()) if diag.size and diag.max() > 0 else 0.0
            if lam == 0.0:
                reason = "zero_gradient"
                break
        accepted = False
        for _ in range(30):
            try:
                dc, dp = _solve_damped(Hcc, gc, Hpp, gp, cp_blocks, lam, cp)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R_new, C_new, X_new = R.copy(), C.copy(), X.copy()
            free = np.flatnonzero(prob.free_camera)
            if len(free):
                if cp == 6:
                    for j, k in enumerate(free):
                        R_new[k] = perturb_rotation(R[k], dc[j, :3])
                C_new[free] = C[free] + dc[:, cp - 3:]
            X_new[touched] = X[touched] + dp
            new_cost = evaluate_cost(prob, R_new, C_new, X_new, options)
            if new_cost < cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            reason = "no_descent"
            break
        step = max(np.abs(dc).max() if dc.size else 0.0, np.abs(dp).max() if dp.size else 0.0)
        decrease = cost - new_cost
        R, C, X, cost = R_new, C_new, X_new, new_cost
        costs.append(cost)
        lam *= 0.5
        if cost == 0.0:
            reason = "zero_cost"
        elif decrease < options.rel_tol * costs[-2]:
            reason = "rel_decrease"
        elif step < options.step_tol:
            reason = "small_step"
    nu = _rays(prob, R)
    _, d = residuals_and_jacobians(nu, X[prob.obs_track], C[prob.obs_camera], need_jac=False)
    poses = {}
    for k, cid in enumerate(prob.camera_ids):
        poses[cid] = Pose.from_center(R[k], C[k]) if prob.free_camera[k] else None
    logger.debug("solve: %d iterations, cost %.3e -> %.3e (%s)", it, initial, cost, reason)
    return SolveResult(poses, X, d, initial, cost, costs, it, reason)


# ---------------------------------------------------------------------------
# pipeline stages

def _apply(state, prob, res):
    for cid, pose in res.poses.items():
        if pose is not None:
            state.poses[cid] = pose
    by_id = {t.track_id: t for t in state.tracks}
    for k, tid in enumerate(prob.track_ids):
        by_id[tid].point = res.points[k].copy()


def refine_epoch(state, new_ids, options=SolverOptions()):
    """Optimize only the cameras registered this epoch and the tracks they see.

    ``state`` needs ``poses``, ``intrinsics``, ``tracks``, ``seed_id``,
    ``scale_anchor`` and ``cost_curves``.
    """
    new_ids = set(new_ids)
    if not new_ids:
        return None
    if state.seed_id in new_ids:
        raise ValueError("the seed camera cannot be refined")
    touching = [t for t in state.tracks if new_ids.intersection(t.image_ids.tolist())]
    prob = build_problem(state.poses, state.intrinsics, touching, new_ids, state.seed_id,
                         _active_anchor(state, new_ids), options.huber_delta)
    res = solve(prob, options)
    _apply(state, prob, res)
    state.cost_curves.append(res.costs)
    return res


def finalize(state, options=SolverOptions()):
    """Single global solve with every camera free except the seed."""
    if len(state.poses) < 2:
        raise ValueError(f"finalization needs at least 2 registered images, got {len(state.poses)}")
    free = set(state.poses) - {state.seed_id}
    # warm start: re-triangulate the track points against the current poses
    warm = build_problem(state.poses, state.intrinsics, state.tracks, set(), state.seed_id, None,
                         options.huber_delta)
    _apply(state, warm, solve(warm, options))
    prob = build_problem(state.poses, state.intrinsics, state.tracks, free, state.seed_id,
                         _active_anchor(state, free), options.huber_delta)
    res = solve(prob, options)
    _apply(state, prob, res)
    state.cost_curves.append(res.costs)
    return res


def _active_anchor(state, free_ids):
    a = state.scale_anchor
    if a is None or a.other_id not in free_ids or a.other_id not in state.poses:
        return None
    return a
