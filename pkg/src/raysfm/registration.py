"""Coarse camera registration from direct 2D-3D correspondences.

A pointmap already pairs every pixel with a 3D point in the global frame, so
registration is a PnP problem. Hypotheses come from a minimal P3P solver on
random triples, are ranked with a sigmoid soft inlier count, and the winner
is refined by iteratively reweighted DLT on its hard inliers.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .geometry import Pose, matrix_to_quat, project_points, project_to_so3, quat_to_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RansacConfig:
    hypothesis_count: int = 64
    reproj_threshold: float = 6.0
    inlier_alpha: float = 100.0
    min_inliers: int = 5000
    rng_seed: int = 0
    refine_rounds: int = 10

    def __post_init__(self):
        if self.hypothesis_count < 1:
            raise ValueError("hypothesis_count must be >= 1")
        if not self.reproj_threshold > 0:
            raise ValueError("reprojection threshold must be positive")
        if self.min_inliers < 4:
            raise ValueError("min_inliers must be >= 4")


@dataclass(eq=False)
class Correspondences:
    uv: np.ndarray
    points: np.ndarray
    # (row, col) of the source pixel in the pointmap grid
    grid: np.ndarray

    def __len__(self):
        return len(self.uv)


@dataclass(eq=False)
class RegistrationResult:
    pose: Pose
    inlier_count: int
    inlier_mask: np.ndarray
    score: float
    hypotheses_tried: int = 0

    @property
    def success(self):
        return self.inlier_count > 0


def build_correspondences(pm, downsample=4):
    """One correspondence per valid pixel on the stride-``downsample`` grid.

    Samples are taken at the middle pixel of each ``downsample`` block; the
    pixel coordinate is that pixel's center, moved to the sub-pixel keypoint
    location when the pointmap carries one.
    """
    if downsample < 1:
        raise ValueError(f"downsample must be >= 1, got {downsample}")
    off = downsample // 2
    sub_valid = pm.valid[off::downsample, off::downsample]
    r, c = np.nonzero(sub_valid)
    rows = r * downsample + off
    cols = c * downsample + off
    return Correspondences(pm.pixel_coords(rows, cols), np.asarray(pm.points[rows, cols], dtype=float),
                           np.stack([rows, cols], axis=1))


def _bearings(uv, K):
    xy = K.normalize(uv)
    b = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
    return b / np.linalg.norm(b, axis=-1, keepdims=True)


def p3p_solve(uv, X, K):
    """Grunert's P3P; returns the cheirality-valid candidate poses.

    Degenerate (collinear or coincident) triples yield an empty list.
    """
    uv = np.asarray(uv, dtype=float).reshape(1, 3, 2)
    X = np.asarray(X, dtype=float).reshape(1, 3, 3)
    return [Pose.from_matrix(R, t) for _, R, t in p3p_batch(uv, X, K)]


def _rigid_batch(P, Q):
    """Batched Kabsch: ``R, t`` with ``Q ≈ R P + t`` for each leading index."""
    mp, mq = P.mean(axis=1), Q.mean(axis=1)
    H = np.matmul((Q - mq[:, None]).transpose(0, 2, 1), P - mp[:, None])
    U, _, Vt = np.linalg.svd(H)
    sign = np.sign(np.linalg.det(np.matmul(U, Vt)))
    sign[sign == 0] = 1.0
    U[:, :, 2] *= sign[:, None]
    R = np.matmul(U, Vt)
    t = mq - np.einsum("nij,nj->ni", R, mp)
    return R, t


def p3p_batch(uv, X, K):
    """P3P for a stack of triples ``uv (h, 3, 2)``, ``X (h, 3, 3)``.

    Returns ``(hypothesis index, R, t)`` tuples ordered by hypothesis.
    """
    h = len(uv)
    ptp = X.max(axis=1) - X.min(axis=1)
    scale = np.maximum(ptp.max(axis=1), 1e-300)
    area = np.linalg.norm(np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]), axis=1)
    j = _bearings(uv, K)
    a2 = np.sum((X[:, 1] - X[:, 2]) ** 2, axis=1)
    b2 = np.sum((X[:, 0] - X[:, 2]) ** 2, axis=1)
    c2 = np.sum((X[:, 0] - X[:, 1]) ** 2, axis=1)
    ca = np.einsum("ni,ni->n", j[:, 1], j[:, 2])
    cb = np.einsum("ni,ni->n", j[:, 0], j[:, 2])
    cg = np.einsum("ni,ni->n", j[:, 0], j[:, 1])
    with np.errstate(all="ignore"):
        ok = (np.isfinite(area) & (area > 1e-9 * scale ** 2) & (np.minimum(np.minimum(a2, b2), c2) > 0)
              & (np.maximum(np.maximum(abs(ca), abs(cb)), abs(cg)) < 1.0 - 1e-15))
        amc = (a2 - c2) / b2
        apc = (a2 + c2) / b2
        coeffs = np.stack([
            (amc - 1) ** 2 - 4 * c2 / b2 * ca ** 2,
            4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 / b2 * ca ** 2 * cb),
            2 * (amc ** 2 - 1 + 2 * amc ** 2 * cb ** 2 + 2 * (b2 - c2) / b2 * ca ** 2
                 - 4 * apc * ca * cb * cg + 2 * (b2 - a2) / b2 * cg ** 2),
            4 * (-amc * (1 + amc) * cb + 2 * a2 / b2 * cg ** 2 * cb - (1 - apc) * ca * cg),
            (1 + amc) ** 2 - 4 * a2 / b2 * cg ** 2,
        ], axis=1)
    ok &= np.all(np.isfinite(coeffs), axis=1)
    lead = np.abs(coeffs[:, 0]) > 1e-12 * np.abs(coeffs).max(axis=1)
    roots = np.full((h, 4), np.nan, dtype=complex)
    quartic = ok & lead
    if quartic.any():
        c = coeffs[quartic]
        comp = np.zeros((len(c), 4, 4))
        comp[:, 0, :] = -c[:, 1:] / c[:, :1]
        comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
        roots[quartic] = np.linalg.eigvals(comp)
    for i in np.flatnonzero(ok & ~lead):
        r = np.roots(coeffs[i])
        roots[i, :len(r)] = r

    # real roots, Newton-polished on the quartic
    real = np.isfinite(roots.real) & (np.abs(roots.imag) <= 1e-6 * (1.0 + np.abs(roots.real)))
    hi, ri = np.nonzero(real)
    v = roots.real[hi, ri]
    cf = coeffs[hi]
    dcf = cf[:, :4] * np.array([4.0, 3.0, 2.0, 1.0])
    for _ in range(3):
        pv = (((cf[:, 0] * v + cf[:, 1]) * v + cf[:, 2]) * v + cf[:, 3]) * v + cf[:, 4]
        dv = ((dcf[:, 0] * v + dcf[:, 1]) * v + dcf[:, 2]) * v + dcf[:, 3]
        v = v - np.divide(pv, dv, out=np.zeros_like(pv), where=dv != 0)

    A, B, CA, CB, CG = amc[hi], b2[hi], ca[hi], cb[hi], cg[hi]
    with np.errstate(all="ignore"):
        denom = 2 * (CG - v * CA)
        u = ((-1 + A) * v ** 2 - 2 * A * CB * v + 1 + A) / denom
        den1 = 1 + v * v - 2 * v * CB
        s1 = np.sqrt(B / den1)
        depth = np.stack([s1, u * s1, v * s1], axis=1)
    keep = (np.abs(denom) >= 1e-14) & (den1 > 0) & np.all(depth > 0, axis=1)
    hi, depth = hi[keep], depth[keep]
    if len(hi) == 0:
        return []
    depth = _polish_depths_batch(depth, j[hi], a2[hi], b2[hi], c2[hi], ca[hi], cb[hi], cg[hi])
    keep = np.all(np.isfinite(depth), axis=1) & np.all(depth > 0, axis=1)
    hi, depth = hi[keep], depth[keep]
    if len(hi) == 0:
        return []
    R, t = _rigid_batch(X[hi], depth[:, :, None] * j[hi])
    z = np.einsum("nkj,nij->nki", X[hi], R)[:, :, 2] + t[:, 2:3]
    front = np.all(z > 1e-9, axis=1)
    out = []
    for k in np.flatnonzero(front):
        dup = any(hk == hi[k] and (np.linalg.norm(R[k] - Rk) <= 1e-9 and np.linalg.norm(t[k] - tk) <= 1e-9)
                  for hk, Rk, tk in out[-4:])
        if not dup:
            out.append((int(hi[k]), R[k], t[k]))
    return out


def _polish_depths_batch(s, j, a2, b2, c2, ca, cb, cg, iters=4):
    """Newton steps on the three law-of-cosines equations, per row."""
    for _ in range(iters):
        s1, s2, s3 = s[:, 0], s[:, 1], s[:, 2]
        f = np.stack([
            s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca - a2,
            s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb - b2,
            s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg - c2,
        ], axis=1)
        J = np.zeros((len(s), 3, 3))
        J[:, 0, 1], J[:, 0, 2] = 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca
        J[:, 1, 0], J[:, 1, 2] = 2 * s1 - 2 * s3 * cb, 2 * s3 - 2 * s1 * cb
        J[:, 2, 0], J[:, 2, 1] = 2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg
        det = np.linalg.det(J)
        good = np.abs(det) > 1e-300
        if not good.any():
            break
        step = np.zeros_like(s)
        step[good] = np.linalg.solve(J[good], f[good][:, :, None])[:, :, 0]
        s = s - step
    return s


def reprojection_errors(pose_R, pose_t, uv, X, K):
    """Pixel reprojection error per correspondence, ``inf`` when behind the camera."""
    proj, z = project_points(K, pose_R, pose_t, X)
    r = np.linalg.norm(proj - uv, axis=-1)
    return np.where(z > 1e-9, r, np.inf)


def soft_inlier_score(pose, uv, X, K, tau=6.0, alpha=100.0):
    """``Σ sigmoid(alpha * (1 - r_i / tau))`` over reprojection errors ``r_i``."""
    r = reprojection_errors(pose.R, pose.t, uv, X, K)
    return float(np.sum(expit(alpha * (1.0 - r / tau))))


def _batch_soft_scores(poses, uv, X, K, tau, alpha, chunk=64):
    """Soft scores of many ``(R, t)`` candidates at once.

    The sigmoid is evaluated only for errors in ``[0.6 tau, 2 tau)``. Below
    that band each term equals 1 to within ``exp(-0.4 alpha)`` and above it
    each term is below ``exp(-alpha)``, so with the default ``alpha`` the
    shortcut is exact to double precision per term.
    """
    Xh = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    u0 = (uv[:, 0] - K.cx)[:, None] / K.fx
    v0 = (uv[:, 1] - K.cy)[:, None] / K.fy
    lo2, hi2 = (0.6 * tau) ** 2, (2.0 * tau) ** 2
    out = []
    for i in range(0, len(poses), chunk):
        P = np.stack([np.concatenate([R, t[:, None]], axis=1) for R, t in poses[i:i + chunk]])  # (m, 3, 4)
        x = Xh @ P[:, 0].T
        y = Xh @ P[:, 1].T
        z = Xh @ P[:, 2].T
        with np.errstate(divide="ignore", invalid="ignore"):
            np.divide(x, z, out=x)
            np.divide(y, z, out=y)
            x -= u0
            y -= v0
            x *= K.fx
            y *= K.fy
            x *= x
            y *= y
            x += y
        x[~(z > 1e-9)] = np.inf
        score = np.count_nonzero(x < lo2, axis=0).astype(float)
        band = (x >= lo2) & (x < hi2)
        cols = np.nonzero(band)[1]
        vals = expit(alpha * (1.0 - np.sqrt(x[band]) / tau))
        score += np.bincount(cols, weights=vals, minlength=x.shape[1])
        out.append(score)
    return np.concatenate(out)


def _weighted_dlt(uv, X, K, weights):
    """Pose from the linear 12-parameter PnP system, rows weighted per point."""
    mu = X.mean(axis=0)
    sc = np.sqrt(((X - mu) ** 2).sum(axis=1).mean())
    if sc == 0:
        return None
    Xn = (X - mu) / sc
    xy = K.normalize(uv)
    n = len(X)
    Xh = np.concatenate([Xn, np.ones((n, 1))], axis=1)
    A = np.zeros((2 * n, 12))
    w = weights[:, None]
    A[0::2, 0:4] = Xh * w * K.fx
    A[0::2, 8:12] = -xy[:, :1] * Xh * w * K.fx
    A[1::2, 4:8] = Xh * w * K.fy
    A[1::2, 8:12] = -xy[:, 1:] * Xh * w * K.fy
    _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    if sv[-2] <= 1e-12 * sv[0]:
        return None
    P = Vt[-1].reshape(3, 4)
    # undo the point normalization: P_world = P_norm @ T
    T = np.eye(4)
    T[:3, :3] /= sc
    T[:3, 3] = -mu / sc
    P = P @ T
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    s = np.linalg.svd(M, compute_uv=False).mean()
    R = project_to_so3(M / s)
    t = P[:, 3] / s
    return R, t


def _refine_pose(R, t, uv, X, K, cfg):
    tau = cfg.reproj_threshold

    def robust_cost(R_, t_):
        r = reprojection_errors(R_, t_, uv, X, K)
        return float(np.sum(np.minimum(r, tau) ** 2))

    best = robust_cost(R, t)
    for _ in range(cfg.refine_rounds):
        r = reprojection_errors(R, t, uv, X, K)
        inl = r < tau
        if inl.sum() < 6:
            break
        z = (X[inl] @ R.T + t)[:, 2]
        sol = _weighted_dlt(uv[inl], X[inl], K, 1.0 / z)
        if sol is None:
            break
        R_new, t_new = sol
        cost = robust_cost(R_new, t_new)
        if not cost <= best:
            break
        dR = np.linalg.norm(R_new - R)
        dt = np.linalg.norm(t_new - t) / (1.0 + np.linalg.norm(t))
        R, t, best = R_new, t_new, cost
        if max(dR, dt) < 1e-8:
            break
    return R, t


def ransac_pnp(uv, X, K, cfg=RansacConfig()):
    """Hypothesize-and-verify PnP with soft inlier scoring.

    Returns a result with ``inlier_count == 0`` when every hypothesis is
    degenerate; raises ``ValueError`` for fewer than 4 correspondences.
    """
    uv = np.asarray(uv, dtype=float)
    X = np.asarray(X, dtype=float)
    n = len(uv)
    if n < 4:
        raise ValueError(f"PnP needs at least 4 correspondences, got {n}")
    rng = np.random.default_rng(cfg.rng_seed)
    tau, alpha = cfg.reproj_threshold, cfg.inlier_alpha

    idx = np.stack([rng.choice(n, size=3, replace=False) for _ in range(cfg.hypothesis_count)])
    candidates = [(R, t) for _, R, t in p3p_batch(uv[idx], X[idx], K)]
    if not candidates:
        return RegistrationResult(Pose.identity(), 0, np.zeros(n, dtype=bool), 0.0, cfg.hypothesis_count)
    scores = _batch_soft_scores(candidates, uv, X, K, tau, alpha)
    # argmax keeps the first (lowest hypothesis index) on ties
    R, t = candidates[int(np.argmax(scores))]
    R, t = _refine_pose(R, t, uv, X, K, cfg)
    r = reprojection_errors(R, t, uv, X, K)
    mask = r < tau
    score = float(np.sum(expit(alpha * (1.0 - r / tau))))
    return RegistrationResult(Pose.from_matrix(R, t), int(mask.sum()), mask, score, cfg.hypothesis_count)


@dataclass(eq=False)
class RegistrationAttempt:
    target: int
    reference: int
    accepted: bool
    inlier_count: int
    pose: Pose | None
    result: RegistrationResult | None = field(default=None, repr=False)


def try_register(target_id, reference_id, provider, cfg=RansacConfig(), downsample=4):
    """Register ``target_id`` against a registered reference.

    The image is accepted only when its inlier count exceeds
    ``cfg.min_inliers``.
    """
    pm = provider.query_target(reference_id, target_id)
    corr = build_correspondences(pm, downsample)
    if len(corr) < 4:
        return RegistrationAttempt(target_id, reference_id, False, 0, None)
    res = ransac_pnp(corr.uv, corr.points, provider.intrinsics(target_id), cfg)
    accepted = res.inlier_count > cfg.min_inliers
    logger.debug("register %s via %s: %d inliers (%s)", target_id, reference_id, res.inlier_count,
                 "accepted" if accepted else "rejected")
    return RegistrationAttempt(target_id, reference_id, accepted, res.inlier_count,
                               res.pose if accepted else None, res)
