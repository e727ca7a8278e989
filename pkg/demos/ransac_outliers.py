"""Soft-scored P3P RANSAC on synthetic correspondences with a growing outlier share."""

import logging

import numpy as np

from raysfm.geometry import Intrinsics, Pose, pose_error, project, rotvec_to_matrix
from raysfm.registration import RansacConfig, ransac_pnp

log = logging.getLogger("demo")
K = Intrinsics(600, 580, 255.5, 255.5, 512, 512)


def scene(rng, n):
    pose = Pose.from_center(rotvec_to_matrix(rng.normal(scale=0.3, size=3)), rng.normal(size=3))
    uv = rng.uniform(0, 511, (n, 2))
    depth = rng.uniform(2, 8, n)
    rays = np.c_[(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(n)] * depth[:, None]
    X = (rays - pose.t) @ pose.R  # camera to world
    return pose, uv, X


def main():
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    rng = np.random.default_rng(3)
    for frac in (0.0, 0.2, 0.4, 0.6, 0.8):
        pose, uv, X = scene(rng, 4096)
        bad = rng.random(len(X)) < frac
        X[bad] = rng.uniform(X.min(0), X.max(0), (bad.sum(), 3))
        res = ransac_pnp(uv + rng.normal(scale=0.5, size=uv.shape), X, K, RansacConfig(rng_seed=1))
        dr, dt = pose_error(res.pose, pose)
        reproj = np.linalg.norm(project(K, res.pose, X[~bad]) - uv[~bad], axis=1)
        log.info("outliers %3.0f%%: %5d inliers, rotation error %.4f deg, center error %.2e, "
                 "median reprojection %.2f px", 100 * frac, res.inlier_count, dr, dt, np.median(reproj))


if __name__ == "__main__":
    main()
