"""Gaussian primitive record and front-to-back alpha compositing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import _canonical, quat_to_matrix

# zeroth-order real spherical harmonic, Y_0^0
SH_C0 = 0.28209479177387814


@dataclass(frozen=True, eq=False)
class GaussianPrimitive:
    """Per-pixel Gaussian predicted alongside a pointmap sample.

    The mean is the pointmap sample plus a predicted offset, and the
    covariance is parameterized by a rotation and per-axis scales so that it
    is positive semi-definite by construction.
    """

    opacity: float
    rotation: np.ndarray
    scale: np.ndarray
    base_point: np.ndarray
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sh_coeffs: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    def __post_init__(self):
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity must lie in [0, 1], got {self.opacity}")
        scale = np.asarray(self.scale, dtype=float).reshape(3)
        if np.any(scale <= 0):
            raise ValueError(f"scales must be positive, got {scale}")
        sh = np.asarray(self.sh_coeffs, dtype=float)
        if sh.ndim != 2 or sh.shape[1] != 3:
            raise ValueError(f"sh_coeffs must be (n_coeffs, 3), got {sh.shape}")
        object.__setattr__(self, "rotation", _canonical(self.rotation))
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "base_point", np.asarray(self.base_point, dtype=float).reshape(3))
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))
        object.__setattr__(self, "sh_coeffs", sh)

    @property
    def mean(self):
        return self.base_point + self.offset

    @property
    def sh_degree(self):
        return int(round(np.sqrt(self.sh_coeffs.shape[0]))) - 1

    def base_color(self):
        """View-independent RGB from the degree-0 coefficient, clipped to [0, 1]."""
        return np.clip(SH_C0 * self.sh_coeffs[0] + 0.5, 0.0, 1.0)


def gaussian_covariance(g):
    """``R S Sᵀ Rᵀ`` for a :class:`GaussianPrimitive`."""
    M = quat_to_matrix(g.rotation) * g.scale  # R @ diag(S)
    cov = M @ M.T
    return 0.5 * (cov + cov.T)


@dataclass(frozen=True)
class PixelContribution:
    color: tuple
    alpha: float
    depth: float

    def __post_init__(self):
        c = np.asarray(self.color, dtype=float)
        if c.shape != (3,) or np.any(c < 0) or np.any(c > 1):
            raise ValueError(f"color must be an RGB triple in [0, 1], got {self.color}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.depth > 0:
            raise ValueError(f"depth must be positive, got {self.depth}")


def alpha_composite(contributions, background=(0.0, 0.0, 0.0)):
    """Blend depth-sorted contributions front to back.

    Raises ``ValueError`` if the contributions are not sorted by depth.
    """
    if not contributions:
        return np.asarray(background, dtype=float).copy()
    depth = np.array([c.depth for c in contributions])
    if np.any(np.diff(depth) < 0):
        i = int(np.flatnonzero(np.diff(depth) < 0)[0])
        raise ValueError(f"contributions not sorted front-to-back: depth[{i}]={depth[i]} > depth[{i + 1}]={depth[i + 1]}")
    colors = np.array([c.color for c in contributions], dtype=float)
    alpha = np.array([c.alpha for c in contributions])
    transmittance = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
    return (colors * (alpha * transmittance)[:, None]).sum(axis=0)
