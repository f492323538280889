"""Closed-form primitives on the Poincare ball.

The ball of curvature parameter ``r`` is the set of points with
``r * ||x||^2 < 1`` (radius ``1/sqrt(r)``), carrying the conformal metric
``lambda_x^2 * I`` with ``lambda_x = 2 / (1 - r * ||x||^2)``.  Exponential
and logarithmic maps are taken at the origin; ``r = 0`` degenerates to the
Euclidean plane, where both maps are defined as the identity embedding.

All arrays are float64.  Every function is pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BallConfig",
    "PointOutsideBall",
    "NotPositiveDefinite",
    "conformal_factor",
    "metric_at",
    "exp_map",
    "log_map",
    "riemannian_gradient",
    "metric_precondition",
]

# exp_map output norms are clamped to (1 - _EXP_CLAMP)/sqrt(r); log_map
# rejects points with r*||x||^2 >= 1 - _LOG_REJECT.  artanh diverges at the
# rim, so both guards keep downstream conformal factors finite.
_EXP_CLAMP = 1e-5
_LOG_REJECT = 1e-12


class PointOutsideBall(ValueError):
    """A coordinate vector violates r*||x||^2 < 1."""


class NotPositiveDefinite(ValueError):
    """A matrix expected to be SPD failed its Cholesky factorization."""


@dataclass(frozen=True)
class BallConfig:
    """Dimension and curvature parameter of the ball (sectional curvature -r)."""

    dim: int
    curvature_param: float = 1.0

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError(f"dim must be >= 1, got {self.dim}")
        if self.curvature_param < 0:
            raise ValueError(
                f"curvature_param must be >= 0, got {self.curvature_param}"
            )

    @property
    def radius(self) -> float:
        """Euclidean radius of the ball; inf for the r = 0 (flat) limit."""
        r = self.curvature_param
        return math.inf if r == 0 else 1.0 / math.sqrt(r)


def _as_vector(cfg: BallConfig, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.dim:
        raise ValueError(f"expected vectors of length {cfg.dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite coordinates")
    return x


def _check_inside(cfg: BallConfig, x: np.ndarray, slack: float = 0.0) -> np.ndarray:
    """Return r*||x||^2, raising if any point is outside the open ball."""
    rho2 = cfg.curvature_param * np.sum(x * x, axis=-1)
    if np.any(rho2 >= 1.0 - slack):
        worst = float(np.max(rho2))
        raise PointOutsideBall(
            f"point outside the ball: r*||x||^2 = {worst:.6g} >= {1.0 - slack:.6g}"
        )
    return rho2


def conformal_factor(cfg: BallConfig, x) -> np.ndarray | float:
    """Conformal factor lambda_x = 2 / (1 - r*||x||^2).

    Accepts a single vector or a batch (leading axes); returns a scalar or
    an array of the batch shape.
    """
    x = _as_vector(cfg, x)
    rho2 = _check_inside(cfg, x)
    lam = 2.0 / (1.0 - rho2)
    return float(lam) if lam.ndim == 0 else lam


def metric_at(cfg: BallConfig, x) -> np.ndarray:
    """Metric matrix lambda_x^2 * I at a single point x."""
    x = _as_vector(cfg, x)
    if x.ndim != 1:
        raise ValueError("metric_at takes a single point")
    lam = conformal_factor(cfg, x)
    return lam * lam * np.eye(cfg.dim)


def _tanhc(z: np.ndarray) -> np.ndarray:
    """tanh(z)/z, continuously extended to 1 at z = 0."""
    small = np.abs(z) < 1e-5
    z_safe = np.where(small, 1.0, z)
    series = 1.0 - z * z / 3.0 + 2.0 * z**4 / 15.0
    return np.where(small, series, np.tanh(z_safe) / z_safe)


def _artanhc(w: np.ndarray) -> np.ndarray:
    """artanh(w)/w, continuously extended to 1 at w = 0."""
    small = np.abs(w) < 1e-5
    w_safe = np.where(small, 0.5, w)
    series = 1.0 + w * w / 3.0 + w**4 / 5.0
    return np.where(small, series, np.arctanh(w_safe) / w_safe)


def exp_map(cfg: BallConfig, mu) -> np.ndarray:
    """Exponential map at the origin: tanh(sqrt(r)*||mu||) * mu/(sqrt(r)*||mu||).

    Batched over leading axes.  mu = 0 maps to the origin.  For r = 0 this
    is the identity embedding of the tangent space.
    """
    mu = _as_vector(cfg, mu)
    r = cfg.curvature_param
    if r == 0.0:
        return mu.copy()
    sq = math.sqrt(r)
    norm = np.linalg.norm(mu, axis=-1, keepdims=True)
    out = _tanhc(sq * norm) * mu
    # clamp just inside the rim so downstream log/metric evaluations stay finite
    out_norm = np.linalg.norm(out, axis=-1, keepdims=True)
    max_norm = (1.0 - _EXP_CLAMP) / sq
    scale = np.where(out_norm > max_norm, max_norm / np.maximum(out_norm, 1e-300), 1.0)
    return out * scale


def log_map(cfg: BallConfig, nu) -> np.ndarray:
    """Logarithmic map at the origin: artanh(sqrt(r)*||nu||) * nu/(sqrt(r)*||nu||).

    Inverse of exp_map; rejects points too close to the rim.  Identity for
    r = 0.
    """
    nu = _as_vector(cfg, nu)
    r = cfg.curvature_param
    if r == 0.0:
        return nu.copy()
    _check_inside(cfg, nu, slack=_LOG_REJECT)
    sq = math.sqrt(r)
    norm = np.linalg.norm(nu, axis=-1, keepdims=True)
    return _artanhc(sq * norm) * nu


def riemannian_gradient(cfg: BallConfig, x, eucl_grad) -> np.ndarray:
    """Steepest-descent direction under the ball metric: eucl_grad / lambda_x^2."""
    x = _as_vector(cfg, x)
    grad = np.asarray(eucl_grad, dtype=np.float64)
    lam = np.asarray(conformal_factor(cfg, x))
    return grad / (lam * lam)[..., np.newaxis] if lam.ndim else grad / (lam * lam)


def metric_precondition(g, eucl_grad) -> np.ndarray:
    """Solve g @ d = eucl_grad for an SPD matrix g (inverse-metric preconditioning)."""
    g = np.asarray(g, dtype=np.float64)
    v = np.asarray(eucl_grad, dtype=np.float64)
    try:
        c = np.linalg.cholesky(g)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(f"matrix is not SPD: {exc}") from exc
    y = np.linalg.solve(c, v)
    return np.linalg.solve(c.T, y)
