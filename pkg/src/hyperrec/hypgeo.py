"""Numerically stable Poincare-ball kernel.

Points live in the open ball of radius 1/sqrt(c), where c > 0 is the
curvature parameter.  Every function acts along the last axis, so the same
call handles a single point of shape (n,) or a batch of shape (..., n).
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError

# Margin kept between projected points and the ball boundary.
EPS_BALL = 1e-5
# Clamp for the atanh argument; keeps distances and their gradients finite.
EPS_ATANH = 1e-7


def _as_finite(*arrays) -> list[np.ndarray]:
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise InvalidInputError("non-finite coordinates")
        out.append(a)
    return out


def _check_curvature(c: float, positive: bool = False) -> float:
    c = float(c)
    if not np.isfinite(c) or c < 0.0:
        raise InvalidInputError(f"curvature must be a non-negative real, got {c}")
    if positive and c == 0.0:
        raise InvalidInputError("operation requires strictly positive curvature")
    return c


def mobius_add(x, y, c: float) -> np.ndarray:
    """Gyrovector addition x (+)_c y.

    num = (1 + 2c<x,y> + c|y|^2) x + (1 - c|x|^2) y
    den = 1 + 2c<x,y> + c^2 |x|^2 |y|^2

    The result is projected back into the ball so that floating-point
    error near the boundary cannot violate the ball invariant.
    """
    c = _check_curvature(c, positive=True)
    x, y = _as_finite(x, y)
    dot = np.sum(x * y, axis=-1, keepdims=True)
    xx = np.sum(x * x, axis=-1, keepdims=True)
    yy = np.sum(y * y, axis=-1, keepdims=True)
    num = (1.0 + 2.0 * c * dot + c * yy) * x + (1.0 - c * xx) * y
    den = 1.0 + 2.0 * c * dot + c * c * xx * yy
    return project_to_ball(num / np.maximum(den, 1e-15), c)


def hyp_distance(x, y, c: float):
    """Geodesic distance 2/sqrt(c) * atanh(sqrt(c) * ||(-x) (+)_c y||)."""
    c = _check_curvature(c, positive=True)
    x, y = _as_finite(x, y)
    diff = mobius_add(-x, y, c)
    sqrt_c = np.sqrt(c)
    arg = sqrt_c * np.linalg.norm(diff, axis=-1)
    arg = np.clip(arg, 0.0, 1.0 - EPS_ATANH)
    return (2.0 / sqrt_c) * np.arctanh(arg)


def conformal_factor(q, c: float):
    """Metric scaling 2 / (1 - c |q|^2) at the point q; 2 in the flat limit."""
    c = _check_curvature(c)
    (q,) = _as_finite(q)
    qq = np.sum(q * q, axis=-1)
    if np.any(c * qq >= 1.0):
        raise InvalidInputError("point norm reaches the ball radius for this curvature")
    return 2.0 / (1.0 - c * qq)


def exp_map(q, z, c: float) -> np.ndarray:
    """Map the tangent vector z at basepoint q into the ball.

    exp_q(z) = q (+)_c ( tanh(sqrt(c) * lam_q * |z| / 2) * z / (sqrt(c) |z|) )

    Rows with z = 0 return q exactly; the 0/0 direction term is bypassed
    through a guarded denominator.
    """
    c = _check_curvature(c, positive=True)
    q, z = _as_finite(q, z)
    qq = np.sum(q * q, axis=-1, keepdims=True)
    if np.any(c * qq >= 1.0):
        raise InvalidInputError("basepoint norm reaches the ball radius for this curvature")
    lam = 2.0 / (1.0 - c * qq)
    sqrt_c = np.sqrt(c)
    zn = np.linalg.norm(z, axis=-1, keepdims=True)
    safe = np.where(zn > 0.0, zn, 1.0)
    gain = np.tanh(sqrt_c * lam * zn / 2.0) / (sqrt_c * safe)
    return mobius_add(q, gain * z, c)


def project_to_ball(x, c: float) -> np.ndarray:
    """Rescale x onto norm (1 - EPS_BALL)/sqrt(c) when it lies outside; identity otherwise."""
    c = _check_curvature(c)
    (x,) = _as_finite(x)
    if c == 0.0:
        return x
    limit = (1.0 - EPS_BALL) / np.sqrt(c)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    scale = np.where(n > limit, limit / np.where(n > 0.0, n, 1.0), 1.0)
    return x * scale


def euclid_distance(x, y):
    """Plain L2 distance along the last axis."""
    x, y = _as_finite(x, y)
    if x.shape[-1] != y.shape[-1]:
        raise InvalidInputError(
            f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}"
        )
    return np.linalg.norm(x - y, axis=-1)
