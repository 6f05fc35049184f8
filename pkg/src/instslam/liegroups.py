"""SE(3) / Sim(3) transform algebra.

Tangent vectors for Sim(3) are ordered ``(rho, phi, sigma)``: three
translational components, three rotational components (axis-angle, radians)
and the log-scale.  A similarity acts on points as ``x -> s * R @ x + t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DegenerateGeometryError",
    "LogDomainError",
    "SE3Pose",
    "Sim3Transform",
    "compose",
    "fit_sim3_umeyama",
    "hat",
    "inverse",
    "sim3_exp",
    "sim3_log",
    "so3_exp",
    "so3_log",
    "vee",
]

# rotations within this distance of pi are refused by the log map
PI_MARGIN = 1e-5
# compositions between re-orthonormalisations of the rotation block
REORTHO_EVERY = 64


class LogDomainError(ValueError):
    """Rotation angle too close to pi for a well-defined logarithm."""


class DegenerateGeometryError(ValueError):
    """Point configuration does not determine a similarity transform."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def hat(w) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta2 = float(phi @ phi)
    k = hat(phi)
    if theta2 < 1e-12:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(r: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix.

    Raises :class:`LogDomainError` when the angle is within ``PI_MARGIN`` of pi,
    where the axis sign is ambiguous.
    """
    r = np.asarray(r, dtype=np.float64)
    w = 0.5 * vee(r - r.T)
    sin_t = float(np.linalg.norm(w))
    cos_t = 0.5 * (np.trace(r) - 1.0)
    theta = float(np.arctan2(sin_t, cos_t))
    if np.pi - theta < PI_MARGIN:
        raise LogDomainError(f"rotation angle {theta:.9f} rad is too close to pi")
    if theta < 1e-6:
        return w * (1.0 + theta * theta / 6.0)
    return w * (theta / sin_t)


_SERIES_K = np.arange(30)
_SERIES_FACT = np.cumprod(np.concatenate([[1.0], np.arange(1, 30)]))


def _exp_moments(sigma: float, n_max: int = 5) -> np.ndarray:
    """M_n = integral_0^1 exp(sigma*u) u^n du for n = 0..n_max."""
    if abs(sigma) < 1.0:
        # entire series, converged to double precision after ~25 terms
        terms = sigma ** _SERIES_K / _SERIES_FACT
        return (1.0 / (np.arange(n_max + 1)[:, None] + _SERIES_K + 1)) @ terms
    m = np.empty(n_max + 1)
    es = np.exp(sigma)
    m[0] = np.expm1(sigma) / sigma
    for n in range(1, n_max + 1):
        m[n] = (es - n * m[n - 1]) / sigma
    return m


def _sim3_w_coeffs(phi: np.ndarray, sigma: float) -> tuple[float, float, float]:
    """Coefficients (a, b, c) with W = a I + b K + c K^2, K = hat(phi).

    W = integral_0^1 exp(sigma u) exp(u K) du maps the translational tangent
    part to the translation of exp(v).
    """
    theta2 = float(phi @ phi)
    if theta2 < 1e-6:
        m = _exp_moments(sigma)
        a = m[0]
        b = m[1] - theta2 * m[3] / 6.0 + theta2 * theta2 * m[5] / 120.0
        c = 0.5 * m[2] - theta2 * m[4] / 24.0
        return a, b, c
    theta = np.sqrt(theta2)
    a = np.expm1(sigma) / sigma if sigma != 0.0 else 1.0
    es = np.exp(sigma)
    st, ct = np.sin(theta), np.cos(theta)
    denom = sigma * sigma + theta2
    i_sin = (es * (sigma * st - theta * ct) + theta) / denom
    i_cos = (es * (sigma * ct + theta * st) - sigma) / denom
    return a, i_sin / theta, (a - i_cos) / theta2


def _sim3_w(phi: np.ndarray, sigma: float) -> np.ndarray:
    a, b, c = _sim3_w_coeffs(phi, sigma)
    k = hat(phi)
    return a * np.eye(3) + b * k + c * (k @ k)


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Rigid transform; as a camera pose it maps camera to world coordinates."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))

    @classmethod
    def identity(cls) -> SE3Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> SE3Pose:
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def compose(self, other: SE3Pose) -> SE3Pose:
        return SE3Pose(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> SE3Pose:
        rt = self.rotation.T
        return SE3Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def to_sim3(self, scale: float = 1.0) -> Sim3Transform:
        return Sim3Transform(self.rotation, self.translation, scale)

    def __repr__(self) -> str:
        return f"SE3Pose(t={np.round(self.translation, 6).tolist()})"


@dataclass(frozen=True, eq=False)
class Sim3Transform:
    """Similarity transform ``x -> scale * rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0
    # compositions since the last re-orthonormalisation
    chain: int = field(default=0, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))
        object.__setattr__(self, "scale", float(self.scale))
        if not self.scale > 0.0:
            raise ValueError(f"Sim3 scale must be positive, got {self.scale}")

    @classmethod
    def identity(cls) -> Sim3Transform:
        return cls(np.eye(3), np.zeros(3), 1.0)

    @classmethod
    def from_matrix(cls, m) -> Sim3Transform:
        """Inverse of :meth:`matrix`; the upper-left block is ``s * R``."""
        m = np.asarray(m, dtype=np.float64)
        sr = m[:3, :3]
        s = float(np.cbrt(np.linalg.det(sr)))
        if not s > 0:
            raise ValueError("upper-left block has non-positive determinant")
        return cls(sr / s, m[:3, 3], s)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        return self.translation

    def compose(self, other: Sim3Transform) -> Sim3Transform:
        """``self ∘ other``: apply ``other`` first."""
        if isinstance(other, SE3Pose):
            other = other.to_sim3()
        r = self.rotation @ other.rotation
        chain = max(self.chain, other.chain) + 1
        if chain >= REORTHO_EVERY:
            r = orthonormalize(r)
            chain = 0
        t = self.scale * (self.rotation @ other.translation) + self.translation
        return Sim3Transform(r, t, self.scale * other.scale, chain)

    __matmul__ = compose

    def inverse(self) -> Sim3Transform:
        rt = self.rotation.T
        inv_s = 1.0 / self.scale
        return Sim3Transform(rt, -inv_s * (rt @ self.translation), inv_s, self.chain)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def log(self) -> np.ndarray:
        return sim3_log(self)

    @classmethod
    def exp(cls, v) -> Sim3Transform:
        return sim3_exp(v)

    def is_identity(self) -> bool:
        return (self.scale == 1.0 and np.array_equal(self.rotation, np.eye(3))
                and not self.translation.any())

    def __repr__(self) -> str:
        return (f"Sim3Transform(s={self.scale:.6g}, "
                f"t={np.round(self.translation, 6).tolist()})")


def compose(a: Sim3Transform, b: Sim3Transform) -> Sim3Transform:
    return a.compose(b)


def inverse(a):
    return a.inverse()


def sim3_exp(v) -> Sim3Transform:
    v = np.asarray(v, dtype=np.float64).reshape(7)
    rho, phi, sigma = v[:3], v[3:6], float(v[6])
    return Sim3Transform(so3_exp(phi), _sim3_w(phi, sigma) @ rho, np.exp(sigma))


def sim3_log(s: Sim3Transform) -> np.ndarray:
    """Tangent 7-vector ``(rho, phi, sigma)`` of a similarity.

    Raises :class:`LogDomainError` for rotation angles near pi.
    """
    phi = so3_log(s.rotation)
    sigma = float(np.log(s.scale))
    rho = np.linalg.solve(_sim3_w(phi, sigma), s.translation)
    return np.concatenate([rho, phi, [sigma]])


def fit_sim3_umeyama(src, dst, weights=None, with_scale: bool = True,
                     rank_tol: float = 1e-9) -> Sim3Transform:
    """Least-squares similarity ``S`` minimising ``sum w_i |dst_i - S(src_i)|^2``.

    Args:
        src, dst: (N, 3) corresponding points.
        weights: optional non-negative per-correspondence weights.
        with_scale: fit scale; ``False`` gives the rigid (Kabsch) solution.
        rank_tol: relative singular-value floor below which the centred
            source set counts as collinear.

    Raises:
        DegenerateGeometryError: fewer than three usable points, or a
            coincident/collinear source or target configuration.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise ValueError("src and dst must have the same shape")
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(src),) or np.any(w < 0):
        raise ValueError("weights must be non-negative, one per point")
    if np.count_nonzero(w) < 3:
        raise DegenerateGeometryError("need at least 3 weighted correspondences")
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    xs = src - mu_s
    xd = dst - mu_d
    sw = np.sqrt(w)[:, None]
    sv_s = np.linalg.svd(xs * sw, compute_uv=False)
    sv_d = np.linalg.svd(xd * sw, compute_uv=False)
    for sv, name in ((sv_s, "source"), (sv_d, "target")):
        if sv[0] <= 1e-12 or sv[1] <= rank_tol * sv[0]:
            raise DegenerateGeometryError(f"{name} points are coincident or collinear")
    cov = (xd * w[:, None]).T @ xs
    u, d, vt = np.linalg.svd(cov)
    e = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        e[2] = -1.0
    r = (u * e) @ vt
    if with_scale:
        var_s = float(np.sum(w * np.sum(xs * xs, axis=1)))
        s = float(d @ e) / var_s
    else:
        s = 1.0
    t = mu_d - s * (r @ mu_s)
    return Sim3Transform(r, t, s)
