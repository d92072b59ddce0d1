"""
Point set registration with Gaussian-mixture losses.

The fixed set is modelled as a mixture with one component per fixed point.
Each moving point ``m_i`` gives a residual ``r_i(x) = R(x) m_i + t(x)`` that
is scored against that mixture; the component covariances combine the fixed
point's covariance with the moving point's covariance rotated into the
fixed frame by the current estimate.

States
------
2D: ``[tx, ty, yaw]`` with plain addition.
3D: ``[t (3), vec(R) (9)]``; a step ``[dt, dtheta]`` updates ``t + dt`` and
``R exp([dtheta]x)`` (right-multiplicative, re-orthonormalized).
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np
from scipy.spatial.transform import Rotation

from .gmm import GaussianMixture
from .loss import DEFAULT_CONFIG, MixtureLossConfig, evaluate_batch, make_loss
from .solver import LeastSquaresProblem, ResidualBlock


def rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _orthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def dimension(self) -> int:
        return self.translation.shape[0]

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def inverse_apply(self, points) -> np.ndarray:
        return (np.asarray(points) - self.translation) @ self.rotation

    @classmethod
    def identity(cls, dimension: int) -> "RigidTransform":
        return cls(np.eye(dimension), np.zeros(dimension))

    def to_state(self) -> np.ndarray:
        if self.dimension == 2:
            yaw = math.atan2(self.rotation[1, 0], self.rotation[0, 0])
            return np.array([*self.translation, yaw])
        return np.concatenate([self.translation, self.rotation.ravel()])

    @classmethod
    def from_state(cls, state) -> "RigidTransform":
        state = np.asarray(state, dtype=float)
        if state.shape[0] == 3:
            return cls(rot2(state[2]), state[:2].copy())
        return cls(state[3:].reshape(3, 3).copy(), state[:3].copy())


def tangent_dim(dimension: int) -> int:
    return 3 if dimension == 2 else 6


def plus_se2(state, delta):
    out = np.asarray(state, dtype=float) + delta
    out[2] = float(wrap_angle(out[2]))
    return out


def plus_pose3(state, delta):
    state = np.asarray(state, dtype=float)
    rot = state[3:].reshape(3, 3) @ Rotation.from_rotvec(delta[3:]).as_matrix()
    return np.concatenate([state[:3] + delta[:3], _orthonormalize(rot).ravel()])


def rotation_of(state) -> np.ndarray:
    state = np.asarray(state)
    if state.shape[0] == 3:
        return rot2(state[2])
    return state[3:].reshape(3, 3)


def transform_error(estimate: RigidTransform, truth: RigidTransform):
    """Tangent-space error ``truth (-) estimate`` plus scalar error magnitudes.

    Returns ``(error_vector, translation_error, rotation_error_deg)``. The
    rotational part of the vector is in radians, expressed in the same
    right-multiplicative chart used by the solver.
    """
    dt = truth.translation - estimate.translation
    if estimate.dimension == 2:
        yaw_e = math.atan2(estimate.rotation[1, 0], estimate.rotation[0, 0])
        yaw_t = math.atan2(truth.rotation[1, 0], truth.rotation[0, 0])
        drot = np.array([float(wrap_angle(yaw_t - yaw_e))])
    else:
        drot = Rotation.from_matrix(estimate.rotation.T @ truth.rotation).as_rotvec()
    vec = np.concatenate([dt, drot])
    return vec, float(np.linalg.norm(dt)), math.degrees(float(np.linalg.norm(drot)))


@dataclass(frozen=True)
class OutlierModel:
    """Broad zero-mean component appended to every registration mixture."""

    weight: float = 0.1
    std: float = 10.0


@dataclass
class PointSetPair:
    fixed: np.ndarray
    fixed_cov: np.ndarray
    moving: np.ndarray
    moving_cov: np.ndarray
    transform: RigidTransform = None
    meta: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.fixed.shape[1]


class RegistrationBlock(ResidualBlock):
    """Residual of one moving point against the fixed-set mixture."""

    def __init__(self, point, point_cov, fixed, fixed_cov, loss_kind: str,
                 config: MixtureLossConfig = DEFAULT_CONFIG, outlier: OutlierModel | None = None,
                 name: str = ""):
        self.point = np.asarray(point, dtype=float)
        self.point_cov = np.asarray(point_cov, dtype=float)
        self.fixed = fixed
        self.fixed_cov = fixed_cov
        self.loss_kind = loss_kind
        self.config = config
        self.outlier = outlier
        d = self.point.shape[0]
        n = fixed.shape[0]
        if outlier is None:
            self._weights = np.full(n, 1.0 / n)
            self._means = fixed
        else:
            self._weights = np.append(np.full(n, (1.0 - outlier.weight) / n), outlier.weight)
            self._means = np.vstack([fixed, np.zeros(d)])
        super().__init__(self._residual, None, name=name)

    def combined_covariances(self, rotation) -> np.ndarray:
        moved = rotation @ self.point_cov @ rotation.T
        covs = self.fixed_cov + moved
        if self.outlier is not None:
            d = self.point.shape[0]
            covs = np.concatenate([covs, (self.outlier.std ** 2 * np.eye(d) + moved)[None]])
        return covs

    def refresh(self, state) -> None:
        covs = self.combined_covariances(rotation_of(state))
        self.mixture = GaussianMixture.from_covariances(self._weights, self._means, covs)
        self.loss = make_loss(self.loss_kind, self.mixture, self.config)

    def _residual(self, state):
        state = np.asarray(state)
        if state.shape[0] == 3:
            c, s = math.cos(state[2]), math.sin(state[2])
            mx, my = self.point
            r = np.array([c * mx - s * my + state[0], s * mx + c * my + state[1]])
            jac = np.array([[1.0, 0.0, -s * mx - c * my], [0.0, 1.0, c * mx - s * my]])
            return r, jac
        rot = state[3:].reshape(3, 3)
        r = rot @ self.point + state[:3]
        jac = np.hstack([np.eye(3), -rot @ skew(self.point)])
        return r, jac


class RegistrationProblem(LeastSquaresProblem):
    """All moving points evaluated together.

    Numerically the same as one :class:`RegistrationBlock` per point (the
    ``blocks`` list holds those for reference), but the mixtures of every
    point are built and evaluated as stacked arrays.
    """

    def __init__(self, pair: PointSetPair, loss_kind: str, config: MixtureLossConfig = DEFAULT_CONFIG,
                 outlier: OutlierModel | None = None):
        d = pair.dimension
        self.pair = pair
        self.loss_kind = loss_kind
        self.config = config
        self.outlier = outlier
        n = len(pair.fixed)
        if outlier is None:
            weights = np.full(n, 1.0 / n)
            self._means = pair.fixed
            self._fixed_cov = pair.fixed_cov
        else:
            weights = np.append(np.full(n, (1.0 - outlier.weight) / n), outlier.weight)
            self._means = np.vstack([pair.fixed, np.zeros(d)])
            self._fixed_cov = np.concatenate([pair.fixed_cov, (outlier.std ** 2 * np.eye(d))[None]])
        self._log_weights = np.log(weights)
        self._sqrt_infos = None
        blocks = [
            RegistrationBlock(m, c, pair.fixed, pair.fixed_cov, loss_kind, config, outlier, name=f"point{i}")
            for i, (m, c) in enumerate(zip(pair.moving, pair.moving_cov))
        ]
        plus = plus_se2 if d == 2 else plus_pose3
        super().__init__(blocks, tangent_dim=tangent_dim(d), plus=plus)

    @property
    def state_dependent(self) -> bool:
        return True

    def refresh(self, state) -> None:
        rot = rotation_of(state)
        moved = rot @ self.pair.moving_cov @ rot.T
        covs = self._fixed_cov[None] + moved[:, None]
        # upper factor S with S^T S = inv(cov): S = chol(inv(cov))^T
        lower = np.linalg.cholesky(np.linalg.inv(covs))
        self._sqrt_infos = np.swapaxes(lower, -1, -2)

    def _residuals(self, state):
        state = np.asarray(state, dtype=float)
        pts = self.pair.moving
        n = len(pts)
        if state.shape[0] == 3:
            c, s = math.cos(state[2]), math.sin(state[2])
            rot = np.array([[c, -s], [s, c]])
            r = pts @ rot.T + state[:2]
            jac = np.zeros((n, 2, 3))
            jac[:, 0, 0] = jac[:, 1, 1] = 1.0
            jac[:, 0, 2] = -s * pts[:, 0] - c * pts[:, 1]
            jac[:, 1, 2] = c * pts[:, 0] - s * pts[:, 1]
            return r, jac
        rot = state[3:].reshape(3, 3)
        r = pts @ rot.T + state[:3]
        x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
        zero = np.zeros(n)
        # [m]x per point, then -R [m]x
        sk = np.stack([np.stack([zero, -z, y], 1), np.stack([z, zero, -x], 1), np.stack([-y, x, zero], 1)], 1)
        jac = np.concatenate([np.broadcast_to(np.eye(3), (n, 3, 3)), -rot @ sk], axis=2)
        return r, jac

    def _evaluate_points(self, state):
        if self._sqrt_infos is None:
            self.refresh(state)
        r, dr = self._residuals(state)
        values, jl, log_gamma = evaluate_batch(self.loss_kind, self._log_weights, self._means,
                                               self._sqrt_infos, r, self.config)
        return values, jl @ dr, log_gamma

    def evaluate(self, state):
        values, jac, _ = self._evaluate_points(state)
        return values.ravel(), jac.reshape(-1, jac.shape[2])

    def block_costs(self, state):
        values, _, _ = self._evaluate_points(state)
        costs = 0.5 * (values * values).sum(axis=1)
        return [(b.name, float(c)) for b, c in zip(self.blocks, costs)]

    def log_normalizations(self, state) -> np.ndarray:
        """Per-point ``log(gamma)`` at the current noise model."""
        return self._evaluate_points(state)[2]


def build_registration_problem(pair: PointSetPair, loss_kind: str,
                               config: MixtureLossConfig = DEFAULT_CONFIG,
                               outlier: OutlierModel | None = None,
                               batched: bool = True) -> LeastSquaresProblem:
    """Registration problem with one residual per moving point.

    The mixtures are built lazily by ``refresh``; the solver calls it before
    the first evaluation and after every accepted step. ``batched=False``
    returns the plain per-point block form, which evaluates identically but
    slower.
    """
    if len(pair.fixed) == 0 or len(pair.moving) == 0:
        raise ValueError("point sets must be nonempty")
    d = pair.fixed.shape[1]
    if pair.moving.shape[1] != d or d not in (2, 3):
        raise ValueError("fixed and moving sets must share dimension 2 or 3")
    if loss_kind == "dcs":
        raise ValueError("DCS is not defined for mixture registration")
    if loss_kind not in ("mm", "sm", "msm"):
        raise ValueError(f"unknown loss {loss_kind!r}; valid names: mm, sm, msm")
    if batched:
        return RegistrationProblem(pair, loss_kind, config, outlier)
    blocks = [
        RegistrationBlock(m, c, pair.fixed, pair.fixed_cov, loss_kind, config, outlier, name=f"point{i}")
        for i, (m, c) in enumerate(zip(pair.moving, pair.moving_cov))
    ]
    plus = plus_se2 if d == 2 else plus_pose3
    return LeastSquaresProblem(blocks, tangent_dim=tangent_dim(d), plus=plus)


# -- measurement model ------------------------------------------------------

def polar_to_cartesian(polar) -> np.ndarray:
    """``(range, azimuth[, elevation])`` rows to Cartesian points."""
    polar = np.atleast_2d(polar)
    r, az = polar[:, 0], polar[:, 1]
    if polar.shape[1] == 2:
        return np.stack([r * np.cos(az), r * np.sin(az)], axis=1)
    el = polar[:, 2]
    return np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)], axis=1)


def cartesian_to_polar(points) -> np.ndarray:
    points = np.atleast_2d(points)
    if points.shape[1] == 2:
        return np.stack([np.hypot(points[:, 0], points[:, 1]),
                         np.arctan2(points[:, 1], points[:, 0])], axis=1)
    r = np.linalg.norm(points, axis=1)
    az = np.arctan2(points[:, 1], points[:, 0])
    el = np.arcsin(np.clip(points[:, 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
    return np.stack([r, az, el], axis=1)


def polar_jacobian(polar) -> np.ndarray:
    """d(Cartesian)/d(polar) per row, shape ``(N, D, D)``."""
    polar = np.atleast_2d(polar)
    r, az = polar[:, 0], polar[:, 1]
    ca, sa = np.cos(az), np.sin(az)
    if polar.shape[1] == 2:
        return np.stack([np.stack([ca, -r * sa], 1), np.stack([sa, r * ca], 1)], 1)
    el = polar[:, 2]
    ce, se = np.cos(el), np.sin(el)
    rows = [
        np.stack([ce * ca, -r * ce * sa, -r * se * ca], 1),
        np.stack([ce * sa, r * ce * ca, -r * se * sa], 1),
        np.stack([se, np.zeros_like(r), r * ce], 1),
    ]
    return np.stack(rows, 1)


def measurement_covariance(points, range_std: float, angle_std: float) -> np.ndarray:
    """First-order Cartesian covariance of polar/spherical measurement noise."""
    polar = cartesian_to_polar(points)
    jac = polar_jacobian(polar)
    d = polar.shape[1]
    var = np.diag([range_std ** 2] + [angle_std ** 2] * (d - 1))
    return jac @ var @ np.swapaxes(jac, 1, 2)


def measure(points, rng: np.random.Generator | None, range_std: float, angle_std: float):
    """Noisy polar measurement of sensor-frame points, returned in Cartesian form
    with their first-order covariances (evaluated at the measured values)."""
    polar = cartesian_to_polar(points)
    if rng is not None:
        d = polar.shape[1]
        std = np.array([range_std] + [angle_std] * (d - 1))
        polar = polar + rng.standard_normal(polar.shape) * std
    measured = polar_to_cartesian(polar)
    return measured, measurement_covariance(measured, range_std, angle_std)
