"""
Least-squares loss functions for Gaussian mixtures.

Every loss maps a raw residual ``r`` (dimension D) to a stacked residual
``rho`` such that ``1/2 ||rho||^2`` is the negative log-likelihood of the
noise model up to a constant ``log(gamma)``:

- :class:`MaxMixture`    ``[S_k (r - mu_k); sqrt(-2 log(s_k / gamma_m))]``
- :class:`SumMixture`    ``sqrt(-2 e_k - 2 log(sum_l s_l/gamma_s exp(e_l - e_k)))``
- :class:`MaxSumMixture` ``[S_k (r - mu_k); sqrt(-2 log(sum_l s_l/gamma_ms exp(e_l - e_k)))]``
- :class:`DynamicCovarianceScaling` and :class:`GaussianLoss` as baselines.

``k`` is the locally dominant component (largest ``log s_l + e_l``).
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .gmm import GaussianMixture, _check_residual

__all__ = [
    "LossEvaluation",
    "MixtureLossConfig",
    "Loss",
    "GaussianLoss",
    "MaxMixture",
    "SumMixture",
    "MaxSumMixture",
    "DynamicCovarianceScaling",
    "evaluate_mm",
    "evaluate_sm",
    "evaluate_msm",
    "evaluate_dcs",
    "msm_sqrt_argument",
    "loss_jacobian_fd_check",
    "make_loss",
    "evaluate_batch",
    "LOSS_NAMES",
]

# Tolerance on the MSM square-root argument before it is treated as a bug.
POSITIVITY_SLACK = 1e-12


@dataclass(frozen=True)
class LossEvaluation:
    value: np.ndarray
    jacobian: np.ndarray

    @property
    def cost(self) -> float:
        return 0.5 * float(self.value @ self.value)


@dataclass(frozen=True)
class MixtureLossConfig:
    """Tuning shared by the mixture losses.

    ``damping`` is the additive term of the MSM normalization, ``sqrt_epsilon``
    floors the SM square-root argument. ``normalization_margin`` scales the
    MM/SM normalization above its tight bound (1 = tight).
    """

    damping: float = 10.0
    sqrt_epsilon: float = 1e-10
    normalization_margin: float = 1.0

    def __post_init__(self):
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.sqrt_epsilon <= 0:
            raise ValueError("sqrt_epsilon must be > 0")
        if self.normalization_margin < 1:
            raise ValueError("normalization_margin must be >= 1")


DEFAULT_CONFIG = MixtureLossConfig()


class Loss:
    """Base class: a loss knows its residual dimension and its log-normalizer."""

    name = "loss"
    #: log of the constant gamma such that 1/2||rho||^2 = NLL + log(gamma)
    log_normalization = 0.0

    def evaluate(self, r) -> LossEvaluation:
        raise NotImplementedError

    def __call__(self, r) -> LossEvaluation:
        return self.evaluate(r)


def _dominant(mixture: GaussianMixture, r: np.ndarray):
    z = (mixture.sqrt_infos @ (r - mixture.means)[:, :, None])[:, :, 0]
    e = -0.5 * (z * z).sum(axis=1)
    k = int(np.argmax(mixture.log_scalings + e))
    return z, e, k


class GaussianLoss(Loss):
    """Plain whitened residual ``S (r - mu)``."""

    name = "gauss"

    def __init__(self, sqrt_info, mean=None):
        self.sqrt_info = np.atleast_2d(np.asarray(sqrt_info, dtype=float))
        d = self.sqrt_info.shape[0]
        self.mean = np.zeros(d) if mean is None else np.atleast_1d(np.asarray(mean, dtype=float))
        self.dimension = d
        self.log_normalization = -float(np.log(abs(np.linalg.det(self.sqrt_info))))

    def evaluate(self, r) -> LossEvaluation:
        r = np.atleast_1d(np.asarray(r, dtype=float))
        return LossEvaluation(self.sqrt_info @ (r - self.mean), self.sqrt_info.copy())


class MaxMixture(Loss):
    name = "mm"

    def __init__(self, mixture: GaussianMixture, config: MixtureLossConfig = DEFAULT_CONFIG):
        self.mixture = mixture
        self.config = config
        self.dimension = mixture.dimension
        self.log_gamma = float(np.max(mixture.log_scalings)) + math.log(config.normalization_margin)
        self.log_normalization = self.log_gamma
        # constant second entry for each possible dominant component
        self._const = np.sqrt(np.maximum(-2.0 * (mixture.log_scalings - self.log_gamma), 0.0))

    def evaluate(self, r) -> LossEvaluation:
        r = _check_residual(self.mixture, r)
        z, _, k = _dominant(self.mixture, r)
        d = self.dimension
        value = np.empty(d + 1)
        value[:d] = z[k]
        value[d] = self._const[k]
        jac = np.zeros((d + 1, d))
        jac[:d] = self.mixture.sqrt_infos[k]
        return LossEvaluation(value, jac)


class SumMixture(Loss):
    name = "sm"

    def __init__(self, mixture: GaussianMixture, config: MixtureLossConfig = DEFAULT_CONFIG):
        self.mixture = mixture
        self.config = config
        self.dimension = mixture.dimension
        ls = mixture.log_scalings
        m = float(np.max(ls))
        self.log_gamma = m + math.log(np.sum(np.exp(ls - m))) + math.log(config.normalization_margin)
        self.log_normalization = self.log_gamma
        self._scaled = np.exp(ls - self.log_gamma)

    def sqrt_argument(self, r) -> float:
        r = _check_residual(self.mixture, r)
        _, e, k = _dominant(self.mixture, r)
        return float(-2.0 * e[k] - 2.0 * np.log(self._scaled @ np.exp(e - e[k])))

    def evaluate(self, r) -> LossEvaluation:
        r = _check_residual(self.mixture, r)
        mix = self.mixture
        z, e, k = _dominant(mix, r)
        terms = self._scaled * np.exp(e - e[k])
        total = terms.sum()
        arg = -2.0 * e[k] - 2.0 * math.log(total)
        rho = math.sqrt(max(arg, self.config.sqrt_epsilon))
        # I_l (r - mu_l) = S_l^T z_l
        grads = (z[:, None, :] @ mix.sqrt_infos)[:, 0, :]
        row = (terms @ grads) / (total * rho)
        return LossEvaluation(np.array([rho]), row[None, :])


class MaxSumMixture(Loss):
    name = "msm"

    def __init__(self, mixture: GaussianMixture, config: MixtureLossConfig = DEFAULT_CONFIG):
        self.mixture = mixture
        self.config = config
        self.dimension = mixture.dimension
        s_max = float(np.exp(np.max(mixture.log_scalings)))
        self.gamma = mixture.size * s_max + config.damping
        self.log_gamma = math.log(self.gamma)
        self.log_normalization = self.log_gamma
        self._scaled = np.exp(mixture.log_scalings - self.log_gamma)

    def _parts(self, r):
        z, e, k = _dominant(self.mixture, r)
        terms = self._scaled * np.exp(e - e[k])
        total = terms.sum()
        arg = -2.0 * math.log(total)
        return z, k, terms, total, arg

    def sqrt_argument(self, r) -> float:
        """The nonlinear entry's argument ``-2 log(sum_l s_l/gamma exp(e_l - e_k))``."""
        r = _check_residual(self.mixture, r)
        return self._parts(r)[4]

    def evaluate(self, r) -> LossEvaluation:
        r = _check_residual(self.mixture, r)
        mix = self.mixture
        z, k, terms, total, arg = self._parts(r)
        if arg < -POSITIVITY_SLACK:
            raise AssertionError(f"MSM sqrt argument {arg!r} is negative; normalization invariant broken")
        d = self.dimension
        value = np.empty(d + 1)
        value[:d] = z[k]
        value[d] = math.sqrt(max(arg, 0.0))
        grads = (z[:, None, :] @ mix.sqrt_infos)[:, 0, :]
        jac = np.empty((d + 1, d))
        jac[:d] = mix.sqrt_infos[k]
        denom = total * math.sqrt(max(arg, self.config.sqrt_epsilon))
        jac[d] = (terms @ (grads - grads[k])) / denom
        return LossEvaluation(value, jac)


def dcs_scale(phi: float, chi2: float) -> float:
    """DCS weight ``min(1, 2 phi / (phi + chi2))``."""
    return min(1.0, 2.0 * phi / (phi + chi2))


def dcs_kernel(phi: float, chi2: float) -> float:
    """Robust squared cost whose derivative w.r.t. ``chi2`` is ``dcs_scale**2``.

    Quadratic up to ``phi``, then ``phi (3 chi2 - phi) / (phi + chi2)``,
    bounded by ``3 phi``.
    """
    if chi2 <= phi:
        return chi2
    return phi * (3.0 * chi2 - phi) / (phi + chi2)


def evaluate_dcs(phi: float, r) -> LossEvaluation:
    """Dynamic Covariance Scaling applied to an already whitened residual.

    The residual keeps its direction and is shrunk so that ``||value||^2``
    equals :func:`dcs_kernel`; its gradient is then the residual weighted by
    ``dcs_scale(phi, ||r||^2)**2``.
    """
    if phi <= 0:
        raise ValueError("phi must be > 0")
    r = np.atleast_1d(np.asarray(r, dtype=float))
    chi2 = float(r @ r)
    d = r.shape[0]
    if chi2 <= phi:
        return LossEvaluation(r.copy(), np.eye(d))
    kern = dcs_kernel(phi, chi2)
    scale = dcs_scale(phi, chi2)
    c = math.sqrt(kern / chi2)
    dc = (scale * scale * chi2 - kern) / (c * chi2 * chi2)
    return LossEvaluation(c * r, c * np.eye(d) + dc * np.outer(r, r))


class DynamicCovarianceScaling(Loss):
    """DCS on top of a single Gaussian, given by ``sqrt_info`` and ``mean``."""

    name = "dcs"

    def __init__(self, sqrt_info, mean=None, phi: float = 1.0):
        if phi <= 0:
            raise ValueError("phi must be > 0")
        self.gauss = GaussianLoss(sqrt_info, mean)
        self.phi = phi
        self.dimension = self.gauss.dimension

    @classmethod
    def from_mixture(cls, mixture: GaussianMixture, phi: float = 1.0, component: int = 0):
        """DCS whitened by one mixture component (the inlier model)."""
        return cls(mixture.sqrt_infos[component], mixture.means[component], phi)

    def evaluate(self, r) -> LossEvaluation:
        base = self.gauss.evaluate(r)
        out = evaluate_dcs(self.phi, base.value)
        return LossEvaluation(out.value, out.jacobian @ base.jacobian)


def evaluate_mm(mixture, config, r) -> LossEvaluation:
    return MaxMixture(mixture, config).evaluate(r)


def evaluate_sm(mixture, config, r) -> LossEvaluation:
    return SumMixture(mixture, config).evaluate(r)


def evaluate_msm(mixture, config, r) -> LossEvaluation:
    return MaxSumMixture(mixture, config).evaluate(r)


def msm_sqrt_argument(mixture, config, r) -> float:
    return MaxSumMixture(mixture, config).sqrt_argument(r)


LOSS_NAMES = ("mm", "sm", "msm", "dcs")


def make_loss(name: str, mixture: GaussianMixture, config: MixtureLossConfig = DEFAULT_CONFIG,
              phi: float = 1.0) -> Loss:
    """Loss by short name. DCS is whitened by the first mixture component."""
    if name == "mm":
        return MaxMixture(mixture, config)
    if name == "sm":
        return SumMixture(mixture, config)
    if name == "msm":
        return MaxSumMixture(mixture, config)
    if name == "dcs":
        return DynamicCovarianceScaling.from_mixture(mixture, phi)
    raise ValueError(f"unknown loss {name!r}; valid names: {', '.join(LOSS_NAMES)}")


def loss_jacobian_fd_check(loss: Loss, r, step: float = 1e-6) -> float:
    """Max abs deviation between the analytical and central-difference Jacobian."""
    if step <= 0:
        raise ValueError("step must be > 0")
    r = np.atleast_1d(np.asarray(r, dtype=float))
    analytic = loss.evaluate(r).jacobian
    numeric = np.empty_like(analytic)
    for j in range(r.shape[0]):
        h = np.zeros_like(r)
        h[j] = step
        numeric[:, j] = (loss.evaluate(r + h).value - loss.evaluate(r - h).value) / (2 * step)
    return float(np.max(np.abs(analytic - numeric)))


def evaluate_batch(name: str, log_weights, means, sqrt_infos, r, config: MixtureLossConfig = DEFAULT_CONFIG):
    """Evaluate one mixture loss for N residuals, each with its own mixture.

    Parameters
    ----------
    name : {"mm", "sm", "msm"}
    log_weights : (N, L) or (L,) array
        Log of the (normalized) component weights.
    means : (L, D) or (N, L, D) array
    sqrt_infos : (N, L, D, D) array
        Upper-triangular square-root information matrices.
    r : (N, D) array

    Returns
    -------
    values : (N, K) array
    jacobians : (N, K, D) array
        ``K`` is ``D + 1`` for MM and MSM and 1 for SM.
    log_gammas : (N,) array
        Per-row log normalization constant.
    """
    r = np.asarray(r, dtype=float)
    n, d = r.shape
    s = np.asarray(sqrt_infos, dtype=float)
    ls = np.broadcast_to(log_weights, s.shape[:2]) + np.log(np.abs(np.diagonal(s, axis1=2, axis2=3))).sum(axis=2)
    diff = r[:, None, :] - means
    z = (s @ diff[..., None])[..., 0]
    e = -0.5 * (z * z).sum(axis=2)
    k = np.argmax(ls + e, axis=1)
    rows = np.arange(n)
    e_k = e[rows, k]
    ls_max = ls.max(axis=1)
    if name == "mm":
        log_gamma = ls_max + math.log(config.normalization_margin)
        values = np.empty((n, d + 1))
        values[:, :d] = z[rows, k]
        values[:, d] = np.sqrt(np.maximum(-2.0 * (ls[rows, k] - log_gamma), 0.0))
        jac = np.zeros((n, d + 1, d))
        jac[:, :d] = s[rows, k]
        return values, jac, log_gamma
    grads = (np.swapaxes(s, 2, 3) @ z[..., None])[..., 0]
    if name == "sm":
        log_gamma = ls_max + np.log(np.exp(ls - ls_max[:, None]).sum(axis=1)) + math.log(config.normalization_margin)
        terms = np.exp(ls - log_gamma[:, None] + e - e_k[:, None])
        total = terms.sum(axis=1)
        rho = np.sqrt(np.maximum(-2.0 * e_k - 2.0 * np.log(total), config.sqrt_epsilon))
        row = (terms[:, :, None] * grads).sum(axis=1) / (total * rho)[:, None]
        return rho[:, None], row[:, None, :], log_gamma
    if name == "msm":
        log_gamma = np.log(ls.shape[1] * np.exp(ls_max) + config.damping)
        terms = np.exp(ls - log_gamma[:, None] + e - e_k[:, None])
        total = terms.sum(axis=1)
        arg = -2.0 * np.log(total)
        if np.any(arg < -POSITIVITY_SLACK):
            raise AssertionError(f"MSM sqrt argument {arg.min()!r} is negative; normalization invariant broken")
        values = np.empty((n, d + 1))
        values[:, :d] = z[rows, k]
        values[:, d] = np.sqrt(np.maximum(arg, 0.0))
        jac = np.empty((n, d + 1, d))
        jac[:, :d] = s[rows, k]
        rel = grads - grads[rows, k][:, None, :]
        denom = total * np.sqrt(np.maximum(arg, config.sqrt_epsilon))
        jac[:, d] = (terms[:, :, None] * rel).sum(axis=1) / denom[:, None]
        return values, jac, log_gamma
    raise ValueError(f"no batched form for loss {name!r}; valid names: mm, sm, msm")
