"""
Gaussian mixtures in square-root information form.

A mixture is stored as stacked arrays (weights ``(L,)``, means ``(L, D)``,
upper-triangular square-root information factors ``(L, D, D)``) so that all
per-component quantities can be evaluated with a handful of vectorized numpy
calls. The density is written in the compressed form

    p(r) ∝ sum_l s_l exp(e_l(r)),   s_l = w_l det(S_l),   e_l = -1/2 ||S_l (r - mu_l)||^2

which is what the least-squares losses in :mod:`mixlsq.loss` consume.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "GaussianComponent",
    "GaussianMixture",
    "ScaledExponents",
    "scalings",
    "exponents",
    "log_sum_exp_robust",
    "dominant_component",
    "scaled_exponents",
    "negative_log_likelihood",
    "nll_gradient_hessian",
    "find_global_mode",
    "count_local_minima",
    "local_minima",
    "sample_mixture",
    "DEFAULT_SEARCH_RANGE",
    "DEFAULT_GRID_RESOLUTION",
    "DEDUP_RADIUS",
]

DEFAULT_SEARCH_RANGE = (-4.0, 4.0)
DEFAULT_GRID_RESOLUTION = 0.01
DEDUP_RADIUS = 1e-3


def _canonical_sqrt_info(sqrt_info: np.ndarray) -> np.ndarray:
    # Any square root S of the information (S^T S = I) maps to the same
    # upper-triangular factor with positive diagonal.
    info = sqrt_info.T @ sqrt_info
    return np.linalg.cholesky(info).T


@dataclass(frozen=True)
class GaussianComponent:
    """One weighted Gaussian with an upper-triangular square-root information."""

    weight: float
    mean: np.ndarray
    sqrt_info: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        sqrt_info = np.atleast_2d(np.asarray(self.sqrt_info, dtype=float))
        if mean.ndim != 1:
            raise ValueError("mean must be a vector")
        d = mean.shape[0]
        if sqrt_info.shape != (d, d):
            raise ValueError(f"sqrt_info must be {d}x{d}, got {sqrt_info.shape}")
        if not 0.0 < self.weight <= 1.0 + 1e-12:
            raise ValueError(f"weight must lie in (0, 1], got {self.weight}")
        if not (np.allclose(sqrt_info, np.triu(sqrt_info)) and np.all(np.diag(sqrt_info) > 0)):
            sqrt_info = _canonical_sqrt_info(sqrt_info)
        mean.setflags(write=False)
        sqrt_info.setflags(write=False)
        object.__setattr__(self, "weight", float(min(self.weight, 1.0)))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sqrt_info", sqrt_info)

    @classmethod
    def from_covariance(cls, weight, mean, covariance) -> "GaussianComponent":
        cov = np.atleast_2d(np.asarray(covariance, dtype=float))
        info = np.linalg.inv(cov)
        return cls(weight, mean, np.linalg.cholesky(info).T)

    @classmethod
    def from_std(cls, weight, mean, std) -> "GaussianComponent":
        """Axis-aligned component from per-dimension standard deviations."""
        std = np.atleast_1d(np.asarray(std, dtype=float))
        return cls(weight, mean, np.diag(1.0 / std))

    @property
    def dimension(self) -> int:
        return self.mean.shape[0]

    @property
    def covariance(self) -> np.ndarray:
        s_inv = np.linalg.inv(self.sqrt_info)
        return s_inv @ s_inv.T


class GaussianMixture:
    """Immutable Gaussian mixture with weights normalized to one.

    Parameters
    ----------
    components : sequence of GaussianComponent
        At least one component; all must share the same dimension. Weights
        are renormalized to sum to one.
    """

    def __init__(self, components: Sequence[GaussianComponent]):
        components = list(components)
        if not components:
            raise ValueError("a mixture needs at least one component")
        d = components[0].dimension
        if any(c.dimension != d for c in components):
            raise ValueError("all components must share one dimension")
        weights = np.array([c.weight for c in components])
        weights = weights / weights.sum()
        self._init_arrays(
            weights,
            np.stack([c.mean for c in components]),
            np.stack([c.sqrt_info for c in components]),
        )

    def _init_arrays(self, weights, means, sqrt_infos):
        self.weights = weights
        self.means = means
        self.sqrt_infos = sqrt_infos
        # information matrices I_l = S_l^T S_l, used by gradients
        self.infos = np.einsum("lji,ljk->lik", sqrt_infos, sqrt_infos)
        self.log_scalings = np.log(weights) + np.sum(
            np.log(np.diagonal(sqrt_infos, axis1=1, axis2=2)), axis=1
        )
        for a in (self.weights, self.means, self.sqrt_infos, self.infos, self.log_scalings):
            a.setflags(write=False)

    @classmethod
    def from_arrays(cls, weights, means, sqrt_infos) -> "GaussianMixture":
        """Build from stacked arrays; square-root factors must already be canonical."""
        weights = np.asarray(weights, dtype=float)
        means = np.asarray(means, dtype=float)
        sqrt_infos = np.asarray(sqrt_infos, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        if sqrt_infos.ndim == 1:
            sqrt_infos = sqrt_infos[:, None, None]
        if np.any(weights <= 0):
            raise ValueError("weights must be positive")
        diag = np.diagonal(sqrt_infos, axis1=1, axis2=2)
        if np.any(diag <= 0) or np.any(np.tril(sqrt_infos, -1) != 0):
            raise ValueError("sqrt_infos must be upper triangular with positive diagonal")
        self = cls.__new__(cls)
        self._init_arrays(weights / weights.sum(), means, sqrt_infos)
        return self

    @classmethod
    def from_std(cls, weights, means, stds) -> "GaussianMixture":
        """Axis-aligned mixture from per-component means and standard deviations.

        ``means`` and ``stds`` are ``(L,)`` for 1D mixtures or ``(L, D)``.
        """
        means = np.asarray(means, dtype=float)
        stds = np.asarray(stds, dtype=float)
        if means.ndim == 1:
            means, stds = means[:, None], stds[:, None]
        return cls.from_arrays(weights, means, np.stack([np.diag(1.0 / s) for s in stds]))

    @classmethod
    def from_covariances(cls, weights, means, covariances) -> "GaussianMixture":
        covs = np.asarray(covariances, dtype=float)
        if covs.ndim == 1:
            covs = covs[:, None, None]
        info = np.linalg.inv(covs)
        sqrt_infos = np.swapaxes(np.linalg.cholesky(info), 1, 2)
        return cls.from_arrays(weights, means, sqrt_infos)

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    @property
    def size(self) -> int:
        return self.means.shape[0]

    def __len__(self):
        return self.size

    @property
    def components(self) -> list[GaussianComponent]:
        return [
            GaussianComponent(float(w), m.copy(), s.copy())
            for w, m, s in zip(self.weights, self.means, self.sqrt_infos)
        ]

    def covariances(self) -> np.ndarray:
        return np.linalg.inv(self.infos)

    def scaled(self, factor: float) -> "GaussianMixture":
        """Same mixture with every weight multiplied by ``factor`` (not renormalized)."""
        out = GaussianMixture.__new__(GaussianMixture)
        out._init_arrays(self.weights * factor, self.means, self.sqrt_infos)
        return out

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "components": [
                {"weight": float(w), "mean": m.tolist(), "sqrt_info": s.tolist()}
                for w, m, s in zip(self.weights, self.means, self.sqrt_infos)
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        return cls(
            [
                GaussianComponent(c["weight"], c["mean"], c["sqrt_info"])
                for c in data["components"]
            ]
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        if not isinstance(other, GaussianMixture):
            return NotImplemented
        return (
            self.means.shape == other.means.shape
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.sqrt_infos, other.sqrt_infos)
        )

    def __hash__(self):
        return hash((self.weights.tobytes(), self.means.tobytes(), self.sqrt_infos.tobytes()))

    def __repr__(self):
        return f"GaussianMixture(L={self.size}, D={self.dimension}, weights={self.weights.tolist()})"


@dataclass(frozen=True)
class ScaledExponents:
    scalings: np.ndarray
    exponents: np.ndarray
    dominant_index: int


def scalings(mixture: GaussianMixture) -> np.ndarray:
    """Component scalings ``s_l = w_l det(S_l)``."""
    return np.exp(mixture.log_scalings)


def _whitened(mixture: GaussianMixture, r: np.ndarray) -> np.ndarray:
    # (..., L, D) whitened offsets S_l (r - mu_l)
    diff = r[..., None, :] - mixture.means
    return np.einsum("lij,...lj->...li", mixture.sqrt_infos, diff)


def _check_residual(mixture: GaussianMixture, r) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    if r.ndim == 0:
        r = r[None]
    if r.shape[-1] != mixture.dimension:
        raise ValueError(
            f"residual dimension {r.shape[-1]} does not match mixture dimension {mixture.dimension}"
        )
    return r


def exponents(mixture: GaussianMixture, r) -> np.ndarray:
    """Exponents ``e_l(r) = -1/2 ||S_l (r - mu_l)||^2``.

    ``r`` may carry leading batch dimensions; the result then has shape
    ``(..., L)``.
    """
    r = _check_residual(mixture, r)
    z = _whitened(mixture, r)
    return -0.5 * np.einsum("...li,...li->...l", z, z)


def dominant_component(scalings, exponents) -> int:
    """Index maximizing ``s_l exp(e_l)``, lowest index on ties."""
    scores = np.log(np.asarray(scalings, dtype=float)) + np.asarray(exponents, dtype=float)
    return int(np.argmax(scores))


def log_sum_exp_robust(scalings, exponents) -> float:
    """``log(sum_l s_l exp(e_l))`` with the dominant term factored out."""
    s = np.asarray(scalings, dtype=float)
    e = np.asarray(exponents, dtype=float)
    if s.shape != e.shape:
        raise ValueError("scalings and exponents must have equal length")
    k = dominant_component(s, e)
    return float(e[k] + np.log(np.sum(s * np.exp(e - e[k]))))


def scaled_exponents(mixture: GaussianMixture, r) -> ScaledExponents:
    s = scalings(mixture)
    e = exponents(mixture, r)
    return ScaledExponents(s, e, dominant_component(s, e))


def negative_log_likelihood(mixture: GaussianMixture, r):
    """Exact ``-log sum_l s_l exp(e_l(r))``.

    Accepts a single residual or a batch ``(..., D)``; batches are reduced
    with a max-shifted log-sum-exp along the component axis.
    """
    r = _check_residual(mixture, r)
    a = mixture.log_scalings + exponents(mixture, r)
    m = np.max(a, axis=-1)
    out = -(m + np.log(np.sum(np.exp(a - m[..., None]), axis=-1)))
    return float(out) if out.ndim == 0 else out


def nll_gradient_hessian(mixture: GaussianMixture, r):
    """Gradient and Hessian of the exact NLL at a single point."""
    r = _check_residual(mixture, r)
    a = mixture.log_scalings + exponents(mixture, r)
    resp = np.exp(a - a.max())
    resp /= resp.sum()
    g_l = np.einsum("lij,lj->li", mixture.infos, r - mixture.means)
    g = resp @ g_l
    hess = np.einsum("l,lij->ij", resp, mixture.infos) - np.einsum("l,li,lj->ij", resp, g_l, g_l)
    hess += np.outer(g, g)
    return g, hess


def _refine(mixture: GaussianMixture, x0, tol=1e-10, max_iter=200) -> np.ndarray:
    """Modified Newton descent on the exact NLL from ``x0``."""
    x = np.array(x0, dtype=float)
    f = negative_log_likelihood(mixture, x)
    for _ in range(max_iter):
        g, h = nll_gradient_hessian(mixture, x)
        if np.linalg.norm(g) < tol:
            break
        w, v = np.linalg.eigh(h)
        w = np.maximum(np.abs(w), 1e-8)
        step = -v @ ((v.T @ g) / w)
        t = 1.0
        while t > 1e-12:
            x_new = x + t * step
            f_new = negative_log_likelihood(mixture, x_new)
            if f_new <= f:
                break
            t *= 0.5
        else:
            break
        if np.array_equal(x_new, x):
            break
        x, f = x_new, f_new
    return x


def _grid(dimension, search_range, grid_resolution):
    lo, hi = search_range
    n = int(round((hi - lo) / grid_resolution)) + 1
    axis = np.linspace(lo, hi, n)
    if dimension == 1:
        return axis, axis[:, None]
    mesh = np.meshgrid(*([axis] * dimension), indexing="ij")
    return axis, np.stack(mesh, axis=-1)


def find_global_mode(
    mixture: GaussianMixture,
    search_range=DEFAULT_SEARCH_RANGE,
    grid_resolution=DEFAULT_GRID_RESOLUTION,
) -> np.ndarray:
    """Global minimizer of the NLL: grid search, then Newton refinement."""
    _, pts = _grid(mixture.dimension, search_range, grid_resolution)
    nll = negative_log_likelihood(mixture, pts)
    best = np.unravel_index(np.argmin(nll), nll.shape)
    return _refine(mixture, pts[best])


def local_minima(
    mixture: GaussianMixture,
    search_range=DEFAULT_SEARCH_RANGE,
    grid_resolution=DEFAULT_GRID_RESOLUTION,
) -> list[np.ndarray]:
    """Distinct refined local minima of the NLL found on the search grid.

    A grid point is a candidate when its NLL is strictly below every
    neighbour (including diagonals). Candidates are refined and merged when
    closer than :data:`DEDUP_RADIUS`.
    """
    d = mixture.dimension
    _, pts = _grid(d, search_range, grid_resolution)
    nll = negative_log_likelihood(mixture, pts)
    padded = np.pad(nll, 1, mode="constant", constant_values=np.inf)
    is_min = np.ones(nll.shape, dtype=bool)
    center = tuple(slice(1, -1) for _ in range(d))
    for offset in np.ndindex(*([3] * d)):
        if all(o == 1 for o in offset):
            continue
        neighbour = tuple(slice(o, o + n) for o, n in zip(offset, nll.shape))
        is_min &= padded[center] < padded[neighbour]
    found: list[np.ndarray] = []
    for idx in zip(*np.nonzero(is_min)):
        x = _refine(mixture, pts[idx])
        if all(np.linalg.norm(x - y) > DEDUP_RADIUS for y in found):
            found.append(x)
    return found


def count_local_minima(
    mixture: GaussianMixture,
    search_range=DEFAULT_SEARCH_RANGE,
    grid_resolution=DEFAULT_GRID_RESOLUTION,
) -> int:
    return len(local_minima(mixture, search_range, grid_resolution))


def sample_mixture(mixture: GaussianMixture, rng: np.random.Generator, size=None, return_labels=False):
    """Draw from the mixture: pick a component by weight, then ``mu + S^{-1} z``.

    Returns a ``(D,)`` point, or ``(size, D)`` when ``size`` is given. With
    ``return_labels`` the drawn component indices are returned as well.
    """
    n = 1 if size is None else int(size)
    comp = rng.choice(mixture.size, size=n, p=mixture.weights)
    z = rng.standard_normal((n, mixture.dimension))
    out = np.empty_like(z)
    for l in range(mixture.size):
        sel = comp == l
        if np.any(sel):
            # S x = z  <=>  x = S^{-1} z; S is upper triangular
            out[sel] = mixture.means[l] + np.linalg.solve(mixture.sqrt_infos[l], z[sel].T).T
    if size is None:
        out, comp = out[0], int(comp[0])
    return (out, comp) if return_labels else out
