"""
Dense Levenberg-Marquardt over residual blocks with attached losses.

The stacked robust residual is ``rho(r(x))`` and its Jacobian is chained as
``(d rho / d r)(d r / d x)``. States live in a vector space by default; a
problem may supply its own ``plus`` to move along a manifold chart (the
registration module does this for rotations).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .loss import Loss

__all__ = [
    "ResidualBlock",
    "LeastSquaresProblem",
    "SolverConfig",
    "SolverReport",
    "RankDeficientError",
    "NonFiniteCostError",
    "solve",
    "recover_covariance",
    "evaluate_total_cost",
    "TERMINATIONS",
]

TERMINATIONS = ("gradient", "cost-change", "parameter-change", "max-iterations")


class RankDeficientError(np.linalg.LinAlgError):
    """Pseudo-Hessian is singular; no covariance can be recovered."""

    def __init__(self, message, rank=None, eigenvalues=None):
        super().__init__(message)
        self.rank = rank
        self.eigenvalues = eigenvalues


class NonFiniteCostError(ValueError):
    pass


class ResidualBlock:
    """A residual ``r(x)`` wrapped into a loss.

    Parameters
    ----------
    residual : callable
        ``residual(x) -> (r, dr_dx)`` where ``x`` is the full state and
        ``dr_dx`` has one column per entry of ``indices``.
    loss : Loss, optional
        Robust loss applied to ``r``; the identity when omitted.
    indices : sequence of int, optional
        Tangent-space columns of the problem this block touches (all when
        omitted).
    """

    def __init__(self, residual: Callable, loss: Optional[Loss] = None,
                 indices: Optional[Sequence[int]] = None, name: str = ""):
        self.residual = residual
        self.loss = loss
        self.indices = None if indices is None else np.asarray(indices, dtype=int)
        self.name = name

    def refresh(self, state) -> None:
        """Hook to update state-dependent noise models between iterations."""

    def evaluate(self, state):
        r, dr = self.residual(state)
        r = np.atleast_1d(np.asarray(r, dtype=float))
        dr = np.atleast_2d(np.asarray(dr, dtype=float))
        if self.loss is None:
            return r, dr
        ev = self.loss.evaluate(r)
        return ev.value, ev.jacobian @ dr

    def cost(self, state) -> float:
        rho, _ = self.evaluate(state)
        return 0.5 * float(rho @ rho)


def _vector_plus(x, delta):
    return x + delta


class LeastSquaresProblem:
    """Sum of ``1/2 ||rho_n||^2`` over residual blocks.

    ``tangent_dim`` is the size of an update step; ``plus(x, delta)`` applies
    a step (plain addition by default).
    """

    def __init__(self, blocks: Sequence[ResidualBlock] = (), tangent_dim: Optional[int] = None,
                 plus: Callable = _vector_plus):
        self.blocks = list(blocks)
        self.tangent_dim = tangent_dim
        self.plus = plus

    def add_block(self, block: ResidualBlock) -> ResidualBlock:
        self.blocks.append(block)
        return block

    @property
    def state_dependent(self) -> bool:
        """True when some block re-derives its noise model from the state."""
        return any(type(b).refresh is not ResidualBlock.refresh for b in self.blocks)

    def refresh(self, state) -> None:
        for b in self.blocks:
            b.refresh(state)

    def block_costs(self, state):
        """``(label, cost)`` for every block."""
        return [(b.name or f"#{i}", b.cost(state)) for i, b in enumerate(self.blocks)]

    def _dim(self, state) -> int:
        return self.tangent_dim if self.tangent_dim is not None else np.size(state)

    def evaluate(self, state):
        """Stacked robust residual and its Jacobian w.r.t. the tangent step."""
        n = self._dim(state)
        if len(self.blocks) == 1 and self.blocks[0].indices is None:
            return self.blocks[0].evaluate(state)
        values, rows = [], []
        for b in self.blocks:
            rho, jac = b.evaluate(state)
            if b.indices is None:
                full = jac
            else:
                full = np.zeros((jac.shape[0], n))
                full[:, b.indices] = jac
            values.append(rho)
            rows.append(full)
        if not values:
            return np.zeros(0), np.zeros((0, n))
        return np.concatenate(values), np.vstack(rows)


def evaluate_total_cost(problem: LeastSquaresProblem, state) -> float:
    total = 0.0
    for label, c in problem.block_costs(state):
        if not np.isfinite(c):
            raise NonFiniteCostError(f"block {label} has non-finite cost {c}")
        total += c
    return total


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 200
    initial_damping: float = 1e-4
    damping_increase: float = 2.0
    damping_decrease: float = 1.0 / 3.0
    gradient_tolerance: float = 1e-10
    cost_change_tolerance: float = 1e-8
    # absolute decrease below which an accepted step terminates (0 disables)
    absolute_cost_tolerance: float = 0.0
    parameter_tolerance: float = 1e-10
    # steps must realize this fraction of the decrease predicted by the
    # linearized model to be accepted
    min_relative_decrease: float = 1e-3
    gain_adaptive: bool = True
    # bounds on the Marquardt diagonal, keeps flat directions damped
    min_diagonal: float = 1e-6
    max_diagonal: float = 1e32

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("initial_damping", "gradient_tolerance", "cost_change_tolerance",
                     "parameter_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


@dataclass
class SolverReport:
    iterations: int
    termination: str
    initial_cost: float
    final_cost: float
    state: np.ndarray
    wall_time: float
    successful_steps: int = 0
    cost_history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.termination != "max-iterations"

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "termination": self.termination,
            "final_cost": self.final_cost,
            "wall_time_us": self.wall_time * 1e6,
        }


def solve(problem: LeastSquaresProblem, initial_state, config: SolverConfig = SolverConfig()) -> SolverReport:
    """Minimize the problem's total cost with Levenberg-Marquardt.

    Steps solve ``(J^T J + lambda diag(J^T J)) delta = -J^T rho``. Only steps
    that decrease the cost are accepted. On success lambda is multiplied by
    ``damping_decrease``; on failure by a factor that starts at
    ``damping_increase`` and doubles with every consecutive rejection.
    """
    t0 = time.perf_counter()
    x = np.array(initial_state, dtype=float)
    problem.refresh(x)
    rho, jac = problem.evaluate(x)
    cost = 0.5 * float(rho @ rho)
    if not np.isfinite(cost) or not np.all(np.isfinite(jac)):
        raise NonFiniteCostError(f"non-finite cost {cost} at the initial state")
    initial_cost = cost
    history = [cost]
    lam = config.initial_damping
    # growth factor on rejected steps; doubles on consecutive rejections
    nu = config.damping_increase
    termination = "max-iterations"
    iterations = 0
    accepted = 0

    while iterations < config.max_iterations:
        grad = jac.T @ rho
        if np.max(np.abs(grad), initial=0.0) <= config.gradient_tolerance:
            termination = "gradient"
            break
        iterations += 1
        hess = jac.T @ jac
        diag = np.minimum(np.maximum(hess.diagonal(), config.min_diagonal), config.max_diagonal)
        damped = hess.copy()
        damped.flat[::damped.shape[0] + 1] += lam * diag
        # J^T J is PSD and the clipped diagonal positive, so this is PD
        # unless something is non-finite
        try:
            delta = -np.linalg.solve(damped, grad)
        except np.linalg.LinAlgError:
            lam *= nu
            nu *= 2.0
            continue
        step_norm = math.sqrt(float(delta @ delta))
        x_norm = math.sqrt(float(x.ravel() @ x.ravel()))
        if step_norm <= config.parameter_tolerance * (x_norm + config.parameter_tolerance):
            termination = "parameter-change"
            break
        x_new = problem.plus(x, delta)
        rho_new, jac_new = problem.evaluate(x_new)
        cost_new = 0.5 * float(rho_new @ rho_new)
        lin = rho + jac @ delta
        predicted = cost - 0.5 * float(lin @ lin)
        if cost_new < cost and (cost - cost_new) >= config.min_relative_decrease * predicted:
            abs_change = cost - cost_new
            rel_change = abs_change / cost
            x = x_new
            accepted += 1
            gain = (cost - cost_new) / predicted if predicted > 0 else 1.0
            if config.gain_adaptive:
                lam *= max(config.damping_decrease, 1.0 - (2.0 * gain - 1.0) ** 3)
            else:
                lam *= config.damping_decrease
            nu = config.damping_increase
            if problem.state_dependent:
                problem.refresh(x)
                rho_new, jac_new = problem.evaluate(x)
                cost_new = 0.5 * float(rho_new @ rho_new)
            rho, jac, cost = rho_new, jac_new, cost_new
            history.append(cost)
            if rel_change <= config.cost_change_tolerance or abs_change <= config.absolute_cost_tolerance:
                termination = "cost-change"
                break
        else:
            lam *= nu
            nu *= 2.0

    return SolverReport(
        iterations=iterations,
        termination=termination,
        initial_cost=initial_cost,
        final_cost=cost,
        state=x,
        wall_time=time.perf_counter() - t0,
        successful_steps=accepted,
        cost_history=history,
    )


def recover_covariance(problem: LeastSquaresProblem, state, rcond: float = 1e-12) -> np.ndarray:
    """Covariance ``(J^T J)^{-1}`` of the tangent step at ``state``.

    Raises
    ------
    RankDeficientError
        If the pseudo-Hessian has an eigenvalue below ``rcond`` times its
        largest one.
    """
    problem.refresh(state)
    _, jac = problem.evaluate(state)
    hess = jac.T @ jac
    eig = np.linalg.eigvalsh(hess)
    top = eig[-1] if eig.size else 0.0
    if top <= 0 or eig[0] <= rcond * top:
        rank = int(np.sum(eig > rcond * top)) if top > 0 else 0
        raise RankDeficientError(
            f"pseudo-Hessian is rank deficient (rank {rank} of {eig.size})", rank, eig
        )
    cov = np.linalg.inv(hess)
    return 0.5 * (cov + cov.T)
