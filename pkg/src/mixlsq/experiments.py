"""
Monte Carlo harnesses: plain mixture optimization and point set registration.

Every random draw comes from a generator seeded by ``(master seed, stream
tag, indices)`` through :class:`numpy.random.SeedSequence`, so serial and
parallel runs produce the same records.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .gmm import (
    DEFAULT_GRID_RESOLUTION,
    GaussianMixture,
    count_local_minima,
    find_global_mode,
)
from .loss import LOSS_NAMES, MixtureLossConfig, make_loss
from .registration import (
    OutlierModel,
    PointSetPair,
    RigidTransform,
    build_registration_problem,
    measure,
    rot2,
    transform_error,
)
from .solver import (
    LeastSquaresProblem,
    RankDeficientError,
    ResidualBlock,
    SolverConfig,
    solve,
    recover_covariance,
)

CSV_HEADER = ("trial_id", "loss", "dim", "error_trans", "error_rot", "iterations",
              "time_us", "termination", "nees")

# Plain runs use the solver defaults, whose adaptive damping decrease follows
# Ceres. Registration runs use a fixed decrease factor and 1e-5 error
# tolerances, the defaults of GTSAM's Levenberg-Marquardt.
PLAIN_SOLVER_CONFIG = SolverConfig()
PSR_SOLVER_CONFIG = SolverConfig(gain_adaptive=False, cost_change_tolerance=1e-5,
                                 absolute_cost_tolerance=1e-5)

# stream tags for SeedSequence spawn keys
_PLAIN_CORPUS, _PSR_LANDMARKS, _PSR_TRANSFORMS, _PSR_NOISE = 1, 2, 3, 4


def make_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class MixtureSamplingSpec:
    first_std: tuple = (0.1, 1.0)
    second_mean: tuple = (-2.0, 2.0)
    std_factor: tuple = (2.0, 10.0)
    first_weight: tuple = (0.2, 0.8)


@dataclass(frozen=True)
class PlainExperimentConfig:
    dimension: int = 1
    symmetric: bool = True
    mixtures: int = 100
    starts: int = 100
    start_range: tuple = (-4.0, 4.0)
    success_threshold: float = 0.01
    seed: int = 0
    sampling: MixtureSamplingSpec = MixtureSamplingSpec()
    grid_resolution: float = DEFAULT_GRID_RESOLUTION
    damping: float = 10.0
    dcs_phi: float = 1.0

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError("plain experiments are 1D or 2D")
        if self.mixtures < 1 or self.starts < 1:
            raise ValueError("counts must be >= 1")
        if self.success_threshold <= 0:
            raise ValueError("success_threshold must be > 0")

    @property
    def name(self) -> str:
        return f"plain-{self.dimension}d-{'sym' if self.symmetric else 'asym'}"


@dataclass(frozen=True)
class PsrExperimentConfig:
    dimension: int = 2
    configurations: int = 20
    runs: int = 100
    landmarks: int | None = None
    cluster_fraction: float = 0.4
    cluster_copies: int = 2
    cluster_std: float = 0.1
    square_half_width: float = 5.0
    shell_radius: tuple = (9.0, 11.0)
    translation_range: float = 0.5
    rotation_range_deg: float | None = None
    range_std: float = 0.2
    angle_std_deg: float = 3.0
    add_noise: bool = True
    outlier: bool = False
    outlier_weight: float = 0.1
    outlier_std: float = 10.0
    seed: int = 0
    damping: float = 10.0

    def __post_init__(self):
        if self.dimension not in (2, 3):
            raise ValueError("registration experiments are 2D or 3D")
        if self.configurations < 1 or self.runs < 1:
            raise ValueError("counts must be >= 1")

    @property
    def n_landmarks(self) -> int:
        if self.landmarks is not None:
            return self.landmarks
        return 10 if self.dimension == 2 else 20

    @property
    def rotation_range(self) -> float:
        deg = self.rotation_range_deg
        if deg is None:
            deg = 15.0 if self.dimension == 2 else 5.0
        return math.radians(deg)

    @property
    def outlier_model(self) -> OutlierModel | None:
        return OutlierModel(self.outlier_weight, self.outlier_std) if self.outlier else None

    @property
    def name(self) -> str:
        return f"psr-{self.dimension}d"


@dataclass
class TrialRecord:
    trial_id: int
    loss: str
    dim: int
    initial_state: np.ndarray
    final_state: np.ndarray
    truth: np.ndarray
    error_trans: float
    error_rot: float | None
    error_vector: np.ndarray
    iterations: int
    time_us: float
    termination: str
    covariance: np.ndarray | None = None
    nees: float | None = None
    success: bool | None = None

    def csv_row(self, timing: bool = True) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))
        return [
            str(self.trial_id), self.loss, str(self.dim), fmt(self.error_trans), fmt(self.error_rot),
            str(self.iterations), fmt(self.time_us) if timing else "", self.termination, fmt(self.nees),
        ]


def _nees(error_vector, covariance) -> float | None:
    if covariance is None:
        return None
    d = error_vector.shape[0]
    return float(error_vector @ np.linalg.solve(covariance, error_vector)) / d


# -- plain optimization -----------------------------------------------------

def sample_plain_mixture(spec: MixtureSamplingSpec, dimension: int, symmetric: bool,
                         rng: np.random.Generator) -> GaussianMixture:
    """Two axis-aligned components; per-dimension draws for means and deviations."""
    std1 = rng.uniform(*spec.first_std, size=dimension)
    mean2 = np.zeros(dimension) if symmetric else rng.uniform(*spec.second_mean, size=dimension)
    std2 = std1 * rng.uniform(*spec.std_factor, size=dimension)
    w1 = rng.uniform(*spec.first_weight)
    return GaussianMixture.from_std([w1, 1.0 - w1], np.stack([np.zeros(dimension), mean2]),
                                    np.stack([std1, std2]))


class CorpusRejectionError(RuntimeError):
    pass


def generate_plain_corpus(config: PlainExperimentConfig, return_stats: bool = False):
    """Draw mixtures until ``config.mixtures`` unimodal ones are accepted."""
    rng = make_rng(config.seed, _PLAIN_CORPUS, config.dimension, int(config.symmetric))
    accepted: list[GaussianMixture] = []
    draws = 0
    while len(accepted) < config.mixtures:
        mix = sample_plain_mixture(config.sampling, config.dimension, config.symmetric, rng)
        draws += 1
        if count_local_minima(mix, config.start_range, config.grid_resolution) == 1:
            accepted.append(mix)
        elif draws >= 100 and len(accepted) < 0.01 * draws:
            raise CorpusRejectionError(
                f"rejection rate above 99% after {draws} draws; check the sampling ranges"
            )
    if return_stats:
        return accepted, {"draws": draws, "accepted": len(accepted),
                          "acceptance_rate": len(accepted) / draws}
    return accepted


def plain_starts(config: PlainExperimentConfig) -> np.ndarray:
    """Linearly spaced starts; a square grid of ~``starts`` points in 2D."""
    lo, hi = config.start_range
    if config.dimension == 1:
        return np.linspace(lo, hi, config.starts)[:, None]
    n = max(1, int(round(math.sqrt(config.starts))))
    axis = np.linspace(lo, hi, n)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def plain_losses(config: PlainExperimentConfig, losses: Sequence[str]) -> list[str]:
    # DCS is symmetric by construction; only symmetric scenarios include it
    return [l for l in losses if l != "dcs" or config.symmetric]


def _identity_residual(x):
    return x, np.eye(x.shape[0])


def plain_problem(mixture: GaussianMixture, loss: str, config: PlainExperimentConfig) -> LeastSquaresProblem:
    lc = MixtureLossConfig(damping=config.damping)
    return LeastSquaresProblem([ResidualBlock(_identity_residual, make_loss(loss, mixture, lc, config.dcs_phi))])


def _run_plain_mixture(args):
    index, mixture, config, losses, solver_config = args
    mode = find_global_mode(mixture, config.start_range, config.grid_resolution)
    starts = plain_starts(config)
    records = []
    for loss in losses:
        problem = plain_problem(mixture, loss, config)
        for j, x0 in enumerate(starts):
            rep = solve(problem, x0, solver_config)
            err = rep.state - mode
            try:
                cov = recover_covariance(problem, rep.state)
            except RankDeficientError:
                cov = None
            e = float(np.linalg.norm(err))
            records.append(TrialRecord(
                trial_id=index * len(starts) + j, loss=loss, dim=config.dimension,
                initial_state=np.asarray(x0), final_state=rep.state, truth=mode,
                error_trans=e, error_rot=None, error_vector=err, iterations=rep.iterations,
                time_us=rep.wall_time * 1e6, termination=rep.termination, covariance=cov,
                nees=_nees(err, cov), success=e < config.success_threshold,
            ))
    return records


def _fan_out(fn, items, workers: int | None):
    if workers is None or workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_plain_trials(config: PlainExperimentConfig, losses: Sequence[str] = LOSS_NAMES,
                     solver_config: SolverConfig = PLAIN_SOLVER_CONFIG, corpus=None,
                     workers: int | None = None) -> list[TrialRecord]:
    """Solve every mixture x start x loss; records sorted by (loss order, trial id)."""
    if corpus is None:
        corpus = generate_plain_corpus(config)
    losses = plain_losses(config, losses)
    items = [(i, m, config, losses, solver_config) for i, m in enumerate(corpus)]
    chunks = _fan_out(_run_plain_mixture, items, workers)
    records = [r for chunk in chunks for r in chunk]
    order = {l: i for i, l in enumerate(losses)}
    records.sort(key=lambda r: (order[r.loss], r.trial_id))
    return records


def run_plain_experiment(config: PlainExperimentConfig, losses: Sequence[str] = LOSS_NAMES,
                         solver_config: SolverConfig = PLAIN_SOLVER_CONFIG, corpus=None,
                         workers: int | None = None):
    """Aggregated table (one row per loss) and the raw trial records."""
    records = run_plain_trials(config, losses, solver_config, corpus, workers)
    return aggregate(records, config.name), records


# -- point set registration -------------------------------------------------

def generate_landmarks(config: PsrExperimentConfig, rng: np.random.Generator) -> np.ndarray:
    """Base landmarks plus cluster copies (``cluster_fraction`` of them, each
    duplicated ``cluster_copies`` times with Gaussian spread)."""
    n = config.n_landmarks
    if config.dimension == 2:
        h = config.square_half_width
        base = rng.uniform(-h, h, size=(n, 2))
    else:
        r = rng.uniform(*config.shell_radius, size=n)
        az = rng.uniform(-np.pi, np.pi, size=n)
        el = rng.uniform(-np.pi / 2, np.pi / 2, size=n)
        base = np.stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)], 1)
    n_clustered = int(round(config.cluster_fraction * n))
    picked = rng.choice(n, size=n_clustered, replace=False)
    copies = [base[i] + rng.normal(0.0, config.cluster_std, size=(config.cluster_copies, config.dimension))
              for i in picked]
    return np.vstack([base, *copies]) if copies else base


def sample_transform(config: PsrExperimentConfig, rng: np.random.Generator) -> RigidTransform:
    d = config.dimension
    t = rng.uniform(-config.translation_range, config.translation_range, size=d)
    a = config.rotation_range
    if d == 2:
        return RigidTransform(rot2(rng.uniform(-a, a)), t)
    from scipy.spatial.transform import Rotation
    angles = rng.uniform(-a, a, size=3)
    return RigidTransform(Rotation.from_euler("xyz", angles).as_matrix(), t)


def generate_psr_instance(config: PsrExperimentConfig, rng: np.random.Generator,
                          landmarks: np.ndarray | None = None,
                          transform: RigidTransform | None = None) -> PointSetPair:
    """Fixed and moving measurements of one landmark configuration.

    ``landmarks`` and ``transform`` are drawn from ``rng`` when omitted. The
    moving sensor sits at pose ``transform`` in the fixed frame, so
    ``transform.apply(moving) ~= fixed``.
    """
    if landmarks is None:
        landmarks = generate_landmarks(config, rng)
    if transform is None:
        transform = sample_transform(config, rng)
    angle_std = math.radians(config.angle_std_deg)
    noise_rng = rng if config.add_noise else None
    fixed, fixed_cov = measure(landmarks, noise_rng, config.range_std, angle_std)
    moving, moving_cov = measure(transform.inverse_apply(landmarks), noise_rng, config.range_std, angle_std)
    return PointSetPair(fixed, fixed_cov, moving, moving_cov, transform)


def _run_psr_configuration(args):
    c, config, losses, solver_config = args
    landmarks = generate_landmarks(config, make_rng(config.seed, _PSR_LANDMARKS, config.dimension, c))
    lc = MixtureLossConfig(damping=config.damping)
    outlier = config.outlier_model
    d = config.dimension
    x0 = RigidTransform.identity(d).to_state()
    records = []
    for run in range(config.runs):
        # transforms depend on the run only, shared across configurations
        transform = sample_transform(config, make_rng(config.seed, _PSR_TRANSFORMS, d, run))
        rng = make_rng(config.seed, _PSR_NOISE, d, c, run)
        pair = generate_psr_instance(config, rng, landmarks, transform)
        for loss in losses:
            problem = build_registration_problem(pair, loss, lc, outlier)
            rep = solve(problem, x0, solver_config)
            est = RigidTransform.from_state(rep.state)
            vec, et, er = transform_error(est, transform)
            try:
                cov = recover_covariance(problem, rep.state)
            except RankDeficientError:
                cov = None
            records.append(TrialRecord(
                trial_id=c * config.runs + run, loss=loss, dim=d, initial_state=x0,
                final_state=rep.state, truth=transform.to_state(), error_trans=et, error_rot=er,
                error_vector=vec, iterations=rep.iterations, time_us=rep.wall_time * 1e6,
                termination=rep.termination, covariance=cov, nees=_nees(vec, cov),
            ))
    return records


PSR_LOSSES = ("mm", "sm", "msm")


def run_psr_trials(config: PsrExperimentConfig, losses: Sequence[str] = PSR_LOSSES,
                   solver_config: SolverConfig = PSR_SOLVER_CONFIG, workers: int | None = None):
    losses = [l for l in losses if l != "dcs"]
    items = [(c, config, losses, solver_config) for c in range(config.configurations)]
    records = [r for chunk in _fan_out(_run_psr_configuration, items, workers) for r in chunk]
    order = {l: i for i, l in enumerate(losses)}
    records.sort(key=lambda r: (order[r.loss], r.trial_id))
    return records


def run_psr_experiment(config: PsrExperimentConfig, losses: Sequence[str] = PSR_LOSSES,
                       solver_config: SolverConfig = PSR_SOLVER_CONFIG, workers: int | None = None):
    records = run_psr_trials(config, losses, solver_config, workers)
    return aggregate(records, config.name), records


# -- metrics ----------------------------------------------------------------

def compute_rmse(records: Iterable[TrialRecord], selector: str | Callable = "error_trans") -> float:
    """Root mean square of ``selector(record)`` (an attribute name or callable)."""
    get = (lambda r: getattr(r, selector)) if isinstance(selector, str) else selector
    values = np.array([get(r) for r in records], dtype=float)
    if values.size == 0:
        raise ValueError("rmse of an empty record set")
    return float(np.sqrt(np.mean(values ** 2)))


def compute_anees(records: Iterable[TrialRecord], return_excluded: bool = False):
    """Mean of ``e^T Sigma^-1 e / d``; records without a covariance are skipped."""
    values, excluded = [], 0
    for r in records:
        if r.covariance is None:
            excluded += 1
            continue
        values.append(_nees(np.asarray(r.error_vector), r.covariance))
    anees = float(np.mean(values)) if values else float("nan")
    return (anees, excluded) if return_excluded else anees


def aggregate(records: Sequence[TrialRecord], experiment: str) -> list[dict]:
    """One summary row per loss, in first-appearance order."""
    losses = list(dict.fromkeys(r.loss for r in records))
    rows = []
    for loss in losses:
        sel = [r for r in records if r.loss == loss]
        row = {
            "experiment": experiment,
            "loss": loss,
            "trials": len(sel),
            "rmse_trans": compute_rmse(sel, "error_trans"),
            "mean_iterations": float(np.mean([r.iterations for r in sel])),
            "mean_time_us": float(np.mean([r.time_us for r in sel])),
            "max_iteration_terminations": sum(r.termination == "max-iterations" for r in sel),
        }
        if sel[0].success is not None:
            ok = [r for r in sel if r.success]
            row["success_rate"] = 100.0 * len(ok) / len(sel)
            row["rmse_success"] = compute_rmse(ok, "error_trans") if ok else None
        if sel[0].error_rot is not None:
            row["rmse_rot_deg"] = compute_rmse(sel, "error_rot")
        anees, excluded = compute_anees(sel, return_excluded=True)
        row["anees"] = anees
        row["anees_excluded"] = excluded
        rows.append(row)
    return rows


# -- raw output -------------------------------------------------------------

def records_to_csv(records: Iterable[TrialRecord], timing: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in records:
        writer.writerow(r.csv_row(timing))
    return buf.getvalue()


def read_csv_records(text: str) -> list[dict]:
    """Rows of a raw trial CSV (comment lines starting with ``#`` skipped)."""
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
