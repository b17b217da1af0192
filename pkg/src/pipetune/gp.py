"""Zero-mean Gaussian-process regression with a Matern-5/2 covariance.

One of these models serves as the objective surrogate; K more model the
per-stage log costs.  Training inputs are expected to live in the unit
cube (the caller normalizes with the search-space bounds so that
identical raw points always map to identical normalized coordinates).
Targets are z-scored internally and predictions are returned in the
original target units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientDataError, InvalidArgumentError, NumericalFailureError

# Hyperparameter search bounds, in normalized-input units.
LENGTHSCALE_BOUNDS = (1e-3, 1e3)
OUTPUT_SCALE_BOUNDS = (1e-3, 1e3)
NOISE_BOUNDS = (1e-6, 1e1)

_JITTER_START = 1e-8
_JITTER_MAX = 1e-2

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelParams:
    """Matern-5/2 hyperparameters: per-dimension lengthscales, signal
    variance (``output_scale``) and observation noise variance."""

    lengthscales: np.ndarray
    output_scale: float
    noise_variance: float

    def __post_init__(self):
        ls = np.asarray(self.lengthscales, dtype=float)
        object.__setattr__(self, "lengthscales", ls)
        if ls.ndim != 1 or ls.size == 0:
            raise InvalidArgumentError("lengthscales must be a non-empty 1-D array")
        if not np.all(ls > 0.0):
            raise InvalidArgumentError("lengthscales must be strictly positive")
        if not self.output_scale > 0.0:
            raise InvalidArgumentError("output_scale must be strictly positive")
        if not self.noise_variance > 0.0:
            raise InvalidArgumentError("noise_variance must be strictly positive")

    @property
    def dim(self) -> int:
        return int(self.lengthscales.size)


@dataclass(frozen=True)
class GPModel:
    """A fitted GP: normalized inputs, standardized targets and the
    Cholesky factorization used for posterior inference.

    ``target_transform`` is the (shift, scale) pair that undoes the
    internal standardization; ``alpha`` solves (K + noise I) alpha = z.
    """

    inputs: np.ndarray
    targets: np.ndarray
    params: KernelParams
    chol: np.ndarray
    alpha: np.ndarray
    target_transform: tuple[float, float]

    @property
    def n_train(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]


@dataclass(frozen=True)
class PosteriorGaussian:
    """Predictive distribution at one query point, in original target units."""

    mean: float
    variance: float

    def __post_init__(self):
        if self.variance < 0.0:
            raise InvalidArgumentError("variance must be nonnegative")


def matern52(a: Sequence[float], b: Sequence[float], params: KernelParams) -> float:
    """Matern-5/2 covariance between two points.

    Returns ``output_scale * (1 + sqrt(5) r + 5 r^2 / 3) * exp(-sqrt(5) r)``
    where ``r`` is the lengthscale-weighted Euclidean distance.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgumentError(f"point shapes differ: {a.shape} vs {b.shape}")
    if a.size != params.dim:
        raise InvalidArgumentError(
            f"point dimension {a.size} != lengthscale dimension {params.dim}"
        )
    r = math.sqrt(float(np.sum(((a - b) / params.lengthscales) ** 2)))
    s5r = math.sqrt(5.0) * r
    return params.output_scale * (1.0 + s5r + 5.0 * r * r / 3.0) * math.exp(-s5r)


def _cross_cov(xa: np.ndarray, xb: np.ndarray, params: KernelParams) -> np.ndarray:
    """Vectorized Matern-5/2 cross-covariance, shape (len(xa), len(xb))."""
    sa = xa / params.lengthscales
    sb = xb / params.lengthscales
    sq = (
        np.sum(sa**2, axis=1)[:, None]
        + np.sum(sb**2, axis=1)[None, :]
        - 2.0 * sa @ sb.T
    )
    r = np.sqrt(np.maximum(sq, 0.0))
    s5r = math.sqrt(5.0) * r
    return params.output_scale * (1.0 + s5r + (5.0 / 3.0) * r * r) * np.exp(-s5r)


def _gram(x: np.ndarray, params: KernelParams) -> np.ndarray:
    k = _cross_cov(x, x, params)
    # exact symmetry keeps the Cholesky stable
    return 0.5 * (k + k.T)


def _chol_with_jitter(k_noisy: np.ndarray) -> np.ndarray:
    """Cholesky factor of an SPD matrix, escalating diagonal jitter from
    1e-8 by factors of 10 up to 1e-2 before giving up."""
    try:
        return np.linalg.cholesky(k_noisy)
    except np.linalg.LinAlgError:
        pass
    jitter = _JITTER_START
    eye = np.eye(k_noisy.shape[0])
    while jitter <= _JITTER_MAX:
        try:
            return np.linalg.cholesky(k_noisy + jitter * eye)
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalFailureError(
        f"covariance not positive definite after jitter escalation to {_JITTER_MAX:g}"
    )


def _standardize(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    shift = float(np.mean(y))
    scale = float(np.std(y))
    if scale < 1e-12:
        scale = 1.0
    return (y - shift) / scale, shift, scale


def _lml_value(x: np.ndarray, z: np.ndarray, params: KernelParams) -> float:
    """Log marginal likelihood of standardized targets z under params."""
    k = _gram(x, params) + params.noise_variance * np.eye(x.shape[0])
    chol = _chol_with_jitter(k)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, z))
    n = x.shape[0]
    return float(
        -0.5 * z @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * n * _LOG_2PI
    )


def _build_model(x: np.ndarray, y: np.ndarray, params: KernelParams) -> GPModel:
    z, shift, scale = _standardize(y)
    k = _gram(x, params) + params.noise_variance * np.eye(x.shape[0])
    chol = _chol_with_jitter(k)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, z))
    return GPModel(
        inputs=x,
        targets=z,
        params=params,
        chol=chol,
        alpha=alpha,
        target_transform=(shift, scale),
    )


def log_marginal_likelihood(model: GPModel) -> float:
    """LML of the model's own training data, in standardized units."""
    n = model.n_train
    return float(
        -0.5 * model.targets @ model.alpha
        - np.sum(np.log(np.diag(model.chol)))
        - 0.5 * n * _LOG_2PI
    )


def _as_xy(
    observations: Iterable[tuple[Sequence[float], float]],
) -> tuple[np.ndarray, np.ndarray]:
    pairs = list(observations)
    if len(pairs) < 2:
        raise InsufficientDataError(f"need at least 2 observations, got {len(pairs)}")
    x = np.asarray([np.asarray(p[0], dtype=float).ravel() for p in pairs])
    y = np.asarray([float(p[1]) for p in pairs])
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("targets must be finite")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("inputs must be finite")
    return x, y


def build_model(
    observations: Iterable[tuple[Sequence[float], float]], params: KernelParams
) -> GPModel:
    """Condition on the data with explicitly chosen hyperparameters — no
    fitting.  Useful when the caller knows the kernel it wants (tests,
    hand-tuned surrogates)."""
    x, y = _as_xy(observations)
    if x.shape[1] != params.dim:
        raise InvalidArgumentError(
            f"input dimension {x.shape[1]} != lengthscale dimension {params.dim}"
        )
    return _build_model(x, y, params)


def _clip_log_theta(log_theta: np.ndarray, dim: int) -> np.ndarray:
    lo = np.log(
        np.array([LENGTHSCALE_BOUNDS[0]] * dim + [OUTPUT_SCALE_BOUNDS[0], NOISE_BOUNDS[0]])
    )
    hi = np.log(
        np.array([LENGTHSCALE_BOUNDS[1]] * dim + [OUTPUT_SCALE_BOUNDS[1], NOISE_BOUNDS[1]])
    )
    return np.clip(log_theta, lo, hi)


def _theta_to_params(log_theta: np.ndarray, dim: int) -> KernelParams:
    theta = np.exp(log_theta)
    return KernelParams(
        lengthscales=theta[:dim],
        output_scale=float(theta[dim]),
        noise_variance=float(theta[dim + 1]),
    )


# Weak hyperpriors on the natural-scale parameters.  With a handful of
# observations in many dimensions the marginal likelihood is nearly flat in
# several lengthscales, and an unpenalized ascent drifts them to the bounds —
# which collapses predictive variance along the unidentified axes.  The
# lengthscale/output-scale Gammas are the stock choices for unit-cube inputs
# and z-scored targets.  The noise prior is a wide LogNormal centered well
# below the signal scale: targets here come from near-deterministic pipeline
# runs, and a noise floor fitted high enough to absorb the least-influential
# stage's contribution would blind the model to exactly the variation that
# prefix-reusing candidates explore.  Two nats of spread let genuinely noisy
# data override it.
LENGTHSCALE_PRIOR = (3.0, 6.0)  # Gamma(shape, rate)
OUTPUT_SCALE_PRIOR = (2.0, 0.15)  # Gamma(shape, rate)
NOISE_PRIOR = (math.log(1e-4), 2.0)  # LogNormal(mean, sd) on the variance


def log_prior(params: KernelParams) -> float:
    """Unnormalized log hyperprior density at ``params`` (natural scale)."""

    def gamma_term(value: float, prior: tuple[float, float]) -> float:
        shape, rate = prior
        return (shape - 1.0) * math.log(value) - rate * value

    total = sum(gamma_term(float(ls), LENGTHSCALE_PRIOR) for ls in params.lengthscales)
    total += gamma_term(params.output_scale, OUTPUT_SCALE_PRIOR)
    mean, sd = NOISE_PRIOR
    log_noise = math.log(params.noise_variance)
    total += -log_noise - (log_noise - mean) ** 2 / (2.0 * sd * sd)
    return total


def fit(
    observations: Iterable[tuple[Sequence[float], float]],
    seed: int,
    restarts: int = 3,
    max_rounds: int = 10,
) -> GPModel:
    """Fit kernel hyperparameters by maximizing the penalized log marginal
    likelihood (MAP under the weak Gamma hyperpriors above).

    The optimizer is a multi-start coordinate-wise ascent in log parameter
    space: gradient-free, bounded, and deterministic for a given seed.

    Parameters
    ----------
    observations : iterable of (x, y)
        Training pairs; x must lie in the unit cube.
    seed : int
        Seeds the restart starting points.

    Raises
    ------
    InsufficientDataError
        Fewer than two observations.
    NumericalFailureError
        Covariance stayed singular through jitter escalation.
    """
    x, y = _as_xy(observations)
    dim = x.shape[1]

    z, _, _ = _standardize(y)
    rng = np.random.default_rng(seed)

    # Default start: mid-range lengthscales for unit-cube inputs, unit
    # signal variance, small but nonzero noise.
    base = np.log(np.concatenate([np.full(dim, 0.3), [1.0, 1e-2]]))
    starts = [base]
    for _ in range(max(0, restarts - 1)):
        jiggle = rng.uniform(-1.5, 1.5, size=dim + 2)
        starts.append(_clip_log_theta(base + jiggle, dim))

    def objective(log_theta: np.ndarray) -> float:
        params = _theta_to_params(log_theta, dim)
        try:
            return _lml_value(x, z, params) + log_prior(params)
        except NumericalFailureError:
            return -np.inf

    best_theta = None
    best_val = -np.inf
    for start in starts:
        theta = start.copy()
        val = objective(theta)
        step = 1.0
        for _ in range(max_rounds):
            improved = False
            for coord in range(dim + 2):
                for direction in (1.0, -1.0):
                    trial = theta.copy()
                    trial[coord] += direction * step
                    trial = _clip_log_theta(trial, dim)
                    trial_val = objective(trial)
                    if trial_val > val + 1e-12:
                        theta, val = trial, trial_val
                        improved = True
            if not improved:
                step *= 0.5
                if step < 0.05:
                    break
        if val > best_val:
            best_val, best_theta = val, theta

    if best_theta is None or not np.isfinite(best_val):
        raise NumericalFailureError("likelihood not finite at any candidate")
    return _build_model(x, y, _theta_to_params(best_theta, dim))


def posterior_mean_var(model: GPModel, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and (latent, noise-free) variance at each query row,
    de-standardized to original target units.  Variance is clamped at 0."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    if queries.shape[1] != model.dim:
        raise InvalidArgumentError(
            f"query dimension {queries.shape[1]} != model dimension {model.dim}"
        )
    k_star = _cross_cov(queries, model.inputs, model.params)
    mean_std = k_star @ model.alpha
    v = np.linalg.solve(model.chol, k_star.T)
    var_std = np.maximum(model.params.output_scale - np.sum(v * v, axis=0), 0.0)
    shift, scale = model.target_transform
    return shift + scale * mean_std, scale * scale * var_std


def posterior(model: GPModel, queries: np.ndarray) -> list[PosteriorGaussian]:
    """Predictive distributions at the query points (one per row)."""
    mean, var = posterior_mean_var(model, queries)
    return [PosteriorGaussian(float(m), float(v)) for m, v in zip(mean, var)]


def sample(post: PosteriorGaussian, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` i.i.d. values from the predictive Gaussian.

    For log-cost models the caller exponentiates the draws to return to
    cost units.
    """
    if count < 1:
        raise InvalidArgumentError("count must be >= 1")
    return post.mean + math.sqrt(post.variance) * rng.standard_normal(count)
