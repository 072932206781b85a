"""Truncated variational Bayesian Gaussian mixture.

Mean-field coordinate ascent with conjugate priors: a Dirichlet over the
mixing weights and a Normal-Wishart over each component's mean and precision.
Each sweep updates the assignment posterior q(Z) and then the parameter
posterior q(theta); the evidence lower bound (ELBO) is evaluated after every
sweep and iteration stops once it no longer improves.  A small Dirichlet
concentration drives unused components to zero weight, and components whose
expected weight falls below ``1 / (10 N)`` are pruned after convergence.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from . import kernels
from .errors import DimensionMismatch, NonFiniteData, TooFewPoints

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class VbConfig:
    truncation: int = 10
    max_sweeps: int = 2000
    tolerance: float = 1e-8
    alpha0: float = 1e-3
    kappa0: float = 1e-3
    nu0: float | None = None  # defaults to dimension + 2
    seed: int = 0

    def __post_init__(self):
        if self.truncation < 1:
            raise ValueError("truncation must be >= 1")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")
        if not (self.alpha0 > 0 and self.kappa0 > 0):
            raise ValueError("alpha0 and kappa0 must be positive")

    def degrees(self, dim: int) -> float:
        nu0 = dim + 2.0 if self.nu0 is None else float(self.nu0)
        if nu0 <= dim - 1:
            raise ValueError("Wishart degrees of freedom must exceed dimension - 1")
        return nu0


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64).reshape(
            len(self.weights), self.means.shape[1], self.means.shape[1]
        )

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianMixture":
        return cls(d["weights"], d["means"], d["covariances"])


@dataclass
class Responsibilities:
    probabilities: np.ndarray

    @property
    def hard(self) -> np.ndarray:
        return np.argmax(self.probabilities, axis=1)


@dataclass
class FitReport:
    elbo: float
    sweeps: int
    elbo_trace: list[float] = field(default_factory=list)
    n_effective: int = 0
    converged: bool = False


@dataclass
class Posterior:
    """Variational posterior parameters for every (unpruned) component."""

    alpha: np.ndarray
    beta: np.ndarray
    means: np.ndarray
    nu: np.ndarray
    W: np.ndarray  # Wishart scale matrices
    resp: np.ndarray


@dataclass
class _Prior:
    alpha0: float
    beta0: float
    m0: np.ndarray
    nu0: float
    W0_inv: np.ndarray

    @classmethod
    def from_data(cls, data: np.ndarray, config: VbConfig) -> "_Prior":
        n, dim = data.shape
        nu0 = config.degrees(dim)
        cov = np.atleast_2d(np.cov(data, rowvar=False, bias=False))
        cov = _regularize(cov)
        return cls(config.alpha0, config.kappa0, data.mean(axis=0), nu0, nu0 * cov)


def _regularize(S: np.ndarray) -> np.ndarray:
    dim = S.shape[0]
    tr = float(np.trace(S))
    if not tr > 0:
        return np.eye(dim)
    eig = np.linalg.eigvalsh(S)
    if eig[0] <= 1e-12 * eig[-1]:
        S = S + 1e-9 * tr / dim * np.eye(dim)
        if np.linalg.eigvalsh(S)[0] <= 0:
            S = S + 1e-9 * tr / dim * np.eye(dim)
    return S


def _check_data(data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2 or data.shape[1] < 1:
        raise DimensionMismatch("data must be an N x D matrix")
    if data.shape[0] < 2:
        raise TooFewPoints("at least two points are required")
    if not np.all(np.isfinite(data)):
        raise NonFiniteData("data contains non-finite entries")
    return data


def _kmeanspp_assign(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    k = min(k, n)
    centers = [int(rng.integers(n))]
    d2 = np.sum((data - data[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        nxt = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, np.sum((data - data[nxt]) ** 2, axis=1))
    dist = np.stack([np.sum((data - data[c]) ** 2, axis=1) for c in centers], axis=1)
    return np.argmin(dist, axis=1)


def _expectations(post: Posterior, dim: int):
    """E[ln pi], E[ln |Lambda|] and the lower Cholesky factors of each W."""
    e_log_pi = digamma(post.alpha) - digamma(post.alpha.sum())
    chol = np.linalg.cholesky(post.W)
    logdet_W = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    i = np.arange(1, dim + 1)
    e_logdet = np.sum(digamma((post.nu[:, None] + 1.0 - i) / 2.0), axis=1) + dim * np.log(2.0) + logdet_W
    return e_log_pi, e_logdet, chol, logdet_W


def _log_rho(data: np.ndarray, post: Posterior):
    """Unnormalised log responsibilities and the expected quadratic forms."""
    dim = data.shape[1]
    e_log_pi, e_logdet, chol, _ = _expectations(post, dim)
    quad = dim / post.beta + post.nu * kernels.quad_forms(data, post.means, chol)
    log_rho = e_log_pi + 0.5 * e_logdet - 0.5 * dim * _LOG_2PI - 0.5 * quad
    return log_rho


def _update_z(data: np.ndarray, post: Posterior) -> np.ndarray:
    log_rho = _log_rho(data, post)
    return np.exp(log_rho - logsumexp(log_rho, axis=1, keepdims=True))


def _update_theta(data: np.ndarray, resp: np.ndarray, prior: _Prior) -> Posterior:
    n, dim = data.shape
    Nk = resp.sum(axis=0)
    sums = resp.T @ data
    safe = np.where(Nk > 0, Nk, 1.0)
    xbar = np.where(Nk[:, None] > 0, sums / safe[:, None], prior.m0)
    alpha = prior.alpha0 + Nk
    beta = prior.beta0 + Nk
    means = (prior.beta0 * prior.m0 + sums) / beta[:, None]
    nu = prior.nu0 + Nk
    W = np.empty((len(Nk), dim, dim))
    for k in range(len(Nk)):
        diff = data - xbar[k]
        scatter = (resp[:, k, None] * diff).T @ diff
        dm = (xbar[k] - prior.m0)[:, None]
        W_inv = prior.W0_inv + scatter + (prior.beta0 * Nk[k] / beta[k]) * (dm @ dm.T)
        W_inv = 0.5 * (W_inv + W_inv.T)
        W[k] = np.linalg.inv(W_inv)
        W[k] = 0.5 * (W[k] + W[k].T)
    return Posterior(alpha, beta, means, nu, W, resp)


def _log_wishart_norm(logdet_W, nu, dim):
    """ln B(W, nu) of the Wishart density."""
    i = np.arange(1, dim + 1)
    return (
        -0.5 * nu * logdet_W
        - 0.5 * nu * dim * np.log(2.0)
        - 0.25 * dim * (dim - 1) * np.log(np.pi)
        - np.sum(gammaln((np.atleast_1d(nu)[:, None] + 1.0 - i) / 2.0), axis=1)
    )


def elbo(data, post: Posterior, prior: _Prior) -> float:
    """Variational lower bound on ``log p(data)`` for the current posterior."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    n, dim = data.shape
    K = len(post.alpha)
    resp = post.resp
    e_log_pi, e_logdet, chol, logdet_W = _expectations(post, dim)
    quad = dim / post.beta + post.nu * kernels.quad_forms(data, post.means, chol)
    Nk = resp.sum(axis=0)

    # E[ln p(X | Z, mu, Lambda)] + E[ln p(Z | pi)]
    e_lik = np.sum(resp * (0.5 * e_logdet - 0.5 * dim * _LOG_2PI - 0.5 * quad))
    e_z = float(Nk @ e_log_pi)

    log_c0 = gammaln(K * prior.alpha0) - K * gammaln(prior.alpha0)
    e_pi = log_c0 + (prior.alpha0 - 1.0) * e_log_pi.sum()

    W0 = np.linalg.inv(prior.W0_inv)
    logdet_W0 = np.linalg.slogdet(W0)[1]
    dm = post.means - prior.m0
    mahal = np.einsum("ki,kij,kj->k", dm, post.W, dm)
    trace_term = np.einsum("ij,kji->k", prior.W0_inv, post.W)
    e_mulam = (
        0.5 * np.sum(dim * np.log(prior.beta0 / (2.0 * np.pi)) + e_logdet - dim * prior.beta0 / post.beta
                     - prior.beta0 * post.nu * mahal)
        + K * _log_wishart_norm(np.array([logdet_W0]), prior.nu0, dim)[0]
        + 0.5 * (prior.nu0 - dim - 1.0) * e_logdet.sum()
        - 0.5 * np.sum(post.nu * trace_term)
    )

    with np.errstate(divide="ignore", invalid="ignore"):
        e_qz = float(np.sum(np.where(resp > 0, resp * np.log(resp), 0.0)))
    log_c = gammaln(post.alpha.sum()) - gammaln(post.alpha).sum()
    e_qpi = float(np.sum((post.alpha - 1.0) * e_log_pi) + log_c)
    entropy_lam = -_log_wishart_norm(logdet_W, post.nu, dim) - 0.5 * (post.nu - dim - 1.0) * e_logdet + 0.5 * post.nu * dim
    e_qmulam = float(np.sum(0.5 * e_logdet + 0.5 * dim * np.log(post.beta / (2.0 * np.pi)) - 0.5 * dim - entropy_lam))

    return float(e_lik + e_z + e_pi + e_mulam - e_qz - e_qpi - e_qmulam)


def fit(data, config: VbConfig | None = None, *, init=None, return_posterior: bool = False):
    """Fit a truncated VB mixture to ``data`` (N x D).

    Returns ``(mixture, responsibilities, report)``; with ``return_posterior``
    the final :class:`Posterior` and prior are appended.  ``init`` optionally
    gives initial hard labels in ``[0, truncation)`` instead of k-means++.
    """
    config = config or VbConfig()
    data = _check_data(data)
    n, dim = data.shape
    prior = _Prior.from_data(data, config)
    K = config.truncation
    if init is None:
        labels = _kmeanspp_assign(data, K, np.random.default_rng(config.seed))
    else:
        labels = np.asarray(init, dtype=np.int64)
    resp = np.zeros((n, K))
    resp[np.arange(n), labels] = 1.0
    post = _update_theta(data, resp, prior)
    trace: list[float] = []
    converged = False
    sweeps = 0
    for sweeps in range(1, config.max_sweeps + 1):
        resp = _update_z(data, post)
        post = _update_theta(data, resp, prior)
        value = elbo(data, post, prior)
        if trace and abs(value - trace[-1]) <= config.tolerance * abs(trace[-1]):
            trace.append(value)
            converged = True
            break
        trace.append(value)
    log.debug("vb fit: %d sweeps, elbo %.6f", sweeps, trace[-1])

    expected = post.alpha / post.alpha.sum()
    keep = expected >= 1.0 / (10.0 * n)
    if not np.any(keep):
        keep[np.argmax(expected)] = True
    weights = expected[keep] / expected[keep].sum()
    covs = np.linalg.inv(post.W[keep] * post.nu[keep, None, None])
    covs = 0.5 * (covs + np.transpose(covs, (0, 2, 1)))
    mixture = GaussianMixture(weights, post.means[keep], covs)
    probs = resp[:, keep]
    row = probs.sum(axis=1, keepdims=True)
    probs = np.where(row > 0, probs / np.where(row > 0, row, 1.0), 1.0 / keep.sum())
    report = FitReport(trace[-1], sweeps, trace, int(keep.sum()), converged)
    out = (mixture, Responsibilities(probs), report)
    if return_posterior:
        return out + (post, prior)
    return out


def predict_responsibility(x, mix: GaussianMixture) -> np.ndarray:
    """Component membership probabilities of a single point under ``mix``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (mix.dim,):
        raise DimensionMismatch(f"point of dimension {x.shape[0]} vs mixture dimension {mix.dim}")
    logp = np.empty(mix.n_components)
    for m in range(mix.n_components):
        chol = np.linalg.cholesky(mix.covariances[m])
        z = np.linalg.solve(chol, x - mix.means[m])
        logp[m] = (
            np.log(mix.weights[m])
            - 0.5 * (z @ z)
            - np.sum(np.log(np.diag(chol)))
            - 0.5 * mix.dim * _LOG_2PI
        )
    return np.exp(logp - logsumexp(logp))


def dumps(mix: GaussianMixture, config: VbConfig | None = None) -> str:
    """JSON record of a fitted mixture (floats survive a round trip exactly)."""
    record = {"mixture": mix.to_dict()}
    if config is not None:
        record["config"] = asdict(config)
        record["seed"] = config.seed
    return json.dumps(record, indent=2, sort_keys=True)


def loads(text: str) -> tuple[GaussianMixture, VbConfig | None]:
    record = json.loads(text)
    cfg = VbConfig(**record["config"]) if "config" in record else None
    return GaussianMixture.from_dict(record["mixture"]), cfg
