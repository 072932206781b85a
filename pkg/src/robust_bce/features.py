"""Unsupervised multi-cluster feature selection.

Three steps: a symmetric k-nearest-neighbour heat-kernel graph, a spectral
embedding from the generalised Laplacian eigenproblem ``L y = lambda D y``,
and least-angle regression of every embedding column on the features.  A
feature's score is its largest absolute coefficient over all regressions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph
import scipy.sparse.linalg

from . import kernels
from .errors import DegenerateDesign, DimensionMismatch, EigenFailure, TooFewPoints

_DENSE_EIGEN_LIMIT = 2000
# edges lighter than this (relative to the heaviest) do not join components;
# eigenvalue gaps they create are too small to resolve eigenvectors reliably
_NEGLIGIBLE_WEIGHT = 1e-8


@dataclass
class FsConfig:
    k_neighbors: int = 5
    bandwidth: float | str = "auto"
    n_eigenvectors: int | None = None  # None: follow the clustering truncation
    n_selected: int | str = "auto"
    lars_nonzeros: int | None = None
    auto_threshold: float = 0.1
    allow_residual_drop: bool = False

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.n_eigenvectors is not None and self.n_eigenvectors < 1:
            raise ValueError("n_eigenvectors must be >= 1")
        if self.n_selected != "auto" and int(self.n_selected) < 1:
            raise ValueError("n_selected must be >= 1 or 'auto'")
        if self.bandwidth != "auto" and not float(self.bandwidth) > 0:
            raise ValueError("bandwidth must be positive or 'auto'")


@dataclass
class FeatureScore:
    names: list[str]
    scores: np.ndarray
    selected: np.ndarray  # boolean mask
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def selected_names(self) -> list[str]:
        return [n for n, s in zip(self.names, self.selected) if s]

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.scores.tolist()))


def standardize(data: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Column z-scores; constant columns become zeros and are flagged."""
    data = np.asarray(data, dtype=np.float64)
    mean = data.mean(axis=0)
    scale = data.std(axis=0, ddof=0)
    const = ~(scale > 1e-12 * np.maximum(np.abs(mean), 1.0))
    safe = np.where(const, 1.0, scale)
    z = (data - mean) / safe
    z[:, const] = 0.0
    return z, mean, np.where(const, 0.0, scale), const


def knn_graph(data: np.ndarray, k: int, bandwidth: float | str = "auto") -> scipy.sparse.csr_matrix:
    """Symmetric heat-kernel weights on the union of k-nearest-neighbour edges."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    n = data.shape[0]
    if k < 1 or n <= k:
        raise TooFewPoints(f"need more than k={k} points, got {n}")
    idx, d2 = kernels.knn_search(data, k)
    if bandwidth == "auto":
        sigma = float(np.median(np.sqrt(d2)))
        if not sigma > 0:
            sigma = 1.0
    else:
        sigma = float(bandwidth)
    rows = np.repeat(np.arange(n), k)
    cols = idx.ravel()
    vals = np.exp(-d2.ravel() / sigma**2)
    W = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    # an edge from either side counts; both directions carry the same weight
    W = W.maximum(W.T).tocsr()
    W.setdiag(0.0)
    W.eliminate_zeros()
    return W


def _component_basis(W, deg: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the (numerically) null space of the normalised Laplacian.

    Column 0 is the trivial vector ``sqrt(deg)``.  With several components
    the null space is degenerate and an eigensolver may return any rotation
    of it, which makes downstream scores depend on row order.  Instead, each
    further column separates one component from the ones not yet split off,
    largest component first.
    """
    strong = W.multiply(W > _NEGLIGIBLE_WEIGHT * W.max())
    n_comp, labels = scipy.sparse.csgraph.connected_components(strong, directed=False)
    root = np.sqrt(deg)
    u0 = root / np.linalg.norm(root)
    if n_comp == 1:
        return u0[:, None]
    size = np.bincount(labels, minlength=n_comp)
    volume = np.bincount(labels, weights=deg, minlength=n_comp)
    first = np.full(n_comp, len(labels))
    np.minimum.at(first, labels, np.arange(len(labels)))
    order = sorted(range(n_comp), key=lambda c: (-size[c], -volume[c], first[c]))
    basis = [u0]
    for c in order[:-1]:
        v = np.where(labels == c, root, 0.0)
        for b in basis:
            v = v - (b @ v) * b
        basis.append(v / np.linalg.norm(v))
    return np.column_stack(basis)


def spectral_embedding(W, K: int, return_eigenvalues: bool = False):
    """Generalised Laplacian eigenvectors for the ``K`` smallest non-trivial eigenvalues.

    Columns are D-orthonormal and D-orthogonal to the constant vector.
    Isolated vertices (zero degree) get zero rows.
    """
    W = scipy.sparse.csr_matrix(W, dtype=np.float64)
    n = W.shape[0]
    if W.shape != (n, n):
        raise DimensionMismatch("weight matrix must be square")
    deg = np.asarray(W.sum(axis=1)).ravel()
    live = deg > 0
    m = int(live.sum())
    if m < 2:
        raise EigenFailure("graph has fewer than two connected vertices")
    K = min(K, m - 1)
    Wl = W[live][:, live]
    d = deg[live]
    inv_sqrt = 1.0 / np.sqrt(d)
    Dm = scipy.sparse.diags(inv_sqrt)
    norm_lap = scipy.sparse.identity(m) - Dm @ Wl @ Dm
    null = _component_basis(Wl, d)
    K_null = min(K, null.shape[1] - 1)
    K_rest = min(K - K_null, m - null.shape[1])
    # null[:, 0] is the trivial vector; the rest span (near-)zero eigenvalues
    vecs = null[:, 1:K_null + 1]
    vals = np.einsum("ij,ij->j", vecs, norm_lap @ vecs)
    shift = 4.0  # above the normalised spectrum [0, 2]
    try:
        if K_rest == 0:
            pass
        elif m <= _DENSE_EIGEN_LIMIT:
            A = norm_lap.toarray() + shift * (null @ null.T)
            A = 0.5 * (A + A.T)
            v, V = scipy.linalg.eigh(A, subset_by_index=[0, K_rest - 1])
            vals, vecs = np.concatenate([vals, v]), np.column_stack([vecs, V])
        else:
            # largest eigenvalues of the inverse restricted to the complement
            # of the null space are the smallest non-zero ones of the Laplacian;
            # deflating explicitly keeps Lanczos from stalling on the zero
            # cluster.  A Rayleigh-Ritz pass then refines the eigenvalues.
            lu = scipy.sparse.linalg.splu((norm_lap + 1e-3 * scipy.sparse.identity(m)).tocsc())

            def project(x):
                return x - null @ (null.T @ x)

            op = scipy.sparse.linalg.LinearOperator(
                (m, m), matvec=lambda x: project(lu.solve(project(np.ravel(x)))), dtype=np.float64
            )
            start = project(np.random.default_rng(0).standard_normal(m))
            V = scipy.sparse.linalg.eigsh(
                op, k=K_rest, which="LA", tol=1e-12, v0=start, ncv=min(m - null.shape[1], max(2 * K_rest + 1, 20))
            )[1]
            Q, _ = np.linalg.qr(project(V))
            small, R = np.linalg.eigh(Q.T @ (norm_lap @ Q))
            vals, vecs = np.concatenate([vals, small]), np.column_stack([vecs, Q @ R])
        K = vecs.shape[1]
    except (np.linalg.LinAlgError, scipy.sparse.linalg.ArpackError, RuntimeError) as exc:
        raise EigenFailure(str(exc)) from exc
    if not np.all(np.isfinite(vecs)):
        raise EigenFailure("non-finite eigenvectors")
    Y = np.zeros((n, K))
    Y[live] = vecs * inv_sqrt[:, None]
    # fix the arbitrary eigenvector sign for reproducibility
    for j in range(K):
        pivot = np.argmax(np.abs(Y[:, j]))
        if Y[pivot, j] < 0:
            Y[:, j] = -Y[:, j]
    if return_eigenvalues:
        return Y, vals
    return Y


def lars_select(features: np.ndarray, y: np.ndarray, nonzeros: int) -> np.ndarray:
    """Least-angle regression path stopped once ``nonzeros`` variables are active.

    Returns the coefficient vector at the end of that step (no intercept; both
    ``features`` and ``y`` are expected to be centred).
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=np.float64).ravel()
    n, p = X.shape
    if y.shape[0] != n:
        raise DimensionMismatch("target length differs from feature rows")
    if not 1 <= nonzeros <= p:
        raise ValueError(f"nonzeros must lie in [1, {p}]")
    norms = np.sqrt(np.sum(X * X, axis=0))
    if not np.any(norms > 0):
        raise DegenerateDesign("all feature columns are zero")
    usable = norms > 1e-12 * norms.max()
    beta = np.zeros(p)
    mu = np.zeros(n)
    active: list[int] = []
    signs: list[float] = []
    scale = max(np.abs(X.T @ y).max(), np.finfo(float).tiny)
    tol = 1e-12 * max(scale, np.linalg.norm(y) * norms.max())
    for step in range(nonzeros):
        c = X.T @ (y - mu)
        inactive = [j for j in range(p) if j not in active and usable[j]]
        if not active:
            if not inactive:
                break
            j = max(inactive, key=lambda t: (abs(c[t]), -t))
            if abs(c[j]) <= tol:
                break
            active.append(j)
            signs.append(np.sign(c[j]))
            inactive.remove(j)
        C = abs(c[active[0]])
        if C <= tol:
            break
        s_arr = np.array(signs)
        XA = X[:, active] * s_arr
        try:
            Ginv1 = np.linalg.solve(XA.T @ XA, np.ones(len(active)))
        except np.linalg.LinAlgError:
            break
        AA = 1.0 / np.sqrt(np.sum(Ginv1))
        w = AA * Ginv1
        u = XA @ w
        a = X.T @ u
        gamma = C / AA  # full step reaches the least-squares fit on the active set
        entering = None
        for j in inactive:
            for cand in ((C - c[j]) / (AA - a[j]), (C + c[j]) / (AA + a[j])):
                if np.isfinite(cand) and 1e-14 * gamma < cand < gamma:
                    gamma, entering = cand, j
        mu = mu + gamma * u
        beta[active] += gamma * w * s_arr
        if entering is None or step == nonzeros - 1:
            break
        active.append(entering)
        signs.append(np.sign(c[entering] - gamma * a[entering]))
    return beta


def mcfs_scores(data: np.ndarray, n_eigenvectors: int, nonzeros: int, k: int = 5, bandwidth="auto"):
    """Max-absolute LARS coefficient per column plus the embedding eigenvalues."""
    W = knn_graph(data, k, bandwidth)
    Y, vals = spectral_embedding(W, n_eigenvectors, return_eigenvalues=True)
    scores = np.zeros(data.shape[1])
    live = np.any(data != 0.0, axis=0)
    if not np.any(live):
        return scores, vals
    for j in range(Y.shape[1]):
        # unit-norm targets keep columns localised on a few weakly linked
        # points (huge entries under D-normalisation) from swamping the max
        y = Y[:, j] - Y[:, j].mean()
        norm = float(np.linalg.norm(y))
        if not norm > 0:
            continue
        y = y / norm
        coef = lars_select(data[:, live], y, min(nonzeros, int(live.sum())))
        scores[live] = np.maximum(scores[live], np.abs(coef))
    return scores, vals


def select_features(
    data: np.ndarray,
    names: Sequence[str],
    config: FsConfig | None = None,
    *,
    residual_columns: Sequence[int] = (),
    default_eigenvectors: int = 10,
) -> FeatureScore:
    """Score and select columns of a standardised augmented dataset."""
    config = config or FsConfig()
    data = np.asarray(data, dtype=np.float64)
    names = list(names)
    n, p = data.shape
    if len(names) != p:
        raise DimensionMismatch("one name per column is required")
    forced = np.zeros(p, dtype=bool)
    if not config.allow_residual_drop:
        forced[list(residual_columns)] = True
    K = config.n_eigenvectors or default_eigenvectors
    if config.n_selected == "auto":
        target = None
        nonzeros = config.lars_nonzeros or p
    else:
        target = min(int(config.n_selected), p)
        nonzeros = config.lars_nonzeros or target
    nonzeros = min(nonzeros, p)

    scores, vals = mcfs_scores(data, K, nonzeros, config.k_neighbors, config.bandwidth)
    selected = forced.copy()
    if target == p:
        selected[:] = True
    else:
        order = sorted(range(p), key=lambda j: (-scores[j], j))
        if target is None:
            ref = float(scores.max())
            for j in range(p):
                if ref > 0 and scores[j] >= config.auto_threshold * ref:
                    selected[j] = True
        else:
            for j in order:
                if selected.sum() >= target:
                    break
                if scores[j] > 0:
                    selected[j] = True
    if not selected.any():
        selected[int(np.argmax(scores))] = True
    return FeatureScore(names, scores, selected, vals)
