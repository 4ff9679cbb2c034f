"""Granger-causal influence estimation as tensor regression.

A lagged data tensor turns the multivariate autoregression into one tensor
contraction; coefficients come from penalized regression, from the
block-Toeplitz Yule-Walker system, from its nuclear-norm-regularized
t-product variant, or from an atomic (PARAFAC-structured) decomposition
with orthogonal-nonnegative sender/receiver maps.  A bivariate F-test
baseline is included for small ROI sets.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as spstats

from . import talg
from .penalties import (
    DivergenceError,
    FitReport,
    LeastSquaresQuad,
    SmoothLasso,
    admm_solve,
    graph_laplacian,
    soft_threshold,
)
from .parafac import onn_project
from .synth import companion_radius
from .tensor import contract

__all__ = [
    "LaggedSystem",
    "ConnectivityTensor",
    "build_lagged",
    "mar_tensor_fit",
    "sample_cov_tensor",
    "levinson_naive",
    "levinson_tnn",
    "gc_parafac",
    "bivariate_gc",
    "BivariateResult",
]


@dataclass
class LaggedSystem:
    """Target matrix and its lag-stacked companion tensor.

    lagged[l-1, :, t] holds the series at offset -l relative to column t of
    the target; only time points with all lags available are kept.
    """

    target: np.ndarray       # I_Cx x I_T
    lagged: np.ndarray       # I_lag x I_Cx x I_T
    n_lags: int


@dataclass
class ConnectivityTensor:
    """Autoregressive coefficients: entry (i, j, l) is the influence of
    series j on series i at lag l+1."""

    tensor: np.ndarray

    def __post_init__(self):
        self.tensor = np.asarray(self.tensor, dtype=float)
        if self.tensor.ndim != 3 or self.tensor.shape[0] != self.tensor.shape[1]:
            raise ValueError("connectivity tensor must be I_Cx x I_Cx x I_lag")
        if not np.all(np.isfinite(self.tensor)):
            raise ValueError("connectivity tensor has non-finite entries")

    @property
    def n_lags(self):
        return self.tensor.shape[2]

    def companion_radius(self):
        return companion_radius(self.tensor)

    def predict(self, lagged):
        """One-step predictions via the defining contraction."""
        return contract(self.tensor, lagged, [(1, 1), (2, 0)])

    def edges(self, threshold=0.0):
        """(receiver, sender, lag, weight) rows for export."""
        rows = []
        n = self.tensor.shape[0]
        for l in range(self.n_lags):
            for i in range(n):
                for j in range(n):
                    w = self.tensor[i, j, l]
                    if abs(w) > threshold:
                        rows.append((i, j, l + 1, float(w)))
        return rows


def build_lagged(bfull, n_lags, demean=True):
    """Lag-stack a series matrix into a LaggedSystem.

    `bfull` is I_Cx x (I_T + I_lag); the target keeps the last I_T columns
    and lag slice l reproduces the series shifted by l+1 samples.
    """
    bfull = np.atleast_2d(np.asarray(bfull, dtype=float))
    n_lags = int(n_lags)
    if n_lags < 1:
        raise ValueError("n_lags must be >= 1")
    if bfull.shape[1] <= n_lags:
        raise ValueError(
            f"need more than {n_lags} samples, got {bfull.shape[1]}"
        )
    if demean:
        bfull = bfull - bfull.mean(axis=1, keepdims=True)
    n_t = bfull.shape[1] - n_lags
    target = bfull[:, n_lags:]
    lagged = np.stack([bfull[:, n_lags - l: n_lags - l + n_t]
                       for l in range(1, n_lags + 1)], axis=0)
    return LaggedSystem(target=target, lagged=lagged, n_lags=n_lags)


def _unfold_design(sys):
    """Design matrix Phi with row (l, j) holding lag-l+1 series j."""
    p, n, t = sys.lagged.shape
    return sys.lagged.reshape(p * n, t)


def _coeffs_to_tensor(x, n_lags, n_nodes):
    """Stacked regression solution (rows (l, j), cols i) to an (i, j, l) tensor."""
    return x.reshape(n_lags, n_nodes, n_nodes).transpose(2, 1, 0)


def mar_tensor_fit(sys, penalties=(), *, tol=1e-6, max_iter=2000, rho=1.0):
    """Penalized MAR estimation on the unfolded lagged system.

    Minimizes ||B_t - A .contract. B||^2 + pi(A) over the connectivity
    tensor; penalties act on the unfolded coefficient matrix (rows = lagged
    sender coordinates, columns = receivers).
    """
    phi = _unfold_design(sys)
    quad = LeastSquaresQuad(phi.T, sys.target.T)
    scaled = [p.scaled(0.5) for p in penalties]
    x, report = admm_solve(quad, scaled, rho=rho, tol=tol, max_iter=max_iter)
    tensor = _coeffs_to_tensor(x, sys.n_lags, sys.target.shape[0])
    return ConnectivityTensor(tensor), report


def sample_cov_tensor(sys):
    """Lagged sample covariances: face l is (1/I_T) sum_t b_{t-l} b_t^T."""
    n, t = sys.target.shape
    out = np.zeros((n, n, sys.n_lags + 1))
    out[:, :, 0] = sys.target @ sys.target.T / t
    for l in range(1, sys.n_lags + 1):
        out[:, :, l] = sys.lagged[l - 1] @ sys.target.T / t
    return out


def _split_cov(r):
    depth = r.shape[2]
    p = depth - 1
    if p < 1:
        raise ValueError("covariance tensor needs depth >= 2 (lag 0 and lag 1)")
    return r[:, :, :p], r[:, :, 1:]


def levinson_naive(r, use_pinv=False):
    """Yule-Walker solution through the block-Toeplitz system.

    Solves tplz(R1) X = MatVec(R2) and reshapes X into the connectivity
    tensor; raises numpy.linalg.LinAlgError when the block-Toeplitz matrix
    is singular (the motivation for the regularized variant).  use_pinv
    switches to the least-norm pseudo-inverse solution for singular systems.
    """
    r1, r2 = _split_cov(np.asarray(r, dtype=float))
    n = r1.shape[0]
    p = r1.shape[2]
    t = talg.tplz(r1)
    rhs = talg.matvec(r2)
    if use_pinv:
        x = np.linalg.lstsq(t, rhs, rcond=None)[0]
    else:
        x = np.linalg.solve(t, rhs)
    blocks = x.reshape(p, n, n)
    return ConnectivityTensor(blocks.transpose(2, 1, 0))


def levinson_tnn(r, lam):
    """Nuclear-norm-regularized Yule-Walker solve via the t-product.

    The lag covariance stack is t-SVD'd, its t-singular values shrunk by
    `lam`, and the coefficients come from the shrunk pseudo-inverse applied
    with t-products; always well posed for lam > 0.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    r1, r2 = _split_cov(np.asarray(r, dtype=float))
    n = r1.shape[0]
    uf, sf, vf = talg._face_svds(r1)
    shrunk = np.maximum(sf - lam, 0.0)
    inv = np.where(shrunk > 0, 1.0 / np.where(shrunk > 0, shrunk, 1.0), 0.0)
    pinv_f = np.einsum("irk,rk,jrk->ijk", vf[:, :n, :], inv, uf[:, :n, :].conj())
    r2f = np.fft.fft(r2, axis=2)
    af = np.einsum("ijk,jlk->ilk", pinv_f, r2f)
    a = np.fft.ifft(af, axis=2)
    resid = float(np.max(np.abs(a.imag))) if a.size else 0.0
    if resid > 1e-8 * max(1.0, float(np.max(np.abs(a.real)))):
        warnings.warn(f"imaginary residue {resid:.2e} in the t-product solve")
    return ConnectivityTensor(np.transpose(a.real, (1, 0, 2)))


def _atom_series(lagged, m_s, t_fac):
    """S(t, r) = sum_{j,l} M_s(j,r) T(l,r) lagged(l,j,t)."""
    return np.einsum("jr,lr,ljt->tr", m_s, t_fac, lagged, optimize=True)


def _gc_objective(sys, m_s, m_r, t_fac, lams, lap_s, lap_t):
    s = _atom_series(sys.lagged, m_s, t_fac)
    resid = sys.target - m_r @ s.T
    l1, l2, l3, l4, l5, l6 = lams
    val = 0.5 * float(np.sum(resid**2))
    val += l1 * float(np.sum(np.abs(m_s))) + 0.5 * l2 * float(np.sum((lap_s @ m_s) ** 2))
    val += l3 * float(np.sum(np.abs(m_r))) + 0.5 * l4 * float(np.sum((lap_s @ m_r) ** 2))
    val += l5 * float(np.sum(np.abs(t_fac))) + 0.5 * l6 * float(np.sum((lap_t @ t_fac) ** 2))
    return val


def _prox_step_block(value, grad, step, l1, project):
    cand = value - step * grad
    if l1 > 0:
        cand = soft_threshold(cand, step * l1)
    return project(cand)


def _backtrack_block(obj_fn, value, grad, l1, project, step0):
    """One monotone prox-gradient update with halving backtracking."""
    current = obj_fn(value)
    step = step0
    for _ in range(40):
        cand = _prox_step_block(value, grad, step, l1, project)
        if obj_fn(cand) <= current + 1e-12 * max(1.0, abs(current)):
            if obj_fn(cand) < current:
                return cand, step
            return value, step
        step /= 2.0
    return value, step


def gc_parafac(
    sys,
    rank,
    lams=(0, 0, 0, 0, 0, 0),
    *,
    laplacian=None,
    seed=0,
    tol=1e-8,
    max_sweeps=200,
):
    """Atomic decomposition of the connectivity tensor.

    The coefficients are constrained to A = [[M_r, M_s, T]] (receiver,
    sender, lag) with orthogonal nonnegative spatial maps and a real-valued
    lag signature carrying sign and scale; smooth-lasso penalties apply per
    block with strengths lams = (l1..l6).  Alternation order per sweep:
    M_s, M_r, T.  Returns (M_s, M_r, T, FitReport).
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    n = sys.target.shape[0]
    p = sys.n_lags
    lams = tuple(float(v) for v in lams)
    lap_s = np.asarray(laplacian, dtype=float) if laplacian is not None else np.zeros((n, n))
    path = np.zeros((p, p))
    for i in range(p - 1):
        path[i, i + 1] = path[i + 1, i] = 1.0
    lap_t = graph_laplacian(path) if p > 1 else np.zeros((p, p))

    # init: truncated SVD of the unfoldings of the unpenalized estimate
    base, _ = mar_tensor_fit(sys)
    a0 = base.tensor
    u_r, _, _ = np.linalg.svd(a0.reshape(n, -1), full_matrices=False)
    u_s, _, _ = np.linalg.svd(a0.transpose(1, 0, 2).reshape(n, -1), full_matrices=False)
    rng = np.random.default_rng(seed)

    def seeded(mat, rows):
        if mat.shape[1] >= rank:
            return mat[:, :rank]
        extra = rng.standard_normal((rows, rank - mat.shape[1]))
        return np.hstack([mat, extra])

    m_r = onn_project(np.abs(seeded(u_r, n)))
    m_s = onn_project(np.abs(seeded(u_s, n)))
    t_fac = np.einsum("ijl,ir,jr->lr", a0, m_r, m_s)
    if not np.any(t_fac):
        t_fac = rng.standard_normal((p, rank))

    def reseed(m):
        dead = np.flatnonzero(np.linalg.norm(m, axis=0) == 0)
        for c in dead:
            v = np.abs(rng.standard_normal(m.shape[0]))
            m[:, c] = v / np.linalg.norm(v)
        return m

    l1s, l2s, l3s, l4s, l5s, l6s = lams
    obj = _gc_objective(sys, m_s, m_r, t_fac, lams, lap_s, lap_t)
    report = FitReport(hyperparams={"rank": rank, "lams": lams})
    report.objective_trace.append(obj)
    steps = {"s": 1.0, "r": 1.0, "t": 1.0}
    lagged = sys.lagged
    for sweep in range(1, max_sweeps + 1):
        # --- senders ---
        s_mat = _atom_series(lagged, m_s, t_fac)
        e = m_r @ s_mat.T - sys.target
        q = np.einsum("lr,ljt->rjt", t_fac, lagged, optimize=True)
        grad = np.einsum("rt,rjt->jr", m_r.T @ e, q, optimize=True)
        grad = grad + l2s * (lap_s.T @ (lap_s @ m_s))
        m_s, steps["s"] = _backtrack_block(
            lambda m: _gc_objective(sys, m, m_r, t_fac, lams, lap_s, lap_t),
            m_s, grad, l1s, onn_project, steps["s"] * 2.0,
        )
        m_s = reseed(m_s)
        # --- receivers ---
        s_mat = _atom_series(lagged, m_s, t_fac)
        grad = m_r @ (s_mat.T @ s_mat) - sys.target @ s_mat
        grad = grad + l4s * (lap_s.T @ (lap_s @ m_r))
        m_r, steps["r"] = _backtrack_block(
            lambda m: _gc_objective(sys, m_s, m, t_fac, lams, lap_s, lap_t),
            m_r, grad, l3s, onn_project, steps["r"] * 2.0,
        )
        m_r = reseed(m_r)
        # --- lag signatures ---
        e = m_r @ _atom_series(lagged, m_s, t_fac).T - sys.target
        z = np.einsum("jr,ljt->lrt", m_s, lagged, optimize=True)
        grad = np.einsum("rt,lrt->lr", m_r.T @ e, z, optimize=True)
        grad = grad + l6s * (lap_t.T @ (lap_t @ t_fac))
        t_fac, steps["t"] = _backtrack_block(
            lambda tt: _gc_objective(sys, m_s, m_r, tt, lams, lap_s, lap_t),
            t_fac, grad, l5s, lambda x: x, steps["t"] * 2.0,
        )
        new_obj = _gc_objective(sys, m_s, m_r, t_fac, lams, lap_s, lap_t)
        report.objective_trace.append(new_obj)
        report.iterations = sweep
        if new_obj > obj + 1e-10 * max(1.0, abs(obj)):
            raise DivergenceError(
                f"objective increased at sweep {sweep}", report
            )
        if obj - new_obj <= tol * max(1.0, abs(obj)):
            report.converged = True
            obj = new_obj
            break
        obj = new_obj

    s_mat = _atom_series(lagged, m_s, t_fac)
    report.residual_sq = float(np.sum((sys.target - m_r @ s_mat.T) ** 2))
    # flag degenerate (collinear) atom pairs
    if rank > 1:
        cong = np.ones((rank, rank))
        for m in (m_s, m_r, t_fac):
            norms = np.linalg.norm(m, axis=0)
            norms = np.where(norms > 0, norms, 1.0)
            cong *= np.abs((m / norms).T @ (m / norms))
        tri = cong[np.triu_indices(rank, 1)]
        if np.any(tri > 0.98):
            report.warnings.append("degenerate collinear atom pair (congruence > 0.98)")
    return m_s, m_r, t_fac, report


@dataclass
class BivariateResult:
    """Pairwise GC statistics: entry (i, j) refers to the j -> i direction."""

    stat: np.ndarray
    pvalues: np.ndarray
    dominant: np.ndarray
    significant: np.ndarray
    alpha: float
    n_tests: int
    warnings: list = field(default_factory=list)


def bivariate_gc(roi_series, n_lags, alpha=0.05):
    """Pairwise Granger tests for a small ROI set.

    For each ordered pair the log variance ratio of restricted vs full AR
    fits is tested with an F-test; Bonferroni correction over all ordered
    pairs; the dominant-flow matrix is the signed difference of the two
    directions.  Self-pairs are excluded.
    """
    series = np.atleast_2d(np.asarray(roi_series, dtype=float))
    n, total = series.shape
    if n > 50:
        raise ValueError("bivariate baseline is meant for <= 50 ROIs")
    if n < 2:
        raise ValueError("need at least two series")
    p = int(n_lags)
    t_eff = total - p
    df2 = t_eff - 2 * p
    if df2 <= 0:
        raise ValueError("series too short for the requested lag order")
    series = series - series.mean(axis=1, keepdims=True)
    stat = np.zeros((n, n))
    pvals = np.full((n, n), np.nan)
    notes = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            pair = np.vstack([series[i], series[j]])
            sysm = build_lagged(pair, p, demean=False)
            y = sysm.target[0]
            own = sysm.lagged[:, 0, :].T          # t x p
            other = sysm.lagged[:, 1, :].T
            full = np.hstack([own, other])
            coef_r, *_ = np.linalg.lstsq(own, y, rcond=None)
            rss_r = float(np.sum((y - own @ coef_r) ** 2))
            coef_f, *_ = np.linalg.lstsq(full, y, rcond=None)
            rss_f = float(np.sum((y - full @ coef_f) ** 2))
            a_pair = np.zeros((2, 2, p))
            a_pair[0, 0, :] = coef_f[:p]
            a_pair[0, 1, :] = coef_f[p:]
            if companion_radius(a_pair) >= 1.0:
                notes.append(f"unstable AR fit for pair ({j}->{i})")
            stat[i, j] = math.log(max(rss_r, 1e-300) / max(rss_f, 1e-300))
            f_stat = ((rss_r - rss_f) / p) / (rss_f / df2)
            pvals[i, j] = float(spstats.f.sf(max(f_stat, 0.0), p, df2))
    n_tests = n * (n - 1)
    significant = np.zeros((n, n), dtype=bool)
    mask = ~np.isnan(pvals)
    significant[mask] = pvals[mask] <= alpha / n_tests
    dominant = stat - stat.T
    return BivariateResult(
        stat=stat,
        pvalues=pvals,
        dominant=dominant,
        significant=significant,
        alpha=alpha,
        n_tests=n_tests,
        warnings=notes,
    )
