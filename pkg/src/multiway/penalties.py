"""Regularizers, proximal operators, the ADMM penalized-least-squares engine,
degrees-of-freedom estimates and BIC model scoring.

Every penalty knows its value, its proximal map and how to split itself into
consensus-ADMM blocks.  `admm_pls` minimizes

    0.5 * ||Ybar - A X||_F^2  +  sum_j pi_j(X)

by consensus ADMM with one split variable per penalty block.
"""

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

__all__ = [
    "Penalty",
    "L1",
    "SmoothQuadratic",
    "SmoothLasso",
    "Nonnegativity",
    "OrthogonalColumns",
    "TNNPenalty",
    "FitReport",
    "DivergenceError",
    "soft_threshold",
    "graph_laplacian",
    "admm_pls",
    "admm_solve",
    "LeastSquaresQuad",
    "dof_smooth_lasso",
    "bic",
    "grid_search",
]


class DivergenceError(RuntimeError):
    """Raised when an iterative solver diverges; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class FitReport:
    """Outcome of a fit: residual, complexity, score and convergence info."""

    residual_sq: float = 0.0
    dof: float = None
    bic: float = None
    hyperparams: dict = field(default_factory=dict)
    iterations: int = 0
    converged: bool = False
    objective_trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "residual_sq": float(self.residual_sq),
            "dof": None if self.dof is None else float(self.dof),
            "bic": None if self.bic is None else float(self.bic),
            "hyperparams": {k: _jsonable(v) for k, v in self.hyperparams.items()},
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "objective_trace": [float(v) for v in self.objective_trace],
            "warnings": list(self.warnings),
            "extras": {k: _jsonable(v) for k, v in self.extras.items()},
        }


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def soft_threshold(z, t):
    """Elementwise soft-thresholding: shrink magnitudes by `t` toward zero."""
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


class Penalty:
    """Base regularizer.  Subclasses implement `value` and `prox`."""

    indicator = False

    def value(self, x):
        raise NotImplementedError

    def prox(self, z, step):
        """argmin_x 0.5*||x - z||^2 + step * value(x)."""
        raise NotImplementedError

    def split(self):
        """Consensus-ADMM blocks this penalty decomposes into."""
        return [self]

    def scaled(self, c):
        """The same penalty with all strength parameters multiplied by `c`."""
        raise NotImplementedError


def _check_step(step):
    if not step > 0:
        raise ValueError(f"prox step must be positive, got {step}")


def _check_finite(z):
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite input to prox")
    return z


class L1(Penalty):
    """lam * ||X||_1 (entrywise)."""

    def __init__(self, lam):
        if lam < 0:
            raise ValueError("lam must be nonnegative")
        self.lam = float(lam)

    def value(self, x):
        return self.lam * float(np.sum(np.abs(x)))

    def prox(self, z, step):
        _check_step(step)
        return soft_threshold(_check_finite(z), step * self.lam)

    def scaled(self, c):
        return L1(c * self.lam)

    def __repr__(self):
        return f"L1(lam={self.lam})"


class SmoothQuadratic(Penalty):
    """lam * ||L X||_F^2 for a smoother (graph Laplacian) matrix L."""

    def __init__(self, lam, smoother):
        if lam < 0:
            raise ValueError("lam must be nonnegative")
        self.lam = float(lam)
        self.smoother = np.asarray(smoother, dtype=float)
        self._gram = self.smoother.T @ self.smoother
        self._cache = {}

    def value(self, x):
        return self.lam * float(np.sum((self.smoother @ x) ** 2))

    def _factor(self, t):
        key = round(math.log10(t), 12) if t > 0 else 0.0
        if key not in self._cache:
            n = self._gram.shape[0]
            self._cache[key] = sla.cho_factor(np.eye(n) + 2.0 * t * self._gram)
        return self._cache[key]

    def prox(self, z, step):
        _check_step(step)
        z = _check_finite(z)
        t = step * self.lam
        if t == 0:
            return z
        return sla.cho_solve(self._factor(t), z)

    def scaled(self, c):
        return SmoothQuadratic(c * self.lam, self.smoother)

    def __repr__(self):
        return f"SmoothQuadratic(lam={self.lam})"


class SmoothLasso(Penalty):
    """lam1 * ||X||_1 + lam2 * ||L X||_F^2 (sparse and smooth)."""

    def __init__(self, lam1, lam2, smoother):
        if lam1 < 0 or lam2 < 0:
            raise ValueError("lam1 and lam2 must be nonnegative")
        self.lam1 = float(lam1)
        self.lam2 = float(lam2)
        self.smoother = np.asarray(smoother, dtype=float)
        self._gram = self.smoother.T @ self.smoother
        self._gram_norm = float(np.linalg.norm(self._gram, 2)) if self._gram.size else 0.0

    def value(self, x):
        return self.lam1 * float(np.sum(np.abs(x))) + self.lam2 * float(
            np.sum((self.smoother @ x) ** 2)
        )

    def split(self):
        return [L1(self.lam1), SmoothQuadratic(self.lam2, self.smoother)]

    def prox(self, z, step, tol=1e-10, max_iter=2000):
        # No closed form; FISTA on the strongly convex smooth part with the
        # L1 term handled by soft-thresholding.
        _check_step(step)
        z = _check_finite(z)
        t1 = step * self.lam1
        t2 = step * self.lam2
        lip = 1.0 + 2.0 * t2 * self._gram_norm
        x = z.copy()
        y = z.copy()
        s = 1.0
        scale = max(1.0, float(np.max(np.abs(z))))
        for _ in range(max_iter):
            grad = (y - z) + 2.0 * t2 * (self._gram @ y)
            x_new = soft_threshold(y - grad / lip, t1 / lip)
            s_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * s * s))
            y = x_new + ((s - 1.0) / s_new) * (x_new - x)
            x, s = x_new, s_new
            if self._subgrad_residual(x, z, t1, t2) < tol * scale:
                break
        return x

    def _subgrad_residual(self, x, z, t1, t2):
        g = (x - z) + 2.0 * t2 * (self._gram @ x)
        on = x != 0
        r = np.where(on, g + t1 * np.sign(x), np.maximum(np.abs(g) - t1, 0.0))
        return float(np.max(np.abs(r))) if r.size else 0.0

    def scaled(self, c):
        return SmoothLasso(c * self.lam1, c * self.lam2, self.smoother)

    def __repr__(self):
        return f"SmoothLasso(lam1={self.lam1}, lam2={self.lam2})"


class Nonnegativity(Penalty):
    """Indicator of the nonnegative orthant."""

    indicator = True

    def value(self, x):
        return 0.0 if np.all(np.asarray(x) >= 0) else np.inf

    def prox(self, z, step):
        _check_step(step)
        return np.maximum(_check_finite(z), 0.0)

    def scaled(self, c):
        return self

    def __repr__(self):
        return "Nonnegativity()"


class OrthogonalColumns(Penalty):
    """Indicator of matrices with orthonormal columns (Stiefel projection)."""

    indicator = True

    def value(self, x):
        x = np.asarray(x)
        return 0.0 if np.allclose(x.T @ x, np.eye(x.shape[1]), atol=1e-8) else np.inf

    def prox(self, z, step):
        _check_step(step)
        z = _check_finite(z)
        u, _, vh = np.linalg.svd(z, full_matrices=False)
        return u @ vh

    def scaled(self, c):
        return self

    def __repr__(self):
        return "OrthogonalColumns()"


class TNNPenalty(Penalty):
    """lam * nuclear norm -- matrix singular-value shrinkage (t-algebra K=1)."""

    def __init__(self, lam):
        if lam < 0:
            raise ValueError("lam must be nonnegative")
        self.lam = float(lam)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 3:
            from . import talg

            return self.lam * talg.tnn(x)
        return self.lam * float(np.sum(np.linalg.svd(x, compute_uv=False)))

    def prox(self, z, step):
        _check_step(step)
        z = _check_finite(z)
        if z.ndim == 3:
            from . import talg

            return talg.shrink_t_singular(z, step * self.lam)
        u, s, vh = np.linalg.svd(z, full_matrices=False)
        return (u * np.maximum(s - step * self.lam, 0.0)) @ vh

    def scaled(self, c):
        return TNNPenalty(c * self.lam)

    def __repr__(self):
        return f"TNNPenalty(lam={self.lam})"


def graph_laplacian(adjacency):
    """Graph Laplacian L = degree - adjacency of a symmetric weight matrix."""
    adj = np.asarray(adjacency, dtype=float)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ValueError("adjacency must be square")
    if not np.allclose(adj, adj.T, atol=1e-12):
        raise ValueError("adjacency must be symmetric")
    if np.any(adj < 0):
        raise ValueError("adjacency weights must be nonnegative")
    if np.any(np.abs(np.diag(adj)) > 0):
        raise ValueError("adjacency must have a zero diagonal")
    return np.diag(adj.sum(axis=1)) - adj


class LeastSquaresQuad:
    """Data term 0.5 * ||Ybar - A X||_F^2 for the ADMM engine."""

    def __init__(self, a, ybar):
        self.a = np.asarray(a, dtype=float)
        self.ybar = np.asarray(ybar, dtype=float)
        if self.ybar.ndim == 1:
            self.ybar = self.ybar[:, None]
        if self.a.shape[0] != self.ybar.shape[0]:
            raise ValueError(
                f"design and target row counts differ: {self.a.shape[0]} != {self.ybar.shape[0]}"
            )
        self.shape = (self.a.shape[1], self.ybar.shape[1])
        self._aty = self.a.T @ self.ybar
        self._gram = self.a.T @ self.a
        self._cache = {}

    def objective(self, x):
        return 0.5 * float(np.sum((self.ybar - self.a @ x) ** 2))

    def residual_sq(self, x):
        return float(np.sum((self.ybar - self.a @ x) ** 2))

    def solve(self, v_sum, rho, count):
        key = (round(math.log10(rho), 12), count)
        if key not in self._cache:
            n = self._gram.shape[0]
            self._cache[key] = sla.cho_factor(self._gram + count * rho * np.eye(n))
        return sla.cho_solve(self._cache[key], self._aty + rho * v_sum)

    def direct_solve(self):
        x, *_ = np.linalg.lstsq(self.a, self.ybar, rcond=None)
        return x


def admm_solve(
    quad,
    penalties,
    *,
    rho=1.0,
    tol=1e-6,
    max_iter=2000,
    hyperparams=None,
):
    """Consensus ADMM for `quad.objective(X) + sum_j pi_j(X)`.

    One split variable per penalty block; the penalty parameter rho is
    rebalanced (factor 2) whenever primal and dual residuals drift apart by
    more than a factor 10.  Raises DivergenceError when the residuals grow
    for 50 consecutive iterations.
    """
    blocks = []
    for p in penalties:
        blocks.extend(p.split())
    report = FitReport(hyperparams=dict(hyperparams or {}))
    if not blocks:
        x = quad.direct_solve()
        report.residual_sq = quad.residual_sq(x)
        report.iterations = 0
        report.converged = True
        report.objective_trace = [quad.objective(x)]
        return x, report

    shape = quad.shape
    x = np.zeros(shape)
    z = [np.zeros(shape) for _ in blocks]
    u = [np.zeros(shape) for _ in blocks]
    j = len(blocks)
    n_entries = float(np.prod(shape))
    grow_streak = 0
    prev_metric = np.inf

    for it in range(1, max_iter + 1):
        v_sum = sum(zj - uj for zj, uj in zip(z, u))
        x = quad.solve(v_sum, rho, j)
        z_old = [zj.copy() for zj in z]
        for k, p in enumerate(blocks):
            z[k] = p.prox(x + u[k], 1.0 / rho)
            u[k] += x - z[k]

        primal = math.sqrt(sum(float(np.sum((x - zj) ** 2)) for zj in z))
        dual = rho * math.sqrt(
            sum(float(np.sum((zj - zo) ** 2)) for zj, zo in zip(z, z_old))
        )
        obj = quad.objective(x) + sum(
            0.0 if p.indicator else p.value(x) for p in blocks
        )
        report.objective_trace.append(obj)

        x_norm = float(np.linalg.norm(x))
        z_norm = math.sqrt(sum(float(np.sum(zj**2)) for zj in z))
        u_norm = math.sqrt(sum(float(np.sum(uj**2)) for uj in u))
        eps_abs = 1e-12 * math.sqrt(j * n_entries)
        eps_pri = eps_abs + tol * max(math.sqrt(j) * x_norm, z_norm)
        eps_dual = eps_abs + tol * rho * u_norm
        report.iterations = it
        if primal <= eps_pri and dual <= eps_dual:
            report.converged = True
            break

        metric = primal + dual
        if metric > prev_metric * (1.0 + 1e-12):
            grow_streak += 1
            if grow_streak >= 50:
                report.residual_sq = quad.residual_sq(x)
                raise DivergenceError(
                    f"ADMM residuals grew for {grow_streak} consecutive iterations",
                    report,
                )
        else:
            grow_streak = 0
        prev_metric = metric

        if primal > 10.0 * dual and rho < 1e6:
            rho *= 2.0
            u = [uj / 2.0 for uj in u]
        elif dual > 10.0 * primal and rho > 1e-6:
            rho /= 2.0
            u = [uj * 2.0 for uj in u]

    report.residual_sq = quad.residual_sq(x)
    if not report.converged:
        report.warnings.append(f"ADMM stopped at max_iter={max_iter} without converging")
    return x, report


def admm_pls(a, ybar, penalties, *, rho=1.0, tol=1e-6, max_iter=2000, hyperparams=None):
    """Penalized least squares: 0.5*||Ybar - A X||^2 + sum_j pi_j(X) by ADMM."""
    quad = LeastSquaresQuad(a, ybar)
    return admm_solve(
        quad, penalties, rho=rho, tol=tol, max_iter=max_iter, hyperparams=hyperparams
    )


def dof_smooth_lasso(a, active, lam2, smoother):
    """Smooth-lasso degrees of freedom on the active set.

    trace of A_a (A_a^T A_a + lam2 L_a^T L_a)^{-1} A_a^T with A_a, L_a the
    active columns of the design and the smoother.
    """
    a = np.asarray(a, dtype=float)
    active = np.asarray(active)
    if active.dtype == bool:
        idx = np.flatnonzero(active)
    else:
        idx = active.astype(int)
    if idx.size == 0:
        return 0.0
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ValueError("active set indexes columns outside the design")
    aa = a[:, idx]
    la = np.asarray(smoother, dtype=float)[:, idx]
    m = aa.T @ aa + lam2 * (la.T @ la)
    gram = aa.T @ aa
    try:
        sol = sla.solve(m, gram, assume_a="sym")
    except np.linalg.LinAlgError:
        warnings.warn("singular restricted system in dof_smooth_lasso; adding ridge jitter")
        m = m + 1e-10 * np.eye(m.shape[0])
        sol = sla.solve(m, gram, assume_a="sym")
    if not np.all(np.isfinite(sol)):
        warnings.warn("singular restricted system in dof_smooth_lasso; adding ridge jitter")
        m = m + 1e-10 * np.eye(m.shape[0])
        sol = sla.solve(m, gram, assume_a="sym")
    return float(np.trace(sol))


def active_set(x, rel_tol=1e-8):
    """Columns-of-one-vector active set: |x| above rel_tol * max|x|."""
    x = np.asarray(x)
    m = np.max(np.abs(x)) if x.size else 0.0
    if m == 0:
        return np.zeros(x.shape, dtype=bool)
    return np.abs(x) > rel_tol * m


def bic(residual_sq, dof, n, classical=False):
    """0.5 * residual_sq + dof * log(n) / n (classical=True drops the /n)."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    if residual_sq < 0 or dof < 0:
        raise ValueError("residual_sq and dof must be nonnegative")
    penalty = dof * math.log(n)
    if not classical:
        penalty /= n
    return 0.5 * residual_sq + penalty


def grid_search(fit_fn, grids, tie_tol=1e-12):
    """Evaluate `fit_fn(**params)` over the cartesian grid, minimize BIC.

    Grids are iterated in ascending order; ties within `tie_tol` go to the
    later (larger-parameter, sparser) grid point.  Returns
    (best_params, best_report, table) where table is a list of
    (params, report_or_None) in evaluation order.
    """
    if not grids or any(len(v) == 0 for v in grids.values()):
        raise ValueError("grids must be nonempty")
    names = list(grids.keys())
    values = [sorted(grids[k]) for k in names]
    table = []
    best = None
    for combo in itertools.product(*values):
        params = dict(zip(names, combo))
        try:
            report = fit_fn(**params)
        except (DivergenceError, np.linalg.LinAlgError) as exc:
            table.append((params, None))
            continue
        if report.bic is None:
            raise ValueError("fit_fn must return a FitReport with a bic score")
        table.append((params, report))
        if best is None:
            best = (params, report, combo)
            continue
        span = max(1.0, abs(best[1].bic))
        if report.bic < best[1].bic - tie_tol * span:
            best = (params, report, combo)
        elif abs(report.bic - best[1].bic) <= tie_tol * span and combo > best[2]:
            best = (params, report, combo)
    if best is None:
        raise RuntimeError("all grid-point fits failed")
    return best[0], best[1], table
