"""Constrained PARAFAC fitting via hierarchical alternating least squares.

Each sweep updates one factor at a time; plain modes get exact columnwise
subproblem solutions, orthonormal(+nonnegative) modes a projected
prox-gradient step with backtracking, and modes expressed through a fixed
design matrix (factor = design @ coefficients) a prox-gradient update on the
coefficients.  Rank diagnostics (core consistency, explained variance) and
factor alignment utilities live here too.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .penalties import (
    DivergenceError,
    FitReport,
    L1,
    Nonnegativity,
    OrthogonalColumns,
    SmoothLasso,
    SmoothQuadratic,
    soft_threshold,
)
from .tensor import KruskalModel, khatri_rao, kruskal_reconstruct, refold, unfold

__all__ = [
    "ModeSpec",
    "ModeConstraints",
    "fit_parafac",
    "hals_update_column",
    "corcondia",
    "explained_variance",
    "select_rank",
    "RankSelection",
    "onn_project",
    "factor_congruence",
    "align_factors",
    "congruence_score",
]


@dataclass
class ModeSpec:
    """Constraint set for one mode: penalties plus structural flags."""

    penalties: list = field(default_factory=list)
    nonneg: bool = False
    orthonormal: bool = False
    design: np.ndarray = None

    def scale_free(self):
        """True when column rescaling cannot change the penalty value."""
        return not self.penalties and not self.orthonormal and self.design is None

    def l1_weight(self):
        return sum(p.lam1 if isinstance(p, SmoothLasso) else p.lam
                   for p in self.penalties if isinstance(p, (L1, SmoothLasso)))

    def quad_parts(self):
        """(lam, gram) pairs for the smooth-quadratic penalty components."""
        parts = []
        for p in self.penalties:
            if isinstance(p, SmoothQuadratic):
                parts.append((p.lam, p._gram))
            elif isinstance(p, SmoothLasso):
                parts.append((p.lam2, p._gram))
        return parts

    def validate(self):
        for p in self.penalties:
            if isinstance(p, (Nonnegativity, OrthogonalColumns)):
                raise ValueError(
                    "use the nonneg/orthonormal flags instead of indicator penalties"
                )


class ModeConstraints:
    """Per-mode constraint sets for a tensor factorization."""

    def __init__(self, modes):
        self.modes = list(modes)
        for m in self.modes:
            if not isinstance(m, ModeSpec):
                raise TypeError("ModeConstraints takes ModeSpec entries")
            m.validate()

    @classmethod
    def unconstrained(cls, ndim):
        return cls([ModeSpec() for _ in range(ndim)])

    def __getitem__(self, n):
        return self.modes[n]

    def __len__(self):
        return len(self.modes)


def onn_project(z, blocked_rows=None):
    """Project onto {nonnegative, at most one positive entry per row,
    unit-norm columns}; zero columns are left zero for the caller to reseed."""
    z = np.maximum(np.asarray(z, dtype=float), 0.0)
    if blocked_rows is not None:
        z = z.copy()
        z[blocked_rows] = 0.0
    if z.shape[1] > 1:
        winners = np.argmax(z, axis=1)
        keep = np.zeros_like(z, dtype=bool)
        keep[np.arange(z.shape[0]), winners] = True
        z = np.where(keep, z, 0.0)
    norms = np.linalg.norm(z, axis=0)
    return z / np.where(norms > 0, norms, 1.0)


def _spectral_norm(m):
    if m.size == 0:
        return 0.0
    return float(np.linalg.norm(m, 2))


def _column_subproblem(b, c, spec, x0=None):
    """argmin_a 0.5*c*||a||^2 - b^T a + penalties(a) for one HALS column."""
    lam1 = spec.l1_weight()
    quads = spec.quad_parts()
    if not quads:
        if spec.nonneg:
            return np.maximum(b - lam1, 0.0) / c
        if lam1 > 0:
            return soft_threshold(b, lam1) / c
        return b / c
    if not spec.nonneg and lam1 == 0 and len(quads) >= 1:
        m = c * np.eye(b.shape[0])
        for lam, gram in quads:
            m += 2.0 * lam * gram
        return np.linalg.solve(m, b)
    # General case: projected/proximal gradient on the strongly convex column
    # objective.
    lip = c + sum(2.0 * lam * _spectral_norm(gram) for lam, gram in quads)
    a = np.maximum(b, 0.0) / c if spec.nonneg else b / c
    if x0 is not None:
        a = x0.copy()
    for _ in range(200):
        grad = c * a - b
        for lam, gram in quads:
            grad += 2.0 * lam * (gram @ a)
        a_new = a - grad / lip
        if lam1 > 0:
            a_new = soft_threshold(a_new, lam1 / lip)
        if spec.nonneg:
            a_new = np.maximum(a_new, 0.0)
        if np.max(np.abs(a_new - a)) < 1e-13 * max(1.0, np.max(np.abs(a))):
            a = a_new
            break
        a = a_new
    return a


class _HalsState:
    """Working state of a penalized HALS fit."""

    def __init__(self, x, rank, constraints, seed, init):
        self.x = np.asarray(x, dtype=float)
        self.rank = int(rank)
        if self.rank < 0:
            raise ValueError("rank must be nonnegative")
        self.ndim = self.x.ndim
        if constraints is None:
            constraints = ModeConstraints.unconstrained(self.ndim)
        if len(constraints) != self.ndim:
            raise ValueError(
                f"constraints cover {len(constraints)} modes for an order-{self.ndim} tensor"
            )
        self.constraints = constraints
        self.rng = np.random.default_rng(seed)
        self.norm_x_sq = float(np.sum(self.x**2))
        self.unfoldings = [unfold(self.x, n) for n in range(self.ndim)]
        self.report = FitReport()
        self._init_factors(init)

    def _coeff_rows(self, n):
        spec = self.constraints[n]
        if spec.design is not None:
            return spec.design.shape[1]
        return self.x.shape[n]

    def _init_factors(self, init):
        self.coeffs = []
        self.min_unfold_rank = None
        ranks = []
        for n in range(self.ndim):
            spec = self.constraints[n]
            rows = self._coeff_rows(n)
            if init == "svd":
                u, s, _ = np.linalg.svd(self.unfoldings[n], full_matrices=False)
                ranks.append(int(np.sum(s > s[0] * 1e-10)) if s.size else 0)
                k = min(self.rank, u.shape[1])
                base = u[:, :k]
                if spec.design is not None:
                    base = np.linalg.lstsq(spec.design, base, rcond=None)[0]
                if base.shape[0] != rows:
                    base = self.rng.standard_normal((rows, k))
                if k < self.rank:
                    extra = self.rng.standard_normal((rows, self.rank - k))
                    base = np.hstack([base, extra]) if k else extra
            else:
                base = self.rng.standard_normal((rows, self.rank))
            c = self._project_init(base, spec)
            self.coeffs.append(c)
        if ranks:
            self.min_unfold_rank = min(ranks)
            if self.rank > self.min_unfold_rank:
                self.report.warnings.append(
                    f"rank {self.rank} exceeds the smallest unfolding rank "
                    f"{self.min_unfold_rank}"
                )

    def _project_init(self, base, spec):
        base = np.asarray(base, dtype=float)
        if spec.orthonormal and spec.nonneg:
            c = onn_project(np.abs(base))
            self._reseed_zero_columns(c, spec, None)
            return c
        if spec.orthonormal:
            u, _, vh = np.linalg.svd(base, full_matrices=False)
            return u @ vh
        if spec.nonneg:
            c = np.abs(base)
        else:
            c = base
        norms = np.linalg.norm(c, axis=0)
        return c / np.where(norms > 0, norms, 1.0)

    def factor(self, n):
        spec = self.constraints[n]
        if spec.design is not None:
            return spec.design @ self.coeffs[n]
        return self.coeffs[n]

    def factors(self):
        return [self.factor(n) for n in range(self.ndim)]

    def _others(self, n):
        return [self.factor(m) for m in range(self.ndim) if m != n]

    def mode_matrices(self, n):
        """Khatri-Rao, Gram and MTTKRP matrices for mode n."""
        others = self._others(n)
        kr = khatri_rao(others)
        gram = np.ones((self.rank, self.rank))
        for f in others:
            gram *= f.T @ f
        mttkrp = self.unfoldings[n] @ kr
        return kr, gram, mttkrp

    def penalty_value(self):
        total = 0.0
        for n in range(self.ndim):
            for p in self.constraints[n].penalties:
                total += p.value(self.coeffs[n])
        return total

    def data_objective(self, n, gram, mttkrp):
        a = self.factor(n)
        model_sq = float(np.sum((a.T @ a) * gram))
        cross = float(np.sum(a * mttkrp))
        return 0.5 * max(self.norm_x_sq - 2.0 * cross + model_sq, 0.0)

    def objective(self):
        _, gram, mttkrp = self.mode_matrices(self.ndim - 1)
        return self.data_objective(self.ndim - 1, gram, mttkrp) + self.penalty_value()

    def residual_sq(self):
        _, gram, mttkrp = self.mode_matrices(self.ndim - 1)
        return 2.0 * self.data_objective(self.ndim - 1, gram, mttkrp)

    def _reseed_zero_columns(self, c, spec, n):
        dead = np.flatnonzero(np.linalg.norm(c, axis=0) == 0)
        if dead.size == 0:
            return
        if n is None:
            resid = self.rng.standard_normal((c.shape[0], dead.size))
        else:
            recon = self.factor(n) @ khatri_rao(self._others(n)).T
            resid_mat = self.unfoldings[n] - recon
            u, _, _ = np.linalg.svd(resid_mat, full_matrices=False)
            lead = u[:, : dead.size]
            if spec.design is not None:
                lead = np.linalg.lstsq(spec.design, lead, rcond=None)[0]
            if lead.shape[0] != c.shape[0] or lead.shape[1] < dead.size:
                lead = self.rng.standard_normal((c.shape[0], dead.size))
            resid = lead
        warnings.warn("reseeding zero-norm factor column(s) from the residual")
        for j, col in enumerate(dead.tolist()):
            v = resid[:, j]
            if spec.nonneg:
                v = np.abs(v)
            nv = np.linalg.norm(v)
            if nv == 0:
                v = np.abs(self.rng.standard_normal(c.shape[0]))
                nv = np.linalg.norm(v)
            c[:, col] = v / nv

    def update_plain(self, n, gram, mttkrp):
        spec = self.constraints[n]
        c = self.coeffs[n]
        for r in range(self.rank):
            crr = gram[r, r]
            if crr <= 1e-300:
                self._reseed_zero_columns(c, spec, n)
                continue
            b = mttkrp[:, r] - c @ gram[:, r] + c[:, r] * crr
            c[:, r] = _column_subproblem(b, crr, spec, x0=c[:, r])
        if np.any(np.linalg.norm(c, axis=0) == 0):
            self._reseed_zero_columns(c, spec, n)

    def mode_gradient(self, n, gram, mttkrp):
        """Gradient of the smooth penalized objective w.r.t. the mode-n
        coefficients (data term plus quadratic penalty parts)."""
        spec = self.constraints[n]
        a = self.factor(n)
        grad_a = a @ gram - mttkrp
        grad = spec.design.T @ grad_a if spec.design is not None else grad_a
        for lam, pgram in spec.quad_parts():
            grad = grad + 2.0 * lam * (pgram @ self.coeffs[n])
        return grad

    def _smooth_objective(self, n, c, gram, mttkrp):
        spec = self.constraints[n]
        a = spec.design @ c if spec.design is not None else c
        val = 0.5 * max(
            self.norm_x_sq - 2.0 * float(np.sum(a * mttkrp)) + float(np.sum((a.T @ a) * gram)),
            0.0,
        )
        for lam, pgram in spec.quad_parts():
            val += lam * float(np.sum(c * (pgram @ c)))
        return val

    def _block_objective(self, n, c, gram, mttkrp):
        return self._smooth_objective(n, c, gram, mttkrp) + self.constraints[n].l1_weight() * float(
            np.sum(np.abs(c))
        )

    def update_projected(self, n, gram, mttkrp, inner=10):
        """Prox-gradient with backtracking for orthonormal / design modes."""
        spec = self.constraints[n]
        c = self.coeffs[n]
        lam1 = spec.l1_weight()
        lip = _spectral_norm(gram)
        if spec.design is not None:
            lip *= _spectral_norm(spec.design) ** 2
        lip += sum(2.0 * lam * _spectral_norm(g) for lam, g in spec.quad_parts())
        lip = max(lip, 1e-12)
        current = self._block_objective(n, c, gram, mttkrp)
        for _ in range(inner):
            grad = self.mode_gradient(n, gram, mttkrp)
            step = 1.0 / lip
            accepted = False
            for _ in range(30):
                cand = c - step * grad
                if lam1 > 0:
                    cand = soft_threshold(cand, step * lam1)
                cand = self._project_block(cand, spec)
                val = self._block_objective(n, cand, gram, mttkrp)
                if val <= current + 1e-12 * max(1.0, abs(current)):
                    accepted = val < current - 1e-14 * max(1.0, abs(current))
                    if val < current:
                        c = cand
                        current = val
                    break
                step /= 2.0
            if not accepted:
                break
        self.coeffs[n] = c
        self._reseed_zero_columns(self.coeffs[n], spec, n)

    def _project_block(self, cand, spec):
        if spec.orthonormal and spec.nonneg:
            return onn_project(cand)
        if spec.orthonormal:
            u, _, vh = np.linalg.svd(cand, full_matrices=False)
            return u @ vh
        if spec.nonneg:
            return np.maximum(cand, 0.0)
        return cand

    def update_mode(self, n):
        _, gram, mttkrp = self.mode_matrices(n)
        spec = self.constraints[n]
        if spec.orthonormal and not spec.nonneg and not spec.penalties and spec.design is None:
            # Exact orthogonal Procrustes solution.
            u, _, vh = np.linalg.svd(mttkrp, full_matrices=False)
            self.coeffs[n] = u @ vh
        elif spec.orthonormal or spec.design is not None:
            self.update_projected(n, gram, mttkrp)
        else:
            self.update_plain(n, gram, mttkrp)

    def scale_mode(self):
        for n in range(self.ndim):
            if self.constraints[n].scale_free():
                return n
        return None

    def renormalize(self):
        """Push scale from scale-invariant modes into the scale mode."""
        target = self.scale_mode()
        if target is None:
            return
        for n in range(self.ndim):
            if n == target:
                continue
            spec = self.constraints[n]
            if spec.orthonormal:
                continue  # unit columns by constraint
            if spec.penalties or spec.design is not None:
                continue  # scale-sensitive; keep working scale
            norms = np.linalg.norm(self.coeffs[n], axis=0)
            safe = np.where(norms > 0, norms, 1.0)
            self.coeffs[n] /= safe
            self.coeffs[target] *= norms


def fit_parafac(
    x,
    rank,
    constraints=None,
    *,
    seed=0,
    tol=1e-8,
    max_sweeps=500,
    init="svd",
):
    """Penalized PARAFAC fit: 0.5*||X - [[A_1..A_N]]||^2 + per-mode penalties.

    Returns (KruskalModel, FitReport).  The model follows the normalization
    convention (unit-norm factor columns, nonnegative weights); the report
    carries the per-sweep objective trace.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    state = _HalsState(x, rank, constraints, seed, init)
    report = state.report
    prev = state.objective()
    report.objective_trace.append(prev)
    for sweep in range(1, max_sweeps + 1):
        for n in range(state.ndim):
            state.update_mode(n)
        state.renormalize()
        obj = state.objective()
        report.objective_trace.append(obj)
        report.iterations = sweep
        if obj > prev + 1e-10 * max(1.0, abs(prev)):
            report.residual_sq = state.residual_sq()
            raise DivergenceError(
                f"objective increased at sweep {sweep}: {prev:.6e} -> {obj:.6e}",
                report,
            )
        if prev - obj <= tol * max(1.0, abs(prev)):
            report.converged = True
            prev = obj
            break
        prev = obj
    report.residual_sq = state.residual_sq()
    report.extras["final_objective"] = prev
    model = KruskalModel(state.factors()).normalize()
    report.extras["coefficients"] = [c.copy() for c in state.coeffs]
    return model, report


def hals_update_column(x, model, mode, r, spec=None):
    """Exact rank-one HALS subproblem solution for one factor column.

    Other signatures of all atoms stay fixed; scale folds into the updated
    mode.  Returns the updated (scaled) column.
    """
    x = np.asarray(x, dtype=float)
    if spec is None:
        spec = ModeSpec()
    factors = [f * (model.weights if n == mode else 1.0) for n, f in enumerate(model.factors)]
    others = [f for n, f in enumerate(factors) if n != mode]
    kr = khatri_rao(others)
    gram = np.ones((model.rank, model.rank))
    for f in others:
        gram *= f.T @ f
    mttkrp = unfold(x, mode) @ kr
    c = factors[mode]
    crr = gram[r, r]
    if crr <= 1e-300:
        resid = unfold(x, mode) - c @ kr.T
        u, _, _ = np.linalg.svd(resid, full_matrices=False)
        warnings.warn("zero-norm residual direction; reinitializing column from residual SVD")
        v = np.abs(u[:, 0]) if spec.nonneg else u[:, 0]
        return v / np.linalg.norm(v)
    b = mttkrp[:, r] - c @ gram[:, r] + c[:, r] * crr
    return _column_subproblem(b, crr, spec, x0=c[:, r])


def _fold_weights(model):
    factors = [f.copy() for f in model.factors]
    factors[0] = factors[0] * model.weights
    return factors


def corcondia(x, model):
    """Core consistency: 100 * (1 - ||G - I||^2 / R) for the LS Tucker core G."""
    x = np.asarray(x, dtype=float)
    factors = _fold_weights(model)
    core = x
    for f in factors:
        cond = np.linalg.cond(f)
        if not np.isfinite(cond) or cond > 1e12:
            warnings.warn("rank-deficient factor in corcondia; using pseudo-inverse")
        core = np.tensordot(core, np.linalg.pinv(f).T, axes=([0], [0]))
    r = model.rank
    ident = np.zeros(core.shape)
    for j in range(r):
        ident[(j,) * core.ndim] = 1.0
    return 100.0 * (1.0 - float(np.sum((core - ident) ** 2)) / r)


def explained_variance(x, model):
    """1 - ||X - reconstruction||^2 / ||X||^2."""
    x = np.asarray(x, dtype=float)
    denom = float(np.sum(x**2))
    if denom == 0:
        raise ValueError("explained variance undefined for a zero tensor")
    resid = float(np.sum((x - kruskal_reconstruct(model)) ** 2))
    return 1.0 - resid / denom


@dataclass
class RankSelection:
    rank: int
    low_confidence: bool
    table: list


def select_rank(
    x,
    r_max,
    constraints_factory=None,
    *,
    threshold=85.0,
    min_explained=0.05,
    seed=0,
    tol=1e-8,
    max_sweeps=500,
):
    """Choose the largest rank whose core consistency stays above `threshold`.

    `constraints_factory(R)` may supply constraints per candidate rank.  The
    low-confidence flag is raised when no rank passes or the chosen model
    explains less than `min_explained` of the variance.
    """
    if r_max < 1:
        raise ValueError("r_max must be >= 1")
    table = []
    passing = []
    for r in range(1, r_max + 1):
        constraints = constraints_factory(r) if constraints_factory else None
        try:
            model, report = fit_parafac(
                x, r, constraints, seed=seed, tol=tol, max_sweeps=max_sweeps
            )
        except DivergenceError:
            table.append({"rank": r, "corcondia": -np.inf, "explained": 0.0,
                          "converged": False})
            continue
        cc = corcondia(x, model)
        ev = explained_variance(x, model)
        table.append({"rank": r, "corcondia": cc, "explained": ev,
                      "converged": report.converged})
        if cc >= threshold:
            passing.append((r, ev))
    if not passing:
        return RankSelection(rank=1, low_confidence=True, table=table)
    best_r = max(r for r, _ in passing)
    best_ev = dict(passing)[best_r]
    return RankSelection(rank=best_r, low_confidence=best_ev < min_explained, table=table)


def factor_congruence(a, b):
    """Matrix of |cos| similarities between columns of two factor matrices."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    na = np.where(na > 0, na, 1.0)
    nb = np.where(nb > 0, nb, 1.0)
    return np.abs((a / na).T @ (b / nb))


def align_factors(model, reference):
    """Greedy congruence matching of `model` atoms onto `reference` atoms.

    Returns (permuted model, per-atom congruence vector).  Congruence per
    atom pair is the product over modes of |cos| between matched columns;
    the reported score per atom is the minimum |cos| across modes.
    """
    if model.ndim != reference.ndim or model.rank != reference.rank:
        raise ValueError("models must share order and rank for alignment")
    r = model.rank
    prod = np.ones((r, r))
    per_mode = []
    for fm, fr in zip(model.factors, reference.factors):
        cm = factor_congruence(fm, fr)
        per_mode.append(cm)
        prod *= cm
    perm = np.full(r, -1)
    cost = prod.copy()
    for _ in range(r):
        i, j = np.unravel_index(np.argmax(cost), cost.shape)
        perm[j] = i
        cost[i, :] = -np.inf
        cost[:, j] = -np.inf
    factors = [f[:, perm] for f in model.factors]
    weights = model.weights[perm]
    # flip signs to match the reference; the residual sign moves into the
    # weights so the aligned model reconstructs identically
    for n in range(model.ndim):
        signs = np.sign(np.sum(factors[n] * reference.factors[n], axis=0))
        signs[signs == 0] = 1.0
        factors[n] = factors[n] * signs
        weights = weights * signs
    aligned = KruskalModel(factors, weights)
    scores = np.array(
        [min(per_mode[n][perm[j], j] for n in range(model.ndim)) for j in range(r)]
    )
    return aligned, scores


def congruence_score(model, reference):
    """Mean over atoms of the min-over-modes congruence after alignment."""
    _, scores = align_factors(model, reference)
    return float(np.mean(scores))
