"""Multimodal fusion: multiway partial least squares along a shared mode,
and coupled matrix-tensor factorization with common/discriminant spatial
subspaces.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .inverse import eeg_inverse, tensor_stonnica
from .parafac import ModeConstraints, ModeSpec, factor_congruence, fit_parafac, onn_project
from .penalties import (
    DivergenceError,
    FitReport,
    bic as bic_score,
    dof_smooth_lasso,
    active_set,
    soft_threshold,
)
from .tensor import KruskalModel, khatri_rao, kruskal_reconstruct, unfold

__all__ = [
    "CoupledModel",
    "npls",
    "localize_signatures",
    "cmtf",
    "cmtf_bic_grid",
]


@dataclass
class CoupledModel:
    """Factors of a coupled decomposition.

    For N-PLS: per-mode signature matrices of both datasets, the shared
    modes, and the shared-mode regression C.  For CMTF: the common and
    discriminant spatial blocks plus the temporal/spectral signatures; the
    tensor-side spatial factor is the concatenation [m_common, m_tensor]
    and the matrix-side factor [m_common, m_matrix].
    """

    x_factors: list = field(default_factory=list)
    y_factors: list = field(default_factory=list)
    shared_mode_x: int = None
    shared_mode_y: int = None
    regression: np.ndarray = None
    gamma: float = None
    m_common: np.ndarray = None
    m_tensor: np.ndarray = None
    m_matrix: np.ndarray = None
    atom_stats: list = field(default_factory=list)


def _score_vector(t, vecs, shared):
    """Shared-mode signature from contracting unit vectors over other modes."""
    out = np.asarray(t)
    for m in sorted(range(t.ndim), reverse=True):
        if m != shared:
            out = np.tensordot(out, vecs[m], axes=(m, 0))
    return out


def _npls_atom(x, y, sx, sy, rng, n_restarts=3, max_iter=200, tol=1e-12):
    """One covariance-maximizing atom: unit non-shared signatures for both
    datasets via alternating closed-form updates."""
    best = None
    for restart in range(n_restarts):
        wx = {}
        wy = {}
        for m in range(x.ndim):
            if m == sx:
                continue
            if restart == 0:
                mat = unfold(x, m)
                u, _, _ = np.linalg.svd(mat, full_matrices=False)
                v = u[:, 0]
            else:
                v = rng.standard_normal(x.shape[m])
            wx[m] = v / np.linalg.norm(v)
        for m in range(y.ndim):
            if m == sy:
                continue
            if restart == 0:
                mat = unfold(y, m)
                u, _, _ = np.linalg.svd(mat, full_matrices=False)
                v = u[:, 0]
            else:
                v = rng.standard_normal(y.shape[m])
            wy[m] = v / np.linalg.norm(v)
        last = -np.inf
        for _ in range(max_iter):
            t_y = _score_vector(y, wy, sy)
            # update each x signature: maximize w^T g with g linear in w
            for m in sorted(m for m in range(x.ndim) if m != sx):
                partial = np.asarray(x)
                for mm in sorted((mm for mm in range(x.ndim) if mm not in (m, sx)),
                                 reverse=True):
                    partial = np.tensordot(partial, wx[mm], axes=(mm, 0))
                # remaining axes: (m, shared) in original order
                if m < sx:
                    g = partial @ t_y
                else:
                    g = partial.T @ t_y
                ng = np.linalg.norm(g)
                if ng > 0:
                    wx[m] = g / ng
            t_x = _score_vector(x, wx, sx)
            for m in sorted(m for m in range(y.ndim) if m != sy):
                partial = np.asarray(y)
                for mm in sorted((mm for mm in range(y.ndim) if mm not in (m, sy)),
                                 reverse=True):
                    partial = np.tensordot(partial, wy[mm], axes=(mm, 0))
                if m < sy:
                    g = partial @ t_x
                else:
                    g = partial.T @ t_x
                ng = np.linalg.norm(g)
                if ng > 0:
                    wy[m] = g / ng
            t_y = _score_vector(y, wy, sy)
            cov = float(t_x @ t_y)
            if abs(cov - last) <= tol * max(1.0, abs(cov)):
                break
            last = cov
        t_x = _score_vector(x, wx, sx)
        t_y = _score_vector(y, wy, sy)
        cov = float(t_x @ t_y)
        if best is None or cov > best[0]:
            best = (cov, dict(wx), dict(wy), t_x, t_y)
    return best


def _signature_corr(a, b):
    a = a - a.mean()
    b = b - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return 0.0
    return float(a @ b / denom)


def _refit_perm_pvalue(xr, yr, sx, sy, obs_corr, n_perm, rng, n_restarts):
    """Permutation p-value that repeats the covariance-maximizing extraction
    on shared-mode-shuffled data, so the selection bias of the maximization
    is present in the null distribution too."""
    if n_perm <= 0:
        return np.nan
    count = 0
    for _ in range(n_perm):
        perm = rng.permutation(yr.shape[sy])
        y_shuf = np.take(yr, perm, axis=sy)
        _, _, _, t_x, t_y = _npls_atom(xr, y_shuf, sx, sy, rng,
                                       n_restarts=n_restarts)
        if abs(_signature_corr(t_x, t_y)) >= abs(obs_corr):
            count += 1
    return (count + 1.0) / (n_perm + 1.0)


def npls(x, y, rank, shared_mode, *, shared_mode_y=None, n_perm=1000, seed=0,
         n_restarts=3):
    """Multiway PLS: sequential covariance-maximizing atoms on a shared mode.

    Each atom pairs unit-norm non-shared signatures of both datasets so the
    shared-mode signature pair has maximal sample covariance; both datasets
    are deflated by their rank-one contributions; C regresses the y-side
    shared signatures on the x-side ones.  Returns (CoupledModel, stats)
    where stats holds per-atom covariance, correlation and permutation
    p-value.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if not 0 <= shared_mode < x.ndim:
        raise ValueError("shared_mode out of range for the tensor side")
    n_shared = x.shape[shared_mode]
    if shared_mode_y is None:
        candidates = [m for m in range(y.ndim) if y.shape[m] == n_shared]
        if not candidates:
            raise ValueError("no mode of y matches the shared extent")
        if len(candidates) > 1:
            raise ValueError("shared mode of y is ambiguous; pass shared_mode_y")
        shared_mode_y = candidates[0]
    if y.shape[shared_mode_y] != n_shared:
        raise ValueError("shared extents disagree")
    rng = np.random.default_rng(seed)
    xr = x.copy()
    yr = y.copy()
    x0 = np.linalg.norm(x)
    y0 = np.linalg.norm(y)
    fx = [np.zeros((s, 0)) for s in x.shape]
    fy = [np.zeros((s, 0)) for s in y.shape]
    stats = []
    extracted = 0
    for atom in range(rank):
        if np.linalg.norm(xr) < 1e-12 * max(x0, 1.0) or np.linalg.norm(yr) < 1e-12 * max(y0, 1.0):
            warnings.warn(f"zero-variance residual after {atom} atoms; truncating")
            break
        cov, wx, wy, t_x, t_y = _npls_atom(xr, yr, shared_mode, shared_mode_y,
                                           rng, n_restarts=n_restarts)
        corr = _signature_corr(t_x, t_y)
        pval = _refit_perm_pvalue(xr, yr, shared_mode, shared_mode_y, corr,
                                  n_perm, rng, n_restarts)
        vecs_x = [wx.get(m, t_x) for m in range(x.ndim)]
        vecs_y = [wy.get(m, t_y) for m in range(y.ndim)]
        xr = xr - np.einsum(_outer_spec(x.ndim), *vecs_x)
        yr = yr - np.einsum(_outer_spec(y.ndim), *vecs_y)
        for m in range(x.ndim):
            fx[m] = np.column_stack([fx[m], vecs_x[m]])
        for m in range(y.ndim):
            fy[m] = np.column_stack([fy[m], vecs_y[m]])
        stats.append({
            "atom": atom + 1,
            "cov": cov / n_shared,
            "corr": corr,
            "pvalue": pval,
        })
        extracted += 1
    t_v = fx[shared_mode]
    t_b = fy[shared_mode_y]
    regression = np.linalg.lstsq(t_v, t_b, rcond=None)[0] if extracted else np.zeros((0, 0))
    model = CoupledModel(
        x_factors=fx,
        y_factors=fy,
        shared_mode_x=shared_mode,
        shared_mode_y=shared_mode_y,
        regression=regression,
        atom_stats=stats,
    )
    return model, stats


def _outer_spec(ndim):
    letters = "abcdefgh"[:ndim]
    return ",".join(letters) + "->" + letters


def localize_signatures(m_v, model, penalty=None, **kwargs):
    """Column-wise penalized inversion of sensor-space signatures."""
    ghat, _ = eeg_inverse(np.asarray(m_v, dtype=float), model, penalty, **kwargs)
    return ghat


def _blocked_rows(*blocks):
    """Rows carrying a positive entry in any of the given blocks."""
    masks = [np.any(b > 0, axis=1) for b in blocks if b is not None and b.size]
    if not masks:
        return None
    out = masks[0]
    for m in masks[1:]:
        out = out | m
    return out


class _CmtfState:
    def __init__(self, s_t, b, model, ranks, lams, gamma, seed):
        self.s = np.asarray(s_t, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.k = model.lead_field
        self.lap = model.laplacian
        self.rc, self.rg, self.rb = ranks
        if self.rc < 1:
            raise ValueError("the common subspace needs at least one atom")
        self.lams = tuple(float(v) for v in lams)
        self.gamma = float(gamma)
        self.rng = np.random.default_rng(seed)
        self.n_src = self.k.shape[1]
        if self.b.shape[0] != self.n_src:
            raise ValueError("B must live on the source grid of the lead field")
        self.s_unf0 = unfold(self.s, 0)
        self.s_unf1 = unfold(self.s, 1)
        self.s_unf2 = unfold(self.s, 2)
        self.norm_s = float(np.sum(self.s**2))
        self.norm_b = float(np.sum(self.b**2))

    # ---- objective ----
    def spatial_tensor_factor(self):
        return self.k @ np.hstack([self.mc, self.mg])

    def matrix_factor(self):
        return np.hstack([self.mc, self.mb])

    def residual_tensor_sq(self):
        recon = kruskal_reconstruct(
            KruskalModel([self.spatial_tensor_factor(), self.tv, self.fv])
        )
        return float(np.sum((self.s - recon) ** 2))

    def residual_matrix_sq(self):
        return float(np.sum((self.b - self.matrix_factor() @ self.tb.T) ** 2))

    def penalty_value(self):
        l1, l2, l3, l4, l5, l6 = self.lams
        val = l1 * np.sum(np.abs(self.mc)) + 0.5 * l2 * np.sum((self.lap @ self.mc) ** 2)
        val += l3 * np.sum(np.abs(self.mg)) + 0.5 * l4 * np.sum((self.lap @ self.mg) ** 2)
        val += l5 * np.sum(np.abs(self.mb)) + 0.5 * l6 * np.sum((self.lap @ self.mb) ** 2)
        return float(val)

    def objective(self):
        return (0.5 * self.residual_tensor_sq()
                + 0.5 * self.gamma * self.residual_matrix_sq()
                + self.penalty_value())

    # ---- init ----
    def initialize(self, max_sweeps):
        lams = self.lams
        fwd = _ModelView(self.k, self.lap)
        mx, tv, fv, _ = tensor_stonnica(
            self.s, fwd, self.rc + self.rg, 0.1 * lams[0], 0.1 * lams[1],
            seed=int(self.rng.integers(2**31)), max_sweeps=max_sweeps,
        )
        cons = ModeConstraints([
            ModeSpec(nonneg=True, orthonormal=True),
            ModeSpec(),
        ])
        bmodel, brep = fit_parafac(self.b, self.rc + self.rb, cons,
                                   seed=int(self.rng.integers(2**31)),
                                   max_sweeps=max_sweeps)
        my = brep.extras["coefficients"][0]
        tb = bmodel.factors[1] * bmodel.weights
        cong = factor_congruence(mx, my)
        pairs = []
        used_x, used_y = set(), set()
        flat = [(-cong[i, j], i, j) for i in range(cong.shape[0]) for j in range(cong.shape[1])]
        for _, i, j in sorted(flat):
            if i in used_x or j in used_y:
                continue
            pairs.append((i, j))
            used_x.add(i)
            used_y.add(j)
            if len(pairs) == self.rc:
                break
        mc = np.zeros((self.n_src, self.rc))
        for col, (i, j) in enumerate(pairs):
            merged = mx[:, i] + my[:, j]
            mc[:, col] = merged
        self.mc = onn_project(mc)
        rest_x = [i for i in range(mx.shape[1]) if i not in used_x][: self.rg]
        rest_y = [j for j in range(my.shape[1]) if j not in used_y][: self.rb]
        self.mg = onn_project(mx[:, rest_x], _blocked_rows(self.mc)) if self.rg else np.zeros((self.n_src, 0))
        self.mb = onn_project(my[:, rest_y], _blocked_rows(self.mc)) if self.rb else np.zeros((self.n_src, 0))
        self._reseed(self.mg)
        self._reseed(self.mb)
        x_order = [i for i, _ in pairs] + rest_x
        self.tv = tv[:, x_order]
        self.fv = fv[:, x_order]
        fn = np.linalg.norm(self.fv, axis=0)
        fn = np.where(fn > 0, fn, 1.0)
        self.fv /= fn
        self.tv *= fn
        y_order = [j for _, j in pairs] + rest_y
        self.tb = tb[:, y_order]

    def _reseed(self, m):
        dead = np.flatnonzero(np.linalg.norm(m, axis=0) == 0)
        for c in dead:
            v = np.abs(self.rng.standard_normal(m.shape[0]))
            m[:, c] = v / np.linalg.norm(v)

    # ---- block updates ----
    def _spatial_grad(self):
        """Gradients of the smooth objective w.r.t. mc, mg, mb."""
        msp = np.hstack([self.mc, self.mg])
        a = self.k @ msp
        gram = (self.tv.T @ self.tv) * (self.fv.T @ self.fv)
        mttkrp = self.s_unf0 @ khatri_rao([self.tv, self.fv])
        grad_sp = self.k.T @ (a @ gram - mttkrp)
        mf = self.matrix_factor()
        gram_b = self.tb.T @ self.tb
        grad_f = self.gamma * (mf @ gram_b - self.b @ self.tb)
        l1, l2, l3, l4, l5, l6 = self.lams
        lap_gram = self.lap.T @ self.lap
        g_mc = grad_sp[:, : self.rc] + grad_f[:, : self.rc] + l2 * (lap_gram @ self.mc)
        g_mg = grad_sp[:, self.rc:] + l4 * (lap_gram @ self.mg)
        g_mb = grad_f[:, self.rc:] + l6 * (lap_gram @ self.mb)
        return g_mc, g_mg, g_mb

    def _update_spatial(self, which, step0):
        l1map = {"mc": self.lams[0], "mg": self.lams[2], "mb": self.lams[4]}
        grad = dict(zip(("mc", "mg", "mb"), self._spatial_grad()))[which]
        current = self.objective()
        old = getattr(self, which)
        if old.shape[1] == 0:
            return step0
        step = step0
        for _ in range(40):
            cand = old - step * grad
            if l1map[which] > 0:
                cand = soft_threshold(cand, step * l1map[which])
            if which == "mc":
                blocked = _blocked_rows(self.mg, self.mb)
            elif which == "mg":
                blocked = _blocked_rows(self.mc)
            else:
                blocked = _blocked_rows(self.mc)
            cand = onn_project(cand, blocked)
            setattr(self, which, cand)
            self._reseed(cand)
            if self.objective() <= current + 1e-12 * max(1.0, abs(current)):
                if self.objective() >= current:
                    setattr(self, which, old)
                return step
            step /= 2.0
        setattr(self, which, old)
        return step

    def _update_tv(self):
        a = self.spatial_tensor_factor()
        gram = (a.T @ a) * (self.fv.T @ self.fv)
        mttkrp = self.s_unf1 @ khatri_rao([a, self.fv])
        r = gram.shape[0]
        sol = np.linalg.lstsq(gram + 1e-12 * np.eye(r), mttkrp.T, rcond=None)[0]
        self.tv = sol.T

    def _update_fv(self):
        a = self.spatial_tensor_factor()
        gram = (a.T @ a) * (self.tv.T @ self.tv)
        mttkrp = self.s_unf2 @ khatri_rao([a, self.tv])
        fv = self.fv
        for r in range(fv.shape[1]):
            crr = gram[r, r]
            if crr <= 1e-300:
                continue
            bvec = mttkrp[:, r] - fv @ gram[:, r] + fv[:, r] * crr
            fv[:, r] = np.maximum(bvec, 0.0) / crr
        norms = np.linalg.norm(fv, axis=0)
        safe = np.where(norms > 0, norms, 1.0)
        self.fv = fv / safe
        self.tv = self.tv * norms

    def _update_tb(self):
        mf = self.matrix_factor()
        sol = np.linalg.lstsq(mf, self.b, rcond=None)[0]
        self.tb = sol.T


class _ModelView:
    """Minimal forward-model facade for the initializer."""

    def __init__(self, lead_field, laplacian):
        self.lead_field = lead_field
        self.laplacian = laplacian


def cmtf(
    s_t,
    b,
    model,
    ranks,
    lams=(0, 0, 0, 0, 0, 0),
    *,
    gamma=None,
    seed=0,
    tol=1e-8,
    max_sweeps=200,
):
    """Coupled matrix-tensor factorization with a shared spatial subspace.

    Minimizes the coupled objective
    0.5*||S - [[K [M_C, M_G], T_V, F_V]]||^2 + gamma*0.5*||B - [[M_C, M_B], T_B]||^2
    plus smooth-lasso penalties on the spatial blocks (lams = l1..l6), under
    joint orthogonal-nonnegativity of [M_C, M_G] and [M_C, M_B] and
    nonnegativity of F_V.  gamma defaults to the squared-norm ratio of the
    two datasets.  Returns (CoupledModel, FitReport).
    """
    s_t = np.asarray(s_t, dtype=float)
    b = np.asarray(b, dtype=float)
    if gamma is None:
        gamma = float(np.sum(s_t**2) / max(np.sum(b**2), 1e-300))
    state = _CmtfState(s_t, b, model, ranks, lams, gamma, seed)
    state.initialize(max_sweeps)
    report = FitReport(hyperparams={
        "ranks": tuple(int(r) for r in ranks),
        "lams": state.lams,
        "gamma": gamma,
    })
    obj = state.objective()
    report.objective_trace.append(obj)
    steps = {"mc": 1.0, "mg": 1.0, "mb": 1.0}
    for sweep in range(1, max_sweeps + 1):
        steps["mc"] = state._update_spatial("mc", steps["mc"] * 2.0)
        steps["mg"] = state._update_spatial("mg", steps["mg"] * 2.0)
        steps["mb"] = state._update_spatial("mb", steps["mb"] * 2.0)
        state._update_tv()
        state._update_fv()
        state._update_tb()
        new_obj = state.objective()
        report.objective_trace.append(new_obj)
        report.iterations = sweep
        if new_obj > obj + 1e-9 * max(1.0, abs(obj)):
            raise DivergenceError(f"objective increased at sweep {sweep}", report)
        if obj - new_obj <= tol * max(1.0, abs(obj)):
            report.converged = True
            obj = new_obj
            break
        obj = new_obj
    report.residual_sq = state.residual_tensor_sq() + state.residual_matrix_sq()
    report.extras["residual_tensor_sq"] = state.residual_tensor_sq()
    report.extras["residual_matrix_sq"] = state.residual_matrix_sq()
    coupled = CoupledModel(
        x_factors=[state.spatial_tensor_factor(), state.tv, state.fv],
        y_factors=[state.matrix_factor(), state.tb],
        gamma=gamma,
        m_common=state.mc,
        m_tensor=state.mg,
        m_matrix=state.mb,
    )
    return coupled, report


def cmtf_bic_grid(
    s_t,
    b,
    model,
    ranks,
    grids,
    *,
    gamma=None,
    seed=0,
    max_sweeps=120,
    classical=False,
):
    """Hyperparameter selection for cmtf over (lam1, lam2) grids.

    One fit per grid point with the sparse/smooth strengths shared across
    the three spatial blocks; for every fit the coupled and uncoupled BIC
    scores are evaluated (common block: both residuals and the stacked
    design; discriminant blocks: their own modality).  Returns the chosen
    hyperparameters per score plus the full tables.
    """
    lam1s = sorted(grids.get("lam1", [0.0]))
    lam2s = sorted(grids.get("lam2", [0.0]))
    if not lam1s or not lam2s:
        raise ValueError("grids must be nonempty")
    s_t = np.asarray(s_t, dtype=float)
    b = np.asarray(b, dtype=float)
    n_v = s_t.size
    n_b = b.size
    if gamma is None:
        gamma = float(np.sum(s_t**2) / max(np.sum(b**2), 1e-300))
    k = model.lead_field
    lap = model.laplacian
    stacked = np.vstack([k, np.sqrt(gamma) * np.eye(k.shape[1])])
    tables = {"m_c": [], "m_g": [], "m_b": []}
    fits = []
    for lam1 in lam1s:
        for lam2 in lam2s:
            lams = (lam1, lam2, lam1, lam2, lam1, lam2)
            try:
                coupled, report = cmtf(s_t, b, model, ranks, lams, gamma=gamma,
                                       seed=seed, max_sweeps=max_sweeps)
            except DivergenceError:
                fits.append(((lam1, lam2), None))
                continue
            res_t = report.extras["residual_tensor_sq"]
            res_b = report.extras["residual_matrix_sq"]
            df_c = sum(
                dof_smooth_lasso(stacked, active_set(coupled.m_common[:, r]), lam2, lap)
                for r in range(coupled.m_common.shape[1])
            )
            df_g = sum(
                dof_smooth_lasso(k, active_set(coupled.m_tensor[:, r]), lam2, lap)
                for r in range(coupled.m_tensor.shape[1])
            )
            df_b = sum(
                dof_smooth_lasso(np.eye(k.shape[1]), active_set(coupled.m_matrix[:, r]),
                                 lam2, lap)
                for r in range(coupled.m_matrix.shape[1])
            )
            bic_c = bic_score(res_t + gamma * res_b, df_c, n_v + n_b, classical=classical)
            bic_g = bic_score(res_t, df_g, n_v, classical=classical)
            bic_b = bic_score(res_b, df_b, n_b, classical=classical)
            tables["m_c"].append(((lam1, lam2), bic_c))
            tables["m_g"].append(((lam1, lam2), bic_g))
            tables["m_b"].append(((lam1, lam2), bic_b))
            fits.append(((lam1, lam2), report))
    if not any(rep is not None for _, rep in fits):
        raise RuntimeError("all grid-point fits failed")
    chosen = {}
    for key, rows in tables.items():
        best = min(rows, key=lambda kv: (kv[1], tuple(-v for v in kv[0])))
        chosen[key] = {"lams": best[0], "bic": best[1]}
    return chosen, tables
