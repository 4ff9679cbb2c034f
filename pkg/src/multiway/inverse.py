"""Linear forward models and penalized inverse solvers for EEG and fMRI:
plain penalized inversion, orthogonal-nonnegative component extraction
(time-domain and spectral-tensor variants) and symmetric two-modality
fusion.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .parafac import ModeConstraints, ModeSpec, fit_parafac
from .penalties import LeastSquaresQuad, SmoothLasso, admm_solve

__all__ = [
    "ForwardModel",
    "build_hemodynamic",
    "eeg_inverse",
    "stonnica",
    "fmri_deconvolve",
    "matrix_fusion",
    "tensor_stonnica",
]


@dataclass
class ForwardModel:
    """Lead field, source smoother and hemodynamic operator for one scene."""

    lead_field: np.ndarray = None          # K: sensors x sources
    laplacian: np.ndarray = None           # L over the source grid
    hemodynamic: np.ndarray = None         # H: fine times x sampled times
    eeg_rate: float = 1.0
    fmri_indices: np.ndarray = None        # fMRI sample indices on the EEG grid

    def __post_init__(self):
        if self.fmri_indices is not None:
            idx = np.asarray(self.fmri_indices)
            if np.any(idx != idx.astype(int)):
                raise ValueError("fMRI sample times must be integer multiples "
                                 "of the EEG sampling grid")
            self.fmri_indices = idx.astype(int)


def build_hemodynamic(h, n_times, subsample):
    """Convolution operator H with (Gamma @ H)[:, j] the causal convolution of
    the rows of Gamma with `h`, evaluated at the subsampled times.

    Built by row-subsampling the square Toeplitz matrix {h(t_i - t_j)} on the
    fine time grid and transposing to the fine-times x sampled-times layout.
    """
    h = np.asarray(h, dtype=float)
    subsample = np.asarray(subsample, dtype=int)
    if subsample.size and (subsample.min() < 0 or subsample.max() >= n_times):
        raise ValueError("subsample indices out of the fine time range")
    col = np.zeros(n_times)
    m = min(h.size, n_times)
    col[:m] = h[:m]
    toep = sla.toeplitz(col, np.zeros(n_times))
    return toep[subsample, :].T


def eeg_inverse(v, model, penalty=None, *, tol=1e-6, max_iter=2000, rho=1.0):
    """argmin_G ||V - K G||^2 + pi(G); returns (Ghat, FitReport)."""
    penalties = [penalty.scaled(0.5)] if penalty is not None else []
    return admm_solve(
        LeastSquaresQuad(model.lead_field, v),
        penalties,
        rho=rho,
        tol=tol,
        max_iter=max_iter,
    )


def fmri_deconvolve(b, model, penalty=None, *, tol=1e-6, max_iter=2000, rho=1.0):
    """argmin_Gamma ||B - Gamma H||^2 + pi(Gamma); penalty acts on Gamma^T.

    The ridge (Wiener) case pi = lam*||Gamma||^2 has the closed form
    B H^T (H H^T + lam I)^{-1}, recovered here through the same ADMM route.
    """
    h = model.hemodynamic
    penalties = [penalty.scaled(0.5)] if penalty is not None else []
    xt, report = admm_solve(
        LeastSquaresQuad(h.T, np.asarray(b).T),
        penalties,
        rho=rho,
        tol=tol,
        max_iter=max_iter,
    )
    return xt.T, report


class _FusionQuad:
    """0.5*||V - K G||^2 + 0.5*alpha*||B - G H||^2 with a diagonalized
    Sylvester solve for the ADMM x-update."""

    def __init__(self, k, v, h, b, alpha):
        self.k = np.asarray(k, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.h = np.asarray(h, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.alpha = float(alpha)
        self.shape = (self.k.shape[1], self.h.shape[0])
        self._kv = self.k.T @ self.v
        self._bht = self.alpha * (self.b @ self.h.T)
        ka, self._ku = np.linalg.eigh(self.k.T @ self.k)
        hb, self._hu = np.linalg.eigh(self.alpha * (self.h @ self.h.T))
        self._ka = np.maximum(ka, 0.0)
        self._hb = np.maximum(hb, 0.0)

    def objective(self, g):
        return 0.5 * float(np.sum((self.v - self.k @ g) ** 2)) + 0.5 * self.alpha * float(
            np.sum((self.b - g @ self.h) ** 2)
        )

    def residual_sq(self, g):
        return float(np.sum((self.v - self.k @ g) ** 2)) + self.alpha * float(
            np.sum((self.b - g @ self.h) ** 2)
        )

    def _solve_shifted(self, rhs, shift):
        denom = self._ka[:, None] + self._hb[None, :] + shift
        if np.min(denom) <= 1e-14 * max(1.0, np.max(denom)):
            raise np.linalg.LinAlgError("singular fusion normal equations")
        core = (self._ku.T @ rhs @ self._hu) / denom
        return self._ku @ core @ self._hu.T

    def solve(self, v_sum, rho, count):
        return self._solve_shifted(self._kv + self._bht + rho * v_sum, count * rho)

    def direct_solve(self):
        return self._solve_shifted(self._kv + self._bht, 0.0)


def matrix_fusion(v, b, model, alpha, penalty=None, *, tol=1e-6, max_iter=2000, rho=1.0):
    """Symmetric two-modality inversion:
    argmin_G ||V - K G||^2 + alpha*||B - G H||^2 + pi(G).

    The fMRI is assumed to share the generator up to a proportionality
    constant absorbed into alpha.  alpha = 0 reduces to the EEG-only inverse.
    """
    b = np.asarray(b, dtype=float)
    if model.hemodynamic.shape[1] != b.shape[1]:
        raise ValueError(
            f"hemodynamic operator maps to {model.hemodynamic.shape[1]} samples "
            f"but B has {b.shape[1]}"
        )
    quad = _FusionQuad(model.lead_field, v, model.hemodynamic, b, alpha)
    penalties = [penalty.scaled(0.5)] if penalty is not None else []
    return admm_solve(quad, penalties, rho=rho, tol=tol, max_iter=max_iter)


def stonnica(v, model, rank, lam1, lam2, *, seed=0, tol=1e-8, max_sweeps=500):
    """Orthogonal-nonnegative component extraction in source space.

    Minimizes 0.5*||V - K M T^T||^2 + lam1*||M||_1 + lam2*||L M||^2 subject
    to M^T M = I, M >= 0.  Returns (M, T, FitReport) with T carrying scale.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank > model.lead_field.shape[0]:
        report_note = f"rank {rank} exceeds the sensor count {model.lead_field.shape[0]}"
    else:
        report_note = None
    cons = ModeConstraints([
        ModeSpec(
            penalties=[SmoothLasso(lam1, lam2, model.laplacian)],
            nonneg=True,
            orthonormal=True,
            design=model.lead_field,
        ),
        ModeSpec(),
    ])
    kmodel, report = fit_parafac(np.asarray(v, dtype=float), rank, cons,
                                 seed=seed, tol=tol, max_sweeps=max_sweeps)
    if report_note:
        report.warnings.append(report_note)
    m = report.extras["coefficients"][0]
    t = kmodel.factors[1] * kmodel.weights
    return m, t, report


def tensor_stonnica(s_t, model, rank, lam1, lam2, *, seed=0, tol=1e-8, max_sweeps=500):
    """Spectral-tensor source decomposition: penalized PARAFAC whose spatial
    factor is K M with M orthogonal-nonnegative and a smooth-lasso penalty,
    and a nonnegative spectral factor.

    Minimizes 0.5*||S - [[K M, T, F]]||^2 + lam1*||M||_1 + 0.5*lam2*||L M||^2
    under M^T M = I, M >= 0, F >= 0.  Returns (M, T, F, FitReport).
    """
    s_t = np.asarray(s_t, dtype=float)
    if s_t.ndim != 3:
        raise ValueError("the spectral tensor must be order-3")
    cons = ModeConstraints([
        ModeSpec(
            penalties=[SmoothLasso(lam1, 0.5 * lam2, model.laplacian)],
            nonneg=True,
            orthonormal=True,
            design=model.lead_field,
        ),
        ModeSpec(),
        ModeSpec(nonneg=True),
    ])
    kmodel, report = fit_parafac(s_t, rank, cons, seed=seed, tol=tol,
                                 max_sweeps=max_sweeps)
    m = report.extras["coefficients"][0]
    t = kmodel.factors[1] * kmodel.weights
    f = kmodel.factors[2]
    return m, t, f, report
