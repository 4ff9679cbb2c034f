"""Dense N-way tensor operations and the rank-R Kruskal factor model.

All tensors are plain numpy arrays.  Mode indices are 0-based.  Matricization
uses the column-major convention (earlier modes vary fastest along the
columns), which matches the on-disk layout of the shared tensor format.
"""

from dataclasses import dataclass, field
from itertools import product

import numpy as np

__all__ = [
    "contract",
    "contract_reference",
    "concatenate",
    "unfold",
    "refold",
    "frobenius",
    "khatri_rao",
    "KruskalModel",
    "kruskal_reconstruct",
]


def _check_mode_pairs(x, y, modes):
    pairs = [(int(mx), int(my)) for mx, my in modes]
    for mx, my in pairs:
        if not (0 <= mx < x.ndim and 0 <= my < y.ndim):
            raise ValueError(f"contraction mode pair ({mx}, {my}) out of range")
        if x.shape[mx] != y.shape[my]:
            raise ValueError(
                f"extent mismatch on contracted modes ({mx}, {my}): "
                f"{x.shape[mx]} != {y.shape[my]}"
            )
    if len({m for m, _ in pairs}) != len(pairs) or len({m for _, m in pairs}) != len(pairs):
        raise ValueError("contraction modes must be distinct per operand")
    return pairs


def contract(x, y, modes):
    """Contract two tensors over pairs of modes.

    Parameters
    ----------
    x, y : ndarray
    modes : sequence of (mode_in_x, mode_in_y) pairs, 0-based.

    Returns
    -------
    ndarray whose shape is the non-contracted modes of `x` followed by the
    non-contracted modes of `y`.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    pairs = _check_mode_pairs(x, y, modes)
    if not pairs:
        raise ValueError("at least one mode pair is required")
    ax = [p[0] for p in pairs]
    ay = [p[1] for p in pairs]
    return np.tensordot(x, y, axes=(ax, ay))


def contract_reference(x, y, modes):
    """Fused-loop reference implementation of :func:`contract`.

    Slow; exists so the fast path can be cross-checked entry by entry.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    pairs = _check_mode_pairs(x, y, modes)
    ax = [p[0] for p in pairs]
    ay = [p[1] for p in pairs]
    free_x = [m for m in range(x.ndim) if m not in ax]
    free_y = [m for m in range(y.ndim) if m not in ay]
    out_shape = [x.shape[m] for m in free_x] + [y.shape[m] for m in free_y]
    dtype = np.result_type(x.dtype, y.dtype)
    out = np.zeros(out_shape if out_shape else (), dtype=dtype)
    contracted = [x.shape[m] for m in ax]
    for idx in product(*[range(s) for s in out_shape]):
        ix = list(idx[: len(free_x)])
        iy = list(idx[len(free_x):])
        total = 0.0
        for jdx in product(*[range(s) for s in contracted]):
            xi = [0] * x.ndim
            yi = [0] * y.ndim
            for m, v in zip(free_x, ix):
                xi[m] = v
            for m, v in zip(free_y, iy):
                yi[m] = v
            for (mx, my), v in zip(pairs, jdx):
                xi[mx] = v
                yi[my] = v
            total += x[tuple(xi)] * y[tuple(yi)]
        out[idx] = total
    return out


def concatenate(x, y, mode):
    """Concatenate two tensors of equal order along `mode`.

    All extents must agree except at the concatenation mode; the output
    carries `x` in the leading slices.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.ndim != y.ndim:
        raise ValueError(f"tensor order mismatch: {x.ndim} != {y.ndim}")
    if not 0 <= mode < x.ndim:
        raise ValueError(f"invalid concatenation mode {mode} for order {x.ndim}")
    for m in range(x.ndim):
        if m != mode and x.shape[m] != y.shape[m]:
            raise ValueError(
                f"extent mismatch off the concatenation mode at mode {m}: "
                f"{x.shape[m]} != {y.shape[m]}"
            )
    return np.concatenate([x, y], axis=mode)


def unfold(x, mode):
    """Mode-`mode` matricization, I_mode x prod(other extents).

    Columns are indexed by the remaining modes in increasing order with the
    earliest mode varying fastest.
    """
    x = np.asarray(x)
    if not 0 <= mode < x.ndim:
        raise ValueError(f"invalid mode {mode} for order {x.ndim}")
    return np.reshape(np.moveaxis(x, mode, 0), (x.shape[mode], -1), order="F")


def refold(mat, mode, shape):
    """Exact inverse of :func:`unfold` for a tensor of the given shape."""
    shape = tuple(int(s) for s in shape)
    if not 0 <= mode < len(shape):
        raise ValueError(f"invalid mode {mode} for order {len(shape)}")
    rest = [s for i, s in enumerate(shape) if i != mode]
    full = np.reshape(np.asarray(mat), (shape[mode], *rest), order="F")
    return np.moveaxis(full, 0, mode)


def frobenius(x):
    """Frobenius norm: sqrt of the sum of squared magnitudes."""
    return float(np.linalg.norm(np.asarray(x).ravel()))


def khatri_rao(mats):
    """Columnwise Kronecker product of a list of matrices.

    Row indices combine with the first matrix varying fastest, matching the
    column order of :func:`unfold`.
    """
    mats = [np.asarray(m) for m in mats]
    if not mats:
        raise ValueError("khatri_rao needs at least one matrix")
    r = mats[0].shape[1]
    if any(m.shape[1] != r for m in mats):
        raise ValueError("all matrices must share the column count")
    out = np.ones((1, r))
    for m in mats:
        out = (m[:, None, :] * out[None, :, :]).reshape(-1, r)
    return out


@dataclass
class KruskalModel:
    """Rank-R factor model: sum of weighted rank-one outer products.

    factors[n] is I_n x R; weights has length R.  Under the normalization
    convention every factor except the first has unit-norm columns and the
    weights absorb scale.
    """

    factors: list = field(default_factory=list)
    weights: np.ndarray = None
    normalized_convention: bool = False

    def __post_init__(self):
        self.factors = [np.asarray(f, dtype=float) for f in self.factors]
        if not self.factors:
            raise ValueError("a KruskalModel needs at least one factor matrix")
        ranks = {f.shape[1] for f in self.factors}
        if len(ranks) != 1:
            raise ValueError(f"factors disagree on column count: {sorted(ranks)}")
        if self.weights is None:
            self.weights = np.ones(self.rank)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != (self.rank,):
            raise ValueError("weights must be a length-R vector")

    @property
    def rank(self):
        return self.factors[0].shape[1]

    @property
    def ndim(self):
        return len(self.factors)

    @property
    def shape(self):
        return tuple(f.shape[0] for f in self.factors)

    def normalize(self):
        """Return an equivalent model in the normalization convention.

        All factor columns become unit-norm and the weights carry the scale;
        weights are kept nonnegative by flipping the sign of the first factor.
        """
        factors = []
        weights = self.weights.copy()
        for n, f in enumerate(self.factors):
            f = f.copy()
            norms = np.linalg.norm(f, axis=0)
            safe = np.where(norms > 0, norms, 1.0)
            f /= safe
            weights *= norms
            factors.append(f)
        neg = weights < 0
        if np.any(neg):
            factors[0][:, neg] *= -1.0
            weights = np.abs(weights)
        return KruskalModel(factors, weights, normalized_convention=True)


def kruskal_reconstruct(model):
    """Dense tensor with entries sum_r w_r * prod_n factors[n][i_n, r]."""
    shape = model.shape
    if model.rank == 0:
        return np.zeros(shape)
    lead = model.factors[0] * model.weights
    if model.ndim == 1:
        return lead.sum(axis=1)
    kr = khatri_rao(model.factors[1:])
    return refold(lead @ kr.T, 0, shape)
