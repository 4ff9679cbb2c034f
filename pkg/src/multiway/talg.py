"""Third-order tensor operator algebra built on the t-product.

The t-product multiplies I x J x K tensors facewise in the Fourier domain
along the third mode (a circular convolution over depth).  It carries
matrix notions over to order-3 tensors: transpose, identity, SVD (t-SVD)
and the tensor nuclear norm, plus the MatVec/tplz rearrangements used by
the connectivity estimators.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "matvec",
    "matvec_inverse",
    "tplz",
    "t_product",
    "t_transpose",
    "t_identity",
    "TSvdFactors",
    "t_svd",
    "tnn",
    "shrink_t_singular",
]

_IMAG_TOL = 1e-10


def _check_order3(x, name="tensor"):
    x = np.asarray(x)
    if x.ndim != 3:
        raise ValueError(f"{name} must be order-3, got order {x.ndim}")
    return x


def matvec(x):
    """Stack the frontal faces of an I x J x K tensor into an (I*K) x J matrix."""
    x = _check_order3(x)
    i, j, k = x.shape
    return np.moveaxis(x, 2, 0).reshape(i * k, j)


def matvec_inverse(mat, depth):
    """Undo :func:`matvec` given the original depth K."""
    mat = np.asarray(mat)
    ik, j = mat.shape
    if ik % depth:
        raise ValueError(f"row count {ik} not divisible by depth {depth}")
    return np.moveaxis(mat.reshape(depth, ik // depth, j), 0, 2)


def tplz(x):
    """Block-Toeplitz rearrangement of an order-3 tensor.

    Block (r, c) is face r-c for r >= c and the conjugate transpose of face
    c-r above the diagonal, as used for stacked-lag covariance tensors.
    """
    x = _check_order3(x)
    i, j, k = x.shape
    out = np.empty((i * k, j * k), dtype=x.dtype)
    for r in range(k):
        for c in range(k):
            if r >= c:
                block = x[:, :, r - c]
            else:
                block = x[:, :, c - r].conj().T
            out[r * i:(r + 1) * i, c * j:(c + 1) * j] = block
    return out


def _real_if_close(x, scale):
    resid = np.max(np.abs(x.imag)) if np.iscomplexobj(x) else 0.0
    if resid > _IMAG_TOL * max(scale, 1.0):
        raise ValueError(f"imaginary residue {resid:.3e} exceeds tolerance")
    return x.real if np.iscomplexobj(x) else x


def t_product(x, y):
    """t-product of X (I x J x K) with Y (J x L x K): facewise product in Fourier."""
    x = _check_order3(x, "left operand")
    y = _check_order3(y, "right operand")
    if x.shape[1] != y.shape[0]:
        raise ValueError(f"inner extent mismatch: {x.shape[1]} != {y.shape[0]}")
    if x.shape[2] != y.shape[2]:
        raise ValueError(f"depth mismatch: {x.shape[2]} != {y.shape[2]}")
    xf = np.fft.fft(x, axis=2)
    yf = np.fft.fft(y, axis=2)
    zf = np.einsum("ijk,jlk->ilk", xf, yf)
    z = np.fft.ifft(zf, axis=2)
    if np.iscomplexobj(x) or np.iscomplexobj(y):
        return z
    scale = float(np.max(np.abs(z))) if z.size else 1.0
    return _real_if_close(z, scale)


def t_transpose(x):
    """t-transpose: face 0 transposed; faces 1..K-1 transposed and reversed."""
    x = _check_order3(x)
    out = np.empty((x.shape[1], x.shape[0], x.shape[2]), dtype=x.dtype)
    out[:, :, 0] = x[:, :, 0].conj().T
    if x.shape[2] > 1:
        out[:, :, 1:] = np.conj(np.transpose(x[:, :, :0:-1], (1, 0, 2)))
    return out


def t_identity(n, depth, dtype=float):
    """t-identity: face 0 is the n x n identity, remaining faces zero."""
    e = np.zeros((n, n, depth), dtype=dtype)
    e[:, :, 0] = np.eye(n)
    return e


@dataclass
class TSvdFactors:
    """t-SVD factors: X = U *t D *t V^T with t-orthogonal U, V, f-diagonal D."""

    u: np.ndarray
    d: np.ndarray
    v: np.ndarray

    def reconstruct(self, rank=None):
        """Reconstruct, optionally truncated to the first `rank` t-singular tuples."""
        if rank is None:
            u, d, v = self.u, self.d, self.v
        else:
            u = self.u[:, :rank, :]
            d = self.d[:rank, :rank, :]
            v = self.v[:, :rank, :]
        return t_product(t_product(u, d), t_transpose(v))


def _face_svds(x):
    """SVD of each Fourier face, computed on the non-redundant half for real input."""
    x = _check_order3(x)
    i, j, k = x.shape
    xf = np.fft.fft(x, axis=2)
    r = min(i, j)
    uf = np.zeros((i, i, k), dtype=complex)
    sf = np.zeros((r, k))
    vf = np.zeros((j, j, k), dtype=complex)
    half = k // 2 + 1
    for f in range(half):
        u, s, vh = np.linalg.svd(xf[:, :, f])
        uf[:, :, f] = u
        sf[:, f] = s
        vf[:, :, f] = vh.conj().T
    for f in range(half, k):
        uf[:, :, f] = uf[:, :, k - f].conj()
        sf[:, f] = sf[:, k - f]
        vf[:, :, f] = vf[:, :, k - f].conj()
    return uf, sf, vf


def t_svd(x):
    """t-SVD of a real order-3 tensor."""
    x = _check_order3(x)
    i, j, k = x.shape
    uf, sf, vf = _face_svds(x)
    df = np.zeros((i, j, k), dtype=complex)
    r = min(i, j)
    df[np.arange(r), np.arange(r), :] = sf
    scale = float(np.max(np.abs(x))) if x.size else 1.0
    u = _real_if_close(np.fft.ifft(uf, axis=2), 1.0)
    d = _real_if_close(np.fft.ifft(df, axis=2), scale)
    v = _real_if_close(np.fft.ifft(vf, axis=2), 1.0)
    return TSvdFactors(u, d, v)


def tnn(x):
    """Tensor nuclear norm: sum of the diagonal entries of the spatial-domain D."""
    factors = t_svd(np.asarray(x, dtype=float))
    r = min(factors.d.shape[0], factors.d.shape[1])
    return float(np.sum(factors.d[np.arange(r), np.arange(r), :]))


def shrink_t_singular(x, lam):
    """Soft-threshold every Fourier-domain t-singular value by `lam`.

    Proximal map of the tensor-nuclear-norm penalty; lam = 0 returns the
    input (up to roundoff) and lam above the largest t-singular value
    returns the zero tensor.
    """
    if lam < 0:
        raise ValueError(f"shrinkage threshold must be nonnegative, got {lam}")
    x = _check_order3(np.asarray(x, dtype=float))
    i, j, k = x.shape
    uf, sf, vf = _face_svds(x)
    shrunk = np.maximum(sf - lam, 0.0)
    r = min(i, j)
    zf = np.einsum("irk,rk,jrk->ijk", uf[:, :r, :], shrunk, vf[:, :r, :].conj())
    scale = float(np.max(np.abs(x))) if x.size else 1.0
    return _real_if_close(np.fft.ifft(zf, axis=2), scale)
