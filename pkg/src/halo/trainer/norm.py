"""Row-wise RMSNorm in the unit-norm form ``f(x) = x / ||x||`` and its exact backward."""

from __future__ import annotations

import numpy as np

from .. import hadamard as had


def _norms(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("RMSNorm is undefined for a zero row")
    return n


def rmsnorm_forward(x, gain=None) -> np.ndarray:
    """Normalize each row to unit length, then scale by ``gain`` if given."""
    x = np.asarray(x)
    y = x / _norms(x)
    if gain is not None:
        y = y * gain
    return y


def rmsnorm_backward(x, e, gain=None):
    """Vector-Jacobian product of :func:`rmsnorm_forward`.

    Returns ``(dx, dgain)``; ``dgain`` is None without a gain.  Per row,
    ``dx = (e - x (x.e) / ||x||^2) / ||x||`` with ``e`` already multiplied
    through the gain.
    """
    x = np.asarray(x)
    e = np.asarray(e)
    n = _norms(x)
    dgain = None
    if gain is not None:
        dgain = np.sum(e * (x / n), axis=tuple(range(e.ndim - 1)))
        e = e * gain
    proj = np.sum(x * e, axis=-1, keepdims=True) / (n * n)
    return (e - x * proj) / n, dgain


def rmsnorm_jacobian(x) -> np.ndarray:
    """Dense Jacobian ``(I - x x^T / ||x||^2) / ||x||`` for one vector."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    n = np.linalg.norm(x)
    if n == 0:
        raise ValueError("RMSNorm is undefined for a zero vector")
    return (np.eye(x.size) - np.outer(x, x) / n**2) / n


def distributivity_probe(seed, dim: int = 64, Q=None) -> dict:
    """Check whether RMSNorm and its derivative commute with an orthogonal ``Q``.

    Row-vector convention, with ``Q`` the normalized Hadamard of size
    ``dim`` unless given:

    forward_gap      ||f(xQ) - f(x) Q||
    backward_gap     ||J(xQ) - J(x) Q||_F   (the derivative itself does not distribute)
    equivariant_gap  ||(eQ) J(xQ) - (e J(x)) Q||   (error rotated along with x; zero in exact arithmetic)
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dim)
    e = rng.standard_normal(dim)
    if Q is None:
        Q = had.dense_matrix(had.build_spec(dim))
    Q = np.asarray(Q, dtype=np.float64)
    xq = x @ Q
    fwd = np.linalg.norm(rmsnorm_forward(xq) - rmsnorm_forward(x) @ Q)
    jx = rmsnorm_jacobian(x)
    jxq = rmsnorm_jacobian(xq)
    bwd = np.linalg.norm(jxq - jx @ Q)
    equi = np.linalg.norm((e @ Q) @ jxq - (e @ jx) @ Q)
    return {"forward_gap": float(fwd), "backward_gap": float(bwd), "equivariant_gap": float(equi)}
