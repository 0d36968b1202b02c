"""Block eigensolver for the smallest eigenpairs of a symmetric operator.

Locally optimal block preconditioned conjugate gradient with the safeguards
of the robust variant: converged columns are soft-locked (kept in the
Rayleigh-Ritz basis but no longer expanded), the trial basis ``[X, W, P]`` is
explicitly orthonormalised before every Rayleigh-Ritz step, and directions that
become numerically dependent are dropped instead of poisoning the Gram matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

log = logging.getLogger(__name__)

Operator = Callable[[np.ndarray], np.ndarray]

_EPS = np.finfo(np.float64).eps


class BreakdownError(ArithmeticError):
    """The search space collapsed and cannot be repaired."""


class InvalidBlock(ValueError):
    pass


@dataclass
class LobpcgResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    iterations: int
    residual_norms: np.ndarray
    converged: bool


def _svqb(U: np.ndarray, drop_tol: float) -> np.ndarray:
    """Orthonormalise the columns of ``U`` via the scaled Gram eigensystem,
    discarding directions whose relative weight is below ``drop_tol``."""
    if U.shape[1] == 0:
        return U
    norms = np.linalg.norm(U, axis=0)
    keep = norms > 0
    U = U[:, keep] / norms[keep]
    if U.shape[1] == 0:
        return U
    G = U.T @ U
    theta, Z = np.linalg.eigh((G + G.T) / 2)
    good = theta > drop_tol * max(theta[-1], 1.0)
    return U @ (Z[:, good] / np.sqrt(theta[good]))


def _project_out(U: np.ndarray, Q: np.ndarray) -> np.ndarray:
    # classical Gram-Schmidt, applied twice
    for _ in range(2):
        U = U - Q @ (Q.T @ U)
    return U


def orthonormalize(U: np.ndarray, against: Optional[np.ndarray] = None, drop_tol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis for span(U) minus span(against); rank-deficient
    directions are removed."""
    if U.shape[1] == 0:
        return U
    before = np.linalg.norm(U, axis=0)
    if against is not None and against.shape[1]:
        U = _project_out(U, against)
        after = np.linalg.norm(U, axis=0)
        # columns that were (almost) inside span(against)
        U = U[:, after > 1e-10 * np.maximum(before, _EPS)]
    for _ in range(2):
        U = _svqb(U, drop_tol)
    if against is not None and against.shape[1] and U.shape[1]:
        U = _svqb(_project_out(U, against), drop_tol)
    return U


def _rayleigh_ritz(S: np.ndarray, AS: np.ndarray, k: int):
    G = S.T @ AS
    theta, C = np.linalg.eigh((G + G.T) / 2)
    return theta, C


def lobpcg(apply_A: Operator, n: int, k: int, X0: np.ndarray, tol: float = 1e-6, max_iter: int = 200,
           apply_M: Optional[Operator] = None) -> LobpcgResult:
    """Approximate the ``k`` smallest eigenpairs of the symmetric operator ``apply_A``.

    ``apply_A`` maps an ``n x b`` block to ``n x b``.  A pair counts as
    converged once ``||A x - lambda x||_2 <= tol``.  When ``max_iter`` runs out
    the current Ritz pairs are returned with ``converged=False``.
    """
    if not 1 <= k <= n:
        raise InvalidBlock(f"block size {k} must lie in [1, {n}]")
    X0 = np.asarray(X0, dtype=np.float64)
    if X0.shape != (n, k):
        raise InvalidBlock(f"initial block has shape {X0.shape}, expected {(n, k)}")
    sv = np.linalg.svd(X0, compute_uv=False)
    if not np.all(np.isfinite(sv)) or sv[-1] <= max(n, k) * _EPS * sv[0]:
        raise InvalidBlock("initial block is rank deficient")

    X = orthonormalize(X0)
    if X.shape[1] < k:
        raise InvalidBlock("initial block is numerically rank deficient")
    AX = apply_A(X)
    theta, C = _rayleigh_ritz(X, AX, k)
    X, AX, lam = X @ C, AX @ C, theta[:k]
    P = np.empty((n, 0))

    converged = False
    it = 0
    res = np.linalg.norm(AX - X * lam, axis=0)
    while it < max_iter:
        R = AX - X * lam
        res = np.linalg.norm(R, axis=0)
        if not np.all(np.isfinite(res)):
            raise BreakdownError(f"non-finite residual at iteration {it}")
        active = res > tol
        if not active.any():
            converged = True
            break
        it += 1

        W = R[:, active]
        if apply_M is not None:
            W = apply_M(W)
        W = orthonormalize(W, against=X)
        if P.shape[1]:
            P = orthonormalize(P[:, active] if P.shape[1] == k else P, against=np.hstack([X, W]))
        if W.shape[1] == 0 and P.shape[1] == 0:
            raise BreakdownError(f"search directions vanished at iteration {it} "
                                 f"with residuals up to {res.max():.3e}")

        S = np.hstack([X, W, P])
        AS = np.hstack([AX, apply_A(W), apply_A(P)]) if P.shape[1] else np.hstack([AX, apply_A(W)])
        theta, C = _rayleigh_ritz(S, AS, k)
        Ck = C[:, :k]
        X_new = S @ Ck
        AX_new = AS @ Ck
        # the implicit conjugate direction: the part of the update outside span(X)
        P = S[:, k:] @ Ck[k:, :]
        X, AX, lam = X_new, AX_new, theta[:k]

        # drift away from orthonormality is repaired by a fresh Rayleigh-Ritz
        gram_err = np.abs(X.T @ X - np.eye(k)).max()
        if gram_err > 1e-10:
            Q = orthonormalize(X)
            if Q.shape[1] < k:
                raise BreakdownError(f"Ritz block lost rank at iteration {it}")
            AQ = apply_A(Q)
            theta, C = _rayleigh_ritz(Q, AQ, k)
            X, AX, lam = Q @ C, AQ @ C, theta[:k]
            P = np.empty((n, 0))
    else:
        R = AX - X * lam
        res = np.linalg.norm(R, axis=0)
        converged = bool(np.all(res <= tol))
        if not converged:
            log.debug("lobpcg stopped after %d iterations, max residual %.3e", it, res.max())

    return LobpcgResult(lam.copy(), X, it, res, converged)
