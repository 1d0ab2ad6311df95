"""Classical baselines: ART (relaxed Kaczmarz) and StOMP."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import nnls


@dataclass
class SolverConfig:
    method: str = "art"
    iters: int = 10_000
    param: float = 0.001
    nonneg: bool = True
    damping: float = 0.0

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in ("art", "stomp"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.method == "art" and not 0 < self.param < 2:
            raise ValueError("ART relaxation must lie in (0, 2)")
        if self.method == "stomp" and not 0 < self.param <= 1:
            raise ValueError("StOMP threshold must lie in (0, 1]")
        if self.damping < 0:
            raise ValueError("damping must be non-negative")

    @classmethod
    def art(cls, iters: int = 10_000, relax: float = 0.001, **kw) -> "SolverConfig":
        return cls("art", iters, relax, **kw)

    @classmethod
    def stomp(cls, iters: int = 20, threshold: float = 0.8, **kw) -> "SolverConfig":
        return cls("stomp", iters, threshold, **kw)


@dataclass
class SolverResult:
    x: np.ndarray
    residuals: list = field(default_factory=list)
    support: np.ndarray | None = None
    notes: list[str] = field(default_factory=list)


def _as_dense(W) -> np.ndarray:
    W = getattr(W, "matrix", W)
    return W.toarray() if sp.issparse(W) else np.asarray(W, dtype=float)


def _measurement_values(phi) -> np.ndarray:
    return np.asarray(getattr(phi, "values", phi), dtype=float)


def art_reconstruct(W, phi, cfg: SolverConfig = None) -> SolverResult:
    """Relaxed Kaczmarz sweeps from x = 0 with a fixed row order.

    ``phi`` may hold several right-hand sides as columns; they are
    reconstructed independently (the result has one column each).

    A sweep is evaluated in block form: with ``G = W W^T`` and ``L`` its strict
    lower triangle, the row increments ``delta`` of one sweep solve
    ``(diag(G)/relax + L) delta = phi - W x``, after which ``x += W^T delta``.
    This is algebraically the row-by-row update, see :func:`art_rowwise`.
    With ``cfg.damping > 0`` each row is augmented by ``sqrt(damping) e_i``
    (Tikhonov-regularized ART).
    """
    cfg = cfg or SolverConfig.art()
    A = _as_dense(W)
    n_cols = A.shape[1]
    b = _measurement_values(phi)
    if b.shape[0] != A.shape[0]:
        raise ValueError(f"measurement length {b.shape[0]} does not match W rows {A.shape[0]}")
    if not np.any(A):
        raise ValueError("weight matrix is all zero")
    single = b.ndim == 1
    b = b.reshape(A.shape[0], -1)
    # zero columns never move under row updates; zero rows are skipped
    cols = np.flatnonzero(np.any(A != 0, axis=0))
    rows = np.flatnonzero(np.any(A != 0, axis=1))
    A = A[np.ix_(rows, cols)]
    b = b[rows]
    gram = A @ A.T
    gram[np.diag_indices_from(gram)] += cfg.damping
    sweep_matrix = np.tril(gram, -1)
    sweep_matrix[np.diag_indices_from(sweep_matrix)] = np.diag(gram) / cfg.param
    root_damp = np.sqrt(cfg.damping)
    x = np.zeros((A.shape[1], b.shape[1]))
    aux = np.zeros_like(b)
    bnorm = np.linalg.norm(b, axis=0)
    bnorm[bnorm == 0] = 1.0
    residuals = []
    for _ in range(cfg.iters):
        r = b - A @ x - root_damp * aux
        delta = sla.solve_triangular(sweep_matrix, r, lower=True, check_finite=False)
        x += A.T @ delta
        aux += root_damp * delta
        if cfg.nonneg:
            np.maximum(x, 0.0, out=x)
    residuals.append(np.linalg.norm(b - A @ x, axis=0) / bnorm)
    full = np.zeros((n_cols, b.shape[1]))
    full[cols] = x
    return SolverResult(full[:, 0] if single else full, residuals)


def art_rowwise(W, phi, cfg: SolverConfig) -> np.ndarray:
    """Literal row-action ART, one row at a time. Slow; reference for tests."""
    A = _as_dense(W)
    b = _measurement_values(phi)
    x = np.zeros(A.shape[1])
    aux = np.zeros(A.shape[0])
    norms = np.einsum("ij,ij->i", A, A) + cfg.damping
    root_damp = np.sqrt(cfg.damping)
    for _ in range(cfg.iters):
        for i in range(A.shape[0]):
            if not np.any(A[i]):
                continue
            step = cfg.param * (b[i] - A[i] @ x - root_damp * aux[i]) / norms[i]
            x += step * A[i]
            aux[i] += step * root_damp
        if cfg.nonneg:
            np.maximum(x, 0.0, out=x)
    return x


def stomp_reconstruct(W, phi, cfg: SolverConfig = None, tol: float = 1e-10) -> SolverResult:
    """Stagewise orthogonal matching pursuit with a fraction-of-max gate.

    Each stage adds every column whose normalized correlation with the
    residual reaches ``threshold * max|c|``, then refits by least squares on
    the whole support. With ``nonneg`` a refit that goes negative is redone
    as non-negative least squares.
    """
    cfg = cfg or SolverConfig.stomp()
    A = _as_dense(W)
    b = _measurement_values(phi).ravel()
    if b.shape[0] != A.shape[0]:
        raise ValueError(f"measurement length {b.shape[0]} does not match W rows {A.shape[0]}")
    norms = np.linalg.norm(A, axis=0)
    usable = norms > 0
    inv_norm = np.divide(1.0, norms, out=np.zeros_like(norms), where=usable)
    x = np.zeros(A.shape[1])
    support = np.zeros(A.shape[1], dtype=bool)
    r = b.copy()
    residuals = [float(np.linalg.norm(r))]
    notes = []
    for stage in range(cfg.iters):
        if residuals[-1] < tol:
            break
        c = np.abs(A.T @ r) * inv_norm
        peak = c.max()
        if peak == 0:
            break
        new = (c >= cfg.param * peak) & ~support & usable
        if not new.any():
            break
        support |= new
        idx = np.flatnonzero(support)
        coef, _, rank, _ = np.linalg.lstsq(A[:, idx], b, rcond=None)
        if rank < len(idx):
            msg = f"stage {stage}: rank {rank} < support size {len(idx)}, using minimum-norm solution"
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            notes.append(msg)
        if cfg.nonneg and np.any(coef < 0):
            # plain clamping can raise the residual; NNLS on the support cannot
            coef, _ = nnls(A[:, idx], b)
        x[:] = 0.0
        x[idx] = coef
        r = b - A[:, idx] @ coef
        residuals.append(float(np.linalg.norm(r)))
    return SolverResult(x, residuals, np.flatnonzero(support), notes)


def reconstruct(W, phi, cfg: SolverConfig) -> SolverResult:
    if cfg.method == "art":
        return art_reconstruct(W, phi, cfg)
    return stomp_reconstruct(W, phi, cfg)
