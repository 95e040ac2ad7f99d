"""Krylov and preconditioning kernels for the split-basis systems.

Provides preconditioned conjugate gradients with the preconditioned-residual
stopping rule, symmetric Gauss-Seidel sweeps, a geometric multigrid V-cycle
built on the nested mesh hierarchy, the four preconditioners used in the
solver studies, and eigenvalue/condition diagnostics (dense or Lanczos).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import MeshHierarchy
from .space import FICTITIOUS

KIND_SGS = "SGS"
KIND_BLOCK_EXACT = "BlockExact"
KIND_BLOCK_DIAG_SGS = "BlockDiagSGS"
KIND_BLOCK_MG_SGS = "BlockMGSGS"
PRECONDITIONER_KINDS = (KIND_SGS, KIND_BLOCK_EXACT, KIND_BLOCK_DIAG_SGS,
                        KIND_BLOCK_MG_SGS)


@dataclass
class SolveReport:
    """Outcome of one PCG run.

    residuals holds the preconditioned residual norms relative to the
    starting one (first entry 1.0, one entry per iteration thereafter).
    """

    iterations: int
    residuals: np.ndarray
    converged: bool
    preconditioner: str
    tol: float
    seconds: float
    level: int | None = None
    delta: float | None = None
    kappa: float | None = None
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "preconditioner": self.preconditioner,
            "tol": self.tol,
            "seconds": self.seconds,
            "level": self.level,
            "delta": self.delta,
            "kappa": self.kappa,
        }


class IdentityPreconditioner:
    kind = "Identity"

    def apply(self, r: np.ndarray) -> np.ndarray:
        return r.copy()


class DirectSolve:
    """Exact solve through a sparse LU factorization."""

    kind = "Direct"

    def __init__(self, M: sp.spmatrix):
        try:
            self._lu = spla.splu(sp.csc_matrix(M))
        except RuntimeError as exc:  # singular factor
            raise ValueError(f"factorization failed: {exc}") from exc

    def apply(self, r: np.ndarray) -> np.ndarray:
        return self._lu.solve(r)


class SymmetricGaussSeidel:
    """Symmetric Gauss-Seidel sweeps in natural dof order.

    One application performs `sweeps` iterations of the stationary method
    with the splitting M = (D+L) D^{-1} (D+U); a single sweep is the
    classical forward+backward substitution pair.
    """

    kind = KIND_SGS

    def __init__(self, M: sp.spmatrix, sweeps: int = 1):
        if sweeps < 1:
            raise ValueError("sweep count must be positive")
        csr = sp.csr_matrix(M)
        d = csr.diagonal().copy()
        if np.any(d == 0.0):
            raise ValueError("zero diagonal entry")
        self._d = d
        self._lower = sp.tril(csr).tocsr()
        self._upper = sp.triu(csr).tocsr()
        self._M = csr
        self.sweeps = int(sweeps)

    def _sweep(self, r: np.ndarray) -> np.ndarray:
        y = spla.spsolve_triangular(self._lower, r, lower=True)
        return spla.spsolve_triangular(self._upper, self._d * y, lower=False)

    def apply(self, r: np.ndarray) -> np.ndarray:
        x = self._sweep(r)
        for _ in range(self.sweeps - 1):
            x += self._sweep(r - self._M @ x)
        return x


def sgs_apply(M: sp.spmatrix, r: np.ndarray) -> np.ndarray:
    """One symmetric Gauss-Seidel sweep applied to r."""
    return SymmetricGaussSeidel(M).apply(r)


def pcg(A: sp.spmatrix, b: np.ndarray, precond=None, tol: float = 1e-6,
        max_iter: int = 1000, level: int | None = None,
        delta: float | None = None):
    """Preconditioned conjugate gradients started from zero.

    Stops when the Euclidean norm of the preconditioned residual z_k =
    P^{-1}(b - A x_k) has dropped below tol times its starting value; z_k
    is exactly the vector the iteration computes, so the rule costs nothing
    extra.  Raises if the preconditioner loses positive definiteness or the
    budget is exhausted.
    """
    if precond is None:
        precond = IdentityPreconditioner()
    start = time.perf_counter()
    x = np.zeros_like(b, dtype=float)
    r = np.asarray(b, dtype=float).copy()
    z = precond.apply(r)
    rz = float(r @ z)
    norm0 = float(np.linalg.norm(z))
    history = [1.0]

    def report(k, converged):
        return SolveReport(iterations=k, residuals=np.array(history),
                           converged=converged,
                           preconditioner=getattr(precond, "kind", "custom"),
                           tol=tol, seconds=time.perf_counter() - start,
                           level=level, delta=delta)

    if norm0 == 0.0:
        return x, report(0, True)
    if rz <= 0.0:
        raise ValueError("preconditioner is not positive definite")
    p = z.copy()
    for k in range(1, max_iter + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise ValueError("system matrix is not positive definite")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = precond.apply(r)
        history.append(float(np.linalg.norm(z)) / norm0)
        if history[-1] <= tol:
            return x, report(k, True)
        rz_new = float(r @ z)
        if rz_new <= 0.0:
            raise ValueError("preconditioner is not positive definite")
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise RuntimeError(f"no convergence within {max_iter} iterations "
                       f"(last relative residual {history[-1]:.3e})")


def build_prolongations(hierarchy: MeshHierarchy, active_sets) -> list:
    """Nested P1 interpolation operators restricted to active vertex sets.

    active_sets[k] lists the active (sorted) vertex ids of level k; the dof
    ordering of each level is the listed order.  Copied vertices map with
    weight one, edge midpoints with one half per active parent; inactive
    parents are dropped (their value is zero by elimination).
    """
    if len(active_sets) != len(hierarchy.levels):
        raise ValueError("one active set per level required")
    prols = []
    for k, maps in enumerate(hierarchy.maps):
        coarse, fine = hierarchy.levels[k], hierarchy.levels[k + 1]
        cidx = np.full(coarse.n_vertices, -1, dtype=np.int64)
        cidx[active_sets[k]] = np.arange(len(active_sets[k]))
        fidx = np.full(fine.n_vertices, -1, dtype=np.int64)
        fidx[active_sets[k + 1]] = np.arange(len(active_sets[k + 1]))

        rows, cols, vals = [], [], []
        copied = np.asarray(active_sets[k])
        ok = fidx[copied] >= 0
        rows.append(fidx[copied[ok]])
        cols.append(cidx[copied[ok]])
        vals.append(np.ones(ok.sum()))

        mid_ids = coarse.n_vertices + np.arange(maps.midpoint_parents.shape[0])
        for side in (0, 1):
            parents = maps.midpoint_parents[:, side]
            ok = (fidx[mid_ids] >= 0) & (cidx[parents] >= 0)
            rows.append(fidx[mid_ids[ok]])
            cols.append(cidx[parents[ok]])
            vals.append(np.full(ok.sum(), 0.5))

        P = sp.coo_matrix(
            (np.concatenate(vals),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(active_sets[k + 1]), len(active_sets[k]))).tocsr()
        prols.append(P)
    return prols


class GeometricMultigrid:
    """V(1,1)-cycle preconditioner with symmetric Gauss-Seidel smoothing.

    Coarse operators come from Galerkin triple products of the fine matrix;
    the coarsest level is solved directly.  One application runs `cycles`
    V-cycles as a stationary iteration from zero; with the symmetric
    smoother this composition is symmetric positive definite.  With no
    prolongations the apply degenerates to a direct solve.
    """

    kind = "MG"

    def __init__(self, A_fine: sp.spmatrix, prolongations, cycles: int = 3):
        if cycles < 1:
            raise ValueError("cycle count must be positive")
        self.cycles = int(cycles)
        ops = [sp.csr_matrix(A_fine)]
        for P in reversed(list(prolongations)):
            ops.append((P.T @ ops[-1] @ P).tocsr())
        self.operators = ops[::-1]  # coarsest first
        self._prols = list(prolongations)
        self._smoothers = [SymmetricGaussSeidel(A) for A in self.operators[1:]]
        self._coarse = DirectSolve(self.operators[0])

    @property
    def n_levels(self) -> int:
        return len(self.operators)

    def _vcycle(self, level: int, b: np.ndarray) -> np.ndarray:
        if level == 0:
            return self._coarse.apply(b)
        A = self.operators[level]
        smooth = self._smoothers[level - 1]
        P = self._prols[level - 1]
        x = smooth.apply(b)
        x += P @ self._vcycle(level - 1, P.T @ (b - A @ x))
        x += smooth.apply(b - A @ x)
        return x

    def apply(self, r: np.ndarray) -> np.ndarray:
        top = self.n_levels - 1
        x = self._vcycle(top, r)
        for _ in range(self.cycles - 1):
            x += self._vcycle(top, r - self.operators[-1] @ x)
        return x


def build_mg_hierarchy(A_fine: sp.spmatrix, hierarchy: MeshHierarchy,
                       active_sets, cycles: int = 3) -> GeometricMultigrid:
    """Multigrid operator for the fine matrix on the given vertex sets."""
    return GeometricMultigrid(A_fine, build_prolongations(hierarchy,
                                                          active_sets),
                              cycles=cycles)


class BlockPreconditioner:
    """Additive block preconditioner acting separately on the two blocks."""

    def __init__(self, kind: str, solve0, solve1, n0: int):
        self.kind = kind
        self._solve0 = solve0
        self._solve1 = solve1
        self._n0 = n0

    def apply(self, r: np.ndarray) -> np.ndarray:
        z = np.empty_like(r)
        z[:self._n0] = self._solve0.apply(r[:self._n0])
        z[self._n0:] = self._solve1.apply(r[self._n0:])
        return z


@dataclass(frozen=True)
class PreconditionerSettings:
    """Inner-solve settings; strip_sweeps None defers to the problem kind
    (two sweeps for the interface studies, three for fictitious domain;
    a single sweep leaves the strip solve too loose for the hardest cut
    positions and costs an extra outer iteration there)."""

    mg_cycles: int = 3
    strip_sweeps: int | None = None


def make_preconditioner(kind: str, tsys, hierarchy: MeshHierarchy = None,
                        active_sets=None,
                        settings: PreconditionerSettings = None):
    """Construct one of the study preconditioners for a transformed system."""
    if settings is None:
        settings = PreconditionerSettings()
    if kind not in PRECONDITIONER_KINDS:
        raise ValueError(f"unknown preconditioner kind {kind!r}")
    if kind == KIND_SGS:
        return SymmetricGaussSeidel(tsys.Ahat)
    sweeps = settings.strip_sweeps
    if sweeps is None:
        sweeps = 3 if tsys.layout.problem == FICTITIOUS else 2
    n0 = tsys.A0.shape[0]
    if kind == KIND_BLOCK_EXACT:
        return BlockPreconditioner(kind, DirectSolve(tsys.A0),
                                   DirectSolve(tsys.A1), n0)
    strip = SymmetricGaussSeidel(tsys.A1, sweeps=sweeps)
    if kind == KIND_BLOCK_DIAG_SGS:
        return BlockPreconditioner(kind, DirectSolve(tsys.A0), strip, n0)
    if hierarchy is None or active_sets is None:
        raise ValueError("multigrid preconditioner needs the mesh hierarchy "
                         "and active dof sets")
    mg = build_mg_hierarchy(tsys.A0, hierarchy, active_sets,
                            cycles=settings.mg_cycles)
    return BlockPreconditioner(kind, mg, strip, n0)


@dataclass
class ConditionEstimate:
    lam_min: float
    lam_max: float
    kappa: float
    converged: bool
    method: str


def _dense_extremes(A, B=None):
    Ad = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    if B is None:
        ev = np.linalg.eigvalsh(Ad)
    else:
        Bd = B.toarray() if sp.issparse(B) else np.asarray(B, dtype=float)
        ev = sla.eigh(Ad, Bd, eigvals_only=True)
    return float(ev[0]), float(ev[-1])


def _lanczos_extremes(A, B, budget, seed, rtol=1e-9):
    """Extreme eigenvalues of B^{-1}A by Lanczos in the B inner product
    with full reorthogonalization.  B=None means the identity."""
    n = A.shape[0]
    if budget is None:
        budget = min(5 * n, 2000)
    budget = min(budget, n)
    binv = DirectSolve(B) if B is not None else None
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    bv = B @ v if B is not None else v
    nrm = np.sqrt(v @ bv)
    v, bv = v / nrm, bv / nrm
    basis = [v]
    bbasis = [bv]
    alphas, betas = [], []
    prev = None
    converged = False
    for j in range(budget):
        av = A @ basis[-1]
        w = binv.apply(av) if binv is not None else av.copy()
        alphas.append(float(av @ basis[-1]))
        # full reorthogonalization in the B inner product
        for vec, bvec in zip(basis, bbasis):
            w -= (w @ bvec) * vec
        for vec, bvec in zip(basis, bbasis):
            w -= (w @ bvec) * vec
        bw = B @ w if B is not None else w
        beta = float(np.sqrt(max(w @ bw, 0.0)))
        if len(alphas) >= 2 or beta <= 1e-14:
            t = sla.eigh_tridiagonal(np.array(alphas), np.array(betas),
                                     eigvals_only=True) \
                if betas else np.array(alphas)
            lo, hi = float(t[0]), float(t[-1])
            if prev is not None and beta > 1e-14:
                dlo = abs(lo - prev[0]) / max(abs(lo), 1e-300)
                dhi = abs(hi - prev[1]) / max(abs(hi), 1e-300)
                if max(dlo, dhi) < rtol:
                    converged = True
                    break
            prev = (lo, hi)
        if beta <= 1e-14:  # invariant subspace exhausted: exact extremes
            converged = True
            break
        betas.append(beta)
        v = w / beta
        basis.append(v)
        bbasis.append(bw / beta if B is not None else v)
    if len(alphas) == n:
        converged = True
    # the trailing beta couples to the dropped next vector; T_k keeps k-1
    betas = betas[:len(alphas) - 1]
    t = sla.eigh_tridiagonal(np.array(alphas), np.array(betas),
                             eigvals_only=True) if betas else np.array(alphas)
    return float(t[0]), float(t[-1]), converged


def estimate_condition(A, B=None, method: str = "auto", budget: int = None,
                       seed: int = 0, dense_limit: int = 3000
                       ) -> ConditionEstimate:
    """Extreme eigenvalues and condition number of A, or of the pencil
    (A, B) when B is given (i.e. of B^{-1}A with both operators SPD).

    method "auto" uses a dense solve up to dense_limit unknowns and Lanczos
    with full reorthogonalization beyond; "dense"/"lanczos" force the path.
    A non-converged Lanczos result is a lower bound on kappa and is flagged.
    """
    if method not in ("auto", "dense", "lanczos"):
        raise ValueError(f"unknown method {method!r}")
    n = A.shape[0]
    if method == "auto":
        method = "dense" if n <= dense_limit else "lanczos"
    if method == "dense":
        lo, hi = _dense_extremes(A, B)
        converged = True
    else:
        lo, hi, converged = _lanczos_extremes(A, B, budget, seed)
    if lo <= 0.0:
        raise ValueError("operator is not positive definite "
                         f"(smallest eigenvalue {lo:.3e})")
    return ConditionEstimate(lam_min=lo, lam_max=hi, kappa=hi / lo,
                             converged=converged, method=method)
