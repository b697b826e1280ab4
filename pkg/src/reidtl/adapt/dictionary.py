"""Graph-regularised dictionary learning.

Minimises ``||Y - D Z||_F^2 + lam * sum_ij W_ij ||z_i - z_j||^2`` subject to
``||d_k||_2 <= 1`` by alternating an exact Z-step and an atom-wise D-step,
so the objective never increases.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


@dataclass
class SolverStep:
    iteration: int
    half: str  # "Z" or "D"
    objective: float
    recon: float
    graph: float


@dataclass
class DictModel:
    D: np.ndarray  # d x K, unit-ball atoms
    Z: np.ndarray  # K x M codes
    W: np.ndarray  # M x M symmetric affinity
    lam: float
    history: list[SolverStep] = field(default_factory=list)

    @property
    def objective(self) -> float:
        return self.history[-1].objective if self.history else float("nan")

    def encode(self, Y: np.ndarray, ridge: float = 1e-8) -> np.ndarray:
        """Least-squares codes of new columns ``Y`` under the learned dictionary."""
        D = self.D
        return np.linalg.solve(D.T @ D + ridge * np.eye(D.shape[1]), D.T @ np.asarray(Y, dtype=np.float64))


def laplacian(W: np.ndarray) -> np.ndarray:
    return np.diag(W.sum(axis=1)) - W


def _check_symmetric(W: np.ndarray) -> None:
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"affinity must be square, got shape {W.shape}")
    if not np.allclose(W, W.T, rtol=0, atol=1e-12):
        raise ValueError("affinity matrix W must be symmetric")


def graph_penalty(Z: np.ndarray, W: np.ndarray) -> float:
    """sum_ij W_ij ||z_i - z_j||^2 over code columns, summed over both orderings."""
    Z = np.asarray(Z, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if Z.shape[1] != W.shape[0]:
        raise ValueError(f"Z has {Z.shape[1]} columns but W is {W.shape[0]} x {W.shape[1]}")
    _check_symmetric(W)
    total = 0.0
    for i in np.flatnonzero(W.any(axis=1)):
        diff = Z - Z[:, [i]]
        total += float(W[i] @ np.einsum("km,km->m", diff, diff))
    return total


def trace_penalty(Z: np.ndarray, L: np.ndarray) -> float:
    """2 tr(Z L Z^T), equal to graph_penalty for symmetric W."""
    return 2.0 * float(np.einsum("km,mn,kn->", Z, L, Z))


def edge_penalty(Z: np.ndarray, edges: tuple[np.ndarray, np.ndarray, np.ndarray]) -> float:
    """Graph term from an edge list (i, j, w) covering both orderings.

    Differencing codes before squaring avoids the cancellation the trace form
    suffers when codes are large.
    """
    i, j, w = edges
    diff = Z[:, i] - Z[:, j]
    return float(w @ np.einsum("km,km->m", diff, diff))


def edge_list(W: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    i, j = np.nonzero(W)
    return i, j, W[i, j]


def objective_terms(Y, D, Z, W, lam) -> tuple[float, float, float]:
    """(objective, reconstruction term, graph term); ``W`` is the affinity or its edge list."""
    r = Y - D @ Z
    recon = float(np.einsum("ij,ij->", r, r))
    edges = W if isinstance(W, tuple) else edge_list(W)
    graph = edge_penalty(Z, edges)
    return recon + lam * graph, recon, graph


class _ZSolver:
    """Exact minimiser of ||Y - DZ||^2 + 2 lam tr(Z L Z^T) over Z.

    Stationarity is the Sylvester equation D^T D Z + 2 lam Z L = D^T Y. In the
    (fixed) eigenbasis of L and the singular basis of D = P S Q^T it decouples
    into scalar equations with solution s / (s^2 + 2 lam mu). Working with the
    singular values of D instead of the eigenvalues of D^T D keeps small
    directions accurate. Directions where both s and mu vanish get zero
    (minimum-norm solution).
    """

    def __init__(self, L: np.ndarray, lam: float, rcond: float = 1e-13):
        self.mu, self.U = np.linalg.eigh(L)
        # the null space of L (one direction per connected component) must be exactly zero
        self.mu = np.where(self.mu > 1e-12 * max(float(self.mu.max(initial=0.0)), 1.0), self.mu, 0.0)
        self.lam = lam
        self.rcond = rcond

    def __call__(self, Y: np.ndarray, D: np.ndarray) -> np.ndarray:
        P, s, Qt = np.linalg.svd(D, full_matrices=False)
        s = np.where(s > self.rcond * max(float(s.max(initial=0.0)), 1e-300), s, 0.0)
        C = P.T @ Y @ self.U
        denom = s[:, None] ** 2 + 2.0 * self.lam * self.mu[None, :]
        gain = np.divide(s[:, None], denom, out=np.zeros_like(denom), where=denom > 0)
        return Qt.T @ (gain * C) @ self.U.T


def update_atoms(Y: np.ndarray, D: np.ndarray, Z: np.ndarray, sweeps: int = 1) -> np.ndarray:
    """Block-coordinate D-step: per atom, least squares given the others, then projection onto the unit ball.

    Each atom subproblem is an isotropic quadratic, so projecting its
    unconstrained minimiser is the exact constrained minimiser.
    """
    D = D.copy()
    R = Y - D @ Z
    for _ in range(sweeps):
        for k in range(D.shape[1]):
            zk = Z[k]
            nz = float(zk @ zk)
            if nz <= 0:
                continue
            R += np.outer(D[:, k], zk)
            c = R @ zk / nz
            norm = np.linalg.norm(c)
            D[:, k] = c / norm if norm > 1.0 else c
            R -= np.outer(D[:, k], zk)
    return D


def init_dictionary(Y: np.ndarray, k_atoms: int, seed: int = 0) -> np.ndarray:
    """``k_atoms`` distinct data columns chosen at random, scaled to unit norm."""
    rng = np.random.default_rng(seed)
    d, m = Y.shape
    idx = rng.choice(m, size=k_atoms, replace=k_atoms > m)
    D = Y[:, idx].astype(np.float64).copy()
    norms = np.linalg.norm(D, axis=0)
    dead = norms < 1e-12
    if dead.any():
        D[:, dead] = rng.standard_normal((d, int(dead.sum())))
        norms = np.linalg.norm(D, axis=0)
    return D / norms


def default_k_atoms(d_feat: int, m: int) -> int:
    return max(1, min(d_feat, m) // 2)


def solve_graph_dictionary(Y, W, lam: float, k_atoms: int | None = None, iters: int = 100,
                           tol: float = 1e-6, seed: int = 0, D_init: np.ndarray | None = None,
                           atom_sweeps: int = 1, check_monotone: bool = True) -> DictModel:
    """Alternating minimisation of the graph-regularised dictionary objective.

    ``Y`` is d x M (one column per image), ``W`` the M x M affinity. Runs at
    most ``iters`` (Z-step, D-step) rounds, stopping early once the relative
    objective change over a round falls below ``tol``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if Y.ndim != 2:
        raise ValueError(f"Y must be d x M, got shape {Y.shape}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("Y contains NaN or Inf")
    d, m = Y.shape
    if W.shape != (m, m):
        raise ValueError(f"W must be {m} x {m} to match Y, got {W.shape}")
    _check_symmetric(W)
    if np.any(W < 0):
        raise ValueError("affinity W must be nonnegative")
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    k_atoms = k_atoms or default_k_atoms(d, m)
    if k_atoms < 1:
        raise ValueError(f"k_atoms must be >= 1, got {k_atoms}")

    D = init_dictionary(Y, k_atoms, seed) if D_init is None else np.asarray(D_init, dtype=np.float64).copy()
    if D.shape != (d, k_atoms):
        raise ValueError(f"D_init must be {d} x {k_atoms}, got {D.shape}")
    norms = np.linalg.norm(D, axis=0)
    D = D / np.maximum(norms, 1.0)
    L = laplacian(W)
    edges = edge_list(W)
    z_step = _ZSolver(L, lam)
    history: list[SolverStep] = []

    def record(it, half, D, Z):
        f, rec, g = objective_terms(Y, D, Z, edges, lam)
        if not np.isfinite(f):
            raise SolverError(f"non-finite objective at iteration {it} ({half}-step)")
        if check_monotone and history:
            prev = history[-1].objective
            if f > prev + 1e-9 * max(abs(prev), 1.0):
                raise SolverError(f"objective increased at iteration {it} ({half}-step): {prev!r} -> {f!r}")
        history.append(SolverStep(it, half, f, rec, g))
        return f

    Z = z_step(Y, D)
    f_prev = record(0, "Z", D, Z)
    for it in range(1, iters + 1):
        D = update_atoms(Y, D, Z, sweeps=atom_sweeps)
        record(it, "D", D, Z)
        Z = z_step(Y, D)
        f = record(it, "Z", D, Z)
        if abs(f_prev - f) <= tol * max(abs(f_prev), 1e-300):
            break
        f_prev = f
    return DictModel(D, Z, W, lam, history)


def write_diagnostics(model: DictModel, path) -> Path:
    """CSV ``iter,objective,recon_term,graph_term``, one row per completed round."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iter", "objective", "recon_term", "graph_term"])
        for s in model.history:
            if s.half == "Z":
                w.writerow([s.iteration, repr(s.objective), repr(s.recon), repr(s.graph)])
    return path
