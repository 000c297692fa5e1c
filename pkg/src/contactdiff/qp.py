"""Friction-cone constrained least squares over candidate contact points.

Each cone is parameterized by its edges, ``F_i = E_i^T lam_i`` with
``lam_i >= 0``, which turns the problem into non-negative least squares over
the stacked edge weights.  The solver is the Lawson-Hanson active-set method.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .physics import DEFAULT_EDGES, DEFAULT_MU, FrictionCone, build_cone, contact_matrix
from .robot import RobotModel, batch_nearest_surface, link_frames

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QpCandidate:
    point: np.ndarray
    link_index: int
    cone: FrictionCone


@dataclass
class QpProblem:
    measurement: np.ndarray
    candidates: list[QpCandidate]
    matrices: list[np.ndarray]
    n_q: int

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("at least one candidate is required")
        m = self.n_q + 6
        self.measurement = np.asarray(self.measurement, dtype=float)
        if self.measurement.shape != (m,):
            raise ValueError(f"measurement must have {m} entries")
        if len(self.matrices) != len(self.candidates):
            raise ValueError("one contact matrix per candidate is required")
        for A in self.matrices:
            if A.shape != (m, 3):
                raise ValueError(f"contact matrix must be ({m}, 3), got {A.shape}")

    def design_matrix(self) -> np.ndarray:
        return np.hstack([A @ c.cone.edges.T for A, c in zip(self.matrices, self.candidates)])


@dataclass
class QpSolution:
    forces: np.ndarray
    w_star: np.ndarray
    residual: float
    jts_err: float
    base_f_err: float
    base_t_err: float
    weights: np.ndarray = field(repr=False)
    kkt_residual: float = 0.0
    iterations: int = 0
    converged: bool = True


def build_problem(model: RobotModel, q, measurement, candidates: list[QpCandidate]) -> QpProblem:
    mats = [contact_matrix(model, q, c.point, c.link_index) for c in candidates]
    return QpProblem(np.asarray(measurement, dtype=float), list(candidates), mats, model.n_q)


def nnls(M: np.ndarray, b: np.ndarray, max_iter: int | None = None, tol: float | None = None):
    """Lawson-Hanson NNLS.  Returns ``(x, converged, iterations)``.

    On hitting ``max_iter`` the best feasible iterate so far is returned with
    ``converged=False``.
    """
    m, n = M.shape
    if max_iter is None:
        max_iter = 3 * n + 30
    if tol is None:
        tol = 10.0 * np.finfo(float).eps * max(np.abs(M).sum(axis=0).max(initial=0.0), 1.0) * max(m, n)
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    w = M.T @ (b - M @ x)
    it = 0
    while (~passive).any() and np.max(np.where(passive, -np.inf, w)) > tol:
        if it >= max_iter:
            return x, False, it
        j = int(np.argmax(np.where(passive, -np.inf, w)))
        passive[j] = True
        s = _restricted_lstsq(M, b, passive)
        while np.any(s[passive] <= tol):
            it += 1
            if it >= max_iter:
                return x, False, it
            neg = passive & (s <= tol)
            alpha = np.min(x[neg] / np.maximum(x[neg] - s[neg], 1e-300))
            x = x + alpha * (s - x)
            passive &= x > tol
            x[~passive] = 0.0
            if not passive.any():
                s = np.zeros(n)
                break
            s = _restricted_lstsq(M, b, passive)
        x = s
        x[~passive] = 0.0
        w = M.T @ (b - M @ x)
        it += 1
    return x, True, it


def _restricted_lstsq(M, b, passive):
    s = np.zeros(M.shape[1])
    s[passive] = np.linalg.lstsq(M[:, passive], b, rcond=None)[0]
    return s


def kkt_residual(M: np.ndarray, b: np.ndarray, x: np.ndarray) -> float:
    """Natural residual ``max |min(x, grad)|`` of the NNLS optimality conditions."""
    grad = M.T @ (M @ x - b)
    return float(np.max(np.abs(np.minimum(x, grad))))


def _split_errors(diff: np.ndarray, n_q: int):
    return (
        float(np.linalg.norm(diff[:n_q])),
        float(np.linalg.norm(diff[n_q : n_q + 3])),
        float(np.linalg.norm(diff[n_q + 3 :])),
    )


def solve_qp(problem: QpProblem, max_iter: int | None = None) -> QpSolution:
    M = problem.design_matrix()
    b = problem.measurement
    lam, converged, iters = nnls(M, b, max_iter=max_iter)
    if not converged:
        log.warning("NNLS stopped after %d iterations without convergence", iters)
    forces = []
    offset = 0
    for c in problem.candidates:
        m_e = c.cone.edges.shape[0]
        forces.append(c.cone.edges.T @ lam[offset : offset + m_e])
        offset += m_e
    w_star = M @ lam
    diff = b - w_star
    jts, bf, bt = _split_errors(diff, problem.n_q)
    return QpSolution(
        forces=np.array(forces),
        w_star=w_star,
        residual=float(np.linalg.norm(diff)),
        jts_err=jts,
        base_f_err=bf,
        base_t_err=bt,
        weights=lam,
        kkt_residual=kkt_residual(M, b, lam),
        iterations=iters,
        converged=converged,
    )


def surface_candidates(model: RobotModel, q, points, mu: float = DEFAULT_MU, m_e: int = DEFAULT_EDGES):
    """Snap points to the nearest link surface and attach the local friction cone."""
    R, p = link_frames(model, q)
    pts, normals, links, _ = batch_nearest_surface(model, R, p, np.asarray(points, dtype=float).reshape(-1, 3))
    return [QpCandidate(pts[i], int(links[i]), build_cone(normals[i], mu, m_e, apex=pts[i])) for i in range(len(pts))]


def qp_error(measurement, candidate_points, model: RobotModel, q, mu: float = DEFAULT_MU, m_e: int = DEFAULT_EDGES) -> QpSolution:
    """QP fit of a measurement with forces allowed at every candidate point at once."""
    cands = surface_candidates(model, q, candidate_points, mu, m_e)
    return solve_qp(build_problem(model, q, measurement, cands))


def qp_error_centers(measurement, candidate_points, n_c: int, model: RobotModel, q, seed: int = 0,
                     mu: float = DEFAULT_MU, m_e: int = DEFAULT_EDGES) -> QpSolution:
    """QP fit restricted to the ``n_c`` k-means centers of the candidate points."""
    from .metrics import kmeans

    centers, _, _ = kmeans(np.asarray(candidate_points, dtype=float), n_c, seed=seed)
    return qp_error(measurement, centers, model, q, mu, m_e)


# ---------------------------------------------------------------------------
# batched single-candidate solver


def _face_sets(m_e: int, mu: float):
    if mu == 0:
        return [(0,)]
    faces = [tuple(range(m_e))]
    faces += [(j, (j + 1) % m_e) for j in range(m_e)]
    faces += [(j,) for j in range(m_e)]
    return faces


def solve_single_batch(A: np.ndarray, edges: np.ndarray, b: np.ndarray, mu: float):
    """Exact optimum of many independent one-candidate cone QPs.

    Args:
        A: (N, m, 3) contact matrices.
        edges: (N, m_e, 3) cone edges, cyclically ordered.
        b: (m,) measurement.

    Every face of a pointed polyhedral cone in 3-D is the origin, a ray, a
    2-D facet between neighbouring edges, or the full cone.  The optimum is
    the least-squares solution on the span of one of these faces that stays
    feasible, so enumerating them gives the global minimum.

    Returns (squared residuals (N,), forces (N, 3)).
    """
    N, m, _ = A.shape
    m_e = edges.shape[1]
    best = np.full(N, float(b @ b))
    best_F = np.zeros((N, 3))
    for face in _face_sets(m_e, mu):
        if len(face) == m_e:
            # interior: unconstrained force, then test facet membership
            G = np.einsum("nmi,nmj->nij", A, A)
            rhs = np.einsum("nmi,m->ni", A, b)
            F = np.linalg.solve(G, rhs[..., None])[..., 0]
            normals = np.cross(edges, np.roll(edges, -1, axis=1))
            axis = edges.mean(axis=1)
            normals *= np.sign(np.einsum("nji,ni->nj", normals, axis))[..., None]
            feasible = np.all(np.einsum("nji,ni->nj", normals, F) >= -1e-12, axis=1)
        else:
            Ef = edges[:, list(face), :]
            Mf = np.einsum("nmi,nki->nmk", A, Ef)
            G = np.einsum("nmk,nml->nkl", Mf, Mf)
            rhs = np.einsum("nmk,m->nk", Mf, b)
            det_ok = np.abs(np.linalg.det(G)) > 1e-14
            G = np.where(det_ok[:, None, None], G, np.eye(len(face)))
            lam = np.linalg.solve(G, rhs[..., None])[..., 0]
            feasible = det_ok & np.all(lam >= 0, axis=1)
            F = np.einsum("nk,nki->ni", lam, Ef)
        r = b[None] - np.einsum("nmi,ni->nm", A, F)
        val = np.einsum("nm,nm->n", r, r)
        better = feasible & (val < best)
        best = np.where(better, val, best)
        best_F = np.where(better[:, None], F, best_F)
    return best, best_F


def grid_search_residual(M: np.ndarray, b: np.ndarray, lam_max: float, points: int = 50, refine: int = 2) -> float:
    """Brute-force lattice minimum of ``||b - M lam||`` over ``0 <= lam <= lam_max``.

    Each refinement pass re-centres a ``points``-per-axis lattice on the best
    node with a shrunken span.  Only practical for a handful of columns.
    """
    n = M.shape[1]
    lo = np.zeros(n)
    hi = np.full(n, lam_max)
    best_val, best_lam = np.inf, np.zeros(n)
    for _ in range(refine):
        axes = [np.linspace(lo[i], hi[i], points) for i in range(n)]
        step = (hi - lo) / (points - 1)
        for chunk in _lattice_chunks(axes):
            r = b[None] - chunk @ M.T
            vals = np.einsum("km,km->k", r, r)
            i = int(np.argmin(vals))
            if vals[i] < best_val:
                best_val, best_lam = float(vals[i]), chunk[i].copy()
        lo = np.maximum(best_lam - 2 * step, 0.0)
        hi = best_lam + 2 * step
    return float(np.sqrt(best_val))


def _lattice_chunks(axes, chunk: int = 200_000):
    n = len(axes)
    head = axes[:-1]
    last = axes[-1]
    block = []
    for combo in itertools.product(*head):
        block.append(combo)
        if len(block) * len(last) >= chunk:
            yield _expand(block, last, n)
            block = []
    if block:
        yield _expand(block, last, n)


def _expand(block, last, n):
    head = np.repeat(np.array(block), len(last), axis=0)
    tail = np.tile(last, len(block))[:, None]
    return np.hstack([head, tail]) if n > 1 else tail
