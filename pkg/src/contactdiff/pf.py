"""Single-contact particle filter over the link surfaces.

Each particle is a candidate contact point.  Its weight comes from the
friction-cone fit of the measured wrench with one contact at that point;
resampled particles are jittered in the tangent plane and snapped back onto
the surface.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .physics import DEFAULT_EDGES, DEFAULT_MU, ExtWrench, cone_edges, contact_matrices
from .qp import solve_single_batch
from .robot import RobotModel, batch_nearest_surface, link_frames, sample_surface_points

log = logging.getLogger(__name__)


@dataclass
class PfConfig:
    n_particles: int = 1000
    lam: float = 50.0  # per N^2 of squared residual
    jitter: float = 0.005  # m, tangent-plane std after resampling
    ess_fraction: float = 0.5
    mu: float = DEFAULT_MU
    m_e: int = DEFAULT_EDGES


@dataclass
class ParticleSet:
    points: np.ndarray  # (N, 3)
    links: np.ndarray  # (N,)
    normals: np.ndarray  # (N, 3)
    weights: np.ndarray  # (N,)
    reinits: int = 0

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))


def pf_init(model: RobotModel, q, n: int, rng: np.random.Generator) -> ParticleSet:
    """Area-uniform particles over the whole arm with uniform weights."""
    frames = link_frames(model, q)
    areas = model.link_areas
    counts = rng.multinomial(n, areas / areas.sum())
    pts, nrm, links = [], [], []
    for l, c in enumerate(counts):
        if c == 0:
            continue
        p, nv = sample_surface_points(model, frames, l, int(c), rng)
        pts.append(p)
        nrm.append(nv)
        links.append(np.full(int(c), l))
    return ParticleSet(np.concatenate(pts), np.concatenate(links), np.concatenate(nrm), np.full(n, 1.0 / n))


def particle_residuals(ps: ParticleSet, measurement, model: RobotModel, q, mu: float = DEFAULT_MU,
                       m_e: int = DEFAULT_EDGES) -> np.ndarray:
    """Squared single-contact cone-fit residual of every particle."""
    b = measurement.stacked() if isinstance(measurement, ExtWrench) else np.asarray(measurement, dtype=float)
    A = contact_matrices(model, q, ps.points, ps.links)
    E = cone_edges(ps.normals, mu, m_e)
    res, _ = solve_single_batch(A, E, b, mu)
    return res


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n = len(weights)
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def _jitter(ps: ParticleSet, model: RobotModel, q, sigma: float, rng: np.random.Generator) -> ParticleSet:
    step = rng.standard_normal(ps.points.shape) * sigma
    step -= np.sum(step * ps.normals, axis=1, keepdims=True) * ps.normals
    R, p = link_frames(model, q)
    pts, nrm, links, _ = batch_nearest_surface(model, R, p, ps.points + step)
    return ParticleSet(pts, links, nrm, ps.weights, ps.reinits)


def pf_step(ps: ParticleSet, measurement, model: RobotModel, q, rng: np.random.Generator,
            cfg: PfConfig | None = None) -> ParticleSet:
    """Reweight by the cone-fit likelihood, then resample and jitter if degenerate."""
    cfg = cfg or PfConfig()
    res = particle_residuals(ps, measurement, model, q, cfg.mu, cfg.m_e)
    raw = np.exp(-cfg.lam * res)
    total = raw.sum()
    if not np.isfinite(total) or total <= 0:
        log.info("all particle weights vanished; reinitializing")
        fresh = pf_init(model, q, len(ps), rng)
        fresh.reinits = ps.reinits + 1
        return fresh
    ps = ParticleSet(ps.points, ps.links, ps.normals, raw / total, ps.reinits)
    if ps.ess < cfg.ess_fraction * len(ps):
        idx = systematic_resample(ps.weights, rng)
        n = len(ps)
        ps = ParticleSet(ps.points[idx], ps.links[idx], ps.normals[idx], np.full(n, 1.0 / n), ps.reinits)
        ps = _jitter(ps, model, q, cfg.jitter, rng)
    return ps


def pf_estimate(ps: ParticleSet, model: RobotModel, q) -> np.ndarray:
    """Weighted mean of the particles snapped to the nearest surface point."""
    mean = ps.weights @ ps.points
    R, p = link_frames(model, q)
    return batch_nearest_surface(model, R, p, mean[None])[0][0]


def run_pf(model: RobotModel, q, measurements: np.ndarray, rng: np.random.Generator,
           cfg: PfConfig | None = None) -> tuple[np.ndarray, ParticleSet]:
    """Filter a sequence of stacked measurements (S, n_q + 6); returns the final estimate."""
    cfg = cfg or PfConfig()
    ps = pf_init(model, q, cfg.n_particles, rng)
    for b in measurements:
        ps = pf_step(ps, b, model, q, rng, cfg)
    return pf_estimate(ps, model, q), ps
