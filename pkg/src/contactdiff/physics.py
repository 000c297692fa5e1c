"""Contact wrench synthesis, friction cones and the disturbance-observer channel."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .robot import RobotModel, joint_axes_world, point_jacobian, skew

DEFAULT_MU = 0.5
DEFAULT_EDGES = 8
DEFAULT_BANDWIDTH_HZ = 20.0
DEFAULT_NOISE = (0.05, 0.1, 0.02)  # joints N*m, base force N, base torque N*m


@dataclass(frozen=True)
class Contact:
    r: np.ndarray
    F: np.ndarray
    link_index: int
    normal: np.ndarray
    onset_time: float = 0.0


@dataclass
class ExtWrench:
    tau_ext: np.ndarray
    f_base: np.ndarray
    t_base: np.ndarray

    @property
    def n_q(self) -> int:
        return len(self.tau_ext)

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.tau_ext, self.f_base, self.t_base])

    @classmethod
    def from_stacked(cls, w, n_q: int) -> "ExtWrench":
        w = np.asarray(w, dtype=float)
        if w.shape != (n_q + 6,):
            raise ValueError(f"stacked wrench must have {n_q + 6} entries, got {w.shape}")
        return cls(w[:n_q].copy(), w[n_q : n_q + 3].copy(), w[n_q + 3 :].copy())

    @classmethod
    def zeros(cls, n_q: int) -> "ExtWrench":
        return cls(np.zeros(n_q), np.zeros(3), np.zeros(3))

    def __add__(self, other: "ExtWrench") -> "ExtWrench":
        return ExtWrench(self.tau_ext + other.tau_ext, self.f_base + other.f_base, self.t_base + other.t_base)


@dataclass(frozen=True)
class FrictionCone:
    apex: np.ndarray
    axis: np.ndarray
    mu: float
    edges: np.ndarray

    def contains(self, F, tol: float = 1e-9) -> bool:
        """Membership in the circular cone ``|F_t| <= mu * F_n``."""
        F = np.asarray(F, dtype=float)
        fn = F @ self.axis
        ft = np.linalg.norm(F - fn * self.axis)
        return bool(ft <= self.mu * fn + tol)

    def contains_polyhedral(self, F, tol: float = 1e-9) -> bool:
        """Membership in the cone spanned by the edges."""
        return bool(np.all(polyhedral_margins(self, np.asarray(F, dtype=float)[None])[0] >= -tol))


def polyhedral_margins(cone: FrictionCone, F: np.ndarray) -> np.ndarray:
    """Signed margins (N, m_e) of forces against each facet of the edge cone."""
    e = cone.edges
    if cone.mu == 0:
        # single ray: distance from the ray, negated
        fn = F @ cone.axis
        off = np.linalg.norm(F - fn[:, None] * cone.axis, axis=1)
        return np.stack([fn, -off], axis=1)
    normals = np.cross(e, np.roll(e, -1, axis=0))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    # orient every facet normal toward the cone axis
    normals *= np.sign(normals @ cone.axis)[:, None]
    return F @ normals.T


def contact_matrix(model: RobotModel, q, r, link_index: int) -> np.ndarray:
    """Map (n_q + 6, 3) from a contact force at ``r`` to the stacked measurement."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3,):
        raise ValueError(f"contact point must be a 3-vector, got {r.shape}")
    J = point_jacobian(model, q, r, link_index)
    return np.vstack([J.T, np.eye(3), skew(r)])


def total_wrench(model: RobotModel, q, contacts: Sequence[Contact]) -> ExtWrench:
    links = [c.link_index for c in contacts]
    if len(set(links)) != len(links):
        raise ValueError("at most one contact per link is allowed")
    w = np.zeros(model.n_q + 6)
    for c in contacts:
        w += contact_matrix(model, q, c.r, c.link_index) @ np.asarray(c.F, dtype=float)
    return ExtWrench.from_stacked(w, model.n_q)


def build_cone(normal, mu: float = DEFAULT_MU, m_e: int = DEFAULT_EDGES, apex=None) -> FrictionCone:
    """Polyhedral cone of ``m_e`` edges on the circular cone of half-angle atan(mu).

    The cone opens around the inward direction ``-normal`` (pushing only).
    """
    normal = np.asarray(normal, dtype=float)
    if abs(np.linalg.norm(normal) - 1.0) > 1e-9:
        raise ValueError("normal must be a unit vector")
    if mu < 0:
        raise ValueError("friction coefficient must be non-negative")
    if mu > 0 and m_e < 4:
        raise ValueError("a polyhedral cone needs at least 4 edges")
    edges = cone_edges(normal[None], mu, m_e)[0]
    apex = np.zeros(3) if apex is None else np.asarray(apex, dtype=float)
    return FrictionCone(apex=apex, axis=-normal, mu=float(mu), edges=edges)


def cone_edges(normals: np.ndarray, mu: float, m_e: int) -> np.ndarray:
    """Edges (N, m_e, 3) of the pushing cones at outward normals (N, 3)."""
    axis = -np.asarray(normals, dtype=float)
    helper = np.eye(3)[np.argmin(np.abs(axis), axis=1)]
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(axis, e1)
    theta = 2.0 * np.pi * np.arange(m_e) / m_e
    radial = np.cos(theta)[None, :, None] * e1[:, None] + np.sin(theta)[None, :, None] * e2[:, None]
    return (axis[:, None] + mu * radial) / np.sqrt(1.0 + mu * mu)


def contact_matrices(model: RobotModel, q, r: np.ndarray, links: np.ndarray) -> np.ndarray:
    """Batched contact matrices (N, n_q + 6, 3) for points (N, 3) on links (N,)."""
    r = np.asarray(r, dtype=float)
    axes, origins = joint_axes_world(model, q)
    cols = np.cross(axes[None], r[:, None, :] - origins[None])
    cols *= (np.arange(model.n_q)[None, :] <= np.asarray(links)[:, None])[..., None]
    N = r.shape[0]
    eye = np.broadcast_to(np.eye(3), (N, 3, 3))
    sk = np.zeros((N, 3, 3))
    sk[:, 0, 1], sk[:, 0, 2] = -r[:, 2], r[:, 1]
    sk[:, 1, 0], sk[:, 1, 2] = r[:, 2], -r[:, 0]
    sk[:, 2, 0], sk[:, 2, 1] = -r[:, 1], r[:, 0]
    return np.concatenate([cols, eye, sk], axis=1)


def sample_cone_force(cone: FrictionCone, magnitude_range, rng: np.random.Generator) -> np.ndarray:
    """Force with uniform magnitude and a direction uniform over the cone's solid angle.

    Directions are drawn uniformly on the spherical cap of half-angle atan(mu)
    and kept only if they also lie inside the edge cone, so every sample is
    exactly representable by the polyhedral parameterization.
    """
    lo, hi = magnitude_range
    if lo > hi or lo < 0:
        raise ValueError(f"empty magnitude range {magnitude_range}")
    mag = rng.uniform(lo, hi)
    if cone.mu == 0:
        return mag * cone.axis
    cos_max = 1.0 / np.sqrt(1.0 + cone.mu**2)
    e1 = cone.edges[0] - (cone.edges[0] @ cone.axis) * cone.axis
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(cone.axis, e1)
    while True:
        c = rng.uniform(cos_max, 1.0)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        s = np.sqrt(max(0.0, 1.0 - c * c))
        d = c * cone.axis + s * (np.cos(phi) * e1 + np.sin(phi) * e2)
        if np.all(polyhedral_margins(cone, d[None])[0] >= 0):
            return mag * d


def noise_vector(n_q: int, noise=DEFAULT_NOISE) -> np.ndarray:
    """Per-channel noise standard deviations for a stacked (n_q + 6) wrench."""
    joint, force, torque = noise
    return np.concatenate([np.full(n_q, joint), np.full(3, force), np.full(3, torque)])


def emulate_dob(stream, bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ, noise_std=0.0, rng=None, dt: float = 1e-3):
    """First-order observer lag plus white measurement noise.

    ``stream`` is a (T, C) array of stacked true wrenches sampled at ``1/dt``.
    The lag is the zero-order-hold discretization of ``y' = 2*pi*bw*(u - y)``
    starting from rest, so a step applied at sample 0 gives
    ``y[n] = u * (1 - exp(-2*pi*bw*n*dt))``.
    """
    if bandwidth_hz <= 0:
        raise ValueError("bandwidth must be positive")
    u = np.asarray(stream, dtype=float)
    a = np.exp(-2.0 * np.pi * bandwidth_hz * dt)
    y = lfilter([0.0, 1.0 - a], [1.0, -a], u, axis=0)
    std = np.broadcast_to(np.asarray(noise_std, dtype=float), u.shape[1:])
    if np.any(std > 0):
        if rng is None:
            raise ValueError("an rng is required when noise is enabled")
        y = y + rng.standard_normal(u.shape) * std
    return y
