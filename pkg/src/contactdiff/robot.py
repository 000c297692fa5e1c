"""Serial-chain kinematics and analytic capsule signed distance fields.

A robot is a chain of revolute joints.  Joint ``i`` sits at a fixed offset
(translation + roll/pitch/yaw) from the frame of link ``i-1`` and rotates
about its own axis; the resulting frame is the frame of link ``i``.  Each
link carries one or more capsules expressed in its link frame.

Distances are signed (negative inside a capsule).  The unit vector ``g``
returned with every distance points from the query point toward the nearest
surface point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

_AXIS_EPS = 1e-15


class RobotConfigError(ValueError):
    """Raised for malformed robot descriptions."""


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(3)
        b = np.asarray(self.b, dtype=float).reshape(3)
        a.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if not 0.0 < self.radius <= 0.2:
            raise RobotConfigError(f"capsule radius must be in (0, 0.2] m, got {self.radius}")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.b - self.a))

    @property
    def area(self) -> float:
        r = self.radius
        return 2.0 * np.pi * r * self.length + 4.0 * np.pi * r * r


@dataclass(frozen=True)
class LinkGeometry:
    """Capsule set of one link; the first capsule is the primary primitive."""

    capsules: tuple[Capsule, ...]

    def __post_init__(self):
        if not self.capsules:
            raise RobotConfigError("a link needs at least one capsule")

    @property
    def primitive(self) -> Capsule:
        return self.capsules[0]

    @property
    def area(self) -> float:
        return sum(c.area for c in self.capsules)


@dataclass(frozen=True)
class Joint:
    axis: np.ndarray
    xyz: np.ndarray
    rpy: np.ndarray
    limits: tuple[float, float] = (-np.pi, np.pi)

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float).reshape(3)
        n = np.linalg.norm(axis)
        if n < 1e-12:
            raise RobotConfigError("joint axis must be non-zero")
        axis = axis / n
        xyz = np.asarray(self.xyz, dtype=float).reshape(3)
        rpy = np.asarray(self.rpy, dtype=float).reshape(3)
        for arr in (axis, xyz, rpy):
            arr.flags.writeable = False
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "rpy", rpy)
        lo, hi = self.limits
        if not lo < hi:
            raise RobotConfigError(f"bad joint limits {self.limits}")
        object.__setattr__(self, "limits", (float(lo), float(hi)))

    @property
    def offset_rotation(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.rpy).as_matrix()


@dataclass(frozen=True)
class RobotModel:
    name: str
    joints: tuple[Joint, ...]
    links: tuple[LinkGeometry, ...]
    reach: float
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if len(self.joints) < 2:
            raise RobotConfigError("a robot needs at least two joints")
        if len(self.links) != len(self.joints):
            raise RobotConfigError("one link geometry per joint is required")
        if self.reach <= 0:
            raise RobotConfigError("reach must be positive")
        center = np.asarray(self.center, dtype=float).reshape(3)
        center.flags.writeable = False
        object.__setattr__(self, "center", center)
        # medial-axis tie-break directions, one per capsule, in the link frame
        tb = []
        for link in self.links:
            tb.append(tuple(_perpendicular_hint(c.b - c.a) for c in link.capsules))
        object.__setattr__(self, "_tiebreak", tuple(tb))

    @property
    def n_q(self) -> int:
        return len(self.joints)

    @property
    def joint_limits(self) -> np.ndarray:
        return np.array([j.limits for j in self.joints])

    @property
    def link_areas(self) -> np.ndarray:
        return np.array([link.area for link in self.links])


@dataclass(frozen=True)
class LinkPose:
    """World pose of a link frame: position and unit quaternion (w, x, y, z)."""

    p: np.ndarray
    quat: np.ndarray

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.p, self.quat])


@dataclass(frozen=True)
class SdfResult:
    d: float
    g: np.ndarray


# ---------------------------------------------------------------------------
# loading


def robot_from_dict(doc: dict) -> RobotModel:
    try:
        joints, links = [], []
        for jd in doc["joints"]:
            joints.append(
                Joint(
                    axis=jd["axis"],
                    xyz=jd.get("xyz", [0.0, 0.0, 0.0]),
                    rpy=jd.get("rpy", [0.0, 0.0, 0.0]),
                    limits=tuple(jd.get("limits", [-np.pi, np.pi])),
                )
            )
            caps = tuple(Capsule(a=c["a"], b=c["b"], radius=float(c["radius"])) for c in jd["capsules"])
            links.append(LinkGeometry(caps))
        return RobotModel(
            name=str(doc["name"]),
            joints=tuple(joints),
            links=tuple(links),
            reach=float(doc["reach"]),
            center=doc.get("center", [0.0, 0.0, 0.0]),
        )
    except (KeyError, TypeError) as exc:
        raise RobotConfigError(f"malformed robot description: {exc!r}") from exc


def load_robot(path: str | Path) -> RobotModel:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise RobotConfigError(f"cannot read robot description {path}: {exc}") from exc
    return robot_from_dict(doc)


PRESETS = ("planar3", "spatial7")


def load_preset(name: str) -> RobotModel:
    if name not in PRESETS:
        raise RobotConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = resources.files("contactdiff").joinpath("presets", f"{name}.yaml").read_text()
    return robot_from_dict(yaml.safe_load(text))


def resolve_robot(spec: str) -> RobotModel:
    """Preset name or path to a robot YAML file."""
    if spec in PRESETS:
        return load_preset(spec)
    return load_robot(spec)


# ---------------------------------------------------------------------------
# rotations


def axis_angle_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array(
        [
            [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
            [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
            [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix (..., 3, 3) to quaternion (..., 4) in (w, x, y, z), w >= 0."""
    xyzw = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()
    q = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    q *= np.where(q[:, :1] < 0, -1.0, 1.0)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q.reshape(R.shape[:-2] + (4,))


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Quaternion (..., 4) in (w, x, y, z) to rotation matrix (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - z * w)
    R[..., 0, 2] = 2 * (x * z + y * w)
    R[..., 1, 0] = 2 * (x * y + z * w)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - x * w)
    R[..., 2, 0] = 2 * (x * z - y * w)
    R[..., 2, 1] = 2 * (y * z + x * w)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _perpendicular_hint(seg: np.ndarray) -> np.ndarray:
    # link +x, made perpendicular to the capsule segment
    n = np.linalg.norm(seg)
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0])
    u = seg / n
    for cand in np.eye(3):
        v = cand - (cand @ u) * u
        nv = np.linalg.norm(v)
        if nv > 1e-6:
            return v / nv
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# kinematics


def _check_q(model: RobotModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (model.n_q,):
        raise ValueError(f"expected {model.n_q} joint angles, got shape {q.shape}")
    return q


def link_frames(model: RobotModel, q) -> tuple[np.ndarray, np.ndarray]:
    """World rotations (n_q, 3, 3) and origins (n_q, 3) of every link frame."""
    q = _check_q(model, q)
    R = np.eye(3)
    p = np.zeros(3)
    Rs = np.empty((model.n_q, 3, 3))
    ps = np.empty((model.n_q, 3))
    for i, joint in enumerate(model.joints):
        p = p + R @ joint.xyz
        R = R @ joint.offset_rotation @ axis_angle_matrix(joint.axis, q[i])
        Rs[i] = R
        ps[i] = p
    return Rs, ps


def forward_kinematics(model: RobotModel, q) -> list[LinkPose]:
    Rs, ps = link_frames(model, q)
    quats = matrix_to_quat(Rs)
    return [LinkPose(p=ps[i].copy(), quat=quats[i]) for i in range(model.n_q)]


def poses_to_array(poses: Sequence[LinkPose]) -> np.ndarray:
    """Stack link poses as an (n_q, 7) array of (p, quat)."""
    return np.stack([lp.as_vector() for lp in poses])


def poses_from_array(arr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(..., n_q, 7) pose array to rotations (..., n_q, 3, 3) and origins (..., n_q, 3)."""
    arr = np.asarray(arr, dtype=float)
    return quat_to_matrix(arr[..., 3:]), arr[..., :3]


def _frames(link_poses) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(link_poses, tuple) and len(link_poses) == 2:
        return link_poses
    if isinstance(link_poses, np.ndarray):
        return poses_from_array(link_poses)
    return np.stack([lp.rotation() for lp in link_poses]), np.stack([lp.p for lp in link_poses])


def joint_axes_world(model: RobotModel, q) -> tuple[np.ndarray, np.ndarray]:
    Rs, ps = link_frames(model, q)
    axes = np.einsum("nij,nj->ni", Rs, np.stack([j.axis for j in model.joints]))
    return axes, ps


def point_jacobian(model: RobotModel, q, r, link_index: int) -> np.ndarray:
    """Positional Jacobian (3, n_q) of a world point rigidly attached to ``link_index``."""
    if not 0 <= link_index < model.n_q:
        raise IndexError(f"link index {link_index} out of range for {model.n_q} links")
    r = np.asarray(r, dtype=float).reshape(3)
    axes, origins = joint_axes_world(model, q)
    J = np.zeros((3, model.n_q))
    for j in range(link_index + 1):
        J[:, j] = np.cross(axes[j], r - origins[j])
    return J


# ---------------------------------------------------------------------------
# signed distance


def _capsule_query(x, a, b, radius, hint):
    """Distance data of points ``x`` (..., 3) to a capsule with world endpoints.

    Returns signed distance, outward radial unit vector and nearest surface point.
    """
    ab = b - a
    L2 = np.sum(ab * ab, axis=-1, keepdims=True)
    safe = np.where(L2 > 0, L2, 1.0)
    t = np.clip(np.sum((x - a) * ab, axis=-1, keepdims=True) / safe, 0.0, 1.0)
    t = np.where(L2 > 0, t, 0.0)
    c = a + t * ab
    v = x - c
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    on_axis = n < _AXIS_EPS
    u = np.where(on_axis, hint, v / np.where(on_axis, 1.0, n))
    d = n[..., 0] - radius
    return d, u, c + radius * u


def _link_query(model: RobotModel, R, p, x, link_index: int):
    """Union over the capsules of one link. ``R``/``p`` broadcast against ``x``."""
    best = None
    for cap, hint in zip(model.links[link_index].capsules, model._tiebreak[link_index]):
        a = p + np.einsum("...ij,j->...i", R, cap.a)
        b = p + np.einsum("...ij,j->...i", R, cap.b)
        h = np.einsum("...ij,j->...i", R, hint)
        d, u, s = _capsule_query(x, a, b, cap.radius, h)
        if best is None:
            best = [d, u, s]
        else:
            closer = d < best[0]
            best[0] = np.where(closer, d, best[0])
            best[1] = np.where(closer[..., None], u, best[1])
            best[2] = np.where(closer[..., None], s, best[2])
    return best


def _direction_to_surface(d, u):
    # outside (and on) the surface the nearest point lies along -u, inside along +u
    return np.where((d >= 0)[..., None], -u, u)


def link_sdf(model: RobotModel, link_poses, x, link_index: int) -> SdfResult:
    Rs, ps = _frames(link_poses)
    x = np.asarray(x, dtype=float).reshape(3)
    d, u, _ = _link_query(model, Rs[link_index], ps[link_index], x, link_index)
    return SdfResult(d=float(d), g=_direction_to_surface(d, u))


def all_links_sdf(model: RobotModel, link_poses, x) -> list[SdfResult]:
    Rs, ps = _frames(link_poses)
    return [link_sdf(model, (Rs, ps), x, l) for l in range(model.n_q)]


def nearest_surface(model: RobotModel, link_poses, x, link_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest surface point on a link and the outward unit normal there."""
    Rs, ps = _frames(link_poses)
    x = np.asarray(x, dtype=float)
    _, u, s = _link_query(model, Rs[link_index], ps[link_index], x, link_index)
    return s, u


def project_to_surface(model: RobotModel, link_poses, x, link_index: int) -> np.ndarray:
    return nearest_surface(model, link_poses, x, link_index)[0]


def batch_links_sdf(model: RobotModel, R: np.ndarray, p: np.ndarray, x: np.ndarray):
    """Signed distances and surface directions for point batches.

    Args:
        R: (B, n_q, 3, 3) link rotations.
        p: (B, n_q, 3) link origins.
        x: (B, P, 3) query points.

    Returns:
        d of shape (B, P, n_q) and g of shape (B, P, n_q, 3).
    """
    B, P, _ = x.shape
    d = np.empty((B, P, model.n_q))
    g = np.empty((B, P, model.n_q, 3))
    for l in range(model.n_q):
        dl, ul, _ = _link_query(model, R[:, None, l], p[:, None, l], x, l)
        d[..., l] = dl
        g[..., l, :] = _direction_to_surface(dl, ul)
    return d, g


def batch_nearest_surface(model: RobotModel, R, p, x):
    """Nearest surface over the whole arm for points (N, 3) with one set of frames.

    Returns (points, outward normals, link indices, |d| per point).
    """
    x = np.asarray(x, dtype=float)
    ds, us, ss = [], [], []
    for l in range(model.n_q):
        d, u, s = _link_query(model, R[l], p[l], x, l)
        ds.append(np.abs(d))
        us.append(u)
        ss.append(s)
    ds = np.stack(ds, axis=-1)
    link = np.argmin(ds, axis=-1)
    idx = np.arange(x.shape[0])
    return np.stack(ss, 1)[idx, link], np.stack(us, 1)[idx, link], link, ds[idx, link]


def union_distance(model: RobotModel, link_poses, x) -> np.ndarray:
    """Signed distance to the union of all link capsules for points (..., 3)."""
    Rs, ps = _frames(link_poses)
    x = np.asarray(x, dtype=float)
    return np.min(np.stack([_link_query(model, Rs[l], ps[l], x, l)[0] for l in range(model.n_q)]), axis=0)


# ---------------------------------------------------------------------------
# surface sampling


def sample_surface_points(model: RobotModel, link_poses, link_index: int, n: int, rng: np.random.Generator):
    """Area-uniform points on a link surface with outward unit normals, shapes (n, 3)."""
    Rs, ps = _frames(link_poses)
    R, p = Rs[link_index], ps[link_index]
    link = model.links[link_index]
    caps = link.capsules
    weights = np.array([c.area for c in caps])
    points = np.empty((0, 3))
    normals = np.empty((0, 3))
    while points.shape[0] < n:
        m = n - points.shape[0]
        which = rng.choice(len(caps), size=m, p=weights / weights.sum()) if len(caps) > 1 else np.zeros(m, int)
        pt = np.empty((m, 3))
        nm = np.empty((m, 3))
        for ci, cap in enumerate(caps):
            sel = which == ci
            k = int(sel.sum())
            if k == 0:
                continue
            lp, ln = _sample_capsule(cap, model._tiebreak[link_index][ci], k, rng)
            pt[sel] = p + lp @ R.T
            nm[sel] = ln @ R.T
        if len(caps) > 1:
            # drop points buried inside another capsule of the same link
            keep = np.ones(m, bool)
            for ci, cap in enumerate(caps):
                a = p + R @ cap.a
                b = p + R @ cap.b
                d, _, _ = _capsule_query(pt, a, b, cap.radius, R @ model._tiebreak[link_index][ci])
                keep &= (which == ci) | (d > -1e-12)
            pt, nm = pt[keep], nm[keep]
        points = np.concatenate([points, pt])
        normals = np.concatenate([normals, nm])
    return points[:n], normals[:n]


def _sample_capsule(cap: Capsule, hint: np.ndarray, n: int, rng: np.random.Generator):
    r = cap.radius
    seg = cap.b - cap.a
    L = cap.length
    cyl_area = 2.0 * np.pi * r * L
    on_cyl = rng.random(n) < cyl_area / cap.area
    t = rng.random(n)
    phi = rng.random(n) * 2.0 * np.pi
    sph = rng.standard_normal((n, 3))
    sph /= np.linalg.norm(sph, axis=1, keepdims=True)
    if L > 0:
        axis = seg / L
        e1 = hint
        e2 = np.cross(axis, e1)
        radial = np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2
        cyl_pts = cap.a + t[:, None] * seg + r * radial
        upper = (sph @ axis) >= 0
        centers = np.where(upper[:, None], cap.b, cap.a)
    else:
        radial = sph
        cyl_pts = cap.a + r * sph
        centers = np.broadcast_to(cap.a, (n, 3))
    cap_pts = centers + r * sph
    normal = np.where(on_cyl[:, None], radial, sph)
    pts = np.where(on_cyl[:, None], cyl_pts, cap_pts)
    return pts, normal


def sample_surface_point(model: RobotModel, link_poses, link_index: int, rng: np.random.Generator):
    """One area-uniform surface point on a link and its outward unit normal."""
    pts, nrm = sample_surface_points(model, link_poses, link_index, 1, rng)
    return pts[0], nrm[0]


class Normalizer:
    """Affine map between world coordinates and the unit-scale diffusion space."""

    def __init__(self, center, reach: float):
        self.center = np.asarray(center, dtype=float)
        self.scale = 2.0 / float(reach)

    @classmethod
    def for_robot(cls, model: RobotModel) -> "Normalizer":
        return cls(model.center, model.reach)

    def to_model(self, x):
        return (np.asarray(x, dtype=float) - self.center) * self.scale

    def to_world(self, z):
        return np.asarray(z, dtype=float) / self.scale + self.center
