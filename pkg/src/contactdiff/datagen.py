"""Synthetic sequential-contact scenarios, windowing and the binary dataset format.

Dataset file layout (little-endian)::

    magic        8 bytes  b"CDMDATA\\0"
    version      u32      1
    header_len   u32
    header       UTF-8 JSON: robot, n_q, n_p, T_w, count, record_size
    records      count * record_size bytes (numpy structured dtype, packed)

A record holds one window: scenario id (u32), end time t in ms (u16), state
label (u8: 0 single, 1 transition dual, 2 steady dual), number of active
contacts (u8), the active contact points (2 x 3 f8, unused rows zero), the
configuration q (n_q f8), link poses (n_q x 7 f8) and the downsampled
observed wrench window (T_w x (n_q + 6) f4).  The per-point target set is
rebuilt from the contact points by duplication.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .observation import ObsBatch
from .physics import (
    DEFAULT_BANDWIDTH_HZ,
    DEFAULT_EDGES,
    DEFAULT_MU,
    DEFAULT_NOISE,
    Contact,
    build_cone,
    contact_matrix,
    emulate_dob,
    noise_vector,
    sample_cone_force,
)
from .robot import RobotModel, forward_kinematics, link_frames, link_sdf, poses_to_array, sample_surface_point

log = logging.getLogger(__name__)

MAGIC = b"CDMDATA\0"
VERSION = 1

SINGLE, TRANSITION, STEADY = 0, 1, 2
STATE_NAMES = ("single", "transition_dual", "steady_dual")


class DatasetError(ValueError):
    pass


class DatasetHeaderError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


@dataclass
class DatagenConfig:
    n_scenarios: int = 20000
    seed: int = 0
    duration_ms: int = 300
    onset2_ms: int = 150
    window_ms: int = 60
    stride_range: tuple[int, int] = (15, 45)
    downsample: int = 5
    force_range: tuple[float, float] = (10.0, 25.0)
    mu: float = DEFAULT_MU
    m_e: int = DEFAULT_EDGES
    bandwidth_hz: float = DEFAULT_BANDWIDTH_HZ
    noise: tuple[float, float, float] = DEFAULT_NOISE
    single_only: bool = False
    n_p: int = 64
    train_fraction: float = 0.9

    @property
    def T_w(self) -> int:
        return len(range(self.downsample - 1, self.window_ms, self.downsample))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stride_range"] = list(self.stride_range)
        d["force_range"] = list(self.force_range)
        d["noise"] = list(self.noise)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatagenConfig":
        d = dict(d)
        for k in ("stride_range", "force_range", "noise"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ContactScenario:
    scenario_id: int
    robot: str
    q: np.ndarray
    poses: np.ndarray  # (n_q, 7)
    contacts: list[Contact]
    wrench_true: np.ndarray  # (duration, n_q + 6) before the observer
    wrench_obs: np.ndarray  # (duration, n_q + 6) observer output
    seed: int


def scenario_rng(seed: int, scenario_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, scenario_id])


def _sample_contact(model: RobotModel, frames, link: int, cfg: DatagenConfig, rng, onset: float) -> Contact:
    # contact points buried in a neighbouring link's capsule cannot be touched
    others = [l for l in range(model.n_q) if l != link]
    while True:
        r, n = sample_surface_point(model, frames, link, rng)
        if all(link_sdf(model, frames, r, l).d > 1e-9 for l in others):
            break
    cone = build_cone(n, cfg.mu, cfg.m_e, apex=r)
    F = sample_cone_force(cone, cfg.force_range, rng)
    return Contact(r=r, F=F, link_index=link, normal=n, onset_time=onset)


def simulate_scenario(model: RobotModel, rng: np.random.Generator, cfg: DatagenConfig, scenario_id: int = 0,
                      seed: int = 0) -> ContactScenario:
    lim = model.joint_limits
    q = rng.uniform(lim[:, 0], lim[:, 1])
    frames = link_frames(model, q)
    areas = model.link_areas
    link1 = int(rng.choice(model.n_q, p=areas / areas.sum()))
    contacts = [_sample_contact(model, frames, link1, cfg, rng, 0.0)]
    if not cfg.single_only:
        w2 = areas.copy()
        w2[link1] = 0.0
        link2 = int(rng.choice(model.n_q, p=w2 / w2.sum()))
        contacts.append(_sample_contact(model, frames, link2, cfg, rng, cfg.onset2_ms / 1000.0))
    C = model.n_q + 6
    true = np.zeros((cfg.duration_ms, C))
    for c in contacts:
        w = contact_matrix(model, q, c.r, c.link_index) @ c.F
        start = int(round(c.onset_time * 1000.0))
        true[start:] += w
    obs = emulate_dob(true, cfg.bandwidth_hz, noise_vector(model.n_q, cfg.noise), rng)
    poses = poses_to_array(forward_kinematics(model, q))
    return ContactScenario(scenario_id, model.name, q, poses, contacts, true, obs, seed)


def generate_scenarios(model: RobotModel, cfg: DatagenConfig, ids=None):
    ids = range(cfg.n_scenarios) if ids is None else ids
    for sid in ids:
        yield simulate_scenario(model, scenario_rng(cfg.seed, sid), cfg, sid, cfg.seed)


# ---------------------------------------------------------------------------
# windowing


def window_label(t_ms: int, window_ms: int = 60, onset2_ms: int = 150) -> int:
    """State of the window covering samples ``[t - window, t)``."""
    if t_ms <= onset2_ms:
        return SINGLE
    if t_ms - window_ms >= onset2_ms:
        return STEADY
    return TRANSITION


def window_ends(duration_ms: int, window_ms: int, stride_range, rng: np.random.Generator) -> list[int]:
    lo, hi = stride_range
    ts = [window_ms]
    while True:
        t = ts[-1] + int(rng.integers(lo, hi + 1))
        if t > duration_ms:
            return ts
        ts.append(t)


def downsample_window(stream: np.ndarray, t_ms: int, window_ms: int, stride: int) -> np.ndarray:
    """Every ``stride``-th sample of ``stream[t - window : t]``, newest sample included."""
    seg = stream[t_ms - window_ms : t_ms]
    return seg[stride - 1 :: stride]


def record_dtype(n_q: int, T_w: int) -> np.dtype:
    return np.dtype(
        [
            ("scenario", "<u4"),
            ("t", "<u2"),
            ("label", "u1"),
            ("n_c", "u1"),
            ("r", "<f8", (2, 3)),
            ("q", "<f8", (n_q,)),
            ("poses", "<f8", (n_q, 7)),
            ("wrench", "<f4", (T_w, n_q + 6)),
        ]
    )


def slice_datapoints(sc: ContactScenario, cfg: DatagenConfig, rng: np.random.Generator) -> np.ndarray:
    """Cut a scenario into labelled windows, returned as dataset records."""
    if sc.wrench_obs.shape[0] < cfg.window_ms:
        raise ValueError("scenario shorter than one observation window")
    n_q = sc.q.shape[0]
    ts = window_ends(sc.wrench_obs.shape[0], cfg.window_ms, cfg.stride_range, rng)
    rec = np.zeros(len(ts), dtype=record_dtype(n_q, cfg.T_w))
    for i, t in enumerate(ts):
        active = [c for c in sc.contacts if c.onset_time * 1000.0 < t]
        rec["scenario"][i] = sc.scenario_id
        rec["t"][i] = t
        rec["label"][i] = window_label(t, cfg.window_ms, cfg.onset2_ms) if len(sc.contacts) > 1 else SINGLE
        rec["n_c"][i] = len(active)
        for j, c in enumerate(active):
            rec["r"][i, j] = c.r
        rec["q"][i] = sc.q
        rec["poses"][i] = sc.poses
        rec["wrench"][i] = downsample_window(sc.wrench_obs, t, cfg.window_ms, cfg.downsample)
    return rec


def duplicate_points(r: np.ndarray, n_c: np.ndarray, n_p: int) -> np.ndarray:
    """Target point sets (B, n_p, 3): every row a copy of an active contact point.

    With two contacts the first half of the rows holds contact 1 and the rest
    contact 2.
    """
    r = np.asarray(r, dtype=float)
    n_c = np.asarray(n_c)
    half = n_p // 2
    out = np.repeat(r[:, :1], n_p, axis=1)
    dual = n_c >= 2
    out[dual, half:] = r[dual, 1][:, None, :]
    return out


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class Dataset:
    records: np.ndarray
    robot: str
    n_q: int
    n_p: int
    T_w: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.records[idx], self.robot, self.n_q, self.n_p, self.T_w, dict(self.meta))

    def obs(self, idx=slice(None)) -> ObsBatch:
        r = self.records[idx]
        return ObsBatch(r["wrench"], r["q"], r["poses"])

    def x0(self, idx=slice(None), n_p: int | None = None) -> np.ndarray:
        r = self.records[idx]
        return duplicate_points(r["r"], r["n_c"], n_p or self.n_p)

    def r_first(self, idx=slice(None)) -> np.ndarray:
        return self.records[idx]["r"][:, 0]

    def truths(self, i: int) -> np.ndarray:
        rec = self.records[i]
        return rec["r"][: rec["n_c"]]

    @property
    def labels(self) -> np.ndarray:
        return self.records["label"]

    @property
    def single(self) -> np.ndarray:
        return self.records["label"] == SINGLE

    @property
    def scenario_ids(self) -> np.ndarray:
        return self.records["scenario"]

    def state_counts(self) -> dict[str, int]:
        return {name: int(np.sum(self.labels == i)) for i, name in enumerate(STATE_NAMES)}

    def split(self, train_fraction: float = 0.9, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Train/eval split by scenario id, so no scenario contributes to both."""
        ids = np.unique(self.scenario_ids)
        perm = np.random.default_rng([seed, 7]).permutation(ids)
        n_train = int(round(train_fraction * len(ids)))
        train_ids = np.sort(perm[:n_train])
        mask = np.isin(self.scenario_ids, train_ids)
        return self.subset(np.flatnonzero(mask)), self.subset(np.flatnonzero(~mask))


def build_dataset(model: RobotModel, cfg: DatagenConfig, ids=None) -> Dataset:
    parts = []
    for sc in generate_scenarios(model, cfg, ids):
        rng = np.random.default_rng([cfg.seed, sc.scenario_id, 1])
        parts.append(slice_datapoints(sc, cfg, rng))
    records = np.concatenate(parts) if parts else np.zeros(0, record_dtype(model.n_q, cfg.T_w))
    return Dataset(records, model.name, model.n_q, cfg.n_p, cfg.T_w, {"datagen": cfg.to_dict()})


# ---------------------------------------------------------------------------
# serialization


def record_size(n_q: int, T_w: int) -> int:
    return record_dtype(n_q, T_w).itemsize


def write_dataset(ds: Dataset, path) -> None:
    header = {
        "robot": ds.robot,
        "n_q": ds.n_q,
        "n_p": ds.n_p,
        "T_w": ds.T_w,
        "count": len(ds),
        "record_size": record_size(ds.n_q, ds.T_w),
        "meta": ds.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ds.records).tobytes())
    tmp.replace(path)


def read_dataset(path) -> Dataset:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise DatasetHeaderError(f"{path}: not a dataset file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise DatasetVersionError(f"{path}: dataset version {version}, expected {VERSION}")
    if 16 + hlen > len(data):
        raise DatasetTruncatedError(f"{path}: header cut short")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
        n_q, T_w, count = int(header["n_q"]), int(header["T_w"]), int(header["count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetHeaderError(f"{path}: corrupt header") from exc
    dt = record_dtype(n_q, T_w)
    if header.get("record_size") != dt.itemsize:
        raise DatasetHeaderError(f"{path}: record size mismatch")
    body = data[16 + hlen :]
    if len(body) < count * dt.itemsize:
        raise DatasetTruncatedError(f"{path}: expected {count} records, file holds {len(body) // dt.itemsize}")
    if len(body) > count * dt.itemsize:
        raise DatasetHeaderError(f"{path}: trailing bytes after the last record")
    records = np.frombuffer(body, dtype=dt, count=count).copy()
    return Dataset(records, header["robot"], n_q, int(header["n_p"]), T_w, header.get("meta", {}))


def write_manifest(path, cfg: DatagenConfig, ds: Dataset, extra: dict | None = None) -> None:
    doc = {"datagen": cfg.to_dict(), "robot": ds.robot, "windows": len(ds), "states": ds.state_counts()}
    doc.update(extra or {})
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=True))
