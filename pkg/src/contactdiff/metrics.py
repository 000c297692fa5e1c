"""Localization metrics over generated point sets and the per-state report tables.

Distances are reported in centimetres.  CSV column names are fixed:

``metrics.csv``
    state, n, m_rmse_cm, failure_rate_pct, qp_error, jts_err_nm, base_f_err_n,
    base_t_err_nm, surface_dist_cm, qp_error_centers, c_rmse_1_cm, c_rmse_2_cm
``table1.csv``
    state, n, m_rmse_cm, failure_rate_pct, qp_error, jts_err_nm, base_f_err_n,
    base_t_err_nm
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import STATE_NAMES, Dataset
from .physics import DEFAULT_EDGES, DEFAULT_MU
from .qp import qp_error, qp_error_centers
from .robot import RobotModel, _frames, batch_links_sdf, poses_from_array

log = logging.getLogger(__name__)

CM = 100.0

TABLE1_COLUMNS = (
    "state",
    "n",
    "m_rmse_cm",
    "failure_rate_pct",
    "qp_error",
    "jts_err_nm",
    "base_f_err_n",
    "base_t_err_nm",
)
METRICS_COLUMNS = TABLE1_COLUMNS + ("surface_dist_cm", "qp_error_centers", "c_rmse_1_cm", "c_rmse_2_cm")


def m_rmse(samples, truth) -> float:
    """Mean over true contacts of the distance to the nearest sample, in cm."""
    samples = np.asarray(samples, dtype=float).reshape(-1, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    if samples.shape[0] == 0 or truth.shape[0] == 0:
        raise ValueError("m_rmse needs at least one sample and one contact")
    d = np.linalg.norm(truth[:, None, :] - samples[None, :, :], axis=-1)
    return float(d.min(axis=1).mean() * CM)


def m_rmse_batch(samples: np.ndarray, truth: np.ndarray, n_c: np.ndarray) -> np.ndarray:
    """Per-window M-RMSE (cm) for samples (B, P, 3), truth (B, 2, 3) with n_c active rows."""
    d = np.linalg.norm(truth[:, :, None, :] - samples[:, None, :, :], axis=-1).min(axis=2)
    mask = np.arange(truth.shape[1])[None, :] < np.asarray(n_c)[:, None]
    return (d * mask).sum(axis=1) / mask.sum(axis=1) * CM


# ---------------------------------------------------------------------------
# k-means


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[rng.integers(len(points))]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            # every point already coincides with a center
            centers.append(points[rng.integers(len(points))])
        else:
            centers.append(points[rng.choice(len(points), p=d2 / total)])
    return np.array(centers, dtype=float)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-9):
    """Lloyd's algorithm with k-means++ seeding.

    Returns (centers (k, D), labels (N,), objective per iteration).  Empty
    clusters keep their previous center, so duplicate centers are possible on
    degenerate input.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or len(points) < k or k < 1:
        raise ValueError(f"need at least k={k} points")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(points, k, rng)
    history = []
    labels = np.zeros(len(points), dtype=int)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(points)), labels].sum()))
        new = centers.copy()
        for j in range(k):
            sel = labels == j
            if sel.any():
                new[j] = points[sel].mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - centers, axis=1)))
        centers = new
        if shift <= tol:
            break
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
    labels = np.argmin(d2, axis=1)
    history.append(float(d2[np.arange(len(points)), labels].sum()))
    return centers, labels, history


def match_centers(centers: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Center index for each truth minimizing the summed distance (exhaustive)."""
    n = len(truth)
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(len(centers)), n):
        cost = sum(np.linalg.norm(truth[j] - centers[perm[j]]) for j in range(n))
        if cost < best:
            best, best_perm = cost, perm
    return np.array(best_perm)


def c_rmse(samples, truth, seed: int = 0) -> np.ndarray:
    """Distance (cm) from each true contact to its matched k-means center."""
    samples = np.asarray(samples, dtype=float).reshape(-1, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    centers, _, _ = kmeans(samples, len(truth), seed=seed)
    perm = match_centers(centers, truth)
    return np.linalg.norm(truth - centers[perm], axis=1) * CM


# ---------------------------------------------------------------------------
# classifier and surface metrics


def failure_rate(pred_single, true_single) -> float:
    pred_single = np.asarray(pred_single, dtype=bool)
    true_single = np.asarray(true_single, dtype=bool)
    if pred_single.size == 0:
        raise ValueError("failure rate of an empty set")
    if pred_single.shape != true_single.shape:
        raise ValueError("prediction and label counts differ")
    return float(np.mean(pred_single != true_single))


def surface_distance(samples, model: RobotModel, link_poses) -> float:
    """Mean over samples of the smallest unsigned link distance, in cm."""
    R, p = _frames(link_poses)
    x = np.asarray(samples, dtype=float).reshape(1, -1, 3)
    d, _ = batch_links_sdf(model, R[None], p[None], x)
    return float(np.abs(d).min(axis=-1).mean() * CM)


def surface_distance_batch(samples: np.ndarray, model: RobotModel, poses: np.ndarray) -> np.ndarray:
    """Per-window mean surface distance (cm) for samples (B, P, 3) and poses (B, n_q, 7)."""
    R, p = poses_from_array(poses)
    d, _ = batch_links_sdf(model, R, p, np.asarray(samples, dtype=float))
    return np.abs(d).min(axis=-1).mean(axis=-1) * CM


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    state: str
    n: int
    m_rmse: float
    failure_rate: float
    qp_error: float
    jts_err: float
    base_f_err: float
    base_t_err: float
    mean_surface_dist: float
    qp_error_centers: float
    c_rmse: list[float] = field(default_factory=list)

    def row(self) -> dict:
        c = list(self.c_rmse) + [float("nan")] * (2 - len(self.c_rmse))
        return {
            "state": self.state,
            "n": self.n,
            "m_rmse_cm": self.m_rmse,
            "failure_rate_pct": 100.0 * self.failure_rate,
            "qp_error": self.qp_error,
            "jts_err_nm": self.jts_err,
            "base_f_err_n": self.base_f_err,
            "base_t_err_nm": self.base_t_err,
            "surface_dist_cm": self.mean_surface_dist,
            "qp_error_centers": self.qp_error_centers,
            "c_rmse_1_cm": c[0],
            "c_rmse_2_cm": c[1],
        }


def evaluate(ds: Dataset, samples: np.ndarray, pred_single: np.ndarray, model: RobotModel, seed: int = 0,
             with_qp: bool = True, mu: float = DEFAULT_MU, m_e: int = DEFAULT_EDGES) -> list[MetricsReport]:
    """Aggregate metrics per contact state for per-window samples (N, n_p, 3) in world frame."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] != len(ds):
        raise ValueError("one sample set per window is required")
    rec = ds.records
    mr = m_rmse_batch(samples, rec["r"], rec["n_c"])
    sd = surface_distance_batch(samples, model, rec["poses"])
    reports = []
    for state, name in enumerate(STATE_NAMES):
        idx = np.flatnonzero(rec["label"] == state)
        n = len(idx)
        if n == 0:
            reports.append(MetricsReport(name, 0, *([float("nan")] * 8), c_rmse=[]))
            continue
        qp_rows, qpc = [], []
        crm = []
        for i in idx:
            truth = ds.truths(i)
            crm.append(c_rmse(samples[i], truth, seed=seed))
            if with_qp:
                meas = rec["wrench"][i, -1].astype(float)
                sol = qp_error(meas, samples[i], model, rec["q"][i], mu, m_e)
                qp_rows.append((sol.residual, sol.jts_err, sol.base_f_err, sol.base_t_err))
                qpc.append(qp_error_centers(meas, samples[i], len(truth), model, rec["q"][i], seed, mu, m_e).residual)
        qp_mean = np.mean(qp_rows, axis=0) if qp_rows else np.full(4, np.nan)
        n_c = max(len(c) for c in crm)
        c_mean = [float(np.mean([c[j] for c in crm if len(c) > j])) for j in range(n_c)]
        reports.append(
            MetricsReport(
                state=name,
                n=n,
                m_rmse=float(mr[idx].mean()),
                failure_rate=failure_rate(pred_single[idx], rec["label"][idx] == 0),
                qp_error=float(qp_mean[0]),
                jts_err=float(qp_mean[1]),
                base_f_err=float(qp_mean[2]),
                base_t_err=float(qp_mean[3]),
                mean_surface_dist=float(sd[idx].mean()),
                qp_error_centers=float(np.mean(qpc)) if qpc else float("nan"),
                c_rmse=c_mean,
            )
        )
    return reports


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return f"{float(v):.6f}"


def write_csv(path, rows: list[dict], columns) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def write_metrics_csv(path, reports: list[MetricsReport]) -> None:
    write_csv(path, [r.row() for r in reports], METRICS_COLUMNS)


def write_table1_csv(path, reports: list[MetricsReport]) -> None:
    write_csv(path, [r.row() for r in reports], TABLE1_COLUMNS)
