"""Training loops and batched inference drivers shared by the CLI and the tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import nn
from .classifier import ContactClassifier, classifier_train_step
from .datagen import DatagenConfig, Dataset, downsample_window, scenario_rng, simulate_scenario, window_label
from .diffusion import (
    Denoiser,
    DiffusionSchedule,
    TrainBatch,
    TrainSettings,
    ddim_sample,
    infer_batch,
    train_step,
)
from .observation import ObsBatch
from .robot import RobotModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 8000
    batch_size: int = 64
    train_points: int = 16
    lr: float = 1e-3
    lr_final: float = 1e-4
    history_null_prob: float = 0.25
    history_noise: str = "per_row"
    history_outlier_prob: float = 0.5
    classifier_steps: int = 12000
    classifier_batch: int = 128
    classifier_lr: float = 1e-3
    seed: int = 0
    log_every: int = 100

    def lr_at(self, step: int, total: int, base: float, final: float) -> float:
        """Cosine decay from ``base`` to ``final``."""
        if total <= 1:
            return base
        c = 0.5 * (1.0 + np.cos(np.pi * min(step, total - 1) / (total - 1)))
        return final + (base - final) * c


def sample_train_batch(ds: Dataset, idx: np.ndarray, train_points: int, rng: np.random.Generator) -> TrainBatch:
    """Batch of windows with ``train_points`` target rows drawn per item.

    The denoiser is pointwise, so a random subset of the duplicated target
    rows gives an unbiased estimate of the full-set loss.
    """
    x0 = ds.x0(idx)
    if train_points and train_points < x0.shape[1]:
        rows = rng.integers(0, x0.shape[1], size=(len(idx), train_points))
        x0 = np.take_along_axis(x0, rows[..., None], axis=1)
    return TrainBatch(x0=x0, obs=ds.obs(idx), r_first=ds.r_first(idx))


def train_denoiser(model: Denoiser, ds: Dataset, schedule: DiffusionSchedule, cfg: TrainConfig,
                   adam: nn.AdamState | None = None, stop_step: int | None = None, on_log=None):
    """Run (or resume) denoiser training up to ``stop_step``; returns (adam, losses).

    Every step draws its batch and noise from a generator seeded by
    ``(seed, step)``, so resuming from a checkpoint reproduces an
    uninterrupted run bit for bit.
    """
    adam = adam or nn.AdamState()
    stop = cfg.steps if stop_step is None else stop_step
    losses = []
    for step in range(adam.step, stop):
        rng = np.random.default_rng([cfg.seed, 1, step])
        idx = rng.integers(0, len(ds), size=cfg.batch_size)
        batch = sample_train_batch(ds, idx, cfg.train_points, rng)
        settings = TrainSettings(
            lr=cfg.lr_at(step, cfg.steps, cfg.lr, cfg.lr_final),
            history_null_prob=cfg.history_null_prob,
            history_noise=cfg.history_noise,
            history_outlier_prob=cfg.history_outlier_prob,
        )
        loss = train_step(model, adam, batch, schedule, rng, settings)
        losses.append(loss)
        if on_log is not None:
            on_log(step, loss)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("denoiser step %d loss %.4f", step + 1, float(np.mean(losses[-cfg.log_every :])))
    return adam, losses


def train_classifier(clf: ContactClassifier, ds: Dataset, cfg: TrainConfig, adam: nn.AdamState | None = None,
                     on_log=None):
    adam = adam or nn.AdamState()
    losses = []
    for step in range(adam.step, cfg.classifier_steps):
        rng = np.random.default_rng([cfg.seed, 2, step])
        idx = rng.integers(0, len(ds), size=cfg.classifier_batch)
        lr = cfg.lr_at(step, cfg.classifier_steps, cfg.classifier_lr, cfg.classifier_lr * 0.1)
        loss = classifier_train_step(clf, adam, ds.obs(idx), ds.single[idx], lr)
        losses.append(loss)
        if on_log is not None:
            on_log(step, loss)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            log.info("classifier step %d loss %.4f", step + 1, float(np.mean(losses[-cfg.log_every :])))
    return adam, losses


# ---------------------------------------------------------------------------
# inference drivers


def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield s, min(n, s + size)


def sample_null(model: Denoiser, obs: ObsBatch, schedule: DiffusionSchedule, seed: int, batch_size: int = 256):
    """World-frame samples (N, n_p, 3) with standard-normal history for every window."""
    n_p = model.arch.n_p
    out = np.empty((len(obs), n_p, 3))
    for s, e in _chunks(len(obs), batch_size):
        rng = np.random.default_rng([seed, 3, s])
        hist = rng.standard_normal((e - s, n_p, 3))
        cond = model.make_condition(obs[s:e], hist)
        x = ddim_sample(model, cond, schedule, x_init=rng.standard_normal((e - s, n_p, 3)), clip=model.arch.x0_clip)
        out[s:e] = model.normalizer.to_world(x)
    return out


def classify_all(clf: ContactClassifier, obs: ObsBatch, batch_size: int = 1024) -> np.ndarray:
    probs = np.empty((len(obs), 2))
    for s, e in _chunks(len(obs), batch_size):
        probs[s:e] = clf.classify_batch(obs[s:e])
    return probs


def run_dataset_sequential(model: Denoiser, clf: ContactClassifier | None, ds: Dataset,
                           schedule: DiffusionSchedule, seed: int, batch_size: int = 256):
    """Recursive inference over every scenario's windows in time order.

    Scenarios advance in lockstep: step j processes the j-th window of every
    scenario that has one.  Returns samples (N, n_p, 3) and single-contact
    decisions (N,) aligned with the dataset records.
    """
    rec = ds.records
    n_p = model.arch.n_p
    order = np.lexsort((rec["t"], rec["scenario"]))
    sids, first = np.unique(rec["scenario"][order], return_index=True)
    pos = np.arange(len(order)) - np.repeat(first, np.diff(np.append(first, len(order))))
    hist = {}
    samples = np.empty((len(ds), n_p, 3))
    single = np.zeros(len(ds), dtype=bool)
    rng0 = np.random.default_rng([seed, 4])
    init = rng0.standard_normal((len(sids), n_p, 3))
    for k, sid in enumerate(sids):
        hist[int(sid)] = init[k]
    for j in range(int(pos.max()) + 1 if len(pos) else 0):
        rows = order[pos == j]
        for s, e in _chunks(len(rows), batch_size):
            r = rows[s:e]
            rng = np.random.default_rng([seed, 5, j, s])
            h = np.stack([hist[int(i)] for i in rec["scenario"][r]])
            z, new_h, dec = infer_batch(model, clf, ds.obs(r), h, schedule, rng)
            samples[r] = z
            single[r] = dec
            for i, sid in enumerate(rec["scenario"][r]):
                hist[int(sid)] = new_h[i]
    return samples, single


@dataclass
class SequenceResult:
    t: np.ndarray  # (W,) window end times
    samples: np.ndarray  # (S, W, n_p, 3)
    truth: np.ndarray  # (S, W, 2, 3)
    n_c: np.ndarray  # (S, W)
    labels: np.ndarray  # (S, W)
    single: np.ndarray  # (S, W) classifier decisions


def fixed_windows(model: RobotModel, cfg: DatagenConfig, scenario_ids, ends) -> tuple[list, np.ndarray]:
    """Regenerate scenarios and cut windows at fixed end times."""
    scen = [simulate_scenario(model, scenario_rng(cfg.seed, int(s)), cfg, int(s), cfg.seed) for s in scenario_ids]
    n_q = model.n_q
    S, W = len(scen), len(ends)
    wrench = np.empty((S, W, cfg.T_w, n_q + 6), dtype=np.float32)
    truth = np.zeros((S, W, 2, 3))
    n_c = np.zeros((S, W), dtype=int)
    for i, sc in enumerate(scen):
        for j, t in enumerate(ends):
            wrench[i, j] = downsample_window(sc.wrench_obs, t, cfg.window_ms, cfg.downsample)
            active = [c for c in sc.contacts if c.onset_time * 1000.0 < t]
            n_c[i, j] = len(active)
            for a, c in enumerate(active):
                truth[i, j, a] = c.r
    return scen, (wrench, truth, n_c)


def run_history_protocol(model: Denoiser, clf: ContactClassifier | None, robot: RobotModel, cfg: DatagenConfig,
                         scenario_ids, schedule: DiffusionSchedule, seed: int, use_history: bool = True,
                         ends=None, batch_size: int = 512) -> SequenceResult:
    """Sequential windows ending at fixed times, with or without carried history.

    Without history every window is conditioned on a fresh standard-normal
    point set.
    """
    ends = np.arange(cfg.window_ms, cfg.duration_ms + 1, 16) if ends is None else np.asarray(ends)
    scen, (wrench, truth, n_c) = fixed_windows(robot, cfg, scenario_ids, ends)
    S, W = wrench.shape[:2]
    n_p = model.arch.n_p
    q = np.stack([sc.q for sc in scen])
    poses = np.stack([sc.poses for sc in scen])
    samples = np.empty((S, W, n_p, 3))
    single = np.zeros((S, W), dtype=bool)
    init = np.random.default_rng([seed, 6]).standard_normal((S, n_p, 3))
    hist = init.copy()
    for j in range(W):
        for s, e in _chunks(S, batch_size):
            rng = np.random.default_rng([seed, 7, j, s])
            obs = ObsBatch(wrench[s:e, j], q[s:e], poses[s:e])
            h = hist[s:e] if use_history else rng.standard_normal((e - s, n_p, 3))
            z, new_h, dec = infer_batch(model, clf if use_history else None, obs, h, schedule, rng)
            samples[s:e, j] = z
            single[s:e, j] = dec
            if use_history:
                hist[s:e] = new_h
    labels = np.array([[window_label(int(t), cfg.window_ms, cfg.onset2_ms) for t in ends]] * S)
    return SequenceResult(ends, samples, truth, n_c, labels, single)


def time_inference(model: Denoiser, clf: ContactClassifier | None, obs: ObsBatch, schedule: DiffusionSchedule,
                   seed: int = 0, repeats: int = 20) -> dict:
    """Wall-clock of single-window recursive inference (one window per call)."""
    rng = np.random.default_rng([seed, 8])
    hist = rng.standard_normal((1, model.arch.n_p, 3))
    times = []
    n = min(repeats, len(obs))
    for i in range(n):
        t0 = time.perf_counter()
        _, hist, _ = infer_batch(model, clf, obs[i : i + 1], hist, schedule, rng)
        times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    return {"windows": n, "mean_ms": float(ms.mean()), "median_ms": float(np.median(ms)), "max_ms": float(ms.max())}
