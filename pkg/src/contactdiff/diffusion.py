"""Conditional point-set diffusion for contact localization.

The denoiser predicts the noise added to every point of a point set.  Points
are processed by a shared per-point MLP with U-Net style skip connections;
each block is modulated twice: once per point from the signed-distance
features of that point, once globally from the observation window, the
pooled historical point set and the diffusion step.

All diffusion arithmetic happens in a normalized coordinate frame
(see :class:`~contactdiff.robot.Normalizer`); :func:`infer` returns world
coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable, Protocol

import numpy as np
import torch

from . import nn
from .observation import ObsBatch, ObservationWindow
from .robot import Normalizer, RobotModel, batch_links_sdf, batch_nearest_surface, poses_from_array

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class DiffusionSchedule:
    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray
    ddim_steps: np.ndarray

    @classmethod
    def linear(cls, K: int = 1000, beta_start: float = 1e-6, beta_end: float = 1e-3, n_ddim: int = 10):
        if K < 1 or not 0 < beta_start <= beta_end < 1:
            raise ValueError("invalid schedule parameters")
        beta = np.linspace(beta_start, beta_end, K)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        beta_tilde = beta * (1.0 - prev) / (1.0 - alpha_bar)
        return cls(K, beta, alpha, alpha_bar, beta_tilde, ddim_subsequence(K, n_ddim))

    def ab(self, k) -> np.ndarray:
        """Cumulative product at step(s) ``k`` with the convention ``ab(0) = 1``."""
        k = np.asarray(k)
        return np.where(k == 0, 1.0, self.alpha_bar[np.maximum(k, 1) - 1])

    def a(self, k) -> np.ndarray:
        return self.alpha[np.asarray(k) - 1]

    def b(self, k) -> np.ndarray:
        return self.beta[np.asarray(k) - 1]

    def bt(self, k) -> np.ndarray:
        return self.beta_tilde[np.asarray(k) - 1]

    def with_ddim(self, steps) -> "DiffusionSchedule":
        steps = np.asarray(steps, dtype=int)
        return DiffusionSchedule(self.K, self.beta, self.alpha, self.alpha_bar, self.beta_tilde, steps)


def ddim_subsequence(K: int, n: int) -> np.ndarray:
    """``n`` evenly spaced steps from K down to 1 (descending, unique)."""
    if not 1 <= n <= K:
        raise ValueError(f"need 1 <= n_steps <= K, got {n}")
    if n == 1:
        return np.array([K])
    return np.unique(np.round(np.linspace(1, K, n)).astype(int))[::-1]


def forward_diffuse(x0, k, eps, schedule: DiffusionSchedule):
    """Closed-form noising ``sqrt(ab_k) x0 + sqrt(1 - ab_k) eps``."""
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k > schedule.K):
        raise ValueError(f"diffusion step out of range 0..{schedule.K}")
    ab = schedule.ab(k)
    ab = ab.reshape(ab.shape + (1,) * (np.ndim(x0) - ab.ndim)) if ab.ndim else ab
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# denoiser


@dataclass
class DenoiserArch:
    n_q: int
    T_w: int
    n_p: int = 64
    K: int = 1000
    width: int = 128
    width_mid: int = 64
    global_width: int = 128
    hist_width: int = 64
    sdf_width: int = 64
    n_freq: int = 8
    wrench_scale: float = 10.0
    use_sdf: bool = True
    x0_clip: float = 2.5  # bound on each normalized coordinate of the clean-set estimate while sampling

    @property
    def obs_dim(self) -> int:
        return self.T_w * (self.n_q + 6) + self.n_q + 7 * self.n_q

    @property
    def blocks(self) -> list[tuple[str, int, int]]:
        w, m = self.width, self.width_mid
        return [("down1", w, w), ("down2", w, m), ("mid", m, m), ("up2", 2 * m, w), ("up1", 2 * w, w)]


def obs_features(obs: ObsBatch, normalizer: Normalizer, wrench_scale: float) -> np.ndarray:
    """Flattened (B, obs_dim) float32 observation features."""
    B = len(obs)
    w = obs.wrench.reshape(B, -1) / wrench_scale
    pos = normalizer.to_model(obs.poses[..., :3]).reshape(B, -1)
    quat = obs.poses[..., 3:].reshape(B, -1)
    return np.concatenate([w, obs.q, pos, quat], axis=1).astype(np.float32)


def encode_mlp(params: nn.ParamStore, prefix: str, x: torch.Tensor, depth: int) -> torch.Tensor:
    for i in range(depth):
        x = nn.silu(nn.dense_forward(params, f"{prefix}.{i}", x))
    return x


@dataclass
class Conditioning:
    """Everything the denoiser needs besides the noisy points and the step."""

    obs_feat: torch.Tensor  # (B, obs_dim)
    hist: torch.Tensor  # (B, n_h, 3) normalized historical point set
    R: np.ndarray  # (B, n_q, 3, 3) link rotations for SDF queries
    p: np.ndarray  # (B, n_q, 3)
    hist_pool: torch.Tensor | None = None  # cached pooled history embedding


class EpsModel(Protocol):
    def predict_eps(self, x: np.ndarray, k: np.ndarray, cond) -> np.ndarray: ...


class Denoiser:
    def __init__(self, robot: RobotModel, arch: DenoiserArch, params: nn.ParamStore):
        self.robot = robot
        self.arch = arch
        self.params = params
        self.normalizer = Normalizer.for_robot(robot)
        self.freqs = nn.fourier_frequencies(arch.n_freq, arch.K)

    @classmethod
    def create(cls, robot: RobotModel, arch: DenoiserArch, seed: int = 0, dtype=torch.float32) -> "Denoiser":
        rng = np.random.default_rng(seed)
        ps = nn.ParamStore(dtype=dtype)
        a = arch
        nn.init_dense(ps, "hist.0", 3, a.hist_width, rng)
        nn.init_dense(ps, "hist.1", a.hist_width, a.hist_width, rng)
        g_in = a.obs_dim + a.hist_width + 2 * a.n_freq
        nn.init_dense(ps, "glob.0", g_in, a.global_width, rng)
        nn.init_dense(ps, "glob.1", a.global_width, a.global_width, rng)
        if a.use_sdf:
            nn.init_dense(ps, "sdf.0", 4 * a.n_q, a.sdf_width, rng)
        nn.init_dense(ps, "inp", 3, a.width, rng)
        for name, n_in, n_out in a.blocks:
            nn.init_dense(ps, f"{name}.dense", n_in, n_out, rng)
            nn.init_film_head(ps, f"{name}.gfilm", a.global_width, n_out)
            if a.use_sdf:
                nn.init_film_head(ps, f"{name}.pfilm", a.sdf_width, n_out)
        nn.init_dense(ps, "out", a.width, 3, rng)
        return cls(robot, arch, ps)

    # -- conditioning ---------------------------------------------------------

    def make_condition(self, obs: ObsBatch, hist: np.ndarray) -> Conditioning:
        R, p = poses_from_array(obs.poses)
        feat = obs_features(obs, self.normalizer, self.arch.wrench_scale)
        return Conditioning(
            obs_feat=torch.as_tensor(feat, dtype=self.params.dtype),
            hist=torch.as_tensor(np.asarray(hist), dtype=self.params.dtype),
            R=R,
            p=p,
        )

    def sdf_features(self, x_norm: np.ndarray, R: np.ndarray, p: np.ndarray) -> np.ndarray:
        """(B, P, 4 n_q) distance and direction features for normalized points."""
        d, g = batch_links_sdf(self.robot, R, p, self.normalizer.to_world(x_norm))
        B, P, L = d.shape
        feat = np.concatenate([d[..., None] * self.normalizer.scale, g], axis=-1)
        return feat.reshape(B, P, 4 * L)

    def hist_pool(self, params: nn.ParamStore, hist: torch.Tensor) -> torch.Tensor:
        h = encode_mlp(params, "hist", hist, 2)
        return h.mean(dim=1)

    def condition_encode(self, params, obs_feat, hist, k, sdf_feat=None, hist_pool=None):
        """Inputs of the two FiLM paths.

        Returns the per-point feature tensor (or ``None`` without SDF) and the
        global input vector ``[obs, pooled history, fourier(k / K)]``.
        """
        if hist_pool is None:
            hist_pool = self.hist_pool(params, hist)
        kf = nn.fourier_embed(torch.as_tensor(np.asarray(k, dtype=float) / self.arch.K), self.freqs)
        g_in = torch.cat([obs_feat, hist_pool, kf.to(obs_feat.dtype)], dim=-1)
        point = None
        if self.arch.use_sdf and sdf_feat is not None:
            point = torch.as_tensor(sdf_feat, dtype=obs_feat.dtype)
        return point, g_in

    def forward(self, params, x, k, obs_feat, hist, sdf_feat=None, hist_pool=None) -> torch.Tensor:
        point_in, g_in = self.condition_encode(params, obs_feat, hist, k, sdf_feat, hist_pool)
        g = encode_mlp(params, "glob", g_in, 2)[:, None, :]
        s = None
        if point_in is not None:
            s = nn.silu(nn.dense_forward(params, "sdf.0", point_in))
        h = nn.silu(nn.dense_forward(params, "inp", x))
        skips = {}
        for name, _, _ in self.arch.blocks:
            if name == "up2":
                h = torch.cat([h, skips["down2"]], dim=-1)
            elif name == "up1":
                h = torch.cat([h, skips["down1"]], dim=-1)
            h = nn.dense_forward(params, f"{name}.dense", h)
            if s is not None:
                h = nn.film_apply(h, *nn.film_params(params, f"{name}.pfilm", s))
            h = nn.film_apply(h, *nn.film_params(params, f"{name}.gfilm", g))
            h = nn.silu(h)
            skips[name] = h
        return nn.dense_forward(params, "out", h)

    def predict_eps(self, x: np.ndarray, k, cond: Conditioning) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        B = x.shape[0]
        k = np.broadcast_to(np.asarray(k), (B,))
        sdf = self.sdf_features(x, cond.R, cond.p) if self.arch.use_sdf else None
        with torch.no_grad():
            if cond.hist_pool is None:
                cond.hist_pool = self.hist_pool(self.params, cond.hist)
            xt = torch.as_tensor(x, dtype=self.params.dtype)
            eps = self.forward(self.params, xt, k, cond.obs_feat, cond.hist, sdf, cond.hist_pool)
        return eps.numpy().astype(float)

    # -- persistence ------------------------------------------------------------

    def save(self, path, adam: nn.AdamState | None = None, extra_meta: dict | None = None) -> None:
        meta = {"kind": "denoiser", "arch": asdict(self.arch), "robot": self.robot.name}
        meta.update(extra_meta or {})
        nn.save_params(path, self.params, meta, adam)

    @classmethod
    def load(cls, path, robot: RobotModel) -> tuple["Denoiser", nn.AdamState, dict]:
        params, meta, adam, _ = nn.load_params(path)
        if meta.get("kind") != "denoiser":
            raise nn.CheckpointError(f"{path} is not a denoiser checkpoint")
        return cls(robot, DenoiserArch(**meta["arch"]), params), adam, meta


# ---------------------------------------------------------------------------
# sampling


def reverse_step(model: EpsModel, x_k, k: int, cond, schedule: DiffusionSchedule, rng: np.random.Generator):
    """One ancestral step: draw from N(mu_theta, beta_tilde_k I)."""
    eps = model.predict_eps(x_k, np.full(x_k.shape[0], k), cond)
    a, b, ab = schedule.a(k), schedule.b(k), schedule.ab(k)
    mean = (x_k - (b / np.sqrt(1.0 - ab)) * eps) / np.sqrt(a)
    var = schedule.bt(k)
    if var == 0:
        return mean
    return mean + np.sqrt(var) * rng.standard_normal(x_k.shape)


def ancestral_sample(model: EpsModel, cond, schedule: DiffusionSchedule, x_init, rng: np.random.Generator):
    x = np.asarray(x_init, dtype=float)
    for k in range(schedule.K, 0, -1):
        x = reverse_step(model, x, k, cond, schedule, rng)
    return x


def ddim_sample(model: EpsModel, cond, schedule: DiffusionSchedule, x_init=None, rng=None, steps=None, shape=None,
                clip: float | None = None):
    """Deterministic (eta = 0) DDIM over a descending step list ending at x_0.

    With ``clip`` the clean-set estimate of every step is clamped to
    ``[-clip, clip]`` and the noise re-derived from it, which stops an
    off-distribution point from feeding back into ever larger predictions.
    """
    if x_init is None:
        if rng is None or shape is None:
            raise ValueError("pass x_init or (rng, shape)")
        x_init = rng.standard_normal(shape)
    steps = schedule.ddim_steps if steps is None else np.asarray(steps, dtype=int)
    x = np.asarray(x_init, dtype=float)
    B = x.shape[0]
    for i, k in enumerate(steps):
        eps = model.predict_eps(x, np.full(B, k), cond)
        ab = schedule.ab(k)
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if clip is not None:
            x0 = np.clip(x0, -clip, clip)
            eps = (x - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)
        ab_next = schedule.ab(steps[i + 1]) if i + 1 < len(steps) else 1.0
        x = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps
    return x


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainSettings:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    history_null_prob: float = 0.25
    history_noise: str = "per_row"  # or "shared"
    history_outlier_prob: float = 0.0
    history_outlier_max: float = 0.9


@dataclass
class TrainBatch:
    x0: np.ndarray  # (B, P, 3) world
    obs: ObsBatch
    r_first: np.ndarray  # (B, 3) world

    def __len__(self) -> int:
        return self.x0.shape[0]


def make_history(r_first_norm: np.ndarray, n_h: int, k_h: np.ndarray, schedule: DiffusionSchedule,
                 rng: np.random.Generator, noise: str = "per_row") -> np.ndarray:
    """Forward-diffuse the first contact point to step ``k_h`` as an (B, n_h, 3) set."""
    B = r_first_norm.shape[0]
    if noise == "per_row":
        eps_h = rng.standard_normal((B, n_h, 3))
    elif noise == "shared":
        eps_h = np.repeat(rng.standard_normal((B, 1, 3)), n_h, axis=1)
    else:
        raise ValueError(f"unknown history noise mode {noise!r}")
    ab = schedule.ab(k_h)[:, None, None]
    return np.sqrt(ab) * r_first_norm[:, None, :] + np.sqrt(1.0 - ab) * eps_h


def contaminate_history(model: Denoiser, hist: np.ndarray, poses: np.ndarray, rows: np.ndarray,
                        max_frac: float, rng: np.random.Generator) -> np.ndarray:
    """Swap a random share of the points in ``rows`` for random arm-surface points.

    Inferred point sets carry samples sitting on wrong modes of the posterior;
    without this the history seen in training is always a clean blob around
    the first contact.
    """
    hist = hist.copy()
    norm = model.normalizer
    R, p = poses_from_array(poses)
    n = hist.shape[1]
    for b in np.flatnonzero(rows):
        swap = rng.random(n) < rng.uniform(0.0, max_frac)
        if not swap.any():
            continue
        x = norm.to_world(rng.standard_normal((int(swap.sum()), 3)))
        pts, _, _, _ = batch_nearest_surface(model.robot, R[b], p[b], x)
        hist[b, swap] = norm.to_model(pts)
    return hist


def prepare_step(model: Denoiser, batch: TrainBatch, schedule: DiffusionSchedule, rng: np.random.Generator,
                 settings: TrainSettings) -> dict:
    """Draw the noise, diffusion steps and history of one training step."""
    norm = model.normalizer
    B, P, _ = batch.x0.shape
    x0 = norm.to_model(batch.x0)
    k = rng.integers(1, schedule.K + 1, size=B)
    eps = rng.standard_normal((B, P, 3))
    xk = forward_diffuse(x0, k, eps, schedule)
    k_h = rng.integers(1, schedule.K + 1, size=B)
    hist = make_history(norm.to_model(batch.r_first), model.arch.n_p, k_h, schedule, rng, settings.history_noise)
    if settings.history_outlier_prob > 0:
        rows = rng.random(B) < settings.history_outlier_prob
        hist = contaminate_history(model, hist, batch.obs.poses, rows, settings.history_outlier_max, rng)
    null = rng.random(B) < settings.history_null_prob
    if null.any():
        hist[null] = rng.standard_normal((int(null.sum()), model.arch.n_p, 3))
    R, p = poses_from_array(batch.obs.poses)
    dt = model.params.dtype
    out = {
        "x": torch.as_tensor(xk, dtype=dt),
        "k": k,
        "k_h": k_h,
        "eps": torch.as_tensor(eps, dtype=dt),
        "obs_feat": torch.as_tensor(obs_features(batch.obs, norm, model.arch.wrench_scale), dtype=dt),
        "hist": torch.as_tensor(hist, dtype=dt),
        "sdf": model.sdf_features(xk, R, p) if model.arch.use_sdf else None,
    }
    return out


def denoiser_loss(model: Denoiser) -> Callable:
    def loss_fn(params, b):
        pred = model.forward(params, b["x"], b["k"], b["obs_feat"], b["hist"], b["sdf"])
        return torch.mean((b["eps"] - pred) ** 2)

    return loss_fn


def train_step(model: Denoiser, adam: nn.AdamState, batch: TrainBatch, schedule: DiffusionSchedule,
               rng: np.random.Generator, settings: TrainSettings | None = None) -> float:
    """One optimizer step of the noise-prediction objective with history conditioning."""
    settings = settings or TrainSettings()
    prepared = prepare_step(model, batch, schedule, rng, settings)
    loss, grads = nn.grad(denoiser_loss(model), model.params, prepared)
    nn.adam_step(model.params, grads, adam, settings.lr, settings.beta1, settings.beta2, settings.eps)
    return loss


# ---------------------------------------------------------------------------
# recursive inference


@dataclass
class HistoricalState:
    """Last point set accepted as a single-contact estimate (normalized frame)."""

    x_ts: np.ndarray
    updates: int = 0

    @classmethod
    def null(cls, n_p: int, rng: np.random.Generator) -> "HistoricalState":
        return cls(rng.standard_normal((n_p, 3)))


class StateClassifier(Protocol):
    def classify_batch(self, obs: ObsBatch) -> np.ndarray: ...


def is_single(probs: np.ndarray) -> np.ndarray:
    """Single-contact decision; an exact tie counts as dual."""
    probs = np.asarray(probs)
    return probs[..., 0] > probs[..., 1]


def infer_batch(model: Denoiser, classifier: StateClassifier | None, obs: ObsBatch, hist: np.ndarray,
                schedule: DiffusionSchedule, rng: np.random.Generator, steps=None):
    """Sample point sets for a batch of windows and apply the history gate.

    Returns world-frame samples (B, n_p, 3), the updated normalized history
    (B, n_p, 3) and the per-window single-contact decisions.
    """
    B = len(obs)
    cond = model.make_condition(obs, hist)
    x_init = rng.standard_normal((B, model.arch.n_p, 3))
    z = ddim_sample(model, cond, schedule, x_init=x_init, steps=steps, clip=model.arch.x0_clip)
    if classifier is None:
        single = np.zeros(B, dtype=bool)
    else:
        single = is_single(classifier.classify_batch(obs))
    new_hist = np.where(single[:, None, None], z, hist)
    return model.normalizer.to_world(z), new_hist, single


def infer(model: Denoiser, classifier: StateClassifier | None, obs: ObservationWindow, state: HistoricalState,
          schedule: DiffusionSchedule, rng: np.random.Generator):
    """One recursive inference: sample, then keep the result as history if single-contact."""
    samples, hist, single = infer_batch(model, classifier, ObsBatch.stack([obs]), state.x_ts[None], schedule, rng)
    if single[0]:
        state = HistoricalState(hist[0], state.updates + 1)
    return samples[0], state
