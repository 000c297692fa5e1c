"""Single vs dual contact-state classifier used to gate the history update."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from . import nn
from .diffusion import encode_mlp, obs_features
from .observation import ObsBatch, ObservationWindow
from .robot import Normalizer, RobotModel

SINGLE = np.array([1.0, 0.0])
DUAL = np.array([0.0, 1.0])


@dataclass
class ClassifierArch:
    n_q: int
    T_w: int
    width: int = 256
    depth: int = 3
    wrench_scale: float = 10.0
    logit_clip: float = 30.0

    @property
    def obs_dim(self) -> int:
        return self.T_w * (self.n_q + 6) + self.n_q + 7 * self.n_q


def one_hot(single: np.ndarray) -> np.ndarray:
    """Label encoding: single = (1, 0), dual = (0, 1)."""
    single = np.asarray(single, dtype=bool)
    return np.where(single[:, None], SINGLE, DUAL)


def cross_entropy(probs, y, eps: float = 0.0):
    """Mean over items of ``-(sum_j y_j log p_j)``; works on numpy or torch."""
    if isinstance(probs, torch.Tensor):
        return -(y * torch.log(probs + eps)).sum(dim=-1).mean()
    probs = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(np.asarray(y) > 0, np.asarray(y) * np.log(probs + eps), 0.0)
    return float(-terms.sum(axis=-1).mean())


class ContactClassifier:
    def __init__(self, robot: RobotModel, arch: ClassifierArch, params: nn.ParamStore):
        self.robot = robot
        self.arch = arch
        self.params = params
        self.normalizer = Normalizer.for_robot(robot)

    @classmethod
    def create(cls, robot: RobotModel, arch: ClassifierArch, seed: int = 0, dtype=torch.float32):
        rng = np.random.default_rng(seed)
        ps = nn.ParamStore(dtype=dtype)
        n_in = arch.obs_dim
        for i in range(arch.depth):
            nn.init_dense(ps, f"enc.{i}", n_in, arch.width, rng)
            n_in = arch.width
        nn.init_dense(ps, "head", arch.width, 2, rng)
        return cls(robot, arch, ps)

    def features(self, obs: ObsBatch) -> torch.Tensor:
        feat = obs_features(obs, self.normalizer, self.arch.wrench_scale)
        return torch.as_tensor(feat, dtype=self.params.dtype)

    def logits(self, params: nn.ParamStore, feat: torch.Tensor) -> torch.Tensor:
        h = encode_mlp(params, "enc", feat, self.arch.depth)
        z = nn.dense_forward(params, "head", h)
        c = self.arch.logit_clip
        return torch.clamp(z, -c, c)

    def probs(self, params: nn.ParamStore, feat: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(params, feat), dim=-1)

    def classify_batch(self, obs: ObsBatch) -> np.ndarray:
        """(B, 2) probabilities ``(p_single, p_dual)``."""
        with torch.no_grad():
            p = self.probs(self.params, self.features(obs))
        return p.numpy().astype(float)

    def classify(self, obs: ObservationWindow) -> tuple[float, float]:
        p = self.classify_batch(ObsBatch.stack([obs]))[0]
        return float(p[0]), float(p[1])

    def predict_single(self, obs: ObsBatch) -> np.ndarray:
        p = self.classify_batch(obs)
        return p[:, 0] > p[:, 1]

    def save(self, path, adam: nn.AdamState | None = None, extra_meta: dict | None = None) -> None:
        meta = {"kind": "classifier", "arch": asdict(self.arch), "robot": self.robot.name}
        meta.update(extra_meta or {})
        nn.save_params(path, self.params, meta, adam)

    @classmethod
    def load(cls, path, robot: RobotModel):
        params, meta, adam, _ = nn.load_params(path)
        if meta.get("kind") != "classifier":
            raise nn.CheckpointError(f"{path} is not a classifier checkpoint")
        return cls(robot, ClassifierArch(**meta["arch"]), params), adam, meta


def classifier_loss(model: ContactClassifier):
    def loss_fn(params, batch):
        feat, y = batch
        # log-softmax of clamped logits keeps the loss finite for confident outputs
        logp = torch.log_softmax(model.logits(params, feat), dim=-1)
        return -(y * logp).sum(dim=-1).mean()

    return loss_fn


def classifier_train_step(model: ContactClassifier, adam: nn.AdamState, obs: ObsBatch, single: np.ndarray,
                          lr: float = 1e-3) -> float:
    """One Adam step on the negated binary cross-entropy."""
    y = torch.as_tensor(one_hot(single), dtype=model.params.dtype)
    loss, grads = nn.grad(classifier_loss(model), model.params, (model.features(obs), y))
    nn.adam_step(model.params, grads, adam, lr)
    return loss
