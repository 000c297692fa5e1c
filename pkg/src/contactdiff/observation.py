"""Observation windows fed to the denoiser and the contact-state classifier."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass
class ObservationWindow:
    """Conditioning input for one inference.

    ``wrench_seq`` holds the downsampled stacked wrench estimates over the
    window (oldest first, last row = newest sample); kinematics are current
    values only.
    """

    wrench_seq: np.ndarray  # (T_w, n_q + 6)
    q_now: np.ndarray  # (n_q,)
    link_poses_now: np.ndarray  # (n_q, 7): position, quaternion (w, x, y, z)

    def __post_init__(self):
        self.wrench_seq = np.asarray(self.wrench_seq, dtype=np.float32)
        self.q_now = np.asarray(self.q_now, dtype=float)
        self.link_poses_now = np.asarray(self.link_poses_now, dtype=float)
        n_q = self.q_now.shape[0]
        if self.wrench_seq.ndim != 2 or self.wrench_seq.shape[0] < 1 or self.wrench_seq.shape[1] != n_q + 6:
            raise ValueError(f"wrench_seq must be (T_w >= 1, {n_q + 6}), got {self.wrench_seq.shape}")
        if self.link_poses_now.shape != (n_q, 7):
            raise ValueError(f"link_poses_now must be ({n_q}, 7)")

    @property
    def measurement(self) -> np.ndarray:
        """Newest stacked wrench sample, as float64."""
        return self.wrench_seq[-1].astype(float)


@dataclass
class ObsBatch:
    wrench: np.ndarray  # (B, T_w, n_q + 6) float32
    q: np.ndarray  # (B, n_q)
    poses: np.ndarray  # (B, n_q, 7)

    def __len__(self) -> int:
        return self.wrench.shape[0]

    def __getitem__(self, idx) -> "ObsBatch":
        idx = np.atleast_1d(np.asarray(idx)) if not isinstance(idx, slice) else idx
        return ObsBatch(self.wrench[idx], self.q[idx], self.poses[idx])

    def window(self, i: int) -> ObservationWindow:
        return ObservationWindow(self.wrench[i], self.q[i], self.poses[i])

    @classmethod
    def stack(cls, windows: Sequence[ObservationWindow]) -> "ObsBatch":
        return cls(
            np.stack([w.wrench_seq for w in windows]).astype(np.float32),
            np.stack([w.q_now for w in windows]),
            np.stack([w.link_poses_now for w in windows]),
        )
