"""Linear noise schedule and inference-step subsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

DEFAULT_T_TRAIN = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def t_train(self) -> int:
        return len(self.betas)


@dataclass(frozen=True)
class TimestepMap:
    """Training-grid indices visited by an inference run.

    State ``k`` of a trajectory (``k = 0 .. T``) sits at training index 0 for
    ``k = 0`` and at ``inference_steps[k - 1] + offset`` otherwise, clipped to
    the last training index. ``offset = 1`` mirrors the ``steps_offset`` of the
    usual latent-diffusion scheduler config, so the first inversion step is a
    small but non-trivial move away from the clean state.
    """

    inference_steps: tuple[int, ...]
    t_train: int
    offset: int = 1

    @property
    def t_infer(self) -> int:
        return len(self.inference_steps)

    def state_indices(self) -> np.ndarray:
        idx = [0] + [min(i + self.offset, self.t_train - 1) for i in self.inference_steps]
        return np.asarray(idx, dtype=int)

    def state_alpha_bars(self, schedule: NoiseSchedule) -> np.ndarray:
        if schedule.t_train != self.t_train:
            raise ConfigError(
                f"timestep map built for t_train={self.t_train}, schedule has {schedule.t_train}"
            )
        return schedule.alpha_bars[self.state_indices()]


def build_schedule(
    t_train: int = DEFAULT_T_TRAIN,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly spaced betas and their cumulative products.

    ``beta_start = 0`` is accepted so the zero-noise schedule can be built; in
    that case alpha_bars is constant rather than strictly decreasing.
    """
    if int(t_train) != t_train or t_train < 2:
        raise ConfigError(f"t_train must be an integer >= 2, got {t_train}", key="t_train")
    if not (0.0 <= beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 <= beta_start <= beta_end < 1, got ({beta_start}, {beta_end})",
            key="beta_start",
        )
    betas = np.linspace(beta_start, beta_end, int(t_train), dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    betas.setflags(write=False)
    alpha_bars.setflags(write=False)
    return NoiseSchedule(betas=betas, alpha_bars=alpha_bars)


def subsample(schedule: NoiseSchedule, t_infer: int, offset: int = 1) -> TimestepMap:
    """Uniformly spaced inference steps ``floor(i * t_train / t_infer)``."""
    t_train = schedule.t_train
    if int(t_infer) != t_infer or not 1 <= t_infer <= t_train:
        raise ConfigError(f"t_infer must lie in [1, {t_train}], got {t_infer}", key="t_infer")
    if offset < 0:
        raise ConfigError(f"offset must be >= 0, got {offset}", key="steps_offset")
    steps = sorted({(i * t_train) // int(t_infer) for i in range(int(t_infer))})
    return TimestepMap(inference_steps=tuple(steps), t_train=t_train, offset=offset)
