"""Blend-coefficient schedules and inference timestep plans.

The diffusion bridge is controlled by a decreasing sequence of blend
coefficients ``alpha_bar[t]`` for ``t = 0..T``: near 1 at t=0 (state is the
target) and near 0 at t=T (state is the input). Two families are provided:
``cosine`` for desk-scale training and ``scaled_linear`` for compatibility
with pretrained latent-diffusion checkpoints.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ALPHA_BAR_MIN = 1e-5
ALPHA_BAR_MAX = 1.0 - 1e-5

SCHEDULE_KINDS = ("cosine", "scaled_linear")

_COSINE_S = 0.008
_SCALED_LINEAR_BETA_START = 0.00085
_SCALED_LINEAR_BETA_END = 0.012


@dataclass(frozen=True)
class AlphaBarSchedule:
    """Monotone blend coefficients over discrete timesteps.

    ``alpha_bars`` has length ``T + 1`` and is indexed by timestep, strictly
    decreasing from ~1 at t=0 to ~0 at t=T, clamped away from exact 0/1 so
    the parameterization conversions never divide by zero.
    """

    kind: str
    num_steps: int
    alpha_bars: np.ndarray = field(repr=False)

    def __post_init__(self):
        bars = np.asarray(self.alpha_bars, dtype=np.float64)
        bars.setflags(write=False)
        object.__setattr__(self, "alpha_bars", bars)
        if self.num_steps < 1:
            raise ValueError(f"number of timesteps must be >= 1, got {self.num_steps}")
        if bars.shape != (self.num_steps + 1,):
            raise ValueError(
                f"alpha_bars must have length T+1={self.num_steps + 1}, got {bars.shape}"
            )
        if bars[0] < 1.0 - 1e-4:
            raise ValueError(f"alpha_bars[0]={bars[0]} must be >= 1 - 1e-4")
        if bars[-1] > 1e-3:
            raise ValueError(f"alpha_bars[T]={bars[-1]} must be <= 1e-3")
        if np.any(np.diff(bars) >= 0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if bars.min() < ALPHA_BAR_MIN or bars.max() > ALPHA_BAR_MAX:
            raise ValueError("alpha_bars must lie within the clamp range")

    @property
    def T(self) -> int:
        return self.num_steps

    def alpha_bar(self, t: int) -> float:
        """Blend coefficient at integer timestep ``t`` (0 <= t <= T)."""
        if not 0 <= t <= self.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_steps}]")
        return float(self.alpha_bars[t])

    def describe(self) -> dict:
        return {"kind": self.kind, "num_steps": self.num_steps}


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly decreasing inference timesteps, first entry at T."""

    steps: tuple[int, ...]

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ValueError("plan must contain at least one timestep")
        if self.steps[-1] < 1:
            raise ValueError(f"last plan timestep must be >= 1, got {self.steps[-1]}")
        if any(a <= b for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError(f"plan timesteps must be strictly decreasing: {self.steps}")

    def __len__(self) -> int:
        return len(self.steps)


def _cosine_alpha_bars(num_steps: int) -> np.ndarray:
    s = _COSINE_S
    t = np.arange(num_steps + 1, dtype=np.float64)
    f = np.cos(((t / num_steps + s) / (1 + s)) * math.pi / 2) ** 2
    return f / math.cos(s * math.pi / (2 * (1 + s))) ** 2


def _scaled_linear_alpha_bars(num_steps: int) -> np.ndarray:
    betas = (
        np.linspace(
            math.sqrt(_SCALED_LINEAR_BETA_START),
            math.sqrt(_SCALED_LINEAR_BETA_END),
            num_steps,
            dtype=np.float64,
        )
        ** 2
    )
    bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    # The raw cumulative product terminates well above zero (~5e-3 at T=1000),
    # which would leave a visible target residue at t=T. Rescale sqrt(alpha_bar)
    # affinely so the terminal value lands on the clamp floor while t=0 is fixed.
    sq = np.sqrt(bars)
    target = math.sqrt(ALPHA_BAR_MIN)
    sq = (sq - sq[-1]) * (sq[0] - target) / (sq[0] - sq[-1]) + target
    return sq**2


def _clamp_strictly_decreasing(bars: np.ndarray) -> np.ndarray:
    """Clamp into the working range, then repair any ties the clamp created.

    Clamping can flatten the tail of a fast-decaying family onto the floor;
    the backward pass lifts each tied value a hair above its successor so the
    sequence stays strictly decreasing.
    """
    bars = np.clip(bars, ALPHA_BAR_MIN, ALPHA_BAR_MAX)
    for t in range(len(bars) - 2, -1, -1):
        if bars[t] <= bars[t + 1]:
            bars[t] = min(bars[t + 1] * (1.0 + 1e-6), ALPHA_BAR_MAX)
    if np.any(np.diff(bars) >= 0):
        raise ValueError("could not produce a strictly decreasing schedule")
    return bars


def make_schedule(kind: str, num_steps: int) -> AlphaBarSchedule:
    """Build the blend-coefficient schedule for a supported family.

    Args:
        kind: one of ``cosine`` or ``scaled_linear``.
        num_steps: number of training timesteps T (>= 1).
    """
    if num_steps < 1:
        raise ValueError(f"number of timesteps must be >= 1, got {num_steps}")
    if kind == "cosine":
        bars = _cosine_alpha_bars(num_steps)
    elif kind == "scaled_linear":
        bars = _scaled_linear_alpha_bars(num_steps)
    else:
        raise ValueError(f"unsupported schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    return AlphaBarSchedule(kind=kind, num_steps=num_steps, alpha_bars=_clamp_strictly_decreasing(bars))


def inference_timesteps(schedule: AlphaBarSchedule, num_inference_steps: int) -> TimestepPlan:
    """Select K timesteps uniformly spaced in t, pinned at T and (for K > 1) at 1.

    Deterministic for fixed (T, K); K=1 yields the single-step plan [T].
    """
    T = schedule.num_steps
    K = num_inference_steps
    if K < 1:
        raise ValueError(f"inference step count must be >= 1, got {K}")
    if K > T:
        raise ValueError(f"inference step count {K} exceeds training timesteps {T}")
    steps = tuple(int(v) for v in np.linspace(T, 1, K))
    return TimestepPlan(steps=steps)
