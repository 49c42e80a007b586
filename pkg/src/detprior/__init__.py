"""Deterministic interpolation diffusion for pixel-level semantic prediction."""

from .bridge import (
    Parameterization,
    forward_blend,
    recover_x,
    recover_y,
    reverse_step,
    sample,
    single_step_predict,
    stochastic_forward,
    v_target,
)
from .schedule import AlphaBarSchedule, TimestepPlan, inference_timesteps, make_schedule

__all__ = [
    "AlphaBarSchedule",
    "TimestepPlan",
    "Parameterization",
    "make_schedule",
    "inference_timesteps",
    "forward_blend",
    "stochastic_forward",
    "v_target",
    "recover_y",
    "recover_x",
    "reverse_step",
    "sample",
    "single_step_predict",
]

__version__ = "0.1.0"
