"""Deterministic interpolation bridge between an input image and a target signal.

The forward process blends the target ``y`` toward the input ``x``:

    y_t = sqrt(ab_t) * y + sqrt(1 - ab_t) * x

so the state runs from y at t=0 to x at t=T. Together with the rotation
complement

    v_t = sqrt(ab_t) * x - sqrt(1 - ab_t) * y

the pair (y_t, v_t) is an orthogonal rotation of (y, x); the reverse step
re-blends the recovered target estimate with the *known* input x:

    y_{t_prev} = sqrt(ab_{t_prev}) * y_hat + sqrt(1 - ab_{t_prev}) * x

All operations are pure, contain no random draws, and accept numpy arrays or
torch tensors of matching shape (a leading batch axis is allowed; per-sample
timesteps may then be passed as a 1-D integer array).
"""

from __future__ import annotations

import enum
from typing import Callable, Union

import numpy as np
import torch

from .schedule import AlphaBarSchedule, TimestepPlan

ImageArray = Union[np.ndarray, torch.Tensor]
DenoiseFn = Callable[[ImageArray, int], ImageArray]


class Parameterization(enum.Enum):
    """Which quantity the denoiser outputs at each step."""

    PREDICT_X = "predict_x"
    PREDICT_Y = "predict_y"
    PREDICT_V = "predict_v"

    @classmethod
    def from_string(cls, name: str) -> "Parameterization":
        key = name.strip().lower()
        for p in cls:
            if key in (p.value, p.value.removeprefix("predict_")):
                return p
        raise ValueError(f"unknown parameterization {name!r}; expected one of "
                         f"{[p.value for p in cls]}")


def _check_same_shape(a: ImageArray, b: ImageArray, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _blend_coeffs(schedule: AlphaBarSchedule, t, like: ImageArray):
    """sqrt(ab_t) and sqrt(1 - ab_t), broadcastable against ``like``.

    Scalar t yields python floats; a 1-D integer array yields per-sample
    coefficients shaped (B, 1, ..., 1) in the dtype of ``like``.
    """
    if isinstance(t, (int, np.integer)):
        ab = schedule.alpha_bar(int(t))
        return ab**0.5, (1.0 - ab) ** 0.5
    idx = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if idx.ndim != 1 or idx.shape[0] != like.shape[0]:
        raise ValueError("per-sample timesteps must be a 1-D array matching the batch size")
    if idx.min() < 0 or idx.max() > schedule.num_steps:
        raise ValueError(f"timesteps {idx} outside [0, {schedule.num_steps}]")
    ab = schedule.alpha_bars[idx.astype(np.int64)]
    shape = (like.shape[0],) + (1,) * (like.ndim - 1)
    sa = np.sqrt(ab).reshape(shape)
    sb = np.sqrt(1.0 - ab).reshape(shape)
    if isinstance(like, torch.Tensor):
        sa = torch.as_tensor(sa, dtype=like.dtype, device=like.device)
        sb = torch.as_tensor(sb, dtype=like.dtype, device=like.device)
    else:
        sa = sa.astype(like.dtype)
        sb = sb.astype(like.dtype)
    return sa, sb


def forward_blend(x: ImageArray, y: ImageArray, t, schedule: AlphaBarSchedule) -> ImageArray:
    """State of the interpolation chain at timestep t."""
    _check_same_shape(x, y, "forward_blend")
    sa, sb = _blend_coeffs(schedule, t, y)
    return sa * y + sb * x


def stochastic_forward(y: ImageArray, t, noise: ImageArray, schedule: AlphaBarSchedule) -> ImageArray:
    """Reference stochastic forward process: the blend with an external noise draw."""
    _check_same_shape(y, noise, "stochastic_forward")
    return forward_blend(noise, y, t, schedule)


def v_target(x: ImageArray, y: ImageArray, t, schedule: AlphaBarSchedule) -> ImageArray:
    """Training target for the v parameterization (rotation complement of y_t)."""
    _check_same_shape(x, y, "v_target")
    sa, sb = _blend_coeffs(schedule, t, x)
    return sa * x - sb * y


def recover_y(
    y_t: ImageArray,
    pred: ImageArray,
    param: Parameterization,
    x: ImageArray,
    t,
    schedule: AlphaBarSchedule,
) -> ImageArray:
    """Estimate of the clean target implied by a prediction at timestep t.

    PREDICT_V inverts the rotation; PREDICT_X solves the blend for y given the
    predicted input; PREDICT_Y passes the prediction through.
    """
    _check_same_shape(y_t, pred, "recover_y")
    if param is Parameterization.PREDICT_Y:
        return pred
    sa, sb = _blend_coeffs(schedule, t, y_t)
    if param is Parameterization.PREDICT_V:
        return sa * y_t - sb * pred
    if param is Parameterization.PREDICT_X:
        return (y_t - sb * pred) / sa
    raise ValueError(f"unknown parameterization {param!r}")


def recover_x(y_t: ImageArray, v: ImageArray, t, schedule: AlphaBarSchedule) -> ImageArray:
    """Input implied by (y_t, v); rotation inverse, used in tests and diagnostics."""
    _check_same_shape(y_t, v, "recover_x")
    sa, sb = _blend_coeffs(schedule, t, y_t)
    return sb * y_t + sa * v


def reverse_step(
    y_t: ImageArray,
    pred: ImageArray,
    param: Parameterization,
    x: ImageArray,
    t: int,
    t_prev: int,
    schedule: AlphaBarSchedule,
) -> ImageArray:
    """One reverse transition t -> t_prev, re-blending with the known input x."""
    if not 0 <= t_prev < t <= schedule.num_steps:
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t} t_prev={t_prev}")
    _check_same_shape(y_t, x, "reverse_step")
    y_hat = recover_y(y_t, pred, param, x, t, schedule)
    sa, sb = _blend_coeffs(schedule, t_prev, y_t)
    return sa * y_hat + sb * x


def sample(
    x: ImageArray,
    denoise_fn: DenoiseFn,
    param: Parameterization,
    plan: TimestepPlan,
    schedule: AlphaBarSchedule,
) -> ImageArray:
    """Run the full reverse chain from y_T = x down to the target estimate.

    Iterates reverse_step over consecutive plan entries; the final step targets
    t=0, where the ideal blend coefficient is exactly 1, so the output is the
    recovered target estimate itself (the schedule clamp only guards divisions
    and is not applied here).

    Deterministic: repeated calls with identical inputs and weights are
    bit-identical.
    """
    if len(plan) < 1:
        raise ValueError("empty timestep plan")
    if plan.steps[0] != schedule.num_steps:
        raise ValueError(
            f"plan must start at T={schedule.num_steps}, got {plan.steps[0]}"
        )
    state = x
    for t, t_prev in zip(plan.steps, plan.steps[1:]):
        pred = denoise_fn(state, t)
        state = reverse_step(state, pred, param, x, t, t_prev, schedule)
    t_last = plan.steps[-1]
    pred = denoise_fn(state, t_last)
    return recover_y(state, pred, param, x, t_last, schedule)


def single_step_predict(x: ImageArray, denoise_fn: DenoiseFn, schedule: AlphaBarSchedule) -> ImageArray:
    """Direct-prediction baseline: one evaluation at t=T read as the output."""
    return denoise_fn(x, schedule.num_steps)
