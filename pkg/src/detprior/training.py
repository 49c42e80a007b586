"""Fine-tuning loop for the interpolation bridge and checkpoint serialization.

The objective is a mean-square error against the parameterization's target at
a uniformly drawn timestep; runs are fully determined by the config seed (data
order, timestep draws, and initialization), which is what makes loss logs and
checkpoints bit-reproducible on a single device.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import adapter as adapter_mod
from .bridge import Parameterization, forward_blend, v_target
from .denoiser import AnalyticIdentityModel, ToyUNet
from .schedule import AlphaBarSchedule, make_schedule
from .taskio import PairedSample

CHECKPOINT_MAGIC = b"DPRCKPT\n"
FORMAT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    param: Parameterization = Parameterization.PREDICT_V
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 1e-3  # peak; cosine-decayed to zero unless disabled
    schedule_kind: str = "cosine"
    num_timesteps: int = 1000
    use_adapters: bool = False
    lora_rank: int = adapter_mod.DEFAULT_RANK
    lora_alpha: float = adapter_mod.DEFAULT_ALPHA
    lora_pattern: str = adapter_mod.DEFAULT_TARGET_PATTERN
    seed: int = 0
    single_step_mode: bool = False
    cosine_lr_decay: bool = True
    ema_decay: float | None = None

    def validate(self) -> "TrainConfig":
        if isinstance(self.param, str):
            self.param = Parameterization.from_string(self.param)
        if self.single_step_mode and self.param is not Parameterization.PREDICT_Y:
            raise ValueError(
                "single-step mode trains direct prediction of the output; "
                f"param must be predict_y, got {self.param.value}"
            )
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema decay must lie in (0, 1)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["param"] = self.param.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["param"] = Parameterization.from_string(d["param"])
        return cls(**d).validate()


def loss(pred, x, y, t, param: Parameterization, schedule: AlphaBarSchedule):
    """Mean squared error of the prediction against its parameterization target."""
    if param is Parameterization.PREDICT_V:
        target = v_target(x, y, t, schedule)
    elif param is Parameterization.PREDICT_X:
        target = x
    elif param is Parameterization.PREDICT_Y:
        target = y
    else:
        raise ValueError(f"unknown parameterization {param!r}")
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def samples_to_tensors(samples: list[PairedSample]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack paired samples into channels-first float32 (x, y) batches."""
    if not samples:
        raise ValueError("empty batch")
    x = np.stack([np.moveaxis(s.input, -1, 0) for s in samples])
    y = np.stack([np.moveaxis(s.target, -1, 0) for s in samples])
    return torch.from_numpy(x).float(), torch.from_numpy(y).float()


@dataclass
class TrainState:
    model: torch.nn.Module
    config: TrainConfig
    optimizer: torch.optim.Optimizer
    t_generator: torch.Generator
    step: int = 0
    ema: dict[str, torch.Tensor] | None = None
    trainable: list[torch.nn.Parameter] = field(default_factory=list)


def make_train_state(model: torch.nn.Module, config: TrainConfig) -> TrainState:
    """Attach adapters if configured and set up the optimizer over the trainable set."""
    config.validate()
    if config.use_adapters:
        adapter_mod.attach(model, config.lora_pattern, config.lora_rank, config.lora_alpha)
        trainable = adapter_mod.trainable_parameters(model)
    else:
        trainable = [p for p in model.parameters() if p.requires_grad]
    if not trainable:
        raise ValueError("model has no trainable parameters")
    optimizer = torch.optim.Adam(trainable, lr=config.learning_rate)
    t_gen = torch.Generator().manual_seed(config.seed * 7919 + 1)
    ema = None
    if config.ema_decay is not None:
        ema = {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}
    return TrainState(model=model, config=config, optimizer=optimizer, t_generator=t_gen,
                      ema=ema, trainable=trainable)


def train_step(state: TrainState, batch: list[PairedSample], schedule: AlphaBarSchedule) -> float:
    """One optimizer update on the trainable parameters; returns the batch loss."""
    config = state.config
    if config.cosine_lr_decay:
        frac = min(state.step / max(config.steps, 1), 1.0)
        lr = config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * frac))
        for group in state.optimizer.param_groups:
            group["lr"] = lr
    x, y = samples_to_tensors(batch)
    if config.single_step_mode:
        t = torch.full((x.shape[0],), schedule.num_steps, dtype=torch.long)
    else:
        t = torch.randint(1, schedule.num_steps + 1, (x.shape[0],), generator=state.t_generator)
    y_t = forward_blend(x, y, t, schedule)
    pred = state.model(y_t, t)
    batch_loss = loss(pred, x, y, t, config.param, schedule)
    value = float(batch_loss.detach())
    if not np.isfinite(value):
        raise TrainingDiverged(
            f"non-finite loss {value} at step {state.step} "
            f"(param={config.param.value}, lr={config.learning_rate})"
        )
    state.optimizer.zero_grad()
    batch_loss.backward()
    state.optimizer.step()
    if state.ema is not None:
        decay = config.ema_decay
        with torch.no_grad():
            for n, p in state.model.named_parameters():
                if n in state.ema:
                    state.ema[n].mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    state.step += 1
    return value


def fit(
    state: TrainState,
    samples: list[PairedSample],
    schedule: AlphaBarSchedule,
) -> list[float]:
    """Run the configured number of steps over shuffled minibatches."""
    if not samples:
        raise ValueError("no training samples")
    config = state.config
    order_rng = np.random.default_rng(config.seed * 6007 + 3)
    n = len(samples)
    order = order_rng.permutation(n)
    pos = 0
    losses = []
    for _ in range(config.steps):
        if config.batch_size > n:
            idx = order_rng.integers(0, n, size=config.batch_size)
        else:
            if pos + config.batch_size > n:
                order = order_rng.permutation(n)
                pos = 0
            idx = order[pos : pos + config.batch_size]
            pos += config.batch_size
        losses.append(train_step(state, [samples[i] for i in idx], schedule))
    if state.ema is not None:
        with torch.no_grad():
            for n_, p in state.model.named_parameters():
                if n_ in state.ema:
                    p.copy_(state.ema[n_])
    return losses


# ---------------------------------------------------------------------------
# checkpoint container: magic, 8-byte header length, JSON header, raw arrays
# ---------------------------------------------------------------------------


def _array_payload(tensors: dict[str, torch.Tensor]) -> tuple[list[dict], bytes]:
    index, chunks = [], []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy())
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    return index, b"".join(chunks)


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    config: TrainConfig,
    schedule: AlphaBarSchedule,
    *,
    task: str,
    step: int = 0,
    init_seed: int | None = None,
) -> None:
    """Write a single-file checkpoint atomically (temp file + rename)."""
    path = Path(path)
    if isinstance(model, AnalyticIdentityModel):
        model_desc: dict = {"kind": "analytic_identity"}
        index, payload = [], b""
        mode = "analytic"
    elif isinstance(model, ToyUNet):
        model_desc = {
            "kind": "toy_unet",
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in model.config.items()},
            "init_seed": init_seed if init_seed is not None else config.seed,
        }
        if config.use_adapters:
            mode = "adapter"
            index, payload = _array_payload(adapter_mod.named_adapter_state(model))
        else:
            mode = "full"
            index, payload = _array_payload(dict(model.state_dict()))
    else:
        raise ValueError(f"cannot checkpoint model of type {type(model).__name__}")
    header = {
        "format_version": FORMAT_VERSION,
        "mode": mode,
        "task": task,
        "step": step,
        "param": config.param.value,
        "schedule": schedule.describe(),
        "train_config": config.to_dict(),
        "model": model_desc,
        "adapters": adapter_mod.adapter_settings(model) if mode == "adapter" else [],
        "arrays": index,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(blob).to_bytes(8, "little"))
        f.write(blob)
        f.write(payload)
    os.replace(tmp, path)


@dataclass
class LoadedCheckpoint:
    model: torch.nn.Module
    config: TrainConfig
    schedule: AlphaBarSchedule
    task: str
    step: int
    header: dict


def load_checkpoint(path: str | Path) -> LoadedCheckpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    header_len = int.from_bytes(raw[offset : offset + 8], "little")
    try:
        header = json.loads(raw[offset + 8 : offset + 8 + header_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path} has a corrupted header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported checkpoint format_version {header.get('format_version')!r}; "
            f"this build reads version {FORMAT_VERSION}"
        )
    arrays: dict[str, torch.Tensor] = {}
    cursor = offset + 8 + header_len
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * dtype.itemsize
        arr = np.frombuffer(raw[cursor : cursor + nbytes], dtype=dtype).reshape(entry["shape"])
        arrays[entry["name"]] = torch.from_numpy(arr.copy())
        cursor += nbytes

    config = TrainConfig.from_dict(header["train_config"])
    schedule = make_schedule(header["schedule"]["kind"], header["schedule"]["num_steps"])
    desc = header["model"]
    if desc["kind"] == "analytic_identity":
        model: torch.nn.Module = AnalyticIdentityModel(schedule, config.param)
    elif desc["kind"] == "toy_unet":
        model_config = dict(desc["config"])
        for key in ("channels", "attention_levels"):
            model_config[key] = tuple(model_config[key])
        if header["mode"] == "adapter":
            # base weights are not stored; rebuild them from the recorded init seed
            torch.manual_seed(desc["init_seed"])
            model = ToyUNet(**model_config)
            adapter_mod.attach(model, config.lora_pattern, config.lora_rank, config.lora_alpha)
            with torch.no_grad():
                for name, lora in adapter_mod.adapters(model).items():
                    lora.lora_A.copy_(arrays[f"{name}.lora_A"])
                    lora.lora_B.copy_(arrays[f"{name}.lora_B"])
        else:
            model = ToyUNet(**model_config)
            model.load_state_dict(arrays)
    else:
        raise ValueError(f"unknown model kind {desc['kind']!r}")
    model.eval()
    return LoadedCheckpoint(
        model=model,
        config=config,
        schedule=schedule,
        task=header["task"],
        step=header["step"],
        header=header,
    )
