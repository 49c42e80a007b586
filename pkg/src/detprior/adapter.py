"""Low-rank additive adapters for linear layers.

An adapter on a linear layer computes ``W h + (alpha / r) * B A h`` with the
base weight W frozen, A gaussian-initialized and B zero-initialized, so the
model is an exact no-op relative to the base until training moves B.
"""

from __future__ import annotations

import re

import torch
import torch.nn as nn

DEFAULT_RANK = 8
DEFAULT_ALPHA = 8.0
DEFAULT_TARGET_PATTERN = r"attn\."


class LoraLinear(nn.Module):
    """A frozen linear layer plus a trainable rank-r offset."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, layer_name: str):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank > min(d_in, d_out):
            raise ValueError(f"rank {rank} exceeds layer dims {d_out}x{d_in} of {layer_name}")
        if rank < 1 or alpha <= 0:
            raise ValueError("rank must be >= 1 and alpha > 0")
        self.base = base
        self.base.weight.requires_grad_(False)
        if self.base.bias is not None:
            self.base.bias.requires_grad_(False)
        self.rank = rank
        self.alpha = float(alpha)
        self.layer_name = layer_name
        self.lora_A = nn.Parameter(torch.randn(rank, d_in) / rank)
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta_weight(self) -> torch.Tensor:
        return self.scaling * (self.lora_B @ self.lora_A)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.base(h) + self.scaling * ((h @ self.lora_A.T) @ self.lora_B.T)


def _matched_linears(model: nn.Module, target_pattern: str) -> list[tuple[str, nn.Linear]]:
    pattern = re.compile(target_pattern)
    return [
        (name, module)
        for name, module in model.named_modules()
        if isinstance(module, nn.Linear) and pattern.search(name)
    ]


def _replace_module(model: nn.Module, name: str, replacement: nn.Module) -> None:
    parent_name, _, child = name.rpartition(".")
    parent = model.get_submodule(parent_name) if parent_name else model
    setattr(parent, child, replacement)


def attach(
    model: nn.Module,
    target_pattern: str = DEFAULT_TARGET_PATTERN,
    rank: int = DEFAULT_RANK,
    alpha: float = DEFAULT_ALPHA,
) -> nn.Module:
    """Attach adapters to every linear layer whose dotted name matches the pattern.

    Freezes all base parameters; returns the same model, mutated in place.
    """
    matches = _matched_linears(model, target_pattern)
    if not matches:
        raise ValueError(f"pattern {target_pattern!r} matched no linear layers")
    for p in model.parameters():
        p.requires_grad_(False)
    for name, linear in matches:
        _replace_module(model, name, LoraLinear(linear, rank, alpha, name))
    return model


def adapters(model: nn.Module) -> dict[str, LoraLinear]:
    return {m.layer_name: m for m in model.modules() if isinstance(m, LoraLinear)}


def merge(model: nn.Module) -> nn.Module:
    """Fold every adapter offset into its base weight and drop the adapters."""
    found = adapters(model)
    if not found:
        raise ValueError("no adapters attached")
    for name, lora in found.items():
        with torch.no_grad():
            lora.base.weight += lora.delta_weight()
        _replace_module(model, name, lora.base)
    return model


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    """The A and B matrices of all attached adapters; base weights excluded."""
    params: list[nn.Parameter] = []
    for lora in adapters(model).values():
        params.extend([lora.lora_A, lora.lora_B])
    return params


def named_adapter_state(model: nn.Module) -> dict[str, torch.Tensor]:
    """Adapter tensors keyed by layer name, for checkpoint serialization."""
    state: dict[str, torch.Tensor] = {}
    for name, lora in sorted(adapters(model).items()):
        state[f"{name}.lora_A"] = lora.lora_A.detach()
        state[f"{name}.lora_B"] = lora.lora_B.detach()
    return state


def adapter_settings(model: nn.Module) -> list[dict]:
    return [
        {"layer": name, "rank": lora.rank, "alpha": lora.alpha}
        for name, lora in sorted(adapters(model).items())
    ]


def count_trainable(model: nn.Module) -> int:
    return sum(p.numel() for p in trainable_parameters(model))
