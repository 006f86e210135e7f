"""Seeded parameter initialization.

Every weight tensor is drawn uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) with
fan_in taken as the trailing dimension (input features for linear maps,
vector width for embedding tables); biases are zero and norm gains are one.
Parameters are visited in sorted-name order from a single generator, so a
given seed always produces byte-identical parameters.
"""

from __future__ import annotations

import math

import torch
from torch import nn


def init_parameters(module: nn.Module, seed: int) -> None:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if name.endswith(".bias") or name == "bias":
                param.zero_()
            elif param.ndim == 1:
                param.fill_(1.0)  # norm gain
            else:
                bound = 1.0 / math.sqrt(param.shape[-1])
                u = torch.rand(param.shape, generator=gen, dtype=param.dtype)
                param.copy_(u * (2.0 * bound) - bound)
