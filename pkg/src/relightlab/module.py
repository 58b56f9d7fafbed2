"""Tiny module system: parameter registration with dotted-path names."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autograd import Parameter

__all__ = ["Module", "he_normal"]


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """He-normal initialization: std = sqrt(2 / fan_in)."""
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Module:
    """Base class holding parameters and submodules.

    Attribute assignment registers Parameters and Modules automatically;
    `named_parameters` walks the tree yielding dotted names and asserts
    uniqueness at collection time.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
            for i, v in enumerate(value):
                self._modules[f"{name}.{i}"] = v
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return list(self.parameter_dict().values())

    def parameter_dict(self) -> dict[str, Parameter]:
        """Parameters keyed by dotted path; also stamps each Parameter's name."""
        out: dict[str, Parameter] = {}
        for name, p in self.named_parameters():
            if name in out:
                raise ValueError(f"duplicate parameter name {name!r}")
            p.name = name
            out[name] = p
        return out

    def parameter_count(self) -> int:
        return sum(p.tensor.size for p in self.parameters())

    def train_mode(self, on: bool = True) -> "Module":
        object.__setattr__(self, "training", on)
        for m in self._modules.values():
            m.train_mode(on)
        return self

    def eval_mode(self) -> "Module":
        return self.train_mode(False)

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.trainable = False
            p.tensor.requires_grad = False
        return self
