"""Named parameter containers shared by the encoder stacks and task heads."""

from __future__ import annotations

import dataclasses
from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamGroup:
    """Mixin for dataclasses whose fields are tensors, lists of groups, or groups."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = f"{prefix}{f.name}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, ParamGroup):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, ParamGroup):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.copy()

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


def zeros(shape) -> Tensor:
    return param(np.zeros(shape))


def ones(shape) -> Tensor:
    return param(np.ones(shape))
