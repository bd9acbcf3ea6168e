"""
Parameter containers shared by the language and knowledge modules.
"""
from typing import Dict

import numpy as np

from exceptions import ShapeError
from numerics import Parameter, Tensor, layer_norm


def init_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Module:
    """
    Holds Parameters and child Modules as attributes.

    ``named_parameters`` walks attributes (including lists of modules) and
    returns dotted names in sorted order.
    """

    def named_parameters(self, prefix: str = '') -> Dict[str, Parameter]:
        found: Dict[str, Parameter] = {}
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                found[prefix + key] = value
            elif isinstance(value, Module):
                found.update(value.named_parameters(f"{prefix}{key}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        found.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return dict(sorted(found.items()))

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, std: float,
                 bias: bool = True):
        self.weight = Parameter(init_normal(rng, (in_features, out_features), std), name='weight')
        self.bias = Parameter(np.zeros(out_features), name='bias') if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"Linear expects width {self.weight.shape[0]}, got {x.shape}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(width), name='gamma')
        self.beta = Parameter(np.zeros(width), name='beta')
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, count: int, width: int, rng: np.random.Generator, std: float):
        self.table = Parameter(init_normal(rng, (count, width), std), name='table')

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.table.shape[0]):
            raise IndexError(f"embedding id outside [0, {self.table.shape[0]})")
        return self.table[ids]
