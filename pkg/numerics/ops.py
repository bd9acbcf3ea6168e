"""
Differentiable kernels used by the language and knowledge modules.

Fused kernels (softmax, layer_norm, cross_entropy, segment_softmax) carry their
own analytic backward instead of being composed from primitives.
"""
from typing import Sequence, Union

import numpy as np

from exceptions import ShapeError
from numerics.tensor import Tensor, as_tensor

LEAKY_SLOPE = 0.2
_GELU_C = np.sqrt(2.0 / np.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis (shape {x.shape}, axis {axis})")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return Tensor._result(s, (x,), backward, 'softmax')


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"log_softmax over an empty axis (shape {x.shape}, axis {axis})")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - log_norm
    s = np.exp(out)

    def backward(g):
        return (g - s * np.sum(g, axis=axis, keepdims=True),)

    return Tensor._result(out, (x,), backward, 'log_softmax')


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Normalize the last axis to zero mean and unit variance, then scale and shift.

    Raises:
        ShapeError: gamma/beta width differs from the last axis of x
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match width {width}"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._result(out, (x, gamma, beta), backward, 'layer_norm')


def cross_entropy(logits: Tensor, targets: Union[int, Sequence[int], np.ndarray]) -> Tensor:
    """
    Mean of -log softmax(logits)[target] over rows.

    Accepts one logit vector with an int target, or an (n, C) matrix with n targets.

    Raises:
        IndexError: a target outside [0, C)
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    matrix = logits.data[None, :] if single else logits.data
    target_array = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    rows, classes = matrix.shape
    if target_array.shape != (rows,):
        raise ShapeError(f"{rows} logit rows but {target_array.shape[0]} targets")
    if rows == 0:
        raise ShapeError("cross_entropy over zero rows")
    if np.any(target_array < 0) or np.any(target_array >= classes):
        raise IndexError(f"target out of range [0, {classes}): {target_array.tolist()}")

    shifted = matrix - matrix.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    picked = log_probs[np.arange(rows), target_array]
    loss = -picked.mean()

    def backward(g):
        grad = np.exp(log_probs)
        grad[np.arange(rows), target_array] -= 1.0
        grad *= g / rows
        return (grad[0] if single else grad,)

    return Tensor._result(np.asarray(loss), (logits,), backward, 'cross_entropy')


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), 'relu')


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return Tensor._result(x.data * factor, (x,), lambda g: (g * factor,), 'leaky_relu')


def elu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    negative = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(x.data > 0, x.data, negative)
    slope = np.where(x.data > 0, 1.0, negative + 1.0)
    return Tensor._result(out, (x,), lambda g: (g * slope,), 'elu')


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)
    slope = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
    return Tensor._result(out, (x,), lambda g: (g * slope,), 'gelu')


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of nothing")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis),
                          tuple(tensors), backward, 'concat')


def index_add(base: Tensor, index: np.ndarray, source: Tensor) -> Tensor:
    """
    Copy of ``base`` with ``source[i]`` added to row ``index[i]``.

    Rows never named in ``index`` are returned bit-for-bit unchanged.
    """
    base, source = as_tensor(base), as_tensor(source)
    index = np.asarray(index, dtype=np.int64)
    if source.shape[0] != index.shape[0] or source.shape[1:] != base.shape[1:]:
        raise ShapeError(f"index_add source {source.shape} does not fit base {base.shape}")
    out = base.data.copy()
    np.add.at(out, index, source.data)
    return Tensor._result(out, (base, source), lambda g: (g, g[index]), 'index_add')


def segment_sum(x: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets; empty buckets are zero."""
    x = as_tensor(x)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    out = np.zeros((num_segments,) + x.shape[1:], dtype=np.float64)
    np.add.at(out, segment_ids, x.data)
    return Tensor._result(out, (x,), lambda g: (g[segment_ids],), 'segment_sum')


def segment_softmax(scores: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of ``scores`` rows within each segment (independently per trailing column)."""
    scores = as_tensor(scores)
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    peak = np.full((num_segments,) + scores.shape[1:], -np.inf)
    np.maximum.at(peak, segment_ids, scores.data)
    e = np.exp(scores.data - peak[segment_ids])
    denom = np.zeros_like(peak)
    np.add.at(denom, segment_ids, e)
    s = e / denom[segment_ids]

    def backward(g):
        weighted = np.zeros_like(peak)
        np.add.at(weighted, segment_ids, g * s)
        return (s * (g - weighted[segment_ids]),)

    return Tensor._result(s, (scores,), backward, 'segment_softmax')
