"""Minimal double-precision network kernel.

Supports exactly the layer kinds declared in :mod:`fedsim.models`: dense,
conv (square kernel, zero padding), relu, maxpool and flatten.  The backward
pass is hand-derived per layer; correctness is pinned by central
finite-difference checks in the test suite.

Convolution is implemented with an im2col expansion, and the maxpool backward
routes gradients through the argmax taken in the forward pass (first maximum
wins on ties), so results are deterministic for fixed inputs.
"""

from __future__ import annotations

import numpy as np

from fedsim.errors import DimensionError
from fedsim.models import (
    LayerSpec,
    ModelParams,
    ModelSpec,
    layer_name,
    validate_params,
)


def _window_indices(k: int, stride: int, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column gather indices of shape ``(k*k, out_h*out_w)``."""

    i0 = np.repeat(np.arange(k), k)
    j0 = np.tile(np.arange(k), k)
    i1 = stride * np.repeat(np.arange(out_h), out_w)
    j1 = stride * np.tile(np.arange(out_w), out_h)
    return i0[:, None] + i1[None, :], j0[:, None] + j1[None, :]


def _dense_forward(x, w, b):
    return x @ w.T + b, x


def _dense_backward(dy, w, cache):
    x = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def _conv_forward(x, w, b, layer: LayerSpec):
    n, c, h, wid = x.shape
    k, s, p = layer.kernel, layer.stride, layer.padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    out_h = (h + 2 * p - k) // s + 1
    out_w = (wid + 2 * p - k) // s + 1
    i, j = _window_indices(k, s, out_h, out_w)
    cols = xp[:, :, i, j].reshape(n, c * k * k, -1)  # (n, c*k*k, out_h*out_w)
    wm = w.reshape(w.shape[0], -1)
    y = np.matmul(wm, cols) + b[:, None]
    y = y.reshape(n, w.shape[0], out_h, out_w)
    return y, (cols, x.shape, i, j)


def _conv_backward(dy, w, layer: LayerSpec, cache):
    cols, x_shape, i, j = cache
    n, c, h, wid = x_shape
    k, p = layer.kernel, layer.padding
    dyl = dy.reshape(n, dy.shape[1], -1)  # (n, out_c, L)
    dw = np.einsum("nol,nfl->of", dyl, cols).reshape(w.shape)
    db = dyl.sum(axis=(0, 2))
    wm = w.reshape(w.shape[0], -1)
    dcols = np.matmul(wm.T, dyl).reshape(n, c, k * k, -1)
    xp_grad = np.zeros((n, c, h + 2 * p, wid + 2 * p), dtype=np.float64)
    np.add.at(xp_grad, (slice(None), slice(None), i, j), dcols)
    dx = xp_grad[:, :, p : p + h, p : p + wid] if p else xp_grad
    return dx, dw, db


def _maxpool_forward(x, layer: LayerSpec):
    n, c, h, wid = x.shape
    k, s = layer.kernel, layer.stride
    out_h = (h - k) // s + 1
    out_w = (wid - k) // s + 1
    i, j = _window_indices(k, s, out_h, out_w)
    windows = x[:, :, i, j]  # (n, c, k*k, L)
    amax = windows.argmax(axis=2)  # first maximum on ties
    y = np.take_along_axis(windows, amax[:, :, None, :], axis=2)[:, :, 0, :]
    return y.reshape(n, c, out_h, out_w), (x.shape, i, j, amax)


def _maxpool_backward(dy, cache):
    x_shape, i, j, amax = cache
    n, c = x_shape[0], x_shape[1]
    length = amax.shape[-1]
    dyl = dy.reshape(n, c, length)
    ri = i[amax, np.arange(length)[None, None, :]]
    cj = j[amax, np.arange(length)[None, None, :]]
    dx = np.zeros(x_shape, dtype=np.float64)
    np.add.at(
        dx,
        (np.arange(n)[:, None, None], np.arange(c)[None, :, None], ri, cj),
        dyl,
    )
    return dx


def _check_batch(spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    expected = tuple(spec.input_shape)
    if batch.ndim != len(expected) + 1 or tuple(batch.shape[1:]) != expected:
        raise DimensionError(
            f"batch shape {batch.shape} does not match model input "
            f"(batch, {', '.join(map(str, expected))})"
        )
    if batch.shape[0] < 1:
        raise DimensionError("batch is empty")
    return batch


def forward_cached(spec: ModelSpec, params: ModelParams, batch: np.ndarray):
    """Logits plus the per-layer caches needed for the backward pass."""

    x = _check_batch(spec, batch)
    validate_params(spec, params)
    caches: list = []
    for idx, layer in enumerate(spec.layers):
        try:
            if layer.kind == "dense":
                x, cache = _dense_forward(
                    x, params.tensors[f"layer{idx}.weight"], params.tensors[f"layer{idx}.bias"]
                )
            elif layer.kind == "conv":
                x, cache = _conv_forward(
                    x,
                    params.tensors[f"layer{idx}.weight"],
                    params.tensors[f"layer{idx}.bias"],
                    layer,
                )
            elif layer.kind == "relu":
                cache = x > 0
                x = x * cache
            elif layer.kind == "maxpool":
                x, cache = _maxpool_forward(x, layer)
            elif layer.kind == "flatten":
                cache = x.shape
                x = x.reshape(x.shape[0], -1)
        except ValueError as exc:  # pragma: no cover - guarded by spec validation
            raise DimensionError(f"{layer_name(idx, layer)}: {exc}") from exc
        caches.append(cache)
    return x, caches


def backward_from_cache(
    spec: ModelSpec, params: ModelParams, caches: list, logit_grad: np.ndarray
) -> dict[str, np.ndarray]:
    """Parameter gradients given caches from :func:`forward_cached`."""

    grad = np.asarray(logit_grad, dtype=np.float64)
    grads: dict[str, np.ndarray] = {}
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        cache = caches[idx]
        if layer.kind == "dense":
            grad, dw, db = _dense_backward(grad, params.tensors[f"layer{idx}.weight"], cache)
            grads[f"layer{idx}.weight"] = dw
            grads[f"layer{idx}.bias"] = db
        elif layer.kind == "conv":
            grad, dw, db = _conv_backward(
                grad, params.tensors[f"layer{idx}.weight"], layer, cache
            )
            grads[f"layer{idx}.weight"] = dw
            grads[f"layer{idx}.bias"] = db
        elif layer.kind == "relu":
            grad = grad * cache
        elif layer.kind == "maxpool":
            grad = _maxpool_backward(grad, cache)
        elif layer.kind == "flatten":
            grad = grad.reshape(cache)
    return grads


def model_forward(spec: ModelSpec, params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Class logits, shape ``(batch, class_count)``."""

    logits, _ = forward_cached(spec, params, batch)
    return logits


def model_backward(
    spec: ModelSpec, params: ModelParams, batch: np.ndarray, logit_grad: np.ndarray
) -> dict[str, np.ndarray]:
    """Gradient of a scalar loss wrt every parameter tensor.

    ``logit_grad`` is the loss gradient with respect to the logits (as
    returned by the functions in :mod:`fedsim.losses`).
    """

    logits, caches = forward_cached(spec, params, batch)
    logit_grad = np.asarray(logit_grad, dtype=np.float64)
    if logit_grad.shape != logits.shape:
        raise DimensionError(
            f"logit gradient shape {logit_grad.shape} does not match logits {logits.shape}"
        )
    return backward_from_cache(spec, params, caches, logit_grad)


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], learning_rate: float) -> ModelParams:
    """One plain gradient step; returns new parameters, inputs untouched."""

    if learning_rate < 0:
        raise DimensionError(f"learning rate must be non-negative, got {learning_rate}")
    if set(grads) != set(params.tensors):
        missing = set(params.tensors) ^ set(grads)
        raise DimensionError(f"gradient tensors do not match parameters: {sorted(missing)}")
    out: dict[str, np.ndarray] = {}
    for name, value in params.tensors.items():
        g = grads[name]
        if g.shape != value.shape:
            raise DimensionError(
                f"{name}: gradient shape {g.shape} does not match parameter {value.shape}"
            )
        out[name] = value - learning_rate * g
    return ModelParams(out)
