"""Independent float64 reference implementations and finite-difference
helpers. Everything here is written with naive loops or plain numpy in
float64, deliberately sharing no code with the package's compute paths."""

from __future__ import annotations

import numpy as np


def shadow_matmul(a, b):
    return np.asarray(a, np.float64) @ np.asarray(b, np.float64)


def shadow_affine(x, w, b):
    return shadow_matmul(x, w) + np.asarray(b, np.float64)


def shadow_relu(x):
    x = np.asarray(x, np.float64)
    return np.where(x > 0, x, 0.0)


def shadow_conv2d(x, w, b=None, stride=1, padding=1):
    x = np.asarray(x, np.float64)
    w = np.asarray(w, np.float64)
    batch, h, wid, cin = x.shape
    kh, kw, _, nf = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((batch, oh, ow, nf), np.float64)
    for n in range(batch):
        for i in range(oh):
            for j in range(ow):
                patch = x[n, i * stride : i * stride + kh, j * stride : j * stride + kw, :]
                for f in range(nf):
                    out[n, i, j, f] = np.sum(patch * w[:, :, :, f])
    if b is not None:
        out += np.asarray(b, np.float64)
    return out


def shadow_max_pool2d(x, size=2):
    x = np.asarray(x, np.float64)
    batch, h, w, c = x.shape
    oh, ow = h // size, w // size
    out = np.zeros((batch, oh, ow, c), np.float64)
    for n in range(batch):
        for i in range(oh):
            for j in range(ow):
                win = x[n, i * size : (i + 1) * size, j * size : (j + 1) * size, :]
                out[n, i, j, :] = win.max(axis=(0, 1))
    return out


def shadow_softmax(z):
    z = np.asarray(z, np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def shadow_cross_entropy(logits, label):
    p = shadow_softmax(np.asarray(logits, np.float64))
    return -np.log(p[..., label] if p.ndim == 1 else p[np.arange(len(p)), label])


def shadow_forward(model, images):
    """Whole-classifier float64 forward using the shadow ops and the
    model's current parameter values. Mirrors the layer recipe only."""
    from cloakbench.models import Conv, Dense, Flatten, MaxPool, Relu

    h = np.asarray(images, np.float64) / 255.0
    conv_i = dense_i = 0
    for layer in model.descriptor.layers:
        if isinstance(layer, Conv):
            h = shadow_conv2d(
                h,
                model.params[f"conv{conv_i}.w"].data,
                model.params[f"conv{conv_i}.b"].data,
                stride=layer.stride,
                padding=layer.padding,
            )
            conv_i += 1
        elif isinstance(layer, Relu):
            h = shadow_relu(h)
        elif isinstance(layer, MaxPool):
            h = shadow_max_pool2d(h, layer.size)
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
        elif isinstance(layer, Dense):
            h = shadow_affine(
                h, model.params[f"dense{dense_i}.w"].data, model.params[f"dense{dense_i}.b"].data
            )
            dense_i += 1
    return h


def central_diff(f, x, h=1e-3):
    """Central finite differences of a scalar function over every element
    of x, evaluated in float64."""
    x = np.asarray(x, np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return np.abs(a - b) / denom
