"""Dense NCHW kernels: convolution, max pooling, linear, batchnorm, relu.

Forward and backward passes in plain numpy. Conventions:

* Convolution is cross-correlation (no kernel flip) with zero padding.
* MaxPool stride equals its kernel size; trailing rows/cols that do not
  fill a window are dropped.
* All functions are pure: inputs are never mutated, so they are safe to
  call from multiple threads.

Spatial ops accept a single image ``[C,H,W]`` or a batch ``[B,C,H,W]``;
``linear`` and ``batchnorm`` likewise accept the unbatched form.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Spatial output size of a convolution: floor((H + 2p - k)/s) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


def _pad2d(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _check_conv_args(x, weight, bias, stride, padding, groups):
    if x.ndim != 4:
        raise ValueError(f"conv2d: expected [B,C,H,W] input, got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: expected [F,C/g,k,k] weight, got shape {weight.shape}")
    batch, cin, h, w = x.shape
    fout, cg, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d: only square kernels supported, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} or padding={padding}")
    if groups < 1 or cin % groups or fout % groups:
        raise ValueError(
            f"conv2d: channels {cin} and filters {fout} must divide groups={groups}"
        )
    if cg * groups != cin:
        raise ValueError(
            f"conv2d: weight expects {cg * groups} input channels (groups={groups}), "
            f"input has {cin}"
        )
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(
            f"conv2d: kernel {kh} exceeds padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (fout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {fout} filters")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: output collapses to {ho}x{wo}")
    return batch, cin, fout, kh, ho, wo


def conv2d(x, weight, bias=None, *, stride=1, padding=1, groups=1):
    """2-D cross-correlation over NCHW input with zero padding.

    weight is [F, C/groups, k, k]. groups=1 is a full convolution,
    groups=C with F=C is a depthwise convolution.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    batch, cin, fout, k, ho, wo = _check_conv_args(x, weight, bias, stride, padding, groups)
    xp = _pad2d(x, padding)

    if k == 1 and stride == 1 and groups == 1:
        # pointwise: one channel-mixing matmul per image
        hp, wp = xp.shape[2], xp.shape[3]
        y = np.matmul(weight.reshape(fout, cin), xp.reshape(batch, cin, hp * wp))
        y = y.reshape(batch, fout, hp, wp)
    elif groups == cin and fout == cin and weight.shape[1] == 1:
        # depthwise: accumulate one strided slab per kernel tap
        y = np.zeros((batch, cin, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                slab = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                y += weight[:, 0, i, j][None, :, None, None] * slab
    elif groups == 1:
        # im2col + single BLAS matmul
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * ho * wo, cin * k * k)
        y = cols @ weight.reshape(fout, -1).T
        y = y.reshape(batch, ho, wo, fout).transpose(0, 3, 1, 2)
    else:
        # general grouped convolution: recurse per group
        csz, fsz = cin // groups, fout // groups
        parts = [
            conv2d(
                xp[:, g * csz : (g + 1) * csz],
                weight[g * fsz : (g + 1) * fsz],
                stride=stride,
                padding=0,
                groups=1,
            )
            for g in range(groups)
        ]
        y = np.concatenate(parts, axis=1)

    if bias is not None:
        y = y + bias[None, :, None, None]
    y = np.ascontiguousarray(y)
    return y[0] if single else y


def conv2d_backward(grad_out, x, weight, *, stride=1, padding=1, groups=1):
    """Gradients of conv2d w.r.t. input, weight and bias.

    Returns (grad_x, grad_weight, grad_bias) with shapes mirroring the
    forward arguments. grad_out and x must both be batched [B,.,.,.].
    """
    batch, cin, h, w = x.shape
    fout, cg, k, _ = weight.shape
    _, _, ho, wo = grad_out.shape
    xp = _pad2d(x, padding)
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(weight)
    grad_b = grad_out.sum(axis=(0, 2, 3))

    if k == 1 and stride == 1 and groups == 1:
        hp, wp = xp.shape[2], xp.shape[3]
        g2 = grad_out.reshape(batch, fout, hp * wp)
        x2 = xp.reshape(batch, cin, hp * wp)
        grad_w[:, :, 0, 0] = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0)
        grad_xp += np.matmul(weight.reshape(fout, cin).T, g2).reshape(batch, cin, hp, wp)
    elif groups == cin and fout == cin and cg == 1:
        for i in range(k):
            for j in range(k):
                sl = (
                    slice(None),
                    slice(None),
                    slice(i, i + stride * ho, stride),
                    slice(j, j + stride * wo, stride),
                )
                grad_w[:, 0, i, j] = np.einsum("bchw,bchw->c", xp[sl], grad_out)
                grad_xp[sl] += weight[:, 0, i, j][None, :, None, None] * grad_out
    elif groups == 1:
        gmat = grad_out.reshape(batch, fout, ho * wo)
        for i in range(k):
            for j in range(k):
                sl = (
                    slice(None),
                    slice(None),
                    slice(i, i + stride * ho, stride),
                    slice(j, j + stride * wo, stride),
                )
                grad_w[:, :, i, j] = np.tensordot(grad_out, xp[sl], axes=([0, 2, 3], [0, 2, 3]))
                contrib = np.matmul(weight[:, :, i, j].T, gmat)
                grad_xp[sl] += contrib.reshape(batch, cin, ho, wo)
    else:
        csz, fsz = cin // groups, fout // groups
        for g in range(groups):
            gx, gw, _ = conv2d_backward(
                grad_out[:, g * fsz : (g + 1) * fsz],
                xp[:, g * csz : (g + 1) * csz],
                weight[g * fsz : (g + 1) * fsz],
                stride=stride,
                padding=0,
                groups=1,
            )
            grad_xp[:, g * csz : (g + 1) * csz] += gx
            grad_w[g * fsz : (g + 1) * fsz] = gw

    if padding:
        grad_x = grad_xp[:, :, padding:-padding, padding:-padding]
    else:
        grad_x = grad_xp
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def _pool_windows(x, k):
    batch, ch, h, w = x.shape
    ho, wo = h // k, w // k
    xt = x[:, :, : ho * k, : wo * k].reshape(batch, ch, ho, k, wo, k)
    return xt.transpose(0, 1, 2, 4, 3, 5).reshape(batch, ch, ho, wo, k * k)


def _check_pool_args(x, k):
    if x.ndim != 4:
        raise ValueError(f"maxpool2d: expected [B,C,H,W] input, got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if k < 1:
        raise ValueError(f"maxpool2d: kernel must be >= 1, got {k}")
    if k > h or k > w:
        raise ValueError(f"maxpool2d: kernel {k} exceeds input {h}x{w}")


def maxpool2d(x, k: int):
    """Max pooling with window k, stride k. Leftover rows/cols are dropped."""
    single = x.ndim == 3
    if single:
        x = x[None]
    _check_pool_args(x, k)
    y = _pool_windows(x, k).max(axis=-1)
    return y[0] if single else y


def maxpool2d_train(x, k: int):
    """Max pooling that also returns argmax window indices for backward.

    Ties route to the first maximal element in row-major window order.
    """
    _check_pool_args(x, k)
    win = _pool_windows(x, k)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx.astype(np.uint8)


def maxpool2d_backward(grad_out, idx, x_shape, k: int):
    """Scatter pooled gradients back to the positions recorded by idx."""
    batch, ch, h, w = x_shape
    ho, wo = h // k, w // k
    flat = np.zeros((batch, ch, ho, wo, k * k), dtype=grad_out.dtype)
    np.put_along_axis(flat, idx[..., None].astype(np.int64), grad_out[..., None], axis=-1)
    grad = flat.reshape(batch, ch, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
    grad = grad.reshape(batch, ch, ho * k, wo * k)
    if ho * k != h or wo * k != w:
        full = np.zeros((batch, ch, h, w), dtype=grad_out.dtype)
        full[:, :, : ho * k, : wo * k] = grad
        return full
    return np.ascontiguousarray(grad)


def linear(x, weight, bias):
    """Affine map y = W x + b. x is [n] or [B,n], weight is [m,n]."""
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2:
        raise ValueError(f"linear: expected [B,n] input, got shape {x.shape}")
    m, n = weight.shape
    if x.shape[1] != n:
        raise ValueError(f"linear: input length {x.shape[1]} does not match weight columns {n}")
    if bias.shape != (m,):
        raise ValueError(f"linear: bias shape {bias.shape} does not match {m} outputs")
    y = x @ weight.T + bias
    return y[0] if single else y


def linear_backward(grad_out, x, weight):
    """Gradients of linear w.r.t. input, weight and bias (batched)."""
    grad_x = grad_out @ weight
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    return grad_x, grad_w, grad_b


def _bn_axes(x, nch):
    if x.ndim == 2:
        axes, shape = (0,), (1, nch)
    elif x.ndim == 4:
        axes, shape = (0, 2, 3), (1, nch, 1, 1)
    else:
        raise ValueError(f"batchnorm: expected [B,n] or [B,C,H,W] input, got shape {x.shape}")
    if x.shape[1] != nch:
        raise ValueError(f"batchnorm: {x.shape[1]} channels vs {nch} parameters")
    return axes, shape


def _check_bn_params(gamma, beta, mean, var, eps):
    if eps <= 0:
        raise ValueError(f"batchnorm: eps must be positive, got {eps}")
    n = gamma.shape[0]
    for name, p in (("beta", beta), ("running_mean", mean), ("running_var", var)):
        if p.shape != (n,):
            raise ValueError(f"batchnorm: {name} shape {p.shape} does not match gamma {n}")
    if np.any(var < 0):
        raise ValueError("batchnorm: running_var must be non-negative")


def batchnorm(x, gamma, beta, running_mean, running_var, *, eps=1e-5):
    """Inference-mode batch normalization using running statistics."""
    _check_bn_params(gamma, beta, running_mean, running_var, eps)
    single = x.ndim in (1, 3)
    if single:
        x = x[None]
    _, shape = _bn_axes(x, gamma.shape[0])
    inv = 1.0 / np.sqrt(running_var + eps)
    y = (x - running_mean.reshape(shape)) * (gamma * inv).reshape(shape) + beta.reshape(shape)
    y = y.astype(x.dtype, copy=False)
    return y[0] if single else y


def batchnorm_train(x, gamma, beta, running_mean, running_var, *, eps=1e-5, momentum=0.1):
    """Training-mode batchnorm on batch statistics (biased variance).

    Returns (y, cache, new_running_mean, new_running_var); the caller owns
    updating its stored running statistics.
    """
    _check_bn_params(gamma, beta, running_mean, running_var, eps)
    axes, shape = _bn_axes(x, gamma.shape[0])
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * invstd.reshape(shape)
    y = gamma.reshape(shape) * xhat + beta.reshape(shape)
    new_mean = (1.0 - momentum) * running_mean + momentum * mean
    new_var = (1.0 - momentum) * running_var + momentum * var
    cache = (xhat, invstd, axes, shape)
    return y.astype(x.dtype, copy=False), cache, new_mean, new_var


def batchnorm_backward(grad_out, gamma, cache):
    """Gradients of training-mode batchnorm w.r.t. input, gamma and beta."""
    xhat, invstd, axes, shape = cache
    m = np.prod([xhat.shape[a] for a in axes])
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    gx_hat = grad_out * gamma.reshape(shape)
    term = m * gx_hat - gx_hat.sum(axis=axes, keepdims=True) - xhat * (gx_hat * xhat).sum(
        axis=axes, keepdims=True
    )
    grad_x = (invstd.reshape(shape) / m) * term
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


def relu(x):
    """Elementwise max(0, x)."""
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    """ReLU gradient; the subgradient at exactly 0 is 0."""
    return grad_out * (x > 0)
