"""Differentiable primitives over :class:`~tilegan.tensor.Tensor`.

Layout is NHWC throughout. Convolutions go through a single im2col matmul;
the column buffer is transient scratch and is rebuilt in the backward pass
instead of being stored on the graph.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, make_result

LEAKY_SLOPE = 0.2


def _vec(t: Tensor, n: int, what: str) -> np.ndarray:
    if t.dims != (1, 1, 1, n):
        raise ValueError(f"{what} must have dims (1, 1, 1, {n}), got {t.dims}")
    return t.data.reshape(n)


# -- convolution helpers ---------------------------------------------------


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv_transpose_output_size(size: int, k: int, stride: int, padding: int, output_padding: int) -> int:
    return stride * (size - 1) + k - 2 * padding + output_padding


def _windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """View of shape (b, oh, ow, k, k, c) over a padded NHWC array. No copy."""
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    return as_strided(xp, (b, oh, ow, k, k, c), (sb, sh * stride, sw * stride, sh, sw, sc), writeable=False)


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    if k == 1:
        cols = xp[:, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride, :]
        return np.ascontiguousarray(cols).reshape(-1, xp.shape[3])
    return _windows(xp, k, stride, oh, ow).reshape(-1, k * k * xp.shape[3])


def _col2im(cols: np.ndarray, out: np.ndarray, k: int, stride: int, oh: int, ow: int) -> None:
    """Scatter-add (b, oh, ow, k, k, c) columns into a padded (b, H, W, c) buffer in place."""
    hi = stride * (oh - 1) + 1
    wi = stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, i : i + hi : stride, j : j + wi : stride, :] += cols[:, :, :, i, j, :]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding. ``weight`` is (out_ch, k, k, in_ch)."""
    b, h, w, cin = x.dims
    cout, k, k2, wcin = weight.dims
    if k != k2:
        raise ValueError(f"only square kernels are supported, got {k}x{k2}")
    if wcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, weights expect {wcin}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    oh = conv_output_size(h, k, stride, padding)
    ow = conv_output_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive output dims ({oh}, {ow}) for input {h}x{w}, kernel {k}")

    wmat = weight.data.reshape(cout, k * k * cin)
    cols = _im2col(_pad(x.data, padding), k, stride, oh, ow)
    out = cols @ wmat.T
    del cols
    if bias is not None:
        out += _vec(bias, cout, "bias")
    out = out.reshape(b, oh, ow, cout)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if weight.requires_grad:
            cols = _im2col(_pad(x.data, padding), k, stride, oh, ow)
            gw = (g2.T @ cols).reshape(weight.dims)
            del cols
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(b, oh, ow, k, k, cin)
            gxp = np.zeros((b, h + 2 * padding, w + 2 * padding, cin), dtype=g.dtype)
            _col2im(gcols, gxp, k, stride, oh, ow)
            gx = np.ascontiguousarray(gxp[:, padding : padding + h, padding : padding + w, :])
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0, dtype=np.float64).astype(g.dtype).reshape(1, 1, 1, cout)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, backward_fn)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int | None = None,
) -> Tensor:
    """Adjoint of :func:`conv2d` with the same ``weight``.

    ``weight`` is (in_ch, k, k, out_ch): the kernel of the forward conv that
    maps out_ch -> in_ch. Output size is ``stride*(h-1) + k - 2*padding +
    output_padding``; ``output_padding`` defaults to ``stride - 1`` so a
    stride-2, "same"-padded layer exactly doubles the resolution.
    """
    b, h, w, cin = x.dims
    wcin, k, k2, cout = weight.dims
    if k != k2:
        raise ValueError(f"only square kernels are supported, got {k}x{k2}")
    if wcin != cin:
        raise ValueError(f"channel mismatch: input has {cin}, weights expect {wcin}")
    if output_padding is None:
        output_padding = stride - 1
    if output_padding < 0 or (output_padding >= stride and output_padding != 0):
        raise ValueError(f"output_padding must be in [0, stride), got {output_padding}")
    oh = conv_transpose_output_size(h, k, stride, padding, output_padding)
    ow = conv_transpose_output_size(w, k, stride, padding, output_padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"non-positive output dims ({oh}, {ow})")

    # full scatter extent, enlarged when output_padding reaches past it
    fh = max(stride * (h - 1) + k, padding + oh)
    fw = max(stride * (w - 1) + k, padding + ow)
    wmat = weight.data.reshape(cin, k * k * cout)

    cols = (x.data.reshape(-1, cin) @ wmat).reshape(b, h, w, k, k, cout)
    full = np.zeros((b, fh, fw, cout), dtype=cols.dtype)
    _col2im(cols, full, k, stride, h, w)
    del cols
    out = np.ascontiguousarray(full[:, padding : padding + oh, padding : padding + ow, :])
    del full
    if bias is not None:
        out += _vec(bias, cout, "bias")

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gfull = np.zeros((b, fh, fw, cout), dtype=g.dtype)
        gfull[:, padding : padding + oh, padding : padding + ow, :] = g
        gcols = _windows(gfull, k, stride, h, w).reshape(-1, k * k * cout)
        gx = gw = gb = None
        if x.requires_grad:
            gx = (gcols @ wmat.T).reshape(b, h, w, cin)
        if weight.requires_grad:
            gw = (x.data.reshape(-1, cin).T @ gcols).reshape(weight.dims)
        del gcols, gfull
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1, 2), dtype=np.float64).astype(g.dtype).reshape(1, 1, 1, cout)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return make_result(out, parents, backward_fn)


# -- normalization ---------------------------------------------------------


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane over height and width, then scale and shift."""
    b, h, w, c = x.dims
    g_vec = _vec(gamma, c, "gamma")
    b_vec = _vec(beta, c, "beta")
    n = h * w
    if n == 1 and eps <= 0:
        raise ValueError("instance_norm over a 1x1 plane needs eps > 0")
    xd = x.data.astype(np.float64)
    mean = xd.mean(axis=(1, 2), keepdims=True)
    centered = xd - mean
    var = np.mean(centered * centered, axis=(1, 2), keepdims=True)
    denom = var + eps
    inv_std = np.divide(1.0, np.sqrt(denom), out=np.zeros_like(denom), where=denom > 0)
    out = (centered * inv_std * g_vec + b_vec).astype(x.data.dtype)
    del xd, centered

    def backward_fn(grad):
        gd = grad.astype(np.float64)
        xhat = (x.data.astype(np.float64) - mean) * inv_std
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (gd * xhat).sum(axis=(0, 1, 2)).reshape(1, 1, 1, c).astype(grad.dtype)
        if beta.requires_grad:
            gbeta = gd.sum(axis=(0, 1, 2)).reshape(1, 1, 1, c).astype(grad.dtype)
        if x.requires_grad:
            dxhat = gd * g_vec
            mean_d = dxhat.mean(axis=(1, 2), keepdims=True)
            mean_dx = (dxhat * xhat).mean(axis=(1, 2), keepdims=True)
            gx = (inv_std * (dxhat - mean_d - xhat * mean_dx)).astype(grad.dtype)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward_fn)


# -- activations -----------------------------------------------------------


def leaky_relu(x: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {alpha}")
    xd = x.data
    out = np.where(xd > 0, xd, xd * xd.dtype.type(alpha))

    def backward_fn(g):
        return (np.where(x.data > 0, g, g * g.dtype.type(alpha)),)

    return make_result(out, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g):
        return (np.where(x.data > 0, g, 0).astype(g.dtype),)

    return make_result(out, (x,), backward_fn)


def tanh(x: Tensor) -> Tensor:
    """Hyperbolic tangent, kept strictly inside (-1, 1) even where float rounding saturates."""
    limit = np.nextafter(np.array(1.0, dtype=x.data.dtype), 0)
    out = np.clip(np.tanh(x.data), -limit, limit)

    def backward_fn(g):
        t = np.tanh(x.data)
        return (g * (1 - t * t),)

    return make_result(out, (x,), backward_fn)


def activation(x: Tensor, kind: str, alpha: float = LEAKY_SLOPE) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x, alpha)
    if kind == "relu":
        return relu(x)
    if kind == "tanh":
        return tanh(x)
    if kind == "none":
        return x
    raise ValueError(f"unknown activation {kind!r}")


# -- elementwise and reductions ---------------------------------------------


def _same_dims(a: Tensor, b: Tensor, op: str) -> None:
    if a.dims != b.dims:
        raise ValueError(f"{op}: dims differ, {a.dims} vs {b.dims}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "add")

    def backward_fn(g):
        return g, g

    return make_result(a.data + b.data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "sub")

    def backward_fn(g):
        return g, -g

    return make_result(a.data - b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dims(a, b, "mul")

    def backward_fn(g):
        return g * b.data, g * a.data

    return make_result(a.data * b.data, (a, b), backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    f = a.data.dtype.type(factor)

    def backward_fn(g):
        return (g * f,)

    return make_result(a.data * f, (a,), backward_fn)


def add_scalar(a: Tensor, value: float) -> Tensor:
    def backward_fn(g):
        return (g,)

    return make_result(a.data + a.data.dtype.type(value), (a,), backward_fn)


def square(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (2 * g * a.data,)

    return make_result(a.data * a.data, (a,), backward_fn)


def absolute(a: Tensor) -> Tensor:
    def backward_fn(g):
        return (g * np.sign(a.data),)

    return make_result(np.abs(a.data), (a,), backward_fn)


def sum_all(a: Tensor) -> Tensor:
    dims = a.dims
    total = a.data.sum(dtype=np.float64)

    def backward_fn(g):
        return (np.full(dims, g.reshape(()), dtype=g.dtype),)

    return make_result(np.array(total).reshape(1, 1, 1, 1), (a,), backward_fn)


def mean_all(a: Tensor) -> Tensor:
    dims = a.dims
    n = a.data.size
    total = a.data.sum(dtype=np.float64) / n

    def backward_fn(g):
        return (np.full(dims, g.reshape(()) / n, dtype=g.dtype),)

    return make_result(np.array(total).reshape(1, 1, 1, 1), (a,), backward_fn)


def mse_to_constant(a: Tensor, target: float) -> Tensor:
    """mean((a - target)^2) as one fused node."""
    diff = a.data.astype(np.float64) - target
    n = a.data.size
    value = np.mean(diff * diff)

    def backward_fn(g):
        d = a.data.astype(np.float64) - target
        return ((d * (2.0 * float(g.reshape(())) / n)).astype(g.dtype),)

    return make_result(np.array(value).reshape(1, 1, 1, 1), (a,), backward_fn)


def mean_abs_error(a: Tensor, b: Tensor) -> Tensor:
    """mean(|a - b|) as one fused node; subgradient 0 where a == b."""
    _same_dims(a, b, "mean_abs_error")
    n = a.data.size
    value = np.abs(a.data.astype(np.float64) - b.data).mean()

    def backward_fn(g):
        s = np.sign(a.data - b.data) * (float(g.reshape(())) / n)
        s = s.astype(g.dtype)
        return s, -s

    return make_result(np.array(value).reshape(1, 1, 1, 1), (a, b), backward_fn)


def concat_batch(parts: list[Tensor]) -> Tensor:
    """Stack tensors along the batch axis."""
    if not parts:
        raise ValueError("concat_batch needs at least one tensor")
    tail = parts[0].dims[1:]
    for p in parts:
        if p.dims[1:] != tail:
            raise ValueError(f"concat_batch: trailing dims differ, {p.dims} vs {parts[0].dims}")
    sizes = [p.dims[0] for p in parts]

    def backward_fn(g):
        out, start = [], 0
        for n in sizes:
            out.append(g[start : start + n].copy())
            start += n
        return tuple(out)

    return make_result(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward_fn)
