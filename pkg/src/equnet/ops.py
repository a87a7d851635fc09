"""Differentiable ops needed by the U-Nets.

Convolution is stride-1 cross-correlation with two backends: chunked im2col
GEMMs (taps copied into a column buffer a few at a time so memory stays
bounded) and real FFTs, which win for 9x9 kernels on large maps.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from .tensor import Tensor, as_tensor, make_result

# float elements per im2col chunk (~64 MB at f32)
_COL_BUDGET = 16 * 1024 * 1024


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# -- elementwise ------------------------------------------------------------

def add(x, y) -> Tensor:
    x = _coerce(x, y if isinstance(y, Tensor) else None)
    y = _coerce(y, x)
    out = x.data + y.data
    return make_result(
        out, (x, y),
        lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
        "add",
    )


def sub(x, y) -> Tensor:
    x = _coerce(x, y if isinstance(y, Tensor) else None)
    y = _coerce(y, x)
    return make_result(
        x.data - y.data, (x, y),
        lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
        "sub",
    )


def mul(x, y) -> Tensor:
    x = _coerce(x, y if isinstance(y, Tensor) else None)
    y = _coerce(y, x)
    xd, yd = x.data, y.data
    return make_result(
        xd * yd, (x, y),
        lambda g: (_unbroadcast(g * yd, x.shape), _unbroadcast(g * xd, y.shape)),
        "mul",
    )


def div(x, y) -> Tensor:
    x = _coerce(x, y if isinstance(y, Tensor) else None)
    y = _coerce(y, x)
    xd, yd = x.data, y.data
    with np.errstate(divide="ignore", invalid="ignore"):
        q = xd / yd  # non-finite results are reported by make_result
    return make_result(
        q, (x, y),
        lambda g: (_unbroadcast(g / yd, x.shape), _unbroadcast(-g * xd / (yd * yd), y.shape)),
        "div",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_result(s, (x,), bw, "softmax")


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    if x.shape[:1] != y.shape[:1] or x.shape[2:] != y.shape[2:]:
        raise ValueError(f"concat: incompatible shapes {x.shape} and {y.shape}")
    c = x.shape[1]
    out = np.concatenate([x.data, y.data], axis=1)
    return make_result(out, (x, y), lambda g: (g[:, :c], g[:, c:]), "concat", check_finite=False)


# -- reductions / shape -----------------------------------------------------

def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.asarray(x.data.sum(axis=axis))

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return make_result(out, (x,), bw, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape", check_finite=False)


# -- convolution ------------------------------------------------------------

def _valid_taps(k: int, size_in: int, size_out: int, padding: int) -> list[int]:
    # taps whose receptive rows/cols fall entirely in the zero padding add nothing
    return [i for i in range(k) if i - padding < size_in and i - padding + size_out > 0]


def _correlate(x: np.ndarray, w: np.ndarray, padding: int) -> np.ndarray:
    """Plain array cross-correlation, stride 1.  x [B,Ci,H,W], w [Co,Ci,k,k]."""
    B, Ci, H, W = x.shape
    Co, _, kh, kw = w.shape
    Ho, Wo = H + 2 * padding - kh + 1, W + 2 * padding - kw + 1
    N = B * Ho * Wo
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xp = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))  # [Ci,B,Hp,Wp]
    # [Co, kh, kw, Ci] so each tap is a contiguous column block
    wt = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(Co, kh * kw * Ci)
    taps = [(i, j) for i in _valid_taps(kh, H, Ho, padding) for j in _valid_taps(kw, W, Wo, padding)]
    per_chunk = max(1, _COL_BUDGET // max(1, Ci * N))
    out = np.zeros((Co, N), dtype=x.dtype)
    for s in range(0, len(taps), per_chunk):
        chunk = taps[s:s + per_chunk]
        cols = np.empty((len(chunk), Ci, B, Ho, Wo), dtype=x.dtype)
        wcols = np.empty((Co, len(chunk) * Ci), dtype=x.dtype)
        for t, (i, j) in enumerate(chunk):
            cols[t] = xp[:, :, i:i + Ho, j:j + Wo]
            off = (i * kw + j) * Ci
            wcols[:, t * Ci:(t + 1) * Ci] = wt[:, off:off + Ci]
        out += wcols @ cols.reshape(len(chunk) * Ci, N)
    return out.reshape(Co, B, Ho, Wo).transpose(1, 0, 2, 3)


def _correlate_weight_grad(x: np.ndarray, g: np.ndarray, k: int, padding: int) -> np.ndarray:
    """d(loss)/d(w) for y = correlate(x, w).  g [B,Co,Ho,Wo]."""
    B, Ci, H, W = x.shape
    Co, Ho, Wo = g.shape[1], g.shape[2], g.shape[3]
    N = B * Ho * Wo
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xp = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Co, N)
    gw = np.zeros((Co, k, k, Ci), dtype=x.dtype)
    taps = [(i, j) for i in _valid_taps(k, H, Ho, padding) for j in _valid_taps(k, W, Wo, padding)]
    per_chunk = max(1, _COL_BUDGET // max(1, Ci * N))
    for s in range(0, len(taps), per_chunk):
        chunk = taps[s:s + per_chunk]
        cols = np.empty((len(chunk), Ci, B, Ho, Wo), dtype=x.dtype)
        for t, (i, j) in enumerate(chunk):
            cols[t] = xp[:, :, i:i + Ho, j:j + Wo]
        part = gm @ cols.reshape(len(chunk) * Ci, N).T  # [Co, t*Ci]
        for t, (i, j) in enumerate(chunk):
            gw[:, i, j, :] = part[:, t * Ci:(t + 1) * Ci]
    return gw.transpose(0, 3, 1, 2)


def _spectral_mix(a_hat: np.ndarray, b_hat: np.ndarray, conj_b: bool) -> np.ndarray:
    """out[n, o, f] = sum_i a_hat[n, i, f] * (conj) b_hat[o, i, f]."""
    N, I = a_hat.shape[:2]
    O = b_hat.shape[0]
    spatial = a_hat.shape[2:]
    F = int(np.prod(spatial))
    af = a_hat.reshape(N, I, F).transpose(2, 0, 1)
    bf = (np.conj(b_hat) if conj_b else b_hat).reshape(O, I, F).transpose(2, 1, 0)
    return np.matmul(af, bf).transpose(1, 2, 0).reshape(N, O, *spatial)


def _fft_correlate(xp: np.ndarray, w: np.ndarray, Ho: int, Wo: int):
    """Valid cross-correlation of padded xp [B,Ci,Hp,Wp] with w via real FFTs.

    Circular correlation at the padded size never wraps inside the valid
    window, so no extra padding is needed.  Returns the output plus both
    spectra for reuse in the backward pass.
    """
    Hp, Wp = xp.shape[2:]
    x_hat = sfft.rfft2(xp)
    w_hat = sfft.rfft2(w, s=(Hp, Wp))
    y = sfft.irfft2(_spectral_mix(x_hat, w_hat, conj_b=True), s=(Hp, Wp))[:, :, :Ho, :Wo]
    return np.ascontiguousarray(y, dtype=xp.dtype), x_hat, w_hat


def _fft_backward(g, x_hat, w_hat, k, padding, H, W, need_x, need_w, dtype):
    Hp, Wp = H + 2 * padding, W + 2 * padding
    g_hat = sfft.rfft2(g, s=(Hp, Wp))
    gx = gw = None
    if need_x:
        # adjoint of pad -> correlate -> crop is a circular convolution
        gxp = sfft.irfft2(_spectral_mix(g_hat, w_hat.transpose(1, 0, 2, 3), conj_b=False), s=(Hp, Wp))
        gx = np.ascontiguousarray(gxp[:, :, padding:padding + H, padding:padding + W], dtype=dtype)
    if need_w:
        # gw[o, i] = sum_b corr(xp[b, i], g[b, o])
        mixed = _spectral_mix(np.conj(g_hat).transpose(1, 0, 2, 3), x_hat.transpose(1, 0, 2, 3), conj_b=False)
        gw = np.ascontiguousarray(sfft.irfft2(mixed, s=(Hp, Wp))[:, :, :k, :k], dtype=dtype)
    return gx, gw


def _use_fft(method: str, k: int, Ho: int, Wo: int) -> bool:
    if method == "auto":
        # FFT wins for large kernels on large maps; small maps are dominated
        # by per-frequency overhead
        return k >= 5 and min(Ho, Wo) >= 32
    if method not in ("direct", "fft"):
        raise ValueError(f"unknown conv method {method!r}")
    return method == "fft"


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0,
           method: str = "auto") -> Tensor:
    """Cross-correlation (no kernel flip) of x [B,Cin,H,W] with w [Cout,Cin,k,k].

    ``method`` picks the backend: ``"direct"`` (chunked im2col), ``"fft"``,
    or ``"auto"``.
    """
    if stride != 1:
        raise ValueError("only stride 1 is supported")
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    k = w.shape[2]
    if w.shape[3] != k:
        raise ValueError("conv2d: square kernels only")
    if x.shape[2] + 2 * padding < k or x.shape[3] + 2 * padding < k:
        raise ValueError("conv2d: kernel larger than padded input")
    if padding > k - 1:
        raise ValueError("conv2d: padding must not exceed k - 1")
    xd, wd = x.data, w.data
    H, W = xd.shape[2:]
    Ho, Wo = H + 2 * padding - k + 1, W + 2 * padding - k + 1
    fft = _use_fft(method, k, Ho, Wo)
    x_hat = w_hat = None
    if fft:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        out, x_hat, w_hat = _fft_correlate(xp, wd, Ho, Wo)
    else:
        out = _correlate(xd, wd, padding)
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({w.shape[0]},)")
        out = out + b.data.reshape(1, -1, 1, 1)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        gx = gw = gb = None
        if fft:
            gx, gw = _fft_backward(g, x_hat, w_hat, k, padding, H, W,
                                   x.requires_grad, w.requires_grad, xd.dtype)
        else:
            if x.requires_grad:
                # transposed correlation = correlation with the flipped, channel-swapped kernel
                wf = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = _correlate(g, wf, k - 1 - padding)
            if w.requires_grad:
                gw = _correlate_weight_grad(xd, g, k, padding)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    return make_result(np.ascontiguousarray(out), inputs, bw, "conv2d")


# -- pooling / resampling ---------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on the last two axes."""
    *lead, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {H}x{W}")
    win = x.data.reshape(*lead, H // 2, 2, W // 2, 2)
    win = np.moveaxis(win, -3, -2).reshape(*lead, H // 2, W // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(*lead, H // 2, W // 2, 2, 2)
        return (np.moveaxis(gw, -2, -3).reshape(x.shape),)

    return make_result(np.ascontiguousarray(out), (x,), bw, "maxpool2", check_finite=False)


def _upsample_matrix(n: int, dtype) -> np.ndarray:
    """[2n, n] linear-interpolation matrix, half-pixel centres, clamped at the edges."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for d in range(2 * n):
        src = min(max((d + 0.5) / 2 - 0.5, 0.0), n - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[d, lo] += 1 - frac
        m[d, hi] += frac
    return m


def bilinear_upsample2(x: Tensor) -> Tensor:
    """Scale the last two axes by exactly 2 (align_corners=False convention)."""
    *_, H, W = x.shape
    if H < 1 or W < 1:
        raise ValueError("bilinear_upsample2 needs non-empty spatial extents")
    uh = _upsample_matrix(H, x.dtype)
    uw = _upsample_matrix(W, x.dtype)
    out = uh @ (x.data @ uw.T)

    def bw(g):
        return (uh.T @ (g @ uw),)

    return make_result(out, (x,), bw, "upsample2", check_finite=False)


# -- normalisation ----------------------------------------------------------

def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel (axis 1) normalisation over every other axis.

    In training mode ``running_mean``/``running_var`` are updated in place
    with the biased batch variance.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(f"batchnorm: affine shapes must be ({C},)")
    axes = tuple(a for a in range(x.ndim) if a != 1)
    bshape = [1] * x.ndim
    bshape[1] = C
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = ((xd - mu.reshape(bshape)) ** 2).mean(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)
    m = xd.size // C

    def bw(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * g_
        if training:
            gx = (inv.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), bw, "batchnorm")


__all__ = [
    "add", "sub", "mul", "div", "relu", "sigmoid", "softmax_channels", "concat_channels",
    "sum", "mean", "reshape", "conv2d", "maxpool2", "bilinear_upsample2", "batchnorm", "as_tensor",
]
