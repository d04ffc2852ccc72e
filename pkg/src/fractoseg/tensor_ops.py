"""Layer primitives on rank-4 (N, C, H, W) arrays.

Tensors are plain numpy arrays in NCHW row-major layout. Production paths use
float32, gradient checks use float64; every op preserves the input dtype.

Convolutions are im2col + tensordot. The scatter back (col2im) loops over the
kernel taps in a fixed order, so reductions are deterministic for a fixed
BLAS thread count.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided


class ShapeError(ValueError):
    """Raised when tensor dimensions are inconsistent for an op."""


_AXES = ("batch", "channels", "height", "width")


def check_tensor(x: np.ndarray, name: str = "input", finite: bool = False) -> np.ndarray:
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected rank-4 (N, C, H, W) tensor, got shape {x.shape}")
    if finite and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{name}: tensor contains NaN or Inf")
    return x


def _require_equal(axis: str, a: int, b: int, context: str) -> None:
    if a != b:
        raise ShapeError(f"{context}: {axis} mismatch ({a} != {b})")


@dataclass
class ConvParams:
    """Kernel, bias and geometry of a 2-D convolution.

    For `conv2d_*` the kernel is (C_out, C_in, kH, kW). For the transpose ops it
    is read as (C_in, C_out, kH, kW), so the same array drives a convolution and
    its adjoint.
    """

    kernel: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel: expected rank 4, got shape {self.kernel.shape}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if self.bias is not None and self.bias.ndim != 1:
            raise ShapeError(f"bias: expected a vector, got shape {self.bias.shape}")


def same_conv(kernel: np.ndarray, bias: np.ndarray | None = None) -> ConvParams:
    """Stride-1 params with padding that preserves H and W (odd kernels)."""
    return ConvParams(kernel, bias, stride=1, padding=kernel.shape[-1] // 2)


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Read-only view of shape (N, C, kh, kw, ho, wo) over a padded input."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )


def _col2im(cols: np.ndarray, out_h: int, out_w: int, stride: int) -> np.ndarray:
    """Scatter-add (N, C, kh, kw, ho, wo) columns into an (N, C, out_h, out_w) canvas."""
    n, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((n, c, out_h, out_w), dtype=cols.dtype)
    for a in range(kh):
        for b in range(kw):
            out[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += cols[:, :, a, b]
    return out


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel of size {k} does not fit input of size {size} with padding {padding}")
    return span // stride + 1


def _conv_core(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int):
    n, c, h, w = x.shape
    _, kc, kh, kw = kernel.shape
    _require_equal("channels", c, kc, "conv2d input vs kernel C_in")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    xp = _pad(x, padding)
    cols = _windows(xp, kh, kw, stride, ho, wo)
    # (N, ho, wo, C_out) -> (N, C_out, ho, wo)
    out = np.tensordot(cols, kernel, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols, xp.shape


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    check_tensor(x)
    out, _, _ = _conv_core(x, params.kernel, params.stride, params.padding)
    if params.bias is not None:
        out += params.bias.reshape(1, -1, 1, 1)
    return out


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Return (grad_input, grad_kernel, grad_bias) for `conv2d_forward`."""
    check_tensor(x)
    check_tensor(grad_out, "grad_out")
    k = params.kernel
    n, c, h, w = x.shape
    o, kc, kh, kw = k.shape
    _require_equal("channels", c, kc, "conv2d input vs kernel C_in")
    s, p = params.stride, params.padding
    ho = conv_output_size(h, kh, s, p)
    wo = conv_output_size(w, kw, s, p)
    for axis, got, want in zip(_AXES, grad_out.shape, (n, o, ho, wo)):
        _require_equal(axis, got, want, "grad_out vs conv2d output")

    xp = _pad(x, p)
    cols = _windows(xp, kh, kw, s, ho, wo)
    grad_kernel = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 4, 5]))
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    # (N, ho, wo, C, kh, kw) -> (N, C, kh, kw, ho, wo)
    gcols = np.tensordot(grad_out, k, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    gxp = _col2im(gcols, xp.shape[2], xp.shape[3], s)
    grad_input = gxp[:, :, p:p + h, p:p + w] if p else gxp
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


def transpose_output_size(size: int, k: int, stride: int, padding: int) -> int:
    out = (size - 1) * stride + k - 2 * padding
    if out <= 0:
        raise ShapeError(f"transpose conv output size {out} is not positive")
    return out


def conv2d_transpose_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """Transpose convolution, the adjoint of `conv2d_forward` with the same kernel.

    A 2x2 kernel at stride 2 scatters every input pixel into its own 2x2 block,
    doubling H and W.
    """
    check_tensor(x)
    k = params.kernel
    n, c, h, w = x.shape
    kc, o, kh, kw = k.shape
    _require_equal("channels", c, kc, "conv2d_transpose input vs kernel C_in")
    s, p = params.stride, params.padding
    ho = transpose_output_size(h, kh, s, p)
    wo = transpose_output_size(w, kw, s, p)
    cols = np.tensordot(x, k, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    full = _col2im(cols, ho + 2 * p, wo + 2 * p, s)
    out = np.ascontiguousarray(full[:, :, p:p + ho, p:p + wo]) if p else full
    if params.bias is not None:
        out += params.bias.reshape(1, -1, 1, 1)
    return out


def conv2d_transpose_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Return (grad_input, grad_kernel, grad_bias) for `conv2d_transpose_forward`."""
    check_tensor(x)
    check_tensor(grad_out, "grad_out")
    k = params.kernel
    n, c, h, w = x.shape
    kc, o, kh, kw = k.shape
    _require_equal("channels", c, kc, "conv2d_transpose input vs kernel C_in")
    s, p = params.stride, params.padding
    ho = transpose_output_size(h, kh, s, p)
    wo = transpose_output_size(w, kw, s, p)
    for axis, got, want in zip(_AXES, grad_out.shape, (n, o, ho, wo)):
        _require_equal(axis, got, want, "grad_out vs conv2d_transpose output")

    # the input gradient of an adjoint is the forward conv with the same kernel
    gp = _pad(grad_out, p)
    cols = _windows(gp, kh, kw, s, h, w)
    grad_input = np.tensordot(cols, k, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    grad_kernel = np.tensordot(x, cols, axes=([0, 2, 3], [0, 4, 5]))
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(grad_input), grad_kernel, grad_bias


def maxpool2x2_forward(x: np.ndarray):
    """2x2 / stride-2 max pooling.

    Returns the pooled tensor and, per output element, the winning position in
    its window (0..3 in row-major order). Ties go to the first position.
    """
    check_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1).astype(np.uint8)
    out = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return out, idx


def maxpool2x2_backward(indices: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    check_tensor(grad_out, "grad_out")
    if indices.shape != grad_out.shape:
        raise ShapeError(f"pool indices {indices.shape} do not match grad_out {grad_out.shape}")
    n, c, hh, wh = grad_out.shape
    win = np.zeros((n, c, hh, wh, 4), dtype=grad_out.dtype)
    np.put_along_axis(win, indices[..., None].astype(np.intp), grad_out[..., None], axis=-1)
    return win.reshape(n, c, hh, wh, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * hh, 2 * wh)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax_channels(x: np.ndarray) -> np.ndarray:
    check_tensor(x)
    if x.shape[1] < 2:
        raise ShapeError(f"softmax over channels needs C >= 2, got {x.shape[1]}")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor(a, "a")
    check_tensor(b, "b")
    for axis in (0, 2, 3):
        _require_equal(_AXES[axis], a.shape[axis], b.shape[axis], "concat_channels")
    return np.concatenate([a, b], axis=1)


def split_channels(x: np.ndarray, c_first: int):
    """Inverse of `concat_channels`: the first `c_first` channels, then the rest."""
    return x[:, :c_first], x[:, c_first:]
