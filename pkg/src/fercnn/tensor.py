"""Raw numerical kernels on NHWC numpy arrays.

Tensors are plain ``numpy.ndarray`` objects in row-major order. Image
tensors are indexed ``(n, h, w, c)``. Every kernel preserves the dtype of
its inputs, so float32 is used for training and float64 for verification.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check_ndim(name: str, x: np.ndarray, ndim: int) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {x.shape}")


def _conv_check(x: np.ndarray, kernels: np.ndarray) -> tuple[int, int]:
    _check_ndim("input", x, 4)
    _check_ndim("kernels", kernels, 4)
    _, h, w, cin = x.shape
    kh, kw, kcin, _ = kernels.shape
    if kcin != cin:
        raise ShapeError(
            f"channel mismatch: input {x.shape} has {cin} channels, "
            f"kernels {kernels.shape} expect {kcin}"
        )
    if kh > h or kw > w:
        raise ShapeError(
            f"kernels {kernels.shape} larger than input {x.shape}: "
            "valid convolution would be empty"
        )
    return h - kh + 1, w - kw + 1


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Gather every (kh, kw) patch of ``x`` into rows ordered (a, b, c)."""
    n, h, w, c = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    taps = [x[:, a:a + ho, b:b + wo, :] for a in range(kh) for b in range(kw)]
    cols = taps[0] if len(taps) == 1 else np.concatenate(taps, axis=-1)
    return np.ascontiguousarray(cols).reshape(n * ho * wo, kh * kw * c)


def col2im(cols: np.ndarray, x_shape: tuple[int, ...], kh: int, kw: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    n, h, w, c = x_shape
    ho, wo = h - kh + 1, w - kw + 1
    cols = cols.reshape(n, ho, wo, kh * kw * c)
    out = np.zeros(x_shape, dtype=cols.dtype)
    k = 0
    for a in range(kh):
        for b in range(kw):
            out[:, a:a + ho, b:b + wo, :] += cols[..., k * c:(k + 1) * c]
            k += 1
    return out


def conv2d_valid(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 convolution with no padding.

    ``x`` is (N, H, W, Cin), ``kernels`` is (Kh, Kw, Cin, Cout) and ``bias``
    is (Cout,). Returns (N, H-Kh+1, W-Kw+1, Cout).
    """
    ho, wo = _conv_check(x, kernels)
    kh, kw, cin, cout = kernels.shape
    if bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match kernels {kernels.shape}")
    cols = im2col(x, kh, kw)
    out = cols @ kernels.reshape(kh * kw * cin, cout)
    out += bias
    return out.reshape(x.shape[0], ho, wo, cout)


def conv2d_backward(
    x: np.ndarray,
    kernels: np.ndarray,
    grad_out: np.ndarray,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d_valid(x, kernels, b))``.

    Returns ``(grad_input, grad_kernels, grad_bias)``. ``grad_input`` is
    None when ``need_input_grad`` is false (first layer of a network).
    """
    ho, wo = _conv_check(x, kernels)
    kh, kw, cin, cout = kernels.shape
    expected = (x.shape[0], ho, wo, cout)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} != conv output shape {expected}")
    g2 = grad_out.reshape(-1, cout)
    cols = im2col(x, kh, kw)
    grad_kernels = (cols.T @ g2).reshape(kernels.shape)
    grad_bias = g2.sum(axis=0)
    grad_input = None
    if need_input_grad:
        gcols = g2 @ kernels.reshape(kh * kw * cin, cout).T
        grad_input = col2im(gcols, x.shape, kh, kw)
    return grad_input, grad_kernels, grad_bias


@dataclass(frozen=True)
class PoolIndex:
    """Window-argmax bookkeeping produced by :func:`maxpool2d`.

    ``window`` holds, per output element, the position 0..3 of the winning
    input inside its 2x2 window in row-major order (0 = top-left).
    """

    input_shape: tuple[int, ...]
    output_shape: tuple[int, ...]
    window: np.ndarray

    def flat_indices(self) -> np.ndarray:
        """Flat row-major input index of every window maximum."""
        n, h, w, c = self.input_shape
        dy, dx = np.divmod(self.window.astype(np.int64), 2)
        ni, hi, wi, ci = np.indices(self.output_shape, sparse=True)
        return ((ni * h + (2 * hi + dy)) * w + (2 * wi + dx)) * c + ci


def _pool_views(x: np.ndarray, ho: int, wo: int) -> list[np.ndarray]:
    return [x[:, dy:2 * ho:2, dx:2 * wo:2, :] for dy in (0, 1) for dx in (0, 1)]


def maxpool2d(x: np.ndarray) -> tuple[np.ndarray, PoolIndex]:
    """2x2 max pooling with step 2; a trailing odd row/column is dropped.

    Ties resolve to the first element of the window in row-major order.
    """
    _check_ndim("input", x, 4)
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2d needs H >= 2 and W >= 2, got input {x.shape}")
    ho, wo = h // 2, w // 2
    v = _pool_views(x, ho, wo)
    out = np.maximum(np.maximum(v[0], v[1]), np.maximum(v[2], v[3]))
    # pick the first view equal to the max, scanning from the last one backwards
    window = np.full(out.shape, 3, dtype=np.uint8)
    for k in (2, 1, 0):
        window[v[k] == out] = k
    return out, PoolIndex(x.shape, out.shape, window)


def maxpool2d_backward(index: PoolIndex, grad_out: np.ndarray) -> np.ndarray:
    """Route each output gradient to its window's argmax position."""
    if grad_out.shape != index.output_shape:
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match pooling output "
            f"{index.output_shape}; index map is stale or from another call"
        )
    grad = np.zeros(index.input_shape, dtype=grad_out.dtype)
    ho, wo = index.output_shape[1:3]
    for k, view in enumerate(_pool_views(grad, ho, wo)):
        np.multiply(grad_out, index.window == k, out=view)
    return grad


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_ndim("a", a, 2)
    _check_ndim("b", b, 2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: a {a.shape} vs b {b.shape}")
    return a @ b
