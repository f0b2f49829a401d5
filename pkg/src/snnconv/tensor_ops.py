"""Dense channel-first tensor kernels with deterministic semantics.

All operations take (C, H, W) arrays, reject non-finite values, and have no
batch dimension. The reference network path runs them in float32; the spike
engine calls the same kernels on float64 membrane data. Each op computes in
the promoted dtype of its inputs, so both paths share one implementation.

Weight layout for both conv2d and convtranspose2d is (out_ch, in_ch, kh, kw).
conv2d is cross-correlation (no kernel flip). convtranspose2d scatters each
input cell through the kernel; it is implemented as zero-stuffing plus a
flipped-kernel conv2d, which is the standard gather form of the same map.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ValidationError(f"{name} contains non-finite values")


def _require_chw(name: str, arr: np.ndarray) -> None:
    if arr.ndim != 3:
        raise ValidationError(f"{name} must be (C, H, W), got shape {arr.shape}")
    if any(d < 1 for d in arr.shape):
        raise ValidationError(f"{name} has an empty dimension: {arr.shape}")


def conv_output_hw(
    h: int, w: int, kh: int, kw: int, stride: int, padding: int
) -> tuple[int, int]:
    """Output spatial dims for conv2d: floor((d + 2p - k) / stride) + 1."""
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    return oh, ow


def convtranspose_output_hw(
    h: int, w: int, kh: int, kw: int, stride: int, padding: int
) -> tuple[int, int]:
    """Output spatial dims for convtranspose2d: (d - 1) * stride - 2p + k."""
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (w - 1) * stride - 2 * padding + kw
    return oh, ow


def _check_conv_args(x: np.ndarray, weights: np.ndarray, bias, stride: int, padding: int):
    _require_chw("input", x)
    if weights.ndim != 4:
        raise ValidationError(
            f"weights must be (out_ch, in_ch, kh, kw), got shape {weights.shape}"
        )
    if weights.shape[1] != x.shape[0]:
        raise ValidationError(
            f"weights expect {weights.shape[1]} input channels, input has {x.shape[0]}"
        )
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValidationError(f"padding must be >= 0, got {padding}")
    if bias is not None and bias.shape != (weights.shape[0],):
        raise ValidationError(
            f"bias must have shape ({weights.shape[0]},), got {bias.shape}"
        )
    _require_finite("input", x)
    _require_finite("weights", weights)
    if bias is not None:
        _require_finite("bias", bias)


def conv2d(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """2-d cross-correlation over a (C, H, W) input with zero padding.

    Args:
        x: input array, shape (in_ch, H, W).
        weights: kernel array, shape (out_ch, in_ch, kh, kw).
        bias: optional per-output-channel offsets, shape (out_ch,).
        stride: window step, >= 1.
        padding: symmetric zero padding on both spatial dims.

    Returns:
        Array of shape (out_ch, oh, ow) with oh = floor((H + 2p - kh)/stride) + 1.
    """
    _check_conv_args(x, weights, bias, stride, padding)
    out_ch, in_ch, kh, kw = weights.shape
    _, h, w = x.shape
    oh, ow = conv_output_hw(h, w, kh, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValidationError(
            f"kernel ({kh}x{kw}, stride {stride}) larger than padded input {h}x{w}+2*{padding}"
        )
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    # windows: (C, oh, ow, kh, kw), then one matmul over flattened patches
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(oh * ow, in_ch * kh * kw)
    out = cols @ weights.reshape(out_ch, -1).T
    out = out.T.reshape(out_ch, oh, ow)
    if bias is not None:
        out = out + bias[:, None, None]
    return out


def convtranspose2d(
    x: np.ndarray,
    weights: np.ndarray,
    bias: np.ndarray | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
) -> np.ndarray:
    """Transposed convolution (fractionally strided scatter) over (C, H, W).

    Each input cell adds x[i, r, c] * weights[o, i] into the output patch
    whose top-left corner is (r*stride - p, c*stride - p). Realized as
    zero-stuffing the input by `stride` and running conv2d with the
    spatially flipped kernel at padding (k - 1 - p).

    Args:
        x: input array, shape (in_ch, H, W).
        weights: kernel array, shape (out_ch, in_ch, kh, kw).
        bias: optional per-output-channel offsets, shape (out_ch,).
        stride: scatter step, >= 1.
        padding: output crop; must satisfy padding <= k - 1 on both dims.

    Returns:
        Array of shape (out_ch, (H-1)*stride - 2p + kh, (W-1)*stride - 2p + kw).
    """
    _check_conv_args(x, weights, bias, stride, padding)
    out_ch, in_ch, kh, kw = weights.shape
    _, h, w = x.shape
    if padding > kh - 1 or padding > kw - 1:
        raise ValidationError(
            f"convtranspose padding {padding} must be <= kernel - 1 ({kh - 1}, {kw - 1})"
        )
    oh, ow = convtranspose_output_hw(h, w, kh, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValidationError(
            f"convtranspose output would be empty for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    up_h, up_w = (h - 1) * stride + 1, (w - 1) * stride + 1
    x_up = np.zeros((in_ch, up_h, up_w), dtype=x.dtype)
    x_up[:, ::stride, ::stride] = x
    flipped = weights[:, :, ::-1, ::-1]
    return conv2d(x_up, flipped, bias, stride=1, padding=kh - 1 - padding)


def maxpool2d(
    x: np.ndarray,
    kernel: int,
    stride: int | None = None,
    padding: int = 0,
) -> np.ndarray:
    """Window maximum over (C, H, W) with -infinity padding semantics.

    Padding cells never win a max, so padded windows return the max of the
    real cells they cover. padding must be < kernel so every window covers
    at least one real cell.
    """
    _require_chw("input", x)
    if not np.issubdtype(x.dtype, np.floating):
        raise ValidationError(f"maxpool2d requires a float input, got {x.dtype}")
    _require_finite("input", x)
    if kernel < 1:
        raise ValidationError(f"kernel must be >= 1, got {kernel}")
    if stride is None:
        stride = kernel
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if padding < 0 or padding >= kernel:
        raise ValidationError(f"padding must satisfy 0 <= padding < kernel, got {padding}")
    c, h, w = x.shape
    oh, ow = conv_output_hw(h, w, kernel, kernel, stride, padding)
    if oh < 1 or ow < 1:
        raise ValidationError(
            f"kernel ({kernel}, stride {stride}) larger than padded input {h}x{w}+2*{padding}"
        )
    xp = np.pad(
        x,
        ((0, 0), (padding, padding), (padding, padding)),
        constant_values=-np.inf,
    )
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(1, 2))
    out = windows[:, ::stride, ::stride].max(axis=(3, 4))
    return np.ascontiguousarray(out)


def relu(x: np.ndarray) -> np.ndarray:
    """Elementwise max(x, 0), dtype preserved."""
    _require_chw("input", x)
    _require_finite("input", x)
    return np.maximum(x, np.zeros((), dtype=x.dtype))


def concat_channels(tensors: list[np.ndarray]) -> np.ndarray:
    """Stack tensors along the channel axis; spatial dims must agree."""
    if not tensors:
        raise ValidationError("concat_channels needs at least one input")
    for i, t in enumerate(tensors):
        _require_chw(f"input[{i}]", t)
        _require_finite(f"input[{i}]", t)
        if t.shape[1:] != tensors[0].shape[1:]:
            raise ValidationError(
                f"concat spatial mismatch: input[{i}] is {t.shape[1:]}, "
                f"input[0] is {tensors[0].shape[1:]}"
            )
    return np.concatenate(tensors, axis=0)
