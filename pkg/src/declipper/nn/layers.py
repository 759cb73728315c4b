"""Layer primitives with hand-written backward passes (NCHW, float64)."""

from __future__ import annotations

import numpy as np


def _pads(k: int) -> tuple[int, int]:
    # 3x3 -> (1, 1); 2x2 -> (0, 1), i.e. extra row/col on the bottom/right; 1x1 -> (0, 0)
    before = (k - 1) // 2
    return before, k - 1 - before


def _im2col(x: np.ndarray, k: int, pads: tuple[int, int]) -> np.ndarray:
    """(B, C, H, W) -> (B, C*k*k, H*W) columns for a same-size k x k correlation."""
    B, C, H, W = x.shape
    if k == 1:
        return x.reshape(B, C, H * W)
    before, after = pads
    xp = np.pad(x, ((0, 0), (0, 0), (before, after), (before, after)))
    cols = np.empty((B, C, k, k, H, W))
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + H, j : j + W]
    return cols.reshape(B, C * k * k, H * W)


def _correlate(x: np.ndarray, weight: np.ndarray, pads: tuple[int, int]):
    B, C, H, W = x.shape
    O, Ci, k, _ = weight.shape
    if C != Ci:
        raise ValueError(f"input has {C} channels, kernel expects {Ci}")
    cols = _im2col(x, k, pads)
    out = np.matmul(weight.reshape(O, -1), cols)
    return out.reshape(B, O, H, W), cols


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray):
    """Same-size cross-correlation plus bias. Returns the output and the column cache."""
    out, cols = _correlate(x, weight, _pads(weight.shape[2]))
    out += bias[None, :, None, None]
    return out, cols


def conv2d_backward(grad_out: np.ndarray, x_shape, cols: np.ndarray, weight: np.ndarray):
    """Gradients with respect to the input, the weights and the bias."""
    if cols is None:
        raise RuntimeError("conv2d_backward called without a cached forward pass")
    B, O, H, W = grad_out.shape
    g = grad_out.reshape(B, O, H * W)
    grad_w = np.einsum("bop,bqp->oq", g, cols, optimize=True).reshape(weight.shape)
    grad_b = g.sum(axis=(0, 2))
    # input gradient: correlate with the flipped, channel-swapped kernel, pads swapped
    before, after = _pads(weight.shape[2])
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    grad_x, _ = _correlate(grad_out, np.ascontiguousarray(flipped), (after, before))
    return grad_x, grad_w, grad_b


class Conv2D:
    """Convolution with its parameters, gradient buffers and Adam moments."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng=None):
        if kernel not in (1, 2, 3):
            raise ValueError(f"unsupported kernel size {kernel}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        fan_in = in_channels * kernel * kernel
        shape = (out_channels, in_channels, kernel, kernel)
        if rng is None:
            self.weight = np.zeros(shape)
        else:
            self.weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        self.bias = np.zeros(out_channels)
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)
        self.m_weight = np.zeros_like(self.weight)
        self.v_weight = np.zeros_like(self.weight)
        self.m_bias = np.zeros_like(self.bias)
        self.v_bias = np.zeros_like(self.bias)
        self.step = 0
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, cols = conv2d_forward(x, self.weight, self.bias)
        self._cache = (x.shape, cols)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward before forward")
        shape, cols = self._cache
        gx, gw, gb = conv2d_backward(grad_out, shape, cols, self.weight)
        self.grad_weight += gw
        self.grad_bias += gb
        return gx

    def zero_grad(self):
        self.grad_weight[...] = 0.0
        self.grad_bias[...] = 0.0

    def clear_cache(self):
        self._cache = None


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.where(mask, grad_out, 0.0)


def maxpool2x2_forward(x: np.ndarray):
    """2x2 / stride 2 max pooling; ties go to the first element in row-major order."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"max pooling needs even spatial dims, got {H}x{W}")
    blocks = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(B, C, H // 2, W // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool2x2_backward(grad_out: np.ndarray, arg: np.ndarray) -> np.ndarray:
    B, C, h, w = grad_out.shape
    onehot = arg[..., None] == np.arange(4)
    blocks = np.where(onehot, grad_out[..., None], 0.0).reshape(B, C, h, w, 2, 2)
    return blocks.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, 2 * h, 2 * w)


def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    B, C, H, W = grad_out.shape
    return grad_out.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, n_first: int):
    return grad[:, :n_first], grad[:, n_first:]


def mse_loss(pred: np.ndarray, target: np.ndarray, valid_mask: np.ndarray | None = None):
    """Mean squared error over valid pixels, and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    if valid_mask is None:
        n_valid = diff.size
        return float(np.mean(diff * diff)), 2.0 * diff / n_valid
    mask = np.broadcast_to(valid_mask, diff.shape)
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("no valid pixels in loss mask")
    diff = np.where(mask, diff, 0.0)
    return float(np.sum(diff * diff) / n_valid), 2.0 * diff / n_valid


def adam_step(param, grad, m, v, t: int, lr: float = 2e-4,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; ``param``, ``m`` and ``v`` change in place."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
