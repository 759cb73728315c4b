"""U-Net image-to-image translator built on the layers in ``layers``."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .layers import (
    Conv2D,
    concat_channels,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_backward,
    relu_forward,
    split_channels,
    upsample2x_backward,
    upsample2x_forward,
)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 4
    base_filters: int = 8
    image_size: int = 256
    final_activation: str = "linear"

    def __post_init__(self):
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be at least 1")
        if self.image_size % (2**self.depth):
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2**depth = {2**self.depth}"
            )
        if self.final_activation != "linear":
            raise ValueError("only a linear output layer is supported")

    def filters(self, level: int) -> int:
        """Channel count at contraction level ``level`` (1-based); depth+1 is the bottleneck."""
        return self.base_filters * 2 ** (level - 1)

    def to_dict(self) -> dict:
        return asdict(self)


class UNet:
    def __init__(self, config: UNetConfig = UNetConfig(), seed: int | None = 0):
        self.config = config
        rng = None if seed is None else np.random.default_rng(seed)
        d = config.depth
        self.encoder = []
        c_in = 1
        for level in range(1, d + 1):
            f = config.filters(level)
            self.encoder.append((Conv2D(c_in, f, 3, rng), Conv2D(f, f, 3, rng)))
            c_in = f
        fb = config.filters(d + 1)
        self.bottleneck = (Conv2D(c_in, fb, 3, rng), Conv2D(fb, fb, 3, rng))
        self.decoder = []  # deepest level first
        c_in = fb
        for level in range(d, 0, -1):
            f = config.filters(level)
            self.decoder.append((Conv2D(c_in, f, 2, rng), Conv2D(2 * f, f, 3, rng),
                                 Conv2D(f, f, 3, rng)))
            c_in = f
        self.head = Conv2D(c_in, 1, 1, rng)
        self._cache = None

    def layers(self) -> list[Conv2D]:
        """All convolutions in topology order (the checkpoint order)."""
        out = [c for pair in self.encoder for c in pair]
        out.extend(self.bottleneck)
        out.extend(c for triple in self.decoder for c in triple)
        out.append(self.head)
        return out

    def n_params(self) -> int:
        return sum(c.weight.size + c.bias.size for c in self.layers())

    def zero_grad(self):
        for c in self.layers():
            c.zero_grad()

    def _check_input(self, x: np.ndarray):
        s = self.config.image_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
            raise ValueError(f"expected input of shape (B, 1, {s}, {s}), got {x.shape}")

    def forward(self, x: np.ndarray, keep_cache: bool = True) -> np.ndarray:
        self._check_input(x)
        relus, pools, skips = [], [], []

        def conv_relu(conv, h):
            h, mask = relu_forward(conv.forward(h))
            relus.append(mask)
            return h

        h = x
        for conv_a, conv_b in self.encoder:
            h = conv_relu(conv_b, conv_relu(conv_a, h))
            skips.append(h)
            h, arg = maxpool2x2_forward(h)
            pools.append(arg)
        h = conv_relu(self.bottleneck[1], conv_relu(self.bottleneck[0], h))
        for (up_conv, conv_a, conv_b), skip in zip(self.decoder, reversed(skips)):
            h = conv_relu(up_conv, upsample2x_forward(h))
            h = concat_channels(skip, h)
            h = conv_relu(conv_b, conv_relu(conv_a, h))
        out = self.head.forward(h)
        if keep_cache:
            self._cache = (relus, pools, [s.shape[1] for s in skips])
        else:
            self._cache = None
            for c in self.layers():
                c.clear_cache()
        return out

    __call__ = forward

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient for the input."""
        if self._cache is None:
            raise RuntimeError("backward needs a cached forward pass")
        relus, pools, skip_channels = self._cache
        relus = list(relus)

        def conv_relu_back(conv, g):
            return conv.backward(relu_backward(g, relus.pop()))

        g = self.head.backward(grad_out)
        skip_grads = []
        for (up_conv, conv_a, conv_b), n_skip in zip(reversed(self.decoder), skip_channels):
            g = conv_relu_back(conv_a, conv_relu_back(conv_b, g))
            g_skip, g = split_channels(g, n_skip)
            skip_grads.append(g_skip)
            g = upsample2x_backward(conv_relu_back(up_conv, g))
        g = conv_relu_back(self.bottleneck[0], conv_relu_back(self.bottleneck[1], g))
        for (conv_a, conv_b), arg, g_skip in zip(reversed(self.encoder), reversed(pools),
                                                 reversed(skip_grads)):
            g = maxpool2x2_backward(g, arg) + g_skip
            g = conv_relu_back(conv_a, conv_relu_back(conv_b, g))
        return g


def unet_forward(model: UNet, images: np.ndarray) -> np.ndarray:
    return model.forward(images)
