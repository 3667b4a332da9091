"""Parameterised building blocks.

Blocks are stateless descriptions: ``init`` registers parameters in a
:class:`ParamStore` under the block's prefix and ``__call__`` evaluates the
block against whichever store it is handed, so online and target copies share
one description.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import DimensionError
from . import functional as F
from .params import ParamStore
from .tensor import Tensor, relu, reshape


def uniform_init(rng, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    gen = getattr(rng, "generator", rng)
    return gen.uniform(-bound, bound, size=shape)


class Dense:
    def __init__(self, prefix: str, n_in: int, n_out: int, bias: bool = True):
        self.prefix, self.n_in, self.n_out, self.bias = prefix, n_in, n_out, bias

    def init(self, store: ParamStore, rng) -> None:
        store.add(f"{self.prefix}.W", uniform_init(rng, self.n_in, (self.n_out, self.n_in)))
        if self.bias:
            store.add(f"{self.prefix}.b", uniform_init(rng, self.n_in, (self.n_out,)))

    def __call__(self, store: ParamStore, x) -> Tensor:
        b = store[f"{self.prefix}.b"] if self.bias else None
        return F.dense_forward(x, store[f"{self.prefix}.W"], b)


class MLP:
    """Dense stack with ReLU between layers and optional dropout on hidden units."""

    def __init__(self, prefix: str, sizes: Sequence[int], dropout: float = 0.0):
        if len(sizes) < 2:
            raise DimensionError("MLP needs at least input and output sizes")
        self.prefix = prefix
        self.sizes = list(sizes)
        self.dropout = dropout
        self.layers = [Dense(f"{prefix}.{i}", a, b) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    def init(self, store: ParamStore, rng) -> None:
        for layer in self.layers:
            layer.init(store, rng)

    def __call__(self, store: ParamStore, x, mode: str = "eval", rng=None) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(store, h)
            if i < len(self.layers) - 1:
                h = relu(h)
                if self.dropout > 0:
                    h = F.dropout(h, self.dropout, mode, rng)
        return h


class ConvStack:
    """Square convolutions, each followed by ReLU and a 2x2 max-pool when the map allows it.

    ``padding`` zero-pads every convolution; ``kernel // 2`` keeps the map size,
    which small grids need to fit more than one layer.
    """

    def __init__(self, prefix: str, in_shape: Sequence[int], channels: Sequence[int], kernel: int = 3,
                 padding: int = 0):
        self.prefix = prefix
        self.in_shape = tuple(in_shape)
        self.channels = list(channels)
        self.kernel = kernel
        self.padding = padding
        self.plan = []  # (c_in, c_out, pool)
        c, h, w = self.in_shape
        for cout in self.channels:
            h, w = h + 2 * padding, w + 2 * padding
            if h < kernel or w < kernel:
                raise DimensionError(f"conv stack: {h}x{w} map too small for {kernel}x{kernel} filters")
            h, w = h - kernel + 1, w - kernel + 1
            pool = h >= 2 and w >= 2
            if pool:
                h, w = h // 2, w // 2
            self.plan.append((c, cout, pool))
            c = cout
        self.out_shape = (c, h, w)
        self.out_dim = c * h * w

    def init(self, store: ParamStore, rng) -> None:
        k = self.kernel
        for i, (cin, cout, _) in enumerate(self.plan):
            fan = cin * k * k
            store.add(f"{self.prefix}.{i}.W", uniform_init(rng, fan, (cout, cin, k, k)))
            store.add(f"{self.prefix}.{i}.b", uniform_init(rng, fan, (cout,)))

    def __call__(self, store: ParamStore, images) -> Tensor:
        """``images`` is (N, C, H, W); returns flattened (N, out_dim) features."""
        h = images
        for i, (_, _, pool) in enumerate(self.plan):
            h = relu(F.conv2d_forward(h, store[f"{self.prefix}.{i}.W"], store[f"{self.prefix}.{i}.b"], self.padding))
            if pool:
                h = F.max_pool2d(h, 2)
        return reshape(h, (h.shape[0], -1))
