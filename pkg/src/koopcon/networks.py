"""Learnable components: convolutional autoencoder, attention + linear
condensation head, and the ConvNet classifier.
"""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, avg_pool2d, conv2d, conv_transpose2d, matmul, softmax

DEPTH_PRESETS = {
    # (encoder conv layers, decoder transposed-conv layers)
    "shallow": (3, 2),
    "medium": (4, 3),
    "deep": (5, 4),
}
CHANNEL_CAP = 128


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container; parameters are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise DimensionError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            if p.shape != state[name].shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], dtype=np.float64)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng, fan_in: int, fan_out: int):
        self.weight = Tensor(he_uniform(rng, (fan_in, fan_out), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel=3, stride=1, padding=1):
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(he_uniform(rng, (c_out, c_in, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, rng, c_in, c_out, kernel=4, stride=2, padding=1):
        # each output pixel receives roughly c_in * (kernel / stride)^2 contributions
        fan_in = max(1, c_in * (kernel // stride) ** 2)
        self.weight = Tensor(he_uniform(rng, (c_in, c_out, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class InstanceNorm(Module):
    """Per-sample, per-channel normalisation over the spatial axes with a learned affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        centred = x - x.mean(axis=(2, 3), keepdims=True)
        var = (centred * centred).mean(axis=(2, 3), keepdims=True)
        c = x.shape[1]
        scale = self.weight.reshape(1, c, 1, 1)
        return centred * (var + self.eps) ** -0.5 * scale + self.bias.reshape(1, c, 1, 1)


def _check_geometry(x: Tensor, geometry, who: str) -> None:
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(geometry):
        raise DimensionError(f"{who}: expected (n, {', '.join(map(str, geometry))}) input, got {x.shape}")


class EncoderDecoder(Module):
    """Deterministic convolutional autoencoder.

    The encoder halves the resolution twice with stride-2 convolutions and
    adds stride-1 layers for deeper presets; the decoder mirrors it with
    transposed convolutions and ends in a sigmoid so outputs lie in [0, 1].
    """

    def __init__(self, geometry, latent_dim: int = 64, preset: str = "shallow", rng=None):
        if preset not in DEPTH_PRESETS:
            raise ConfigError(f"unknown depth preset {preset!r}; choose from {sorted(DEPTH_PRESETS)}", key="depth")
        c, h, w = geometry
        if h % 4 or w % 4:
            raise ConfigError(f"image extents {h}x{w} must be divisible by 4", key="dataset")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.geometry = (c, h, w)
        self.latent_dim = latent_dim
        self.preset = preset
        n_enc, n_dec = DEPTH_PRESETS[preset]

        widths = [min(32 * 2**i, CHANNEL_CAP) for i in range(n_enc)]
        encoder = []
        c_prev = c
        for i, width in enumerate(widths):
            stride = 2 if i < 2 else 1
            encoder.append(Conv2d(rng, c_prev, width, kernel=3, stride=stride, padding=1))
            c_prev = width
        self.encoder = encoder
        self.grid = (h // 4, w // 4)
        flat = c_prev * self.grid[0] * self.grid[1]
        self.enc_head = Linear(rng, flat, latent_dim)

        self.dec_channels = 64
        self.dec_head = Linear(rng, latent_dim, self.dec_channels * self.grid[0] * self.grid[1])
        decoder = []
        for _ in range(n_dec - 2):
            decoder.append(ConvTranspose2d(rng, self.dec_channels, self.dec_channels, kernel=3, stride=1, padding=1))
        decoder.append(ConvTranspose2d(rng, self.dec_channels, 32, kernel=4, stride=2, padding=1))
        decoder.append(ConvTranspose2d(rng, 32, c, kernel=4, stride=2, padding=1))
        self.decoder = decoder

    @property
    def conv_layer_count(self) -> int:
        return len(self.encoder) + len(self.decoder)

    def encode(self, x: Tensor) -> Tensor:
        _check_geometry(x, self.geometry, "encode")
        for layer in self.encoder:
            x = layer(x).relu()
        return self.enc_head(x.reshape(x.shape[0], -1))

    def decode(self, y: Tensor) -> Tensor:
        if y.ndim != 2 or y.shape[1] != self.latent_dim:
            raise DimensionError(f"decode: expected (k, {self.latent_dim}) latents, got {y.shape}")
        z = self.dec_head(y).relu().reshape(y.shape[0], self.dec_channels, *self.grid)
        for layer in self.decoder[:-1]:
            z = layer(z).relu()
        return self.decoder[-1](z).sigmoid()

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))


class CondenserHead(Module):
    """Single-head self-attention over a class batch followed by an
    (n_prime x n_b) mixing matrix that emits the condensed latents."""

    def __init__(self, latent_dim: int, n_b: int, n_prime: int, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        d = latent_dim
        self.latent_dim = d
        self.n_b = n_b
        self.n_prime = n_prime
        self.w_q = Tensor(he_uniform(rng, (d, d), d), requires_grad=True)
        self.w_k = Tensor(he_uniform(rng, (d, d), d), requires_grad=True)
        # identity value map plus a near-selection mixing matrix: at initialization the
        # condensed latents are attention-smoothed copies of distinct batch members
        self.w_v = Tensor(np.eye(d) + 0.01 * he_uniform(rng, (d, d), d), requires_grad=True)
        mix = np.zeros((n_prime, n_b))
        mix[np.arange(n_prime), np.arange(n_prime) % n_b] = 1.0
        self.mix = Tensor(mix + 0.01 * he_uniform(rng, (n_prime, n_b), n_b), requires_grad=True)

    def attention_weights(self, y: Tensor) -> Tensor:
        q = matmul(y, self.w_q)
        k = matmul(y, self.w_k)
        return softmax(matmul(q, k.T) * (1.0 / np.sqrt(self.latent_dim)), axis=1)

    def self_attention(self, y: Tensor) -> Tensor:
        if y.ndim != 2 or y.shape[1] != self.latent_dim:
            raise DimensionError(f"self_attention: expected (n, {self.latent_dim}) latents, got {y.shape}")
        return matmul(self.attention_weights(y), matmul(y, self.w_v))

    def condense_map(self, y_att: Tensor) -> Tensor:
        if y_att.ndim != 2 or y_att.shape[0] != self.n_b:
            raise DimensionError(f"condense_map: expected exactly {self.n_b} rows, got {y_att.shape}")
        return matmul(self.mix, y_att)

    def forward(self, y: Tensor) -> Tensor:
        return self.condense_map(self.self_attention(y))


class ConvNetClassifier(Module):
    """Three blocks of (3x3 conv, instance norm, ReLU, 2x2 average pool) and a dense head."""

    def __init__(self, geometry, num_classes: int, width: int = 128, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c, h, w = geometry
        self.geometry = (c, h, w)
        self.num_classes = num_classes
        self.blocks = [
            Conv2d(rng, c, width, 3, 1, 1),
            Conv2d(rng, width, width, 3, 1, 1),
            Conv2d(rng, width, width, 3, 1, 1),
        ]
        self.norms = [InstanceNorm(width) for _ in self.blocks]
        fh, fw = h, w
        for _ in self.blocks:
            fh, fw = fh // 2, fw // 2
        if fh == 0 or fw == 0:
            raise ConfigError(f"images of {h}x{w} are too small for three pooling stages", key="dataset")
        self.head = Linear(rng, width * fh * fw, num_classes)

    def forward(self, x: Tensor) -> Tensor:
        _check_geometry(x, self.geometry, "classify")
        for block, norm in zip(self.blocks, self.norms):
            x = avg_pool2d(norm(block(x)).relu(), 2)
        return self.head(x.reshape(x.shape[0], -1))

    classify = forward
