"""Convolutional autoencoder with a uniform latent quantizer and an order-0 entropy model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError
from .metrics import CostReport, LayerGeometry, cost_report
from .tensor import Tensor

LayerSpec = tuple[int, int, int]  # out_channels, kernel, stride


@dataclass
class CaeConfig:
    patch_size: int = 32
    encoder: tuple[LayerSpec, ...] = ((32, 5, 2), (64, 3, 2), (16, 3, 2))
    latent_channels: int = 16
    quant_bits: int = 4
    lam: float = 1e-5
    huber_beta: float = 1.0
    slope: float = 0.01
    in_channels: int = 3

    def __post_init__(self):
        self.encoder = tuple(tuple(int(v) for v in spec) for spec in self.encoder)
        self.validate()

    def validate(self) -> None:
        if not self.encoder:
            raise ValueError("encoder needs at least one layer")
        if self.encoder[-1][0] != self.latent_channels:
            raise ValueError(f"last encoder layer has {self.encoder[-1][0]} channels, latent_channels is {self.latent_channels}")
        if self.patch_size < 1 or self.patch_size & (self.patch_size - 1):
            raise ValueError(f"patch_size must be a power of two, got {self.patch_size}")
        for out, k, s in self.encoder:
            if out < 1 or s < 1:
                raise ValueError(f"bad layer spec {(out, k, s)}")
            if k < 1 or k % 2 == 0:
                raise ValueError(f"kernel sizes must be odd, got {k}")
        if self.patch_size % self.total_stride:
            raise ValueError(f"strides (product {self.total_stride}) must divide patch_size {self.patch_size}")
        if self.quant_bits < 1:
            raise ValueError("quant_bits must be >= 1")
        if self.lam < 0 or self.huber_beta <= 0:
            raise ValueError("need lam >= 0 and huber_beta > 0")

    @property
    def total_stride(self) -> int:
        return math.prod(s for _, _, s in self.encoder)

    @property
    def levels(self) -> int:
        return 2 ** self.quant_bits

    @property
    def latent_size(self) -> int:
        return self.patch_size // self.total_stride

    def layer_specs(self) -> list[tuple[str, int, int, int, int, int, bool]]:
        """(name, cin, cout, kernel, stride, pad, transposed) in forward order.

        Decoder layers mirror the encoder; a transposed kernel of
        ``k + s - 1`` with pad ``(k - 1) // 2`` undoes a stride-``s`` conv exactly.
        """
        chans = [self.in_channels] + [out for out, _, _ in self.encoder]
        specs = []
        for i, (out, k, s) in enumerate(self.encoder):
            specs.append((f"enc{i}", chans[i], out, k, s, (k - 1) // 2, False))
        n = len(self.encoder)
        for j in range(n):
            i = n - 1 - j
            _, k, s = self.encoder[i]
            specs.append((f"dec{j}", chans[i + 1], chans[i], k + s - 1, s, (k - 1) // 2, True))
        return specs

    def layer_geometry(self, height: Optional[int] = None, width: Optional[int] = None) -> list[LayerGeometry]:
        h = self.patch_size if height is None else height
        w = self.patch_size if width is None else width
        out = []
        for name, cin, cout, k, s, p, tr in self.layer_specs():
            if tr:
                ho, wo = T.conv_transpose_output_size(h, k, s, p), T.conv_transpose_output_size(w, k, s, p)
            else:
                ho, wo = T.conv_output_size(h, k, s, p), T.conv_output_size(w, k, s, p)
            out.append(LayerGeometry(name, cin, cout, k, s, p, tr, (h, w), (ho, wo)))
            h, w = ho, wo
        return out


@dataclass
class LatentCode:
    symbols: np.ndarray  # int64 (N, C, h, w)
    quant_bits: int

    def __post_init__(self):
        if self.symbols.ndim != 4:
            raise DimensionError(f"latent code must be 4-d, got {self.symbols.shape}")
        if self.symbols.size and (self.symbols.min() < 0 or self.symbols.max() >= 2 ** self.quant_bits):
            raise ValueError(f"symbols outside [0, {2 ** self.quant_bits})")

    @property
    def shape(self):
        return self.symbols.shape


@dataclass
class ConvLayer:
    name: str
    weight: Tensor
    bias: Tensor
    stride: int
    pad: int
    transposed: bool

    def __call__(self, x: Tensor) -> Tensor:
        fn = T.conv_transpose2d if self.transposed else T.conv2d
        return fn(x, self.weight, self.bias, self.stride, self.pad)


def _init_layer(rng: np.random.Generator, name, cin, cout, k, s, p, transposed) -> ConvLayer:
    # He-uniform weights; biases uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
    fan_in = shape[1] * k * k
    bound = math.sqrt(6.0 / fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=f"{name}.weight")
    bb = 1.0 / math.sqrt(fan_in)
    b = Tensor(rng.uniform(-bb, bb, size=(cout,)), requires_grad=True, name=f"{name}.bias")
    return ConvLayer(name, w, b, s, p, transposed)


@dataclass
class Cae:
    config: CaeConfig
    layers: list[ConvLayer] = field(default_factory=list)

    @classmethod
    def init(cls, config: CaeConfig, seed: int = 0) -> "Cae":
        rng = np.random.default_rng(seed)
        layers = [_init_layer(rng, *spec) for spec in config.layer_specs()]
        return cls(config, layers)

    @property
    def encoder_layers(self) -> list[ConvLayer]:
        return [l for l in self.layers if not l.transposed]

    @property
    def decoder_layers(self) -> list[ConvLayer]:
        return [l for l in self.layers if l.transposed]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for l in self.layers:
            out[l.weight.name] = l.weight
            out[l.bias.name] = l.bias
        return out

    def weight_names(self, scope: str = "all") -> list[str]:
        if scope == "encoder":
            layers = self.encoder_layers
        elif scope == "decoder":
            layers = self.decoder_layers
        elif scope == "all":
            layers = self.layers
        else:
            raise ValueError(f"unknown scope {scope!r}")
        return [l.weight.name for l in layers]

    def layer_names(self, scope: str = "all") -> list[str]:
        return [n.rsplit(".", 1)[0] for n in self.weight_names(scope)]

    def layer_weights(self) -> dict[str, np.ndarray]:
        return {l.name: l.weight.data for l in self.layers}

    def cost_report(self, masks=None, height: Optional[int] = None, width: Optional[int] = None) -> CostReport:
        """MACCs/parameter report; ``masks`` is keyed by weight name (``enc0.weight``)."""
        by_layer = None
        if masks is not None:
            by_layer = {k.rsplit(".", 1)[0]: v for k, v in masks.items()}
        return cost_report(self.config.layer_geometry(height, width), self.layer_weights(), by_layer)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    # forward pieces -------------------------------------------------------

    def analysis(self, x: Tensor) -> Tensor:
        """Continuous latent in (0, 1)."""
        h = x
        enc = self.encoder_layers
        for i, layer in enumerate(enc):
            h = layer(h)
            h = T.sigmoid(h) if i == len(enc) - 1 else T.leaky_relu(h, self.config.slope)
        return h

    def synthesis(self, zq: Tensor) -> Tensor:
        h = zq
        dec = self.decoder_layers
        for i, layer in enumerate(dec):
            h = layer(h)
            h = T.sigmoid(h) if i == len(dec) - 1 else T.leaky_relu(h, self.config.slope)
        return h

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Reconstruction and the continuous latent."""
        z = self.analysis(x)
        return self.synthesis(T.quantize_ste(z, self.config.levels)), z

    def _check_input(self, x: np.ndarray) -> None:
        p, c = self.config.patch_size, self.config.in_channels
        if x.ndim != 4 or x.shape[1:] != (c, p, p):
            raise DimensionError(f"expected (N, {c}, {p}, {p}) input, got {x.shape}")
        if x.min() < 0 or x.max() > 1:
            raise ValueError("input values must lie in [0, 1]")

    def encode(self, x, quant_bits: Optional[int] = None) -> LatentCode:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
        self._check_input(x)
        bits = self.config.quant_bits if quant_bits is None else quant_bits
        with T.no_grad():
            z = self.analysis(Tensor(x))
        return LatentCode(T.quantize_indices(z.data, 2 ** bits), bits)

    def decode(self, code: LatentCode) -> np.ndarray:
        expect = (self.config.latent_channels, self.config.latent_size, self.config.latent_size)
        if code.shape[1:] != expect:
            raise DimensionError(f"latent code shape {code.shape[1:]} != {expect}")
        zq = T.bin_centers(code.symbols, 2 ** code.quant_bits)
        with T.no_grad():
            out = self.synthesis(Tensor(zq))
        return np.clip(out.data, 0.0, 1.0)


# ---------------------------------------------------------------------------
# entropy and loss


def entropy_estimate(code: LatentCode) -> float:
    """Empirical order-0 entropy in bits/symbol, averaged over channels."""
    s = code.symbols
    if s.size == 0:
        raise ValueError("empty latent code")
    levels = 2 ** code.quant_bits
    per_channel = np.moveaxis(s, 1, 0).reshape(s.shape[1], -1)
    hs = []
    for row in per_channel:
        p = np.bincount(row, minlength=levels) / row.size
        p = p[p > 0]
        hs.append(float(-(p * np.log2(p)).sum()))
    return float(np.mean(hs))


@dataclass
class LossTerms:
    total: Tensor
    entropy: Tensor
    distortion: Tensor


def loss_terms(model: Cae, x: Tensor, lam: Optional[float] = None) -> LossTerms:
    lam = model.config.lam if lam is None else lam
    if lam < 0:
        raise ValueError("lam must be >= 0")
    x_hat, z = model.forward(x)
    ent = T.entropy_surrogate(z, model.config.levels)
    dist = T.huber_loss(x_hat, x, model.config.huber_beta)
    total = T.add(T.mul(ent, lam), dist) if lam else T.add(dist, 0.0)
    if not math.isfinite(total.item()):
        raise NumericError("loss is not finite")
    return LossTerms(total, ent, dist)


def total_loss(x, model: Cae, lam: Optional[float] = None) -> Tensor:
    """lam * entropy surrogate of the latent + Huber distortion of the reconstruction."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return loss_terms(model, x, lam).total


def reconstruct(model: Cae, x: np.ndarray, quant_bits: Optional[int] = None) -> tuple[np.ndarray, LatentCode]:
    code = model.encode(x, quant_bits)
    return model.decode(code), code
