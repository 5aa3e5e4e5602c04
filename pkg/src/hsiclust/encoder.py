"""Superpixel encoders: the spectral-spatial graph convolution network, its
ablation variants, the two-layer predictor head and the momentum-updated
online/target pair.

Each network layer interleaves a 1-D spectral convolution with graph
aggregation: reshape to (M, C, L) -> conv -> BN -> flatten -> aggregate ->
square affine -> BN -> activation (no activation after the final layer).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import ParamSet, Tensor


VARIANTS = ("ssgco", "mlp", "conv1d", "graphconv", "conv1d_graph", "graph_conv1d")


class SpectralLengthUnderflow(ValueError):
    pass


@dataclass(frozen=True)
class SsgcoConfig:
    """Architecture of one encoder tower."""

    input_dim: int
    layers: int
    kernel_sizes: tuple[int, ...]
    channels: tuple[int, ...]
    variant: str = "ssgco"
    use_batch_norm: bool = True
    predictor_hidden: int = 512

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if len(self.kernel_sizes) != self.layers or len(self.channels) != self.layers:
            raise ValueError("kernel_sizes and channels must have one entry per layer")
        # mlp/graphconv take their widths from the conv schedule (matched budgets),
        # so they validate the full chain too; sequenced variants validate their half
        if self.variant in ("ssgco", "conv1d", "mlp", "graphconv"):
            self.spectral_lengths()
        elif self.variant == "conv1d_graph":
            self._chain_lengths(range((self.layers + 1) // 2))
        elif self.variant == "graph_conv1d":
            self._chain_lengths(range((self.layers + 1) // 2, self.layers))

    def _chain_lengths(self, layer_indices) -> list[int]:
        lengths = [self.input_dim]
        for i in layer_indices:
            k = self.kernel_sizes[i]
            if k > lengths[-1]:
                raise SpectralLengthUnderflow(
                    f"layer {i}: kernel {k} exceeds spectral length {lengths[-1]}")
            lengths.append(lengths[-1] - k + 1)
        return lengths

    @staticmethod
    def default(input_dim: int, layers: int, variant: str = "ssgco",
                use_batch_norm: bool = True, predictor_hidden: int = 512) -> "SsgcoConfig":
        """Kernel 7 shrinking by 2 to a floor of 3; channels 16 doubling to a cap of 64."""
        kernels = tuple(max(3, 7 - 2 * i) for i in range(layers))
        channels = tuple(min(64, 16 * 2 ** i) for i in range(layers))
        return SsgcoConfig(input_dim, layers, kernels, channels, variant,
                           use_batch_norm, predictor_hidden)

    def spectral_lengths(self) -> list[int]:
        """Spectral length before/after each conv layer; validates underflow."""
        return self._chain_lengths(range(self.layers))

    def flat_dims(self) -> list[int]:
        """Flattened feature width after each layer (and the input width first)."""
        lengths = self.spectral_lengths()
        return [self.input_dim] + [self.channels[i] * lengths[i + 1]
                                   for i in range(self.layers)]

    @property
    def output_dim(self) -> int:
        if self.variant == "conv1d_graph":
            # graph blocks are square, so the width after the conv half is final
            n_conv = (self.layers + 1) // 2
            lengths = self._chain_lengths(range(n_conv))
            return self.channels[n_conv - 1] * lengths[-1]
        if self.variant == "graph_conv1d":
            n_graph = (self.layers + 1) // 2
            if n_graph == self.layers:
                return self.input_dim
            lengths = self._chain_lengths(range(n_graph, self.layers))
            return self.channels[-1] * lengths[-1]
        return self.flat_dims()[-1]


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder_params(cfg: SsgcoConfig, rng: np.random.Generator,
                        prefix: str = "f.") -> ParamSet:
    """Fan-in-scaled uniform weights, BN scale 1 / shift 0, for one tower."""
    ps = ParamSet()

    def add_conv(layer, c_in, c_out, k):
        ps.add(f"{prefix}layer{layer}.conv", _uniform_init(rng, (c_out, c_in, k), c_in * k))

    def add_bn(name, width):
        ps.add(f"{prefix}{name}.scale", np.ones(width))
        ps.add(f"{prefix}{name}.shift", np.zeros(width))

    def add_affine(name, f_in, f_out):
        ps.add(f"{prefix}{name}", _uniform_init(rng, (f_in, f_out), f_in))

    if cfg.variant == "ssgco":
        dims = cfg.flat_dims()
        c_prev = 1
        for i in range(cfg.layers):
            c = cfg.channels[i]
            add_conv(i, c_prev, c, cfg.kernel_sizes[i])
            add_bn(f"layer{i}.bn_conv", dims[i + 1])
            add_affine(f"layer{i}.graph", dims[i + 1], dims[i + 1])
            add_bn(f"layer{i}.bn_graph", dims[i + 1])
            c_prev = c
    elif cfg.variant == "conv1d":
        dims = cfg.flat_dims()
        c_prev = 1
        for i in range(cfg.layers):
            c = cfg.channels[i]
            add_conv(i, c_prev, c, cfg.kernel_sizes[i])
            add_bn(f"layer{i}.bn_conv", dims[i + 1])
            c_prev = c
    elif cfg.variant in ("mlp", "graphconv"):
        dims = cfg.flat_dims()
        for i in range(cfg.layers):
            add_affine(f"layer{i}.graph", dims[i], dims[i + 1])
            add_bn(f"layer{i}.bn_graph", dims[i + 1])
    elif cfg.variant == "conv1d_graph":
        n_conv = (cfg.layers + 1) // 2
        lengths = cfg._chain_lengths(range(n_conv))
        c_prev = 1
        for i in range(n_conv):
            c = cfg.channels[i]
            add_conv(i, c_prev, c, cfg.kernel_sizes[i])
            add_bn(f"layer{i}.bn_conv", c * lengths[i + 1])
            c_prev = c
        width = cfg.channels[n_conv - 1] * lengths[n_conv]
        for i in range(n_conv, cfg.layers):
            add_affine(f"layer{i}.graph", width, width)
            add_bn(f"layer{i}.bn_graph", width)
    elif cfg.variant == "graph_conv1d":
        n_graph = (cfg.layers + 1) // 2
        for i in range(n_graph):
            add_affine(f"layer{i}.graph", cfg.input_dim, cfg.input_dim)
            add_bn(f"layer{i}.bn_graph", cfg.input_dim)
        c_prev = 1
        length = cfg.input_dim
        for i in range(n_graph, cfg.layers):
            c = cfg.channels[i]
            add_conv(i, c_prev, c, cfg.kernel_sizes[i])
            length = length - cfg.kernel_sizes[i] + 1
            add_bn(f"layer{i}.bn_conv", c * length)
            c_prev = c
    return ps


def init_predictor_params(cfg: SsgcoConfig, rng: np.random.Generator,
                          prefix: str = "g.", lr_mult: float = 10.0) -> ParamSet:
    """Two-layer MLP head: affine -> BN -> relu -> affine (+bias)."""
    ps = ParamSet()
    f = cfg.output_dim
    hidden = cfg.predictor_hidden
    ps.add(f"{prefix}w1", _uniform_init(rng, (f, hidden), f), lr_mult=lr_mult)
    ps.add(f"{prefix}bn.scale", np.ones(hidden), lr_mult=lr_mult)
    ps.add(f"{prefix}bn.shift", np.zeros(hidden), lr_mult=lr_mult)
    ps.add(f"{prefix}w2", _uniform_init(rng, (hidden, f), hidden), lr_mult=lr_mult)
    ps.add(f"{prefix}b2", np.zeros(f), lr_mult=lr_mult)
    return ps


def _maybe_bn(cfg, params, prefix, name, h):
    if not cfg.use_batch_norm:
        return h
    return nm.batch_norm(h, params[f"{prefix}{name}.scale"], params[f"{prefix}{name}.shift"])


def _conv_block(cfg, params, prefix, layer, h_flat, c_in, length, record):
    m = h_flat.shape[0]
    h = nm.reshape(h_flat, (m, c_in, length))
    record("reshape", h.shape)
    h = nm.conv1d(h, params[f"{prefix}layer{layer}.conv"])
    record("conv1d", h.shape)
    h = _maybe_bn(cfg, params, prefix, f"layer{layer}.bn_conv", h)
    record("bn", h.shape)
    c_out = cfg.channels[layer]
    out_len = h.shape[2]
    h = nm.reshape(h, (m, c_out * out_len))
    record("reshape", h.shape)
    return h, c_out, out_len


def _graph_block(cfg, params, prefix, layer, h, a_hat, record, aggregate=True):
    if aggregate:
        h = nm.graph_aggregate(a_hat, h)
    h = nm.affine(h, params[f"{prefix}layer{layer}.graph"])
    record("graphconv", h.shape)
    h = _maybe_bn(cfg, params, prefix, f"layer{layer}.bn_graph", h)
    record("bn", h.shape)
    return h


def forward_encoder(cfg: SsgcoConfig, params: ParamSet, x, a_hat,
                    prefix: str = "f.", shape_trace: list | None = None) -> Tensor:
    """Forward one tower; `shape_trace` collects (stage, shape) when provided."""
    x = nm.as_tensor(x)
    a_hat = nm.as_tensor(a_hat) if a_hat is not None else None
    record = (lambda name, shape: shape_trace.append((name, tuple(shape)))) \
        if shape_trace is not None else (lambda name, shape: None)
    record("input", x.shape)
    h = x
    last = cfg.layers - 1

    if cfg.variant == "ssgco":
        c_in, length = 1, cfg.input_dim
        for i in range(cfg.layers):
            h, c_in, length = _conv_block(cfg, params, prefix, i, h, c_in, length, record)
            h = _graph_block(cfg, params, prefix, i, h, a_hat, record)
            if i != last:
                h = nm.relu(h)
    elif cfg.variant == "conv1d":
        c_in, length = 1, cfg.input_dim
        for i in range(cfg.layers):
            h, c_in, length = _conv_block(cfg, params, prefix, i, h, c_in, length, record)
            if i != last:
                h = nm.relu(h)
    elif cfg.variant in ("mlp", "graphconv"):
        aggregate = cfg.variant == "graphconv"
        for i in range(cfg.layers):
            h = _graph_block(cfg, params, prefix, i, h, a_hat, record, aggregate=aggregate)
            if i != last:
                h = nm.relu(h)
    elif cfg.variant == "conv1d_graph":
        n_conv = (cfg.layers + 1) // 2
        c_in, length = 1, cfg.input_dim
        for i in range(cfg.layers):
            if i < n_conv:
                h, c_in, length = _conv_block(cfg, params, prefix, i, h, c_in, length, record)
            else:
                h = _graph_block(cfg, params, prefix, i, h, a_hat, record)
            if i != last:
                h = nm.relu(h)
    elif cfg.variant == "graph_conv1d":
        n_graph = (cfg.layers + 1) // 2
        c_in, length = 1, cfg.input_dim
        for i in range(cfg.layers):
            if i < n_graph:
                h = _graph_block(cfg, params, prefix, i, h, a_hat, record)
            else:
                h, c_in, length = _conv_block(cfg, params, prefix, i, h, c_in, length, record)
            if i != last:
                h = nm.relu(h)
    return h


def forward_predictor(params: ParamSet, v, prefix: str = "g.",
                      use_batch_norm: bool = True) -> Tensor:
    h = nm.affine(nm.as_tensor(v), params[f"{prefix}w1"])
    if use_batch_norm:
        h = nm.batch_norm(h, params[f"{prefix}bn.scale"], params[f"{prefix}bn.shift"])
    h = nm.relu(h)
    return nm.add(nm.affine(h, params[f"{prefix}w2"]), params[f"{prefix}b2"])


@dataclass
class EncoderPair:
    """Online tower + predictor (trained) and target tower (momentum-updated)."""

    cfg: SsgcoConfig
    online: ParamSet            # "f." tower params and "g." predictor params
    target: ParamSet            # "f." tower params only, never receives gradients
    momentum: float = 0.99
    tower_names: tuple[str, ...] = field(default_factory=tuple)

    @staticmethod
    def create(cfg: SsgcoConfig, rng: np.random.Generator, momentum: float = 0.99) -> "EncoderPair":
        online = init_encoder_params(cfg, rng, "f.")
        tower_names = tuple(online.names())
        online.merge(init_predictor_params(cfg, rng, "g."))
        target = init_encoder_params(cfg, rng, "f.")
        for name in target.names():  # target starts as a copy of the online tower
            np.copyto(target[name].value, online[name].value)
        return EncoderPair(cfg, online, target, momentum, tower_names)

    def forward_online(self, x, a_hat, shape_trace=None) -> Tensor:
        return forward_encoder(self.cfg, self.online, x, a_hat, "f.", shape_trace)

    def forward_target(self, x, a_hat) -> np.ndarray:
        with nm.no_grad():
            out = forward_encoder(self.cfg, self.target, x, a_hat, "f.")
        return out.value

    def forward_predictor(self, v) -> Tensor:
        return forward_predictor(self.online, v, "g.", self.cfg.use_batch_norm)

    def momentum_update_target(self) -> None:
        m = self.momentum
        for name in self.tower_names:
            t = self.target[name].value
            t *= m
            t += (1.0 - m) * self.online[name].value
