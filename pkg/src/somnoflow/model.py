"""Wake/sleep staging network: convolutional front-end, attention encoder, FFN decoder.

The front-end maps a 1-channel heart-rate series of length L to a
sequence of L/30 feature vectors of width ``d_model`` (one per scored
30-second epoch).  Three variants are provided: a residual dilated
convolution stack (``tcn``), a plain strided convolution stack (``cnn``)
and a windowed linear map (``fnn``).  The encoder applies stacked
multi-head self-attention / feed-forward layers with residual
connections and layer normalization; a two-layer feed-forward decoder
with a softmax produces per-epoch wake/sleep probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError

# LN eps small enough that normalized rows have unit variance to ~1e-8
LN_EPS = 1e-8
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class ConvSpec:
    """One convolutional sublayer: kernel size, output channels, dilation, stride."""

    kernel_size: int
    out_channels: int
    dilation: int = 1
    stride: int = 1

    def validate(self, name: str) -> None:
        for attr in ("kernel_size", "out_channels", "dilation", "stride"):
            if getattr(self, attr) < 1:
                raise ConfigError(f"{name}: {attr} must be a positive integer")

    @property
    def same_padding(self) -> int:
        # total pad dilation*(k-1) split symmetrically; must be even to
        # preserve length at stride 1 with a single symmetric pad value
        return self.dilation * (self.kernel_size - 1) // 2


@dataclass(frozen=True)
class ResidualBlockSpec:
    """Residual block: two conv sublayers, each conv -> batch norm -> ReLU -> dropout.

    Length reduction happens only on the second sublayer; the skip path
    is a kernel-1 convolution with the same stride whenever shape changes.
    """

    sublayer1: ConvSpec
    sublayer2: ConvSpec
    dropout: float = 0.1

    def validate(self, name: str) -> None:
        self.sublayer1.validate(f"{name}.sublayer1")
        self.sublayer2.validate(f"{name}.sublayer2")
        if self.sublayer1.stride != 1:
            raise ConfigError(f"{name}: first sublayer must use stride 1")
        if self.sublayer1.out_channels != self.sublayer2.out_channels:
            raise ConfigError(f"{name}: both sublayers must share output channels")
        for sub, label in ((self.sublayer1, "sublayer1"), (self.sublayer2, "sublayer2")):
            if sub.dilation * (sub.kernel_size - 1) % 2 != 0:
                raise ConfigError(
                    f"{name}.{label}: dilation*(kernel_size-1) must be even for "
                    "symmetric same-length padding"
                )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"{name}: dropout must lie in [0, 1)")


FRONT_ENDS = ("tcn", "cnn", "fnn")


@dataclass
class ModelConfig:
    """Architecture hyperparameters; every parameter shape derives from these."""

    d_model: int = 128
    n_heads: int = 8
    d_ffn: int = 512
    n_encoder_layers: int = 2
    n_classes: int = 2
    l_max: int = 2880          # maximum epoch-sequence length
    epoch_len: int = 30        # input samples per scored epoch
    front_end: str = "tcn"
    channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel_size: int = 3
    strides: tuple[int, ...] = (5, 3, 2, 1)
    dilations: tuple[int, ...] | None = None
    dropout: float = 0.1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if self.dilations is not None:
            self.dilations = tuple(int(d) for d in self.dilations)
        self.validate()

    def validate(self) -> None:
        if self.n_heads < 1 or self.d_model < 1:
            raise ConfigError("d_model and n_heads must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}"
            )
        if self.n_classes != 2:
            raise ConfigError("the staging task is binary; n_classes must be 2")
        if self.front_end not in FRONT_ENDS:
            raise ConfigError(f"front_end must be one of {FRONT_ENDS}, got {self.front_end!r}")
        if len(self.channels) != len(self.strides):
            raise ConfigError("channels and strides must have equal length")
        if self.dilations is not None and len(self.dilations) != len(self.channels):
            raise ConfigError("dilations must match channels in length")
        if self.channels[-1] != self.d_model:
            raise ConfigError(
                f"last channel count {self.channels[-1]} must equal d_model {self.d_model}"
            )
        if math.prod(self.strides) != self.epoch_len:
            raise ConfigError(
                f"front-end strides {self.strides} multiply to {math.prod(self.strides)}, "
                f"need epoch_len={self.epoch_len}"
            )
        if self.d_ffn < 1 or self.n_encoder_layers < 0 or self.l_max < 1:
            raise ConfigError("d_ffn, n_encoder_layers and l_max must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        self.blocks()  # validates per-block constraints

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    def block_dilations(self) -> tuple[int, ...]:
        if self.dilations is not None:
            return self.dilations
        return tuple(2 ** b for b in range(len(self.channels)))

    def blocks(self) -> tuple[ResidualBlockSpec, ...]:
        specs = []
        for b, (c, s, d) in enumerate(
            zip(self.channels, self.strides, self.block_dilations())
        ):
            spec = ResidualBlockSpec(
                sublayer1=ConvSpec(self.kernel_size, c, d, 1),
                sublayer2=ConvSpec(self.kernel_size, c, d, s),
                dropout=self.dropout,
            )
            spec.validate(f"block{b}")
            specs.append(spec)
        return tuple(specs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        d["dilations"] = list(self.dilations) if self.dilations is not None else None
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(data)
        for key in ("channels", "strides", "dilations"):
            if kwargs.get(key) is not None:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


class ModelParameters:
    """Named map of learnable tensors plus non-learned buffers (running stats)."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.decay: set[str] = set()
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, values, decay: bool = False) -> Tensor:
        if name in self.tensors:
            raise ConfigError(f"duplicate parameter path {name!r}")
        t = Tensor(values, requires_grad=True)
        self.tensors[name] = t
        if decay:
            self.decay.add(name)
        return t

    def add_buffer(self, name: str, values) -> np.ndarray:
        if name in self.buffers:
            raise ConfigError(f"duplicate buffer path {name!r}")
        arr = np.asarray(values, dtype=ad.default_dtype())
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def buffer(self, name: str) -> np.ndarray:
        return self.buffers[name]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParameters":
        dup = ModelParameters()
        for name, t in self.tensors.items():
            dup.add(name, t.data.copy(), decay=name in self.decay)
        for name, b in self.buffers.items():
            dup.add_buffer(name, b.copy())
        return dup


def init_parameters(config: ModelConfig, seed: int = 0) -> ModelParameters:
    """Seeded initialization: uniform fan-in scaling for weights, zeros for
    biases, ones/zeros for normalization affine parameters."""
    rng = np.random.default_rng(seed)
    params = ModelParameters()

    def weight(name: str, shape: tuple[int, ...], fan_in: int) -> None:
        bound = math.sqrt(6.0 / fan_in)
        params.add(name, rng.uniform(-bound, bound, size=shape), decay=True)

    def norm_affine(prefix: str, c: int, column: bool) -> None:
        shape = (c, 1) if column else (c,)
        params.add(f"{prefix}.gamma", np.ones(shape))
        params.add(f"{prefix}.beta", np.zeros(shape))

    def conv_unit(prefix: str, c_in: int, spec: ConvSpec) -> None:
        # no conv bias: the batch norm right after cancels any constant
        # shift exactly, so a bias would be a dead parameter
        k = spec.kernel_size
        weight(f"{prefix}.weight", (spec.out_channels, c_in, k), c_in * k)
        norm_affine(f"{prefix}.bn", spec.out_channels, column=True)
        params.add_buffer(f"{prefix}.bn.running_mean", np.zeros((spec.out_channels, 1)))
        params.add_buffer(f"{prefix}.bn.running_var", np.ones((spec.out_channels, 1)))

    if config.front_end == "tcn":
        c_in = 1
        for b, spec in enumerate(config.blocks()):
            prefix = f"front.block{b}"
            conv_unit(f"{prefix}.conv1", c_in, spec.sublayer1)
            conv_unit(f"{prefix}.conv2", spec.sublayer1.out_channels, spec.sublayer2)
            weight(f"{prefix}.skip.weight", (spec.sublayer2.out_channels, c_in, 1), c_in)
            params.add(f"{prefix}.skip.bias", np.zeros(spec.sublayer2.out_channels))
            c_in = spec.sublayer2.out_channels
    elif config.front_end == "cnn":
        c_in = 1
        for i, (c, s) in enumerate(zip(config.channels, config.strides)):
            conv_unit(f"front.layer{i}", c_in, ConvSpec(config.kernel_size, c, 1, s))
            c_in = c
    else:  # fnn
        weight("front.w", (config.epoch_len, config.d_model), config.epoch_len)
        params.add("front.b", np.zeros(config.d_model))

    d, dk = config.d_model, config.d_k
    for layer in range(config.n_encoder_layers):
        prefix = f"enc{layer}"
        for h in range(config.n_heads):
            weight(f"{prefix}.head{h}.wq", (d, dk), d)
            weight(f"{prefix}.head{h}.wk", (d, dk), d)
            weight(f"{prefix}.head{h}.wv", (d, dk), d)
        weight(f"{prefix}.w0", (d, d), d)
        norm_affine(f"{prefix}.ln1", d, column=False)
        weight(f"{prefix}.ffn.w1", (d, config.d_ffn), d)
        params.add(f"{prefix}.ffn.b1", np.zeros(config.d_ffn))
        weight(f"{prefix}.ffn.w2", (config.d_ffn, d), config.d_ffn)
        params.add(f"{prefix}.ffn.b2", np.zeros(d))
        norm_affine(f"{prefix}.ln2", d, column=False)

    weight("dec.w1", (d, d), d)
    params.add("dec.b1", np.zeros(d))
    weight("dec.w2", (d, config.n_classes), d)
    params.add("dec.b2", np.zeros(config.n_classes))
    return params


def parameter_count(config: ModelConfig) -> int:
    """Number of learnable scalars implied by a configuration."""
    return init_parameters(config, seed=0).parameter_count()


# ----------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------

def positional_encoding_at(positions, d_model: int) -> np.ndarray:
    """Sinusoidal position code for arbitrary (possibly fractional) positions.

    Even columns carry sin(p / 10000^(2i/d_model)), odd columns the
    matching cosine.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    cols = np.arange(d_model)
    even_index = 2 * (cols // 2)
    angles = pos / np.power(10000.0, even_index / d_model)
    pe = np.where(cols % 2 == 0, np.sin(angles), np.cos(angles))
    return pe.astype(ad.default_dtype())


def positional_encoding(length: int, d_model: int) -> Tensor:
    """Non-learnable L x d_model position code added to the encoder input."""
    return Tensor(positional_encoding_at(np.arange(length), d_model))


def scaled_dot_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None
) -> tuple[Tensor, Tensor]:
    """softmax(Q K^T / sqrt(d_k)) V with optional key-validity masking.

    ``mask`` marks valid key positions; masked keys get a -inf score bias
    before the softmax and therefore exactly zero attention mass.
    Returns the weighted values and the row-stochastic attention matrix.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention operands must be matrices")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise DimensionError(
            f"attention shapes inconsistent: Q {list(q.shape)}, K {list(k.shape)}, V {list(v.shape)}"
        )
    d_k = q.shape[1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (k.shape[0],):
            raise DimensionError(
                f"mask length {mask.shape} does not match {k.shape[0]} keys"
            )
        if not mask.any():
            raise ContractError("attention mask excludes every key; rows cannot normalize")
        if not mask.all():
            bias = np.where(mask, 0.0, -np.inf)
            scores = ad.add(scores, Tensor(bias))
    attention = ad.softmax(scores, axis=1)
    return ad.matmul(attention, v), attention


def multi_head_attention(
    x: Tensor,
    params: ModelParameters,
    prefix: str,
    n_heads: int,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Per-head projections, attention, concatenation, output projection.

    Also returns the stacked per-head attention matrices (h, L, L) for
    inspection; these are detached copies, not part of the graph.
    """
    outputs = []
    matrices = []
    for h in range(n_heads):
        q = ad.matmul(x, params[f"{prefix}.head{h}.wq"])
        k = ad.matmul(x, params[f"{prefix}.head{h}.wk"])
        v = ad.matmul(x, params[f"{prefix}.head{h}.wv"])
        out, att = scaled_dot_attention(q, k, v, mask)
        outputs.append(out)
        matrices.append(att.data.copy())
    combined = outputs[0] if len(outputs) == 1 else ad.concat(outputs, axis=1)
    return ad.matmul(combined, params[f"{prefix}.w0"]), np.stack(matrices)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine."""
    mu = ad.tmean(x, axis=1, keepdims=True)
    centered = ad.sub(x, mu)
    var = ad.tmean(ad.mul(centered, centered), axis=1, keepdims=True)
    inv = ad.power(ad.add(var, Tensor(LN_EPS)), -0.5)
    return ad.add(ad.mul(gamma, ad.mul(centered, inv)), beta)


def batch_norm(
    x: Tensor,
    params: ModelParameters,
    prefix: str,
    training: bool,
    valid: int | None = None,
) -> Tensor:
    """Channel-wise batch normalization over the time axis of (c, L).

    In training mode statistics come from the valid (unpadded) prefix and
    the running buffers are updated with momentum; in inference mode the
    frozen running statistics are used.
    """
    gamma = params[f"{prefix}.gamma"]
    beta = params[f"{prefix}.beta"]
    length = x.shape[1]
    if training:
        stats_src = x if valid is None or valid >= length else ad.narrow(
            x, (slice(None), slice(0, valid))
        )
        mu = ad.tmean(stats_src, axis=1, keepdims=True)
        centered_stats = ad.sub(stats_src, mu)
        var = ad.tmean(ad.mul(centered_stats, centered_stats), axis=1, keepdims=True)
        running_mean = params.buffer(f"{prefix}.running_mean")
        running_var = params.buffer(f"{prefix}.running_var")
        running_mean *= 1.0 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mu.data
        running_var *= 1.0 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var.data
        inv = ad.power(ad.add(var, Tensor(BN_EPS)), -0.5)
        normalized = ad.mul(ad.sub(x, mu), inv)
    else:
        mean = params.buffer(f"{prefix}.running_mean")
        var = params.buffer(f"{prefix}.running_var")
        inv = 1.0 / np.sqrt(var + BN_EPS)
        normalized = ad.mul(ad.sub(x, Tensor(mean)), Tensor(inv))
    return ad.add(ad.mul(gamma, normalized), beta)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity at inference or p == 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout requires a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return ad.mul(x, Tensor(keep))


def _conv_sublayer_tcn(
    x: Tensor,
    params: ModelParameters,
    prefix: str,
    spec: ConvSpec,
    p_drop: float,
    training: bool,
    rng,
    valid_out: int,
) -> Tensor:
    h = ad.conv1d(
        x,
        params[f"{prefix}.weight"],
        dilation=spec.dilation,
        stride=spec.stride,
        padding=spec.same_padding,
    )
    h = batch_norm(h, params, f"{prefix}.bn", training, valid=valid_out)
    h = ad.relu(h)
    return dropout(h, p_drop, training, rng)


def tcn_front_end(
    x: Tensor,
    params: ModelParameters,
    config: ModelConfig,
    valid_samples: int | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Residual dilated-convolution stack: (1, L) -> (L/30, d_model)."""
    length = x.shape[1]
    _check_front_input(x, config, valid_samples)
    valid = length if valid_samples is None else valid_samples
    for b, spec in enumerate(config.blocks()):
        prefix = f"front.block{b}"
        stride = spec.sublayer2.stride
        valid_out = -(-valid // stride)
        h = _conv_sublayer_tcn(
            x, params, f"{prefix}.conv1", spec.sublayer1,
            spec.dropout, training, rng, valid,
        )
        h = _conv_sublayer_tcn(
            h, params, f"{prefix}.conv2", spec.sublayer2,
            spec.dropout, training, rng, valid_out,
        )
        skip = ad.conv1d(
            x, params[f"{prefix}.skip.weight"], params[f"{prefix}.skip.bias"],
            dilation=1, stride=stride, padding=0,
        )
        x = ad.add(h, skip)
        valid = valid_out
    return ad.transpose(x)


def cnn_front_end(
    x: Tensor,
    params: ModelParameters,
    config: ModelConfig,
    valid_samples: int | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Plain strided convolution stack; each layer is conv -> dropout -> batch norm -> ReLU."""
    length = x.shape[1]
    _check_front_input(x, config, valid_samples)
    valid = length if valid_samples is None else valid_samples
    for i, (c, s) in enumerate(zip(config.channels, config.strides)):
        prefix = f"front.layer{i}"
        spec = ConvSpec(config.kernel_size, c, 1, s)
        valid = -(-valid // s)
        h = ad.conv1d(
            x, params[f"{prefix}.weight"],
            dilation=1, stride=s, padding=spec.same_padding,
        )
        h = dropout(h, config.dropout, training, rng)
        h = batch_norm(h, params, f"{prefix}.bn", training, valid=valid)
        x = ad.relu(h)
    return ad.transpose(x)


def fnn_front_end(
    x: Tensor,
    params: ModelParameters,
    config: ModelConfig,
    valid_samples: int | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Windowed linear map: each 30-sample window -> tanh(W h + b)."""
    length = x.shape[1]
    _check_front_input(x, config, valid_samples)
    windows = ad.reshape(x, (length // config.epoch_len, config.epoch_len))
    return ad.tanh(ad.add(ad.matmul(windows, params["front.w"]), params["front.b"]))


def _check_front_input(x: Tensor, config: ModelConfig, valid_samples: int | None) -> None:
    if x.ndim != 2 or x.shape[0] != 1:
        raise DimensionError(f"front-end expects input of shape (1, L), got {list(x.shape)}")
    length = x.shape[1]
    if length % config.epoch_len != 0:
        raise ContractError(
            f"input length {length} is not a multiple of epoch_len={config.epoch_len}"
        )
    if valid_samples is not None:
        if not 0 < valid_samples <= length:
            raise ContractError(f"valid_samples={valid_samples} outside (0, {length}]")
        if valid_samples % config.epoch_len != 0:
            raise ContractError(
                f"valid_samples={valid_samples} is not a multiple of epoch_len"
            )


_FRONT_END_FNS = {
    "tcn": tcn_front_end,
    "cnn": cnn_front_end,
    "fnn": fnn_front_end,
}


def encoder_layer(
    x: Tensor,
    params: ModelParameters,
    prefix: str,
    n_heads: int,
    p_drop: float,
    mask: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Self-attention sublayer then feed-forward sublayer, each wrapped in
    residual-add + layer normalization (post-norm)."""
    attended, matrices = multi_head_attention(x, params, f"{prefix}", n_heads, mask)
    x1 = layer_norm(
        ad.add(x, dropout(attended, p_drop, training, rng)),
        params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"],
    )
    hidden = ad.relu(ad.add(ad.matmul(x1, params[f"{prefix}.ffn.w1"]), params[f"{prefix}.ffn.b1"]))
    ffn = ad.add(ad.matmul(hidden, params[f"{prefix}.ffn.w2"]), params[f"{prefix}.ffn.b2"])
    x2 = layer_norm(
        ad.add(x1, dropout(ffn, p_drop, training, rng)),
        params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"],
    )
    return x2, matrices


@dataclass
class ForwardResult:
    """Per-epoch class probabilities and, when requested, the per-layer
    stacked per-head attention matrices."""

    probabilities: Tensor
    attention: list[np.ndarray] | None = None


class SleepStager:
    """Configured network plus its parameters; processes one record at a time."""

    def __init__(self, config: ModelConfig, params: ModelParameters | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed)

    def forward(
        self,
        hr: Tensor | np.ndarray,
        valid_samples: int | None = None,
        training: bool = False,
        rng: np.random.Generator | None = None,
        want_attention: bool = False,
    ) -> ForwardResult:
        """Map a (1, L) heart-rate tensor to (L/30, 2) wake/sleep probabilities.

        ``valid_samples`` marks the unpadded prefix of a zero-padded
        record; epochs beyond it are masked out of attention.
        """
        cfg = self.config
        x = hr if isinstance(hr, Tensor) else Tensor(np.asarray(hr))
        front = _FRONT_END_FNS[cfg.front_end]
        feats = front(x, self.params, cfg, valid_samples, training, rng)
        n_epochs = feats.shape[0]
        if n_epochs > cfg.l_max:
            raise ContractError(f"record has {n_epochs} epochs, exceeding l_max={cfg.l_max}")

        feats = ad.add(feats, Tensor(positional_encoding_at(np.arange(n_epochs), cfg.d_model)))

        mask = None
        if valid_samples is not None and valid_samples < x.shape[1]:
            mask = np.arange(n_epochs) < (valid_samples // cfg.epoch_len)

        attention: list[np.ndarray] | None = [] if want_attention else None
        h = feats
        for layer in range(cfg.n_encoder_layers):
            h, matrices = encoder_layer(
                h, self.params, f"enc{layer}", cfg.n_heads, cfg.dropout,
                mask=mask, training=training, rng=rng,
            )
            if want_attention:
                attention.append(matrices)

        hidden = ad.relu(ad.add(ad.matmul(h, self.params["dec.w1"]), self.params["dec.b1"]))
        logits = ad.add(ad.matmul(hidden, self.params["dec.w2"]), self.params["dec.b2"])
        probs = ad.softmax(logits, axis=1)
        return ForwardResult(probabilities=probs, attention=attention)

    def predict(self, hr, valid_samples: int | None = None) -> np.ndarray:
        """Inference-mode hard labels (0 = sleep, 1 = wake); ties go to sleep."""
        with ad.no_grad():
            probs = self.forward(hr, valid_samples=valid_samples, training=False).probabilities
        return (probs.data[:, 1] > probs.data[:, 0]).astype(np.int64)
