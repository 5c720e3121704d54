"""Two-path model (region attention plus a global bottleneck path) and its baselines.

Shapes use ``B`` for batch, ``L`` for stance length, ``N`` for encoder cells
after two stride-2 stages, ``R`` for the six anatomical regions.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ops
from .encodings import FourierConfig, encode_cop, encode_coordinates, linear, sensor_coordinates
from .errors import ConfigurationError, ContractError
from .priors import NUM_REGIONS, downsample_labels

logger = logging.getLogger(__name__)

VARIANTS = ("dprgnet", "path_b_only", "cnn_lstm", "cnn")
DOWNSAMPLE = 4
NUM_OUTPUTS = 6


@dataclass
class ModelConfig:
    grid_h: int = 64
    grid_w: int = 16
    stance_len: int = 40
    cnn_feature_dim: int = 128
    pos_dim: int = 128
    cop_dim: int = 128
    feature_embed_dim: int = 256
    bottleneck_dim: int = 128
    regional_lstm_hidden: int = 256
    global_lstm_hidden: int = 256
    lstm_layers: int = 2
    dropout: float = 0.35
    num_regions: int = NUM_REGIONS
    lambda_bias: float = 1.0
    bias_value: float = 1.0
    variant: str = "dprgnet"
    learn_lambda: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        dims = ("grid_h", "grid_w", "stance_len", "cnn_feature_dim", "pos_dim", "cop_dim",
                "feature_embed_dim", "bottleneck_dim", "regional_lstm_hidden", "global_lstm_hidden",
                "lstm_layers")
        for name in dims:
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.num_regions != NUM_REGIONS:
            raise ConfigurationError(f"num_regions must be {NUM_REGIONS}")
        if self.grid_h % DOWNSAMPLE or self.grid_w % DOWNSAMPLE:
            raise ConfigurationError(
                f"grid {self.grid_h}x{self.grid_w} must be divisible by {DOWNSAMPLE} for the encoder"
            )
        for name in ("pos_dim", "cop_dim"):
            if getattr(self, name) < 4:
                raise ConfigurationError(f"{name} must be at least 4 to hold one Fourier band")

    @property
    def num_cells(self):
        return (self.grid_h // DOWNSAMPLE) * (self.grid_w // DOWNSAMPLE)

    @property
    def is_baseline(self):
        return self.variant in ("cnn", "cnn_lstm")

    @property
    def has_path_a(self):
        return self.variant == "dprgnet"

    def with_variant(self, variant):
        """Same sizes and dropout, another variant."""
        return replace(self, variant=variant)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# Preset sizes. Every variant except the full model uses the baseline dropout rate.
PRESETS = {
    "dataset_a": dict(grid_h=64, grid_w=16, stance_len=40, cnn_feature_dim=128, pos_dim=128, cop_dim=128,
                      feature_embed_dim=256, bottleneck_dim=128, regional_lstm_hidden=256,
                      global_lstm_hidden=256, lstm_layers=2, dropout=0.35),
    "dataset_b": dict(grid_h=40, grid_w=20, stance_len=101, cnn_feature_dim=128, pos_dim=128, cop_dim=256,
                      feature_embed_dim=256, bottleneck_dim=256, regional_lstm_hidden=256,
                      global_lstm_hidden=256, lstm_layers=2, dropout=0.3),
    # small enough to train many folds on one CPU core
    "desk": dict(grid_h=32, grid_w=16, stance_len=40, cnn_feature_dim=8, pos_dim=8, cop_dim=8,
                 feature_embed_dim=16, bottleneck_dim=16, regional_lstm_hidden=16,
                 global_lstm_hidden=16, lstm_layers=2, dropout=0.1),
    "gradcheck": dict(grid_h=8, grid_w=8, stance_len=5, cnn_feature_dim=3, pos_dim=4, cop_dim=4,
                      feature_embed_dim=4, bottleneck_dim=3, regional_lstm_hidden=2,
                      global_lstm_hidden=2, lstm_layers=2, dropout=0.2),
}
BASELINE_DROPOUT = {"dataset_a": 0.2, "dataset_b": 0.1, "desk": 0.05, "gradcheck": 0.2}


def preset(name, variant="dprgnet", **overrides):
    """Build a :class:`ModelConfig` from a named preset."""
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    values = dict(PRESETS[name])
    if variant != "dprgnet":
        values["dropout"] = BASELINE_DROPOUT[name]
    values.update(variant=variant)
    values.update(overrides)
    return ModelConfig(**values)


# -- parameters --------------------------------------------------------------


@dataclass
class ParameterStore:
    """Named trainable tensors plus non-trainable batchnorm statistics."""

    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def __getitem__(self, name):
        try:
            return self.params[name]
        except KeyError:
            raise ConfigurationError(f"parameter {name!r} is missing from the store") from None

    def __contains__(self, name):
        return name in self.params

    def add(self, name, data):
        if name in self.params:
            raise ConfigurationError(f"parameter {name!r} defined twice")
        self.params[name] = ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)

    def names(self):
        return list(self.params)

    def count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self):
        out = ParameterStore()
        for k, v in self.params.items():
            out.add(k, v.data.copy())
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return out

    def state(self):
        """Flat ``name -> ndarray`` map; buffers are prefixed with ``buffer:``."""
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return out

    @classmethod
    def from_state(cls, state):
        out = cls()
        for k, v in state.items():
            if k.startswith("buffer:"):
                out.buffers[k[len("buffer:"):]] = np.array(v, dtype=np.float64)
            else:
                out.add(k, v)
        return out


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, shape)


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.sign(np.diag(r))


def cnn_channels(config):
    c = config.cnn_feature_dim
    return (max(1, c // 4), max(1, c // 2), c)


def _add_linear(store, rng, name, fan_in, fan_out, bias=True):
    bound = 1.0 / math.sqrt(fan_in)
    store.add(f"{name}.weight", _uniform(rng, (fan_in, fan_out), bound))
    if bias:
        store.add(f"{name}.bias", _uniform(rng, (fan_out,), bound))


def _add_bilstm(store, rng, name, input_dim, hidden, layers):
    bound = 1.0 / math.sqrt(hidden)
    width = input_dim
    for layer in range(layers):
        for direction in ("fwd", "bwd"):
            prefix = f"{name}.l{layer}.{direction}"
            store.add(f"{prefix}.w_ih", _uniform(rng, (width, 4 * hidden), bound))
            store.add(f"{prefix}.w_hh", np.concatenate([_orthogonal(rng, hidden) for _ in range(4)], axis=1))
            bias = np.zeros(4 * hidden)
            bias[hidden:2 * hidden] = 1.0
            store.add(f"{prefix}.bias", bias)
        width = 2 * hidden


def init_parameters(config, seed=0):
    """Fresh :class:`ParameterStore` for ``config.variant``.

    Parameter names are shared between variants wherever the subgraph is
    shared, so a ``path_b_only`` model can run on a ``dprgnet`` store.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    cin = 1
    for i, cout in enumerate(cnn_channels(config), start=1):
        store.add(f"cnn.conv{i}.weight", _uniform(rng, (cout, cin, 3, 3), 1.0 / math.sqrt(cin * 9)))
        store.add(f"cnn.bn{i}.gamma", np.ones(cout))
        store.add(f"cnn.bn{i}.beta", np.zeros(cout))
        store.buffers[f"cnn.bn{i}.mean"] = np.zeros(cout)
        store.buffers[f"cnn.bn{i}.var"] = np.ones(cout)
        cin = cout
    d_feat = config.cnn_feature_dim
    n = config.num_cells
    pos_f = FourierConfig.for_width(config.pos_dim).output_dim
    cop_f = FourierConfig.for_width(config.cop_dim).output_dim

    if config.is_baseline:
        # baselines add the encodings onto the visual features at CNN width
        _add_linear(store, rng, "pos", pos_f, d_feat)
        _add_linear(store, rng, "cop.fc1", cop_f, config.cop_dim)
        _add_linear(store, rng, "cop.fc2", config.cop_dim, d_feat)
        _add_linear(store, rng, "baseline.bottleneck", n * d_feat, config.bottleneck_dim)
        if config.variant == "cnn_lstm":
            _add_bilstm(store, rng, "baseline.lstm", config.bottleneck_dim, config.global_lstm_hidden,
                        config.lstm_layers)
            _add_linear(store, rng, "baseline.head", 2 * config.global_lstm_hidden, NUM_OUTPUTS)
        else:
            _add_linear(store, rng, "baseline.head", config.bottleneck_dim, NUM_OUTPUTS)
        return store

    d = config.feature_embed_dim
    _add_linear(store, rng, "pos", pos_f, config.pos_dim)
    _add_linear(store, rng, "cop.fc1", cop_f, config.cop_dim)
    _add_linear(store, rng, "cop.fc2", config.cop_dim, config.cop_dim)
    _add_linear(store, rng, "fuse", d_feat + config.pos_dim + config.cop_dim, d)
    _add_linear(store, rng, "path_b.bottleneck", n * d, config.bottleneck_dim)
    _add_bilstm(store, rng, "path_b.lstm", config.bottleneck_dim, config.global_lstm_hidden, config.lstm_layers)
    _add_linear(store, rng, "path_b.head", 2 * config.global_lstm_hidden, NUM_OUTPUTS)
    if config.has_path_a:
        store.add("attn.query", _uniform(rng, (config.num_regions, d), 1.0 / math.sqrt(d)))
        # no key bias: it shifts every logit of a row equally and has no gradient
        _add_linear(store, rng, "attn.key", d, d, bias=False)
        _add_linear(store, rng, "attn.value", d, d)
        if config.learn_lambda:
            store.add("attn.lambda", np.full(1, float(config.lambda_bias)))
        _add_bilstm(store, rng, "path_a.lstm", config.num_regions * d, config.regional_lstm_hidden,
                    config.lstm_layers)
        _add_linear(store, rng, "path_a.head", 2 * config.regional_lstm_hidden, NUM_OUTPUTS)
    return store


def expected_parameter_names(config):
    return init_parameters(config).names()


def check_parameters(store, config):
    """Raise :class:`ConfigurationError` unless ``store`` holds this variant's parameters with matching shapes."""
    reference = init_parameters(config)
    for name, ref in reference.params.items():
        if name not in store.params:
            raise ConfigurationError(f"variant {config.variant!r} needs parameter {name!r}, absent from the store")
        if store.params[name].shape != ref.shape:
            raise ConfigurationError(
                f"parameter {name!r} has shape {store.params[name].shape}, variant {config.variant!r} "
                f"expects {ref.shape}"
            )
    for name in reference.buffers:
        if name not in store.buffers:
            raise ConfigurationError(f"batchnorm statistic {name!r} is missing from the store")


def parameter_count(config):
    return init_parameters(config).count()


# -- attention prior ---------------------------------------------------------


@dataclass
class AttentionPrior:
    """``R x N`` bias over encoder cells and its strength ``lam``."""

    bias_matrix: np.ndarray
    lam: float = 1.0

    @property
    def cell_labels(self):
        labels = np.full(self.bias_matrix.shape[1], -1)
        rows, cols = np.nonzero(self.bias_matrix)
        labels[cols] = rows
        return labels


def build_bias_matrix(partition_labels, config):
    """Bias rows from a full-resolution partition map, one column per encoder cell."""
    labels = np.asarray(partition_labels)
    if labels.shape != (config.grid_h, config.grid_w):
        raise ContractError(f"partition {labels.shape} does not match grid {(config.grid_h, config.grid_w)}")
    cells = downsample_labels(labels, DOWNSAMPLE).reshape(-1)
    bias = np.zeros((config.num_regions, cells.size))
    for j, k in enumerate(cells):
        if k >= 0:
            bias[k, j] = config.bias_value
    return bias


def attention_prior(partition_labels, config):
    return AttentionPrior(build_bias_matrix(partition_labels, config), config.lambda_bias)


def empty_prior(config):
    return AttentionPrior(np.zeros((config.num_regions, config.num_cells)), config.lambda_bias)


# -- building blocks ---------------------------------------------------------


def cnn_encode(frames, params, training, config):
    """``(B*L, 1, H, W)`` frames to ``(B*L, N, cnn_feature_dim)`` cell features."""
    x = ad.as_tensor(frames)
    for i, stride in zip((1, 2, 3), (1, 2, 2)):
        x = ops.conv2d(x, params[f"cnn.conv{i}.weight"], stride=stride, padding=1)
        x = ops.batchnorm(x, params[f"cnn.bn{i}.gamma"], params[f"cnn.bn{i}.beta"],
                          params.buffers[f"cnn.bn{i}.mean"], params.buffers[f"cnn.bn{i}.var"], training)
        x = ops.relu(x)
    m, c, h, w = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (m, h * w, c))


def fuse_features(visual, pos_enc, cop_enc, weight, bias=None):
    """Per-cell concatenation of visual, positional and CoP codes, projected linearly.

    ``visual`` is ``(M, N, d_feat)``, ``pos_enc`` ``(N, d_pos)`` and
    ``cop_enc`` ``(M, d_cop)``; the CoP code is repeated over cells.
    """
    visual, pos_enc, cop_enc = ad.as_tensor(visual), ad.as_tensor(pos_enc), ad.as_tensor(cop_enc)
    m, n, _ = visual.shape
    width = visual.shape[-1] + pos_enc.shape[-1] + cop_enc.shape[-1]
    if weight.shape[0] != width:
        raise ContractError(f"fusion projection expects {weight.shape[0]} inputs, got {width}")
    pos = ops.expand(ops.reshape(pos_enc, (1, n, pos_enc.shape[-1])), (m, n, pos_enc.shape[-1]))
    cop = ops.expand(ops.reshape(cop_enc, (m, 1, cop_enc.shape[-1])), (m, n, cop_enc.shape[-1]))
    return linear(ops.concat([visual, pos, cop], axis=-1), weight, bias)


def region_attention(z_feat, query, key_weight, value_weight, value_bias, prior, lam=None):
    """Prototype queries attend over cells with an additive region bias.

    ``lam`` optionally replaces ``prior.lam`` with a one-element parameter tensor.

    Returns:
        ``(Z, weights)`` with shapes ``(M, R, d)`` and ``(M, R, N)``.
    """
    z_feat = ad.as_tensor(z_feat)
    m, n, d = z_feat.shape
    if prior.bias_matrix.shape != (query.shape[0], n):
        raise ContractError(f"bias matrix {prior.bias_matrix.shape} does not match {(query.shape[0], n)}")
    keys = ops.matmul(z_feat, key_weight)
    values = linear(z_feat, value_weight, value_bias)
    scores = ops.matmul(query, ops.transpose(keys, (0, 2, 1)))
    scores = ops.mul(scores, 1.0 / math.sqrt(d))
    if lam is not None:
        r = prior.bias_matrix.shape[0]
        scaled = ops.mul(ops.expand(ops.reshape(lam, (1, 1)), (r, n)), prior.bias_matrix)
        scores = ops.add(scores, ops.expand(ops.reshape(scaled, (1, r, n)), (m, r, n)))
    elif prior.lam != 0.0:
        scores = ops.add(scores, prior.lam * prior.bias_matrix)
    weights = ops.softmax(scores)
    return ops.matmul(weights, values), weights


def bilstm(x, params, name, layers, dropout, training, rng):
    """Stacked bidirectional LSTM; dropout between layers in training mode."""
    for layer in range(layers):
        if layer > 0:
            x = ops.dropout(x, dropout, training, rng)
        outs = []
        for direction in ("fwd", "bwd"):
            prefix = f"{name}.l{layer}.{direction}"
            outs.append(ops.lstm(x, params[f"{prefix}.w_ih"], params[f"{prefix}.w_hh"], params[f"{prefix}.bias"],
                                 reverse=direction == "bwd"))
        x = ops.concat(outs, axis=-1)
    return x


def _temporal_head(seq, params, name, layers, dropout, training, rng):
    h = bilstm(seq, params, f"{name}.lstm", layers, dropout, training, rng)
    h = ops.dropout(h, dropout, training, rng)
    return linear(h, params[f"{name}.head.weight"], params[f"{name}.head.bias"])


def path_a_forward(region_seq, params, config, training=False, rng=None):
    """``(B, L, R, d)`` region features to ``(B, L, 6)``."""
    region_seq = ad.as_tensor(region_seq)
    b, l, r, d = region_seq.shape
    seq = ops.reshape(region_seq, (b, l, r * d))
    return _temporal_head(seq, params, "path_a", config.lstm_layers, config.dropout, training, rng)


def path_b_forward(z_feat_seq, params, config, training=False, rng=None):
    """``(B, L, N, d)`` fused features to ``(B, L, 6)`` through the global bottleneck."""
    z_feat_seq = ad.as_tensor(z_feat_seq)
    b, l, n, d = z_feat_seq.shape
    flat = ops.reshape(z_feat_seq, (b, l, n * d))
    seq = linear(flat, params["path_b.bottleneck.weight"], params["path_b.bottleneck.bias"])
    return _temporal_head(seq, params, "path_b", config.lstm_layers, config.dropout, training, rng)


@dataclass
class ForwardOutput:
    y_hat: ad.Tensor
    y_hat_a: ad.Tensor = None
    y_hat_b: ad.Tensor = None
    attention: ad.Tensor = None

    @property
    def attention_weights(self):
        """Attention as a ``B x L x R x N`` array, or ``None``."""
        if self.attention is None:
            return None
        return self.attention.data


def model_forward(pressure, cop, params, config, prior=None, training=False, rng=None):
    """Run ``config.variant`` on a ``B x L x H x W`` batch.

    Args:
        pressure: pressure frames.
        cop: ``B x L x 2`` normalised centre-of-pressure points.
        params: a :class:`ParameterStore` compatible with the variant.
        config: :class:`ModelConfig`.
        prior: :class:`AttentionPrior`; required for ``dprgnet`` (a zero bias
            is used when omitted).
        training: batchnorm uses batch statistics and dropout is active.
        rng: generator for dropout masks in training mode.
    """
    pressure = np.asarray(getattr(pressure, "data", pressure), dtype=np.float64)
    if pressure.ndim != 4 or pressure.shape[2:] != (config.grid_h, config.grid_w):
        raise ContractError(
            f"pressure must be B x L x {config.grid_h} x {config.grid_w}, got {pressure.shape}"
        )
    b, l = pressure.shape[:2]
    cop = np.asarray(cop, dtype=np.float64)
    if cop.shape != (b, l, 2):
        raise ContractError(f"cop must be {(b, l, 2)}, got {cop.shape}")
    check_parameters(params, config)
    if training and rng is None and config.dropout > 0:
        raise ContractError("training mode with dropout needs an rng")

    m = b * l
    visual = cnn_encode(pressure.reshape(m, 1, config.grid_h, config.grid_w), params, training, config)
    coords = sensor_coordinates(config.grid_h, config.grid_w, DOWNSAMPLE)
    pos = encode_coordinates(coords, FourierConfig.for_width(config.pos_dim), params["pos.weight"],
                             params["pos.bias"])
    cop_enc = encode_cop(cop.reshape(m, 2), FourierConfig.for_width(config.cop_dim), params["cop.fc1.weight"],
                         params["cop.fc1.bias"], params["cop.fc2.weight"], params["cop.fc2.bias"])
    n = config.num_cells

    if config.is_baseline:
        d = config.cnn_feature_dim
        fused = ops.add(visual, ops.expand(ops.reshape(pos, (1, n, d)), (m, n, d)))
        fused = ops.add(fused, ops.expand(ops.reshape(cop_enc, (m, 1, d)), (m, n, d)))
        flat = ops.reshape(fused, (b, l, n * d))
        seq = linear(flat, params["baseline.bottleneck.weight"], params["baseline.bottleneck.bias"])
        if config.variant == "cnn_lstm":
            y = _temporal_head(seq, params, "baseline", config.lstm_layers, config.dropout, training, rng)
        else:
            seq = ops.dropout(seq, config.dropout, training, rng)
            y = linear(seq, params["baseline.head.weight"], params["baseline.head.bias"])
        return ForwardOutput(y)

    z_feat = fuse_features(visual, pos, cop_enc, params["fuse.weight"], params["fuse.bias"])
    d = config.feature_embed_dim
    y_b = path_b_forward(ops.reshape(z_feat, (b, l, n, d)), params, config, training, rng)
    if not config.has_path_a:
        return ForwardOutput(y_b, y_hat_b=y_b)

    if prior is None:
        prior = empty_prior(config)
    z, weights = region_attention(z_feat, params["attn.query"], params["attn.key.weight"],
                                  params["attn.value.weight"], params["attn.value.bias"], prior,
                                  params["attn.lambda"] if config.learn_lambda else None)
    y_a = path_a_forward(ops.reshape(z, (b, l, config.num_regions, d)), params, config, training, rng)
    attn = ops.reshape(weights, (b, l, config.num_regions, n))
    return ForwardOutput(ops.add(y_a, y_b), y_a, y_b, attn)


def predict(pressure, params, config, prior=None, cop=None):
    """Inference-mode ``B x L x 6`` predictions as a numpy array."""
    from .encodings import batch_cop

    pressure = np.asarray(pressure, dtype=np.float64)
    if cop is None:
        cop = batch_cop(pressure)
    with ad.no_grad():
        return model_forward(pressure, cop, params, config, prior, training=False).y_hat.data.copy()
