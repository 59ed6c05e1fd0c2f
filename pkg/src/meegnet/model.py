"""mEEGNet assembly, parameter accounting, inference, interval detection and checkpoints."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import nn
from .fused import FusedFront
from .errors import ConfigError, FormatError, ShapeError

KERNEL_SIZES = (10, 50, 125, 250)
CHECKPOINT_MAGIC = b"meegnet-checkpoint\n"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    electrodes: int = 16
    window_samples: int = 500
    sampling_rate_hz: int = 500
    temporal_kernel: int = 250
    temporal_filters: int = 8
    depth_multiplier: int = 2
    separable_filters: int = 16
    separable_kernel: int = 16
    pool1: int = 4
    pool2: int = 8
    dropout_rate: float = 0.25
    decision_threshold: float = 0.5
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    # EEGNet-style max-norm constraints on depthwise/dense weights; None disables
    max_norm_depthwise: float | None = None
    max_norm_dense: float | None = None
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    @property
    def dense_inputs(self) -> int:
        return (self.window_samples // self.pool1 // self.pool2) * self.separable_filters

    def validate(self):
        positive = ("electrodes", "window_samples", "sampling_rate_hz", "temporal_kernel",
                    "temporal_filters", "depth_multiplier", "separable_filters",
                    "separable_kernel", "pool1", "pool2")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.window_samples != self.sampling_rate_hz:
            raise ConfigError(
                f"window_samples ({self.window_samples}) must equal one second at "
                f"sampling_rate_hz ({self.sampling_rate_hz})")
        if self.window_samples // self.pool1 // self.pool2 < 1:
            raise ConfigError(
                f"floor(floor({self.window_samples}/{self.pool1})/{self.pool2}) = 0: "
                "pooling leaves no time samples for the dense layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not 0.0 <= self.decision_threshold <= 1.0:
            raise ConfigError(f"decision_threshold must be in [0, 1], got {self.decision_threshold}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def expected_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Per-layer output shapes (without batch axis), derived from the config alone."""
    c, t = cfg.electrodes, cfg.window_samples
    f1, f2 = cfg.temporal_filters, cfg.separable_filters
    fd = f1 * cfg.depth_multiplier
    t1 = t // cfg.pool1
    t2 = t1 // cfg.pool2
    return [
        ("conv_temporal", (f1, c, t)),
        ("bn1", (f1, c, t)),
        ("depthwise", (fd, 1, t)),
        ("bn2", (fd, 1, t)),
        ("elu1", (fd, 1, t)),
        ("pool1", (fd, 1, t1)),
        ("dropout1", (fd, 1, t1)),
        ("separable", (f2, 1, t1)),
        ("bn3", (f2, 1, t1)),
        ("elu2", (f2, 1, t1)),
        ("pool2", (f2, 1, t2)),
        ("dropout2", (f2, 1, t2)),
        ("dense", (c,)),
        ("sigmoid", (c,)),
    ]


def count_parameters_from_config(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter inventory per layer family."""
    fd = cfg.temporal_filters * cfg.depth_multiplier
    bn_channels = cfg.temporal_filters + fd + cfg.separable_filters
    return {
        "conv_temporal": cfg.temporal_filters * cfg.temporal_kernel,
        "depthwise": fd * cfg.electrodes,
        "separable": fd * cfg.separable_kernel + cfg.separable_filters * fd,
        "dense": cfg.dense_inputs * cfg.electrodes + cfg.electrodes,
        "batch_norm_trainable": 2 * bn_channels,
        "batch_norm_moving": 2 * bn_channels,
    }


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class MEEGNet:
    """The fixed 14-layer mEEGNet stack.

    Use :func:`build` to construct one; ``forward`` maps ``(B, 1, C, T)``
    windows to ``(B, C)`` per-electrode probabilities.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        dtype = np.dtype(config.dtype)
        c = config.electrodes
        f1 = config.temporal_filters
        fd = f1 * config.depth_multiplier
        rate = config.dropout_rate
        bn = dict(epsilon=config.bn_epsilon, momentum=config.bn_momentum, dtype=dtype)
        layers = [
            nn.ConvTemporal(1, f1, config.temporal_kernel, dtype=dtype),
            nn.BatchNorm(f1, **bn),
            nn.DepthwiseConv(f1, config.depth_multiplier, c, dtype=dtype),
            nn.BatchNorm(fd, **bn),
            nn.ELU(),
            nn.AveragePool(config.pool1),
            nn.Dropout(rate),
            nn.SeparableConv(fd, config.separable_filters, config.separable_kernel, dtype=dtype),
            nn.BatchNorm(config.separable_filters, **bn),
            nn.ELU(),
            nn.AveragePool(config.pool2),
            nn.Dropout(rate),
            nn.Dense(config.dense_inputs, c, dtype=dtype),
            nn.Sigmoid(),
        ]
        names = [name for name, _ in expected_shapes(config)]
        for i, (layer, name) in enumerate(zip(layers, names)):
            layer.index = i
            layer.name = name
        # the input gradient of the first layer is never used
        layers[0].needs_input_grad = False
        self.layers = layers
        # conv_temporal, bn1 and depthwise evaluated jointly (same result, far cheaper)
        self.fused_front = FusedFront(*layers[:3])
        self.use_fused = True
        self._front = None
        self.init_seed = None
        self._check_shapes()

    # -- structure ---------------------------------------------------------

    def _check_shapes(self):
        cfg = self.config
        shape = (1, 1, cfg.electrodes, cfg.window_samples)
        for layer, (name, want) in zip(self.layers, expected_shapes(cfg)):
            shape = layer.output_shape(shape)
            if tuple(shape[1:]) != want:
                raise ConfigError(f"layer {name}: output shape {shape[1:]} != expected {want}")

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Trace an actual forward pass and report each layer's output shape."""
        cfg = self.config
        x = np.zeros((1, 1, cfg.electrodes, cfg.window_samples), dtype=self.dtype)
        out = []
        for layer in self.layers:
            x = layer.forward(x, training=False, cache=False)
            out.append((layer.name, tuple(x.shape[1:])))
        return out

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def named_params(self):
        for layer in self.layers:
            for key, arr in layer.params.items():
                yield f"{layer.name}.{key}", layer, key

    def named_arrays(self):
        """Trainable parameters followed by moving statistics, in a fixed order."""
        for layer in self.layers:
            for d in (layer.params, layer.buffers):
                for key in d:
                    yield f"{layer.name}.{key}", layer, d, key

    def state(self) -> dict[str, np.ndarray]:
        return {name: d[key] for name, _, d, key in self.named_arrays()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, _, d, key in self.named_arrays():
            if name not in state:
                raise ShapeError(f"state is missing array {name}")
            arr = np.asarray(state[name])
            if arr.shape != d[key].shape:
                raise ShapeError(f"{name}: shape {arr.shape} != expected {d[key].shape}")
            d[key] = arr.astype(self.dtype)

    def dropout_layers(self):
        return [layer for layer in self.layers if isinstance(layer, nn.Dropout)]

    def batch_norm_layers(self):
        return [layer for layer in self.layers if isinstance(layer, nn.BatchNorm)]

    def reseed_dropout(self, seed):
        for i, layer in enumerate(self.dropout_layers()):
            layer.reseed(np.random.SeedSequence([int(seed), i]))

    # -- computation -------------------------------------------------------

    def _check_input(self, x):
        cfg = self.config
        if x.ndim == 3:
            x = x[:, None]
        if x.ndim != 4 or x.shape[1:] != (1, cfg.electrodes, cfg.window_samples):
            raise ShapeError(
                f"input batch shape {x.shape} does not match (B, 1, {cfg.electrodes}, "
                f"{cfg.window_samples})")
        return np.asarray(x, dtype=self.dtype)

    def forward(self, x, training=False, cache=None):
        x = self._check_input(x)
        rest = self.layers
        if self.use_fused:
            x = self.fused_front.forward(x, training=training, cache=cache)
            rest = self.layers[3:]
        self._front = "fused" if self.use_fused else "layered"
        for layer in rest:
            x = layer.forward(x, training=training, cache=cache)
        return x

    __call__ = forward

    def backward(self, grad_probs):
        """Back-propagate ``dL/dprobs``; returns ``{param name: gradient}``."""
        g = grad_probs
        fused = self._front == "fused"
        for layer in reversed(self.layers[3:] if fused else self.layers):
            g = layer.backward(g)
            if g is None:
                break
        if fused:
            self.fused_front.backward(g)
        return {name: layer.grads[key] for name, layer, key in self.named_params()}

    def predict(self, x, batch_size=256):
        """Inference-mode probabilities, evaluated in chunks."""
        x = self._check_input(np.asarray(x))
        out = [self.forward(x[i:i + batch_size], training=False, cache=False)
               for i in range(0, len(x), batch_size)]
        if not out:
            return np.zeros((0, self.config.electrodes), dtype=self.dtype)
        return np.concatenate(out)

    def clear_caches(self):
        for layer in self.layers:
            layer.clear_cache()
        self.fused_front.clear_cache()

    def apply_max_norm(self):
        cfg = self.config
        if cfg.max_norm_depthwise is not None:
            layer = self.layers[2]
            k = layer.params["kernels"]
            norms = np.sqrt((k ** 2).sum(axis=2, keepdims=True))
            layer.params["kernels"] = k * np.minimum(1.0, cfg.max_norm_depthwise / np.maximum(norms, 1e-12))
        if cfg.max_norm_dense is not None:
            layer = self.layers[12]
            w = layer.params["weights"]
            norms = np.sqrt((w ** 2).sum(axis=0, keepdims=True))
            layer.params["weights"] = w * np.minimum(1.0, cfg.max_norm_dense / np.maximum(norms, 1e-12))


def build(config: ModelConfig | None = None, init_seed: int = 0) -> MEEGNet:
    """Construct an mEEGNet with Glorot-uniform weights drawn from ``init_seed``."""
    config = config or ModelConfig()
    model = MEEGNet(config)
    rng = np.random.default_rng(init_seed)
    dt = model.dtype
    conv, _, dw, _, _, _, _, sep, _, _, _, _, dense, _ = model.layers
    f, cin, _, k = conv.params["kernels"].shape
    conv.params["kernels"] = _glorot(rng, (f, cin, 1, k), cin * k, f * k, dt)
    c, m, h, _ = dw.params["kernels"].shape
    dw.params["kernels"] = _glorot(rng, (c, m, h, 1), h, h * m, dt)
    c, _, _, kd = sep.params["depth_kernels"].shape
    sep.params["depth_kernels"] = _glorot(rng, (c, 1, 1, kd), kd, kd, dt)
    f2 = sep.params["point_weights"].shape[0]
    sep.params["point_weights"] = _glorot(rng, (f2, c), c, f2, dt)
    d_in, units = dense.params["weights"].shape
    dense.params["weights"] = _glorot(rng, (d_in, units), d_in, units, dt)
    model.init_seed = int(init_seed)
    model.reseed_dropout(init_seed)
    return model


def parameter_count(model: MEEGNet) -> int:
    """All parameter scalars, including batch-norm moving statistics."""
    return sum(d[key].size for _, _, d, key in model.named_arrays())


def parameter_breakdown(model: MEEGNet) -> dict[str, int]:
    out = dict.fromkeys(("conv_temporal", "depthwise", "separable", "dense",
                         "batch_norm_trainable", "batch_norm_moving"), 0)
    for layer in model.layers:
        if isinstance(layer, nn.BatchNorm):
            out["batch_norm_trainable"] += sum(a.size for a in layer.params.values())
            out["batch_norm_moving"] += sum(a.size for a in layer.buffers.values())
        elif layer.params:
            out[layer.name] += sum(a.size for a in layer.params.values())
    return out


# ---------------------------------------------------------------------------
# interval detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True, order=True)
class DetectedInterval:
    electrode: int
    onset_sec: int
    offset_sec: int  # exclusive


def detect_intervals(per_second_probs, threshold=0.5) -> list[DetectedInterval]:
    """Maximal runs of seconds with probability >= threshold, per electrode."""
    probs = np.asarray(per_second_probs, dtype=float)
    if probs.size == 0:
        return []
    if probs.ndim == 1:
        probs = probs[:, None]
    hits = probs >= threshold
    out = []
    for e in range(hits.shape[1]):
        col = np.concatenate(([False], hits[:, e], [False])).astype(np.int8)
        edges = np.diff(col)
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1)
        out.extend(DetectedInterval(e, int(a), int(b)) for a, b in zip(starts, stops))
    return sorted(out)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _manifest(model: MEEGNet) -> dict:
    inventory = []
    offset = 0
    for name, _, d, key in model.named_arrays():
        shape = list(d[key].shape)
        inventory.append({"name": name, "shape": shape, "offset": offset})
        offset += int(np.prod(shape))
    return {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "init_seed": model.init_seed,
        "inventory": inventory,
        "n_values": offset,
    }


def checkpoint_bytes(model: MEEGNet) -> bytes:
    manifest = json.dumps(_manifest(model), sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(d[key], dtype="<f8").tobytes()
                    for _, _, d, key in model.named_arrays())
    return CHECKPOINT_MAGIC + manifest + b"\n" + blob


def save_checkpoint(model: MEEGNet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> MEEGNet:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not an mEEGNet checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: manifest is not terminated")
    try:
        manifest = json.loads(rest[:nl])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON ({exc})") from None
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version!r}")
    blob = rest[nl + 1:]
    n_values = int(manifest["n_values"])
    if len(blob) != 8 * n_values:
        raise FormatError(
            f"{path}: parameter blob holds {len(blob)} bytes, expected {8 * n_values} "
            f"({n_values} float64 values)")
    try:
        config = ModelConfig.from_dict(manifest["config"])
    except (TypeError, ConfigError) as exc:
        raise FormatError(f"{path}: bad model config ({exc})") from None
    model = MEEGNet(config)
    values = np.frombuffer(blob, dtype="<f8")
    expected = {name: d[key].shape for name, _, d, key in model.named_arrays()}
    inventory = manifest["inventory"]
    if [e["name"] for e in inventory] != list(expected):
        raise FormatError(f"{path}: parameter inventory does not match the model layout")
    state = {}
    for entry in inventory:
        shape = tuple(entry["shape"])
        if shape != expected[entry["name"]]:
            raise FormatError(
                f"{path}: {entry['name']} has shape {shape} in the manifest, "
                f"model needs {expected[entry['name']]}")
        off = int(entry["offset"])
        size = int(np.prod(shape))
        if off + size > n_values:
            raise FormatError(f"{path}: {entry['name']} extends past the blob")
        state[entry["name"]] = values[off:off + size].reshape(shape)
    model.load_state(state)
    model.init_seed = manifest.get("init_seed")
    if model.init_seed is not None:
        model.reseed_dropout(model.init_seed)
    return model
