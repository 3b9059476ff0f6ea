"""Network builders for the two classifiers, a training loop and an sklearn wrapper.

Model A is a 1-D CNN over hyperaligned voxel vectors: six valid convolutions
(kernel 10, stride 1), each followed by batch norm, ReLU and dropout, then
seven dense layers, the last one producing the class logits. With the
default widths the flattened conv output is ``246 * 64 = 15744`` features.

Model B is a 3-D bottleneck residual network: a 7^3 stride-2 stem, four
stages of bottleneck blocks (stage strides 1, 2, 2, 2), global average
pooling, a 1000-unit feature layer and a dense classification layer.
"""
import json
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, make_rng
from .exceptions import BrainStateError
from .nn import (
    Adam,
    BatchNorm,
    Bottleneck,
    Conv,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    Network,
    PatienceSchedule,
    ReLU,
    softmax,
    softmax_xent,
)

MODEL_A_FLATTEN = 15744
MODEL_B_FEATURES = 1000


class ConfigError(BrainStateError, ValueError):
    pass


def _config_from_dict(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return cls(**kwargs)


@dataclass
class ModelAConfig:
    input_len: int = 300
    conv_filters: tuple = (64, 128, 128, 128, 128, 64)
    kernel: int = 10
    fc_widths: tuple = (1024, 512, 256, 128, 64, 32, 3)
    conv_dropout: tuple = (0.25,) * 6
    # one rate per hidden dense layer (all but the last)
    fc_dropout: tuple = (0.5, 0.5, 0.0, 0.0, 0.0, 0.0)
    n_classes: int = 3
    l2: float = 5e-2
    lr0: float = 4.5e-3
    decay: float = 0.2
    patience: int = 50
    # enforce the published architecture constraints
    strict: bool = True

    @property
    def conv_lengths(self):
        lengths = [self.input_len]
        for _ in self.conv_filters:
            lengths.append(lengths[-1] - self.kernel + 1)
        return lengths

    @property
    def flatten_width(self):
        return self.conv_lengths[-1] * self.conv_filters[-1]

    def validate(self):
        if len(self.conv_dropout) != len(self.conv_filters):
            raise ConfigError("need one conv dropout rate per conv layer")
        if len(self.fc_dropout) != len(self.fc_widths) - 1:
            raise ConfigError("need one dropout rate per hidden dense layer")
        if self.fc_widths[-1] != self.n_classes:
            raise ConfigError(f"last dense width {self.fc_widths[-1]} != n_classes {self.n_classes}")
        if self.conv_lengths[-1] < 1:
            raise ConfigError(f"conv stack collapses input of length {self.input_len}")
        if self.strict:
            if len(self.conv_filters) != 6 or len(self.fc_widths) != 7:
                raise ConfigError("model A has exactly 6 conv and 7 dense layers")
            if any(f not in (64, 128) for f in self.conv_filters) or self.conv_filters[-1] != 64:
                raise ConfigError("conv filters must be 64 or 128, the last one 64")
            rates = set(self.conv_dropout) | set(self.fc_dropout)
            if not rates <= {0.0, 0.25, 0.5}:
                raise ConfigError(f"dropout rates must be 0.25 or 0.5, got {sorted(rates)}")
            if self.flatten_width != MODEL_A_FLATTEN:
                raise ConfigError(f"flatten width {self.flatten_width} != {MODEL_A_FLATTEN}")

    @classmethod
    def desk(cls, **overrides):
        """Narrow variant that trains in seconds on one CPU core."""
        base = dict(
            conv_filters=(8,) * 6,
            fc_widths=(64, 64, 32, 32, 16, 16, 3),
            conv_dropout=(0.0,) * 6,
            fc_dropout=(0.25, 0.0, 0.0, 0.0, 0.0, 0.0),
            l2=1e-3,
            lr0=2e-3,
            patience=3,
            strict=False,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _config_from_dict(cls, d)


@dataclass
class ModelBConfig:
    input_shape: tuple = (1, 64, 64, 44)
    stem_channels: int = 64
    stem_kernel: int = 7
    stage_blocks: tuple = (3, 4, 6, 3)
    stage_widths: tuple = (64, 128, 256, 512)
    stage_strides: tuple = (1, 2, 2, 2)
    expansion: int = 4
    feature_width: int = MODEL_B_FEATURES
    n_classes: int = 2
    l2: float = 2e-4
    lr0: float = 5e-4
    decay: float = 0.3
    patience: int = 30
    strict: bool = True

    def validate(self):
        if not (len(self.stage_blocks) == len(self.stage_widths) == len(self.stage_strides)):
            raise ConfigError("stage blocks, widths and strides must have equal length")
        if self.strict and self.feature_width != MODEL_B_FEATURES:
            raise ConfigError(f"feature width must be {MODEL_B_FEATURES}")

    @classmethod
    def tiny(cls, **overrides):
        base = dict(
            input_shape=(1, 16, 16, 11),
            stem_channels=8,
            stage_blocks=(1, 1, 1, 1),
            stage_widths=(4, 4, 8, 8),
            patience=3,
            lr0=2e-3,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _config_from_dict(cls, d)


def build_model_a(cfg=None, seed=0):
    cfg = cfg or ModelAConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    layers = []
    in_ch = 1
    for filters, rate in zip(cfg.conv_filters, cfg.conv_dropout):
        layers += [Conv(in_ch, filters, cfg.kernel, rank=1, rng=rng), BatchNorm(filters), ReLU()]
        if rate:
            layers.append(Dropout(rate))
        in_ch = filters
    layers.append(Flatten())
    width = cfg.flatten_width
    for i, out in enumerate(cfg.fc_widths):
        layers.append(Dense(width, out, rng=rng))
        if i < len(cfg.fc_widths) - 1:
            layers.append(ReLU())
            if cfg.fc_dropout[i]:
                layers.append(Dropout(cfg.fc_dropout[i]))
        width = out
    net = Network(layers)
    flatten_at = next(i for i, layer in enumerate(layers) if isinstance(layer, Flatten))
    flat = net.feature_shape((1, 1, cfg.input_len), flatten_at + 1)
    if flat[1] != cfg.flatten_width:
        raise ConfigError(f"flatten width {flat[1]} != configured {cfg.flatten_width}")
    return net


def build_model_b(cfg=None, seed=0):
    cfg = cfg or ModelBConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    pad = cfg.stem_kernel // 2
    layers = [
        Conv(cfg.input_shape[0], cfg.stem_channels, cfg.stem_kernel, rank=3, stride=2, padding=pad, rng=rng, bias=False),
        BatchNorm(cfg.stem_channels),
        ReLU(),
    ]
    in_ch = cfg.stem_channels
    for n_blocks, width, stride in zip(cfg.stage_blocks, cfg.stage_widths, cfg.stage_strides):
        for b in range(n_blocks):
            block = Bottleneck(in_ch, width, cfg.expansion, stride if b == 0 else 1, rng=rng)
            layers.append(block)
            in_ch = block.out_channels
    layers += [
        GlobalAvgPool(),
        Dense(in_ch, cfg.feature_width, rng=rng),
        ReLU(),
        Dense(cfg.feature_width, cfg.n_classes, rng=rng),
    ]
    net = Network(layers)
    try:
        shape = (1,) + tuple(cfg.input_shape)
        for layer in layers[:-1]:
            shape = layer.output_shape(shape)
            if len(shape) > 2 and min(shape[2:]) < 1:
                raise ValueError("spatial extent collapsed below one voxel")
    except ValueError as exc:
        raise ConfigError(f"input {cfg.input_shape} does not survive the network: {exc}") from exc
    if shape[1] != cfg.feature_width:
        raise ConfigError(f"penultimate width {shape[1]} != {cfg.feature_width}")
    return net


def penultimate_width(net, input_shape):
    """Length of the feature vector fed to the classification layer."""
    return net.feature_shape((1,) + tuple(input_shape), len(net.layers) - 1)[1]


def build_model(kind, cfg=None, seed=0):
    if kind == "a":
        return build_model_a(cfg, seed)
    if kind == "b":
        return build_model_b(cfg, seed)
    raise ConfigError(f"unknown model kind {kind!r}")


def config_for(kind, d=None):
    cls = ModelAConfig if kind == "a" else ModelBConfig
    return cls() if d is None else cls.from_dict(d)


def predict(net, sample):
    """Classify one sample (no batch axis) in evaluation mode.

    ``net`` is a :class:`Network` or a :class:`CompiledConvNet`. Returns
    ``(class, probabilities, elapsed_seconds)``; ties go to the lowest
    class index.
    """
    x = np.asarray(sample, dtype=np.float64)[None]
    start = time.perf_counter()
    if isinstance(net, CompiledConvNet):
        probs = net.predict_proba(x)[0]
    else:
        probs = softmax(net.forward(x, train=False))[0]
    elapsed = time.perf_counter() - start
    return int(np.argmax(probs)), probs, elapsed


class CompiledConvNet:
    """Evaluation-only float32 copy of a 1-D conv stack with batch norm folded in.

    Handles networks made of stride-1 unpadded rank-1 convolutions, batch
    norm, ReLU, dropout, flatten and dense layers (Model A). Each conv is
    evaluated as a sum of ``kernel`` shifted matrix products, which avoids
    building the im2col matrix. Results agree with the float64 network up
    to single-precision rounding.
    """

    def __init__(self, net, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.steps = []
        layers = list(net.layers)
        i = 0
        while i < len(layers):
            layer = layers[i]
            nxt = layers[i + 1] if i + 1 < len(layers) else None
            if isinstance(layer, Conv) and (layer.rank != 1 or layer.stride != (1,) or layer.padding != (0,)):
                raise ConfigError(f"cannot compile {layer!r}")
            if isinstance(layer, (Conv, Dense)):
                W = layer.params["W"]
                b = layer.params.get("b", np.zeros(W.shape[0] if isinstance(layer, Conv) else W.shape[1]))
                if isinstance(nxt, BatchNorm):
                    scale = nxt.params["gamma"] / np.sqrt(nxt.buffers["running_var"] + nxt.eps)
                    shift = nxt.params["beta"] - nxt.buffers["running_mean"] * scale
                    if isinstance(layer, Conv):
                        W = W * scale[:, None, None]
                    else:
                        W = W * scale
                    b = b * scale + shift
                    i += 1
                if isinstance(layer, Conv):
                    # (k, out, in) so W[j] multiplies the input shifted by j
                    W = np.ascontiguousarray(W.transpose(2, 0, 1), dtype=self.dtype)
                    self.steps.append(("conv", W, b.astype(self.dtype)[:, None]))
                else:
                    self.steps.append(("dense", np.ascontiguousarray(W, dtype=self.dtype), b.astype(self.dtype)))
            elif isinstance(layer, ReLU):
                self.steps.append(("relu",))
            elif isinstance(layer, Flatten):
                self.steps.append(("flatten",))
            elif not isinstance(layer, Dropout):
                raise ConfigError(f"cannot compile {type(layer).__name__}")
            i += 1

    def forward(self, x):
        """Logits for ``x`` of shape ``(batch, channels, length)``."""
        x = np.asarray(x, dtype=self.dtype)
        for step in self.steps:
            kind = step[0]
            if kind == "conv":
                W, b = step[1], step[2]
                L = x.shape[-1] - W.shape[0] + 1
                out = W[0] @ x[..., 0:L]
                for j in range(1, W.shape[0]):
                    out += W[j] @ x[..., j: j + L]
                out += b
                x = out
            elif kind == "dense":
                x = x @ step[1] + step[2]
            elif kind == "relu":
                x = np.maximum(x, 0, out=x)
            else:
                x = x.reshape(x.shape[0], -1)
        return x.astype(np.float64)

    def predict_proba(self, x):
        return softmax(self.forward(x))


def train_network(net, X, y, *, epochs, batch_size, lr0, decay, patience, l2, rng, log=None):
    """Mini-batch Adam with the patience schedule stepped on the training loss.

    Returns the per-epoch history as a list of dicts.
    """
    X = np.asarray(X, dtype=np.float64)
    y = check_labels(y, n_samples=len(X))
    opt = Adam(lr=lr0, l2=l2)
    sched = PatienceSchedule(lr0=lr0, decay=decay, patience=patience)
    history = []
    n = len(X)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, seen, correct = 0.0, 0, 0
        for start in range(0, n, batch_size):
            idx = order[start: start + batch_size]
            if len(idx) < 2:
                continue
            logits = net.forward(X[idx], train=True, rng=rng)
            loss, grad = softmax_xent(logits, y[idx])
            net.backward(grad)
            opt.lr = sched.lr
            opt.step(net)
            total += loss * len(idx)
            seen += len(idx)
            correct += int((logits.argmax(axis=1) == y[idx]).sum())
        epoch_loss = total / max(seen, 1)
        history.append({"epoch": epoch, "loss": epoch_loss, "accuracy": correct / max(seen, 1), "lr": sched.lr})
        sched.step(epoch_loss)
        if log is not None:
            log(history[-1])
    return history


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """sklearn-style wrapper around :func:`build_model_a` / :func:`build_model_b`.

    Parameters
    ----------
    kind : {"a", "b"}
        Model A expects ``X`` of shape ``(n, input_len)``; model B expects
        ``(n, nx, ny, nz)`` or ``(n, 1, nx, ny, nz)``.
    config : dict, optional
        Overrides for the model config; ``None`` uses the published defaults.
    epochs, batch_size : int
    seed : int
        Seeds initialisation, shuffling and dropout.
    """

    def __init__(self, kind="a", config=None, epochs=30, batch_size=32, seed=0, verbose=False):
        self.kind = kind
        self.config = config
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.verbose = verbose

    def _as_input(self, X):
        X = np.asarray(X, dtype=np.float64)
        if self.kind == "a" and X.ndim == 2:
            X = X[:, None, :]
        elif self.kind == "b" and X.ndim == 4:
            X = X[:, None]
        if not np.all(np.isfinite(X)):
            raise ValueError("X contains non-finite values")
        return X

    def fit(self, X, y):
        cfg = config_for(self.kind, self.config)
        X = self._as_input(X)
        y = check_labels(y, n_samples=len(X), n_classes=cfg.n_classes)
        seeds = np.random.SeedSequence(self.seed).spawn(2)
        self.config_ = cfg
        self.network_ = build_model(self.kind, cfg, seed=seeds[0])
        self.classes_ = np.arange(cfg.n_classes)
        log = print if self.verbose else None
        self.history_ = train_network(
            self.network_,
            X,
            y,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr0=cfg.lr0,
            decay=cfg.decay,
            patience=cfg.patience,
            l2=cfg.l2,
            rng=make_rng(seeds[1]),
            log=log,
        )
        return self

    def predict_proba(self, X, batch_size=256):
        check_is_fitted(self, "network_")
        X = self._as_input(X)
        out = [self.network_.predict_proba(X[i: i + batch_size]) for i in range(0, len(X), batch_size)]
        return np.vstack(out) if out else np.zeros((0, len(self.classes_)))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)

    def save(self, path):
        """Write ``path`` (NNET parameters) and ``path + '.json'`` (architecture)."""
        check_is_fitted(self, "network_")
        self.network_.save(path)
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump({"kind": self.kind, "config": self.config_.to_dict()}, fh, indent=2)


def load_network(path):
    """Rebuild a network from its JSON sidecar and load the NNET parameters."""
    with open(f"{path}.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    cfg = config_for(meta["kind"], meta["config"])
    net = build_model(meta["kind"], cfg, seed=0)
    net.load(path)
    return meta["kind"], cfg, net
