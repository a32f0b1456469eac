"""Network definitions built on :mod:`dsgreplay.tensor`.

``ClassifierModel`` is the four-block 1-D CNN encoder (kernel 5, padding 2,
channels 64/128/256/128) with a global-average-pool and linear head.
``NoisePredictorModel`` is a small 1-D U-Net conditioned on the diffusion step
through a sinusoidal embedding.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Minimal parameter container.

    Subclasses register trainable tensors with :meth:`param` and non-trainable
    state (batch-norm running statistics) with :meth:`buffer`; registration
    order is the checkpoint order.
    """

    def __init__(self):
        self._params: list[Tensor] = []
        self._buffers: list[np.ndarray] = []
        self._children: list[Module] = []

    def param(self, data: np.ndarray, name: str) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params.append(t)
        return t

    def buffer(self, data: np.ndarray) -> np.ndarray:
        arr = np.array(data, dtype=np.float64)
        self._buffers.append(arr)
        return arr

    def child(self, module: "Module") -> "Module":
        self._children.append(module)
        return module

    def parameters(self) -> list[Tensor]:
        out = list(self._params)
        for c in self._children:
            out.extend(c.parameters())
        return out

    def buffers(self) -> list[np.ndarray]:
        out = list(self._buffers)
        for c in self._children:
            out.extend(c.buffers())
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_arrays(self) -> list[np.ndarray]:
        return [p.data for p in self.parameters()] + self.buffers()

    def load_state_arrays(self, arrays) -> None:
        targets = self.state_arrays()
        if len(arrays) != len(targets):
            raise ValueError(f"state has {len(arrays)} arrays, model expects {len(targets)}")
        for i, (dst, src) in enumerate(zip(targets, arrays)):
            if dst.shape != np.shape(src):
                raise ValueError(f"state array {i}: shape {np.shape(src)} != expected {dst.shape}")
            dst[...] = src

    def copy_state(self) -> list[np.ndarray]:
        return [a.copy() for a in self.state_arrays()]

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv1d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng, stride: int = 1, padding: int = 0,
                 init: str = "he"):
        super().__init__()
        fan_in = in_ch * kernel
        draw = _he if init == "he" else _uniform
        self.weight = self.param(draw(rng, (out_ch, in_ch, kernel), fan_in), "weight")
        self.bias = self.param(np.zeros(out_ch), "bias")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng, init: str = "uniform"):
        super().__init__()
        draw = _he if init == "he" else _uniform
        self.weight = self.param(draw(rng, (in_features, out_features), in_features), "weight")
        self.bias = self.param(np.zeros(out_features), "bias")

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class BatchNorm1d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = self.param(np.ones(channels), "gamma")
        self.beta = self.param(np.zeros(channels), "beta")
        self.running_mean = self.buffer(np.zeros(channels))
        self.running_var = self.buffer(np.ones(channels))
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return T.forward_op(
            "batchnorm1d",
            [x, self.gamma, self.beta],
            {"running_mean": self.running_mean, "running_var": self.running_var, "train": train,
             "momentum": self.momentum, "eps": self.eps},
        )


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------

DEFAULT_CHANNELS = (64, 128, 256, 128)


@dataclass
class ClassifierConfig:
    in_channels: int
    num_classes: int
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    kernel: int = 5
    padding: int = 2
    pool: int = 2
    dropout_rate: float = 0.1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def min_length(self) -> int:
        return self.pool ** len(self.channels)


class ClassifierModel(Module):
    """Conv -> ReLU -> BatchNorm -> MaxPool -> Dropout, four times, then global
    average pooling over time and a linear head."""

    kind = "classifier"

    def __init__(self, config: ClassifierConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.convs: list[Conv1d] = []
        self.norms: list[BatchNorm1d] = []
        prev = config.in_channels
        for ch in config.channels:
            self.convs.append(self.child(Conv1d(prev, ch, config.kernel, rng, padding=config.padding)))
            self.norms.append(self.child(BatchNorm1d(ch)))
            prev = ch
        self.head = self.child(Linear(prev, config.num_classes, rng))

    def __call__(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return classifier_forward(self, x, train, rng)


def classifier_forward(model: ClassifierModel, batch: Tensor, train_mode: bool,
                       rng: np.random.Generator | None = None) -> Tensor:
    cfg = model.config
    if batch.ndim != 3 or batch.shape[1] != cfg.in_channels:
        raise T.ShapeError(f"classifier expects (B, {cfg.in_channels}, L) input, got {batch.shape}")
    if batch.shape[2] < cfg.min_length:
        raise T.ShapeError(
            f"classifier input length {batch.shape[2]} < {cfg.min_length}: pooling would reach extent 0"
        )
    h = batch
    for conv, norm in zip(model.convs, model.norms):
        h = norm(T.relu(conv(h)), train_mode)
        h = T.maxpool1d(h, cfg.pool, cfg.pool)
        h = T.dropout(h, cfg.dropout_rate, train_mode, rng)
    return model.head(T.global_avg_pool1d(h))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# noise predictor
# ---------------------------------------------------------------------------


@dataclass
class TimestepEmbedding:
    dimension: int = 64
    max_period: float = 10000.0

    def __post_init__(self):
        if self.dimension <= 0 or self.dimension % 2:
            raise ValueError("embedding dimension must be a positive even integer")

    def __call__(self, taus) -> np.ndarray:
        taus = np.asarray(taus, dtype=np.float64).reshape(-1)
        half = self.dimension // 2
        freqs = np.exp(-math.log(self.max_period) * np.arange(half) / half)
        args = taus[:, None] * freqs[None, :]
        return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass
class NoisePredictorConfig:
    channels: int
    steps: int
    base_channels: int = 32
    depth: int = 2
    embed_dim: int = 64
    hidden_dim: int = 128

    @property
    def block_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.depth)]


class NoisePredictorModel(Module):
    """U-Net over (B, C, L) signals predicting the noise added at step tau."""

    kind = "noise_predictor"

    def __init__(self, config: NoisePredictorConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.embedding = TimestepEmbedding(config.embed_dim)
        # row tau holds the embedding of step tau; row 0 unused
        self._table = Tensor(self.embedding(np.arange(config.steps + 1)))
        self.t_mlp1 = self.child(Linear(config.embed_dim, config.hidden_dim, rng, init="he"))
        self.t_mlp2 = self.child(Linear(config.hidden_dim, config.hidden_dim, rng))
        chans = config.block_channels
        self.in_proj = self.child(Conv1d(config.channels, chans[0], 3, rng, padding=1))
        self.down_convs, self.down_temb, self.downsamples = [], [], []
        prev = chans[0]
        for ch in chans:
            self.down_convs.append(self.child(Conv1d(prev, ch, 3, rng, padding=1)))
            self.down_temb.append(self.child(Linear(config.hidden_dim, ch, rng)))
            self.downsamples.append(self.child(Conv1d(ch, ch, 3, rng, stride=2, padding=1)))
            prev = ch
        mid = chans[-1] * 2
        self.mid_conv1 = self.child(Conv1d(prev, mid, 3, rng, padding=1))
        self.mid_temb = self.child(Linear(config.hidden_dim, mid, rng))
        self.mid_conv2 = self.child(Conv1d(mid, mid, 3, rng, padding=1))
        prev = mid
        self.up_convs, self.up_temb = [], []
        for ch in reversed(chans):
            self.up_convs.append(self.child(Conv1d(prev + ch, ch, 3, rng, padding=1)))
            self.up_temb.append(self.child(Linear(config.hidden_dim, ch, rng)))
            prev = ch
        self.out_conv = self.child(Conv1d(prev, config.channels, 3, rng, padding=1, init="uniform"))

    def __call__(self, x_tau: Tensor, tau) -> Tensor:
        return noise_predictor_forward(self, x_tau, tau)


def _add_time(h: Tensor, temb: Tensor, proj: Linear) -> Tensor:
    t = proj(temb)
    return h + t.reshape(t.shape[0], t.shape[1], 1)


def noise_predictor_forward(model: NoisePredictorModel, x_tau: Tensor, tau) -> Tensor:
    cfg = model.config
    if x_tau.ndim != 3 or x_tau.shape[1] != cfg.channels:
        raise T.ShapeError(f"noise predictor expects (B, {cfg.channels}, L) input, got {x_tau.shape}")
    batch, _, length = x_tau.shape
    tau = np.broadcast_to(np.asarray(tau, dtype=np.int64), (batch,))
    if tau.min() < 1 or tau.max() > cfg.steps:
        raise ValueError(f"diffusion step outside [1, {cfg.steps}]")

    multiple = 2**cfg.depth
    pad = (-length) % multiple
    h_in = x_tau
    if pad:
        zeros = Tensor(np.zeros((batch, cfg.channels, pad)))
        h_in = T.concat([x_tau, zeros], axis=2)

    temb = T.relu(model.t_mlp1(T.embedding_lookup(model._table, tau)))
    temb = model.t_mlp2(temb)

    h = model.in_proj(h_in)
    skips = []
    for conv, proj, down in zip(model.down_convs, model.down_temb, model.downsamples):
        h = T.relu(_add_time(conv(h), temb, proj))
        skips.append(h)
        h = down(h)
    h = T.relu(_add_time(model.mid_conv1(h), temb, model.mid_temb))
    h = T.relu(model.mid_conv2(h))
    for conv, proj, skip in zip(model.up_convs, model.up_temb, reversed(skips)):
        h = T.concat([T.upsample1d(h, 2), skip], axis=1)
        h = T.relu(_add_time(conv(h), temb, proj))
    out = model.out_conv(h)
    if pad:
        out = T.slice_(out, 2, 0, length)
    return out


# ---------------------------------------------------------------------------
# checkpoint + manifest
# ---------------------------------------------------------------------------


def build_model(kind: str, arch: dict, rng: np.random.Generator | None = None) -> Module:
    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == ClassifierModel.kind:
        return ClassifierModel(ClassifierConfig(**arch), rng)
    if kind == NoisePredictorModel.kind:
        return NoisePredictorModel(NoisePredictorConfig(**arch), rng)
    raise ValueError(f"unknown model kind {kind!r}")


def architecture(model: Module) -> dict:
    arch = asdict(model.config)
    if "channels" in arch and isinstance(arch["channels"], tuple):
        arch["channels"] = list(arch["channels"])
    return arch


def save_model(model: Module, path: str | Path, extra: dict | None = None) -> None:
    """Write ``path`` (RFTN tensors) and ``path.json`` (architecture manifest)."""
    path = Path(path)
    T.save_tensors(path, model.state_arrays())
    manifest = {"kind": model.kind, "architecture": architecture(model)}
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_model(path: str | Path) -> tuple[Module, dict]:
    path = Path(path)
    manifest = json.loads(manifest_path(path).read_text())
    model = build_model(manifest["kind"], manifest["architecture"])
    model.load_state_arrays(T.load_tensors(path))
    return model, manifest
