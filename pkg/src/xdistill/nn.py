"""Feed-forward networks: layers, tracing forward pass, SGD with momentum, checkpoints."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import serialize
from .autodiff import Tensor
from .exceptions import ContractError, DimensionError, FormatError, NumericFaultError


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Layer:
    kind = "layer"
    has_params = False

    def __init__(self):
        self.frozen = False

    def parameters(self) -> list[Tensor]:
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def named_tensors(self) -> dict[str, Tensor]:
        return {}

    def forward(self, a: Tensor, training: bool = False) -> Tensor:
        raise NotImplementedError

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def config(self) -> dict:
        return {}

    def freeze(self, frozen: bool = True):
        self.frozen = frozen
        for p in self.parameters():
            p.requires_grad = not frozen
        return self

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.config().items())
        return f"{type(self).__name__}({args})"


class Dense(Layer):
    kind = "Dense"
    has_params = True

    def __init__(self, in_features: int, out_features: int, bias: bool = True,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features, self.bias_enabled = in_features, out_features, bias
        self.weight = _he_uniform(rng, (out_features, in_features), in_features, dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def named_tensors(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, a, training=False):
        z = ad.matmul(a, ad.transpose(self.weight))
        return z + self.bias if self.bias is not None else z

    def transpose_input(self, s: Tensor) -> Tensor:
        """Apply W^T to output-space signals; the LRP redistribution step."""
        return ad.matmul(s, self.weight)

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise DimensionError(f"Dense expects ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def config(self):
        return {"in_features": self.in_features, "out_features": self.out_features,
                "bias": self.bias_enabled}


class Conv2D(Layer):
    kind = "Conv2D"
    has_params = True

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
                 padding: int = 0, bias: bool = True, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding, self.bias_enabled = kernel, stride, padding, bias
        fan_in = in_channels * kernel * kernel
        self.weight = _he_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, dtype)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def named_tensors(self):
        out = {"weight": self.weight}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def forward(self, a, training=False):
        return ad.conv2d(a, self.weight, self.bias, self.stride, self.padding)

    def transpose_input(self, s: Tensor, in_shape: tuple) -> Tensor:
        return ad.conv2d_transpose(s, self.weight, in_shape, self.stride, self.padding)

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DimensionError(f"Conv2D expects ({self.in_channels}, H, W), got {in_shape}")
        _, H, W = in_shape
        Ho = (H + 2 * self.padding - self.kernel) // self.stride + 1
        Wo = (W + 2 * self.padding - self.kernel) // self.stride + 1
        if Ho <= 0 or Wo <= 0:
            raise DimensionError(f"Conv2D kernel too large for input {in_shape}")
        return (self.out_channels, Ho, Wo)

    def config(self):
        return {"in_channels": self.in_channels, "out_channels": self.out_channels,
                "kernel": self.kernel, "stride": self.stride, "padding": self.padding,
                "bias": self.bias_enabled}


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, a, training=False):
        return ad.relu(a)


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, a, training=False):
        return ad.reshape(a, (a.shape[0], -1))

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


class AvgPool2D(Layer):
    kind = "AvgPool2D"

    def __init__(self, kernel: int = 2, truncate: bool = False):
        super().__init__()
        self.kernel, self.truncate = kernel, truncate

    def forward(self, a, training=False):
        return ad.avg_pool2d(a, self.kernel, truncate=self.truncate)

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise DimensionError(f"AvgPool2D expects (C, H, W), got {in_shape}")
        C, H, W = in_shape
        if (H % self.kernel or W % self.kernel) and not self.truncate:
            raise DimensionError(f"pool kernel {self.kernel} does not divide {(H, W)}")
        return (C, H // self.kernel, W // self.kernel)

    def config(self):
        return {"kernel": self.kernel, "truncate": self.truncate}


class BatchNorm(Layer):
    """Batch normalization over the channel axis (axis 1) of 2-D or 4-D inputs."""

    kind = "BatchNorm"
    has_params = True

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float32, **_):
        super().__init__()
        self.num_features, self.eps, self.momentum = num_features, eps, momentum
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def parameters(self):
        return [self.gamma, self.beta]

    def named_tensors(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _view(self, a: Tensor) -> tuple:
        return (1, -1) + (1,) * (a.ndim - 2)

    def affine(self) -> tuple[Tensor, Tensor]:
        """Eval-mode (scale, shift) so that BN(a) = scale * a + shift per channel."""
        inv = 1.0 / np.sqrt(self.running_var + self.eps)
        scale = self.gamma * ad.as_tensor(inv.astype(self.gamma.dtype))
        shift = self.beta - scale * ad.as_tensor(self.running_mean)
        return scale, shift

    def forward(self, a, training=False):
        view = self._view(a)
        if training:
            axes = (0,) + tuple(range(2, a.ndim))
            mu = ad.mean(a, axis=axes, keepdims=True)
            centered = a - mu
            var = ad.mean(centered * centered, axis=axes, keepdims=True)
            out = centered / ad.sqrt(var + self.eps)
            n = a.size // a.shape[1]
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean + m * mu.data.reshape(-1)).astype(self.running_mean.dtype)
            unbiased = var.data.reshape(-1) * n / max(n - 1, 1)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(self.running_var.dtype)
            return out * ad.reshape(self.gamma, view) + ad.reshape(self.beta, view)
        scale, shift = self.affine()
        return a * ad.reshape(scale, view) + ad.reshape(shift, view)

    def output_shape(self, in_shape):
        if in_shape[0] != self.num_features:
            raise DimensionError(f"BatchNorm expects {self.num_features} channels, got {in_shape}")
        return in_shape

    def config(self):
        return {"num_features": self.num_features, "eps": self.eps, "momentum": self.momentum}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2D, ReLU, Flatten, AvgPool2D, BatchNorm)}


@dataclass
class ActivationTrace:
    """Per-layer inputs ``a^L`` and outputs ``z^L`` of one forward pass."""

    inputs: list[Tensor] = field(default_factory=list)
    outputs: list[Tensor] = field(default_factory=list)

    def __len__(self):
        return len(self.inputs)


class Network:
    """An ordered stack of layers mapping ``input_shape`` to ``n_classes`` logits."""

    def __init__(self, layers: Sequence[Layer], input_shape: Sequence[int], n_classes: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(n) for n in input_shape)
        self.n_classes = int(n_classes)
        shape = self.input_shape
        self.shapes = [shape]
        for layer in self.layers:
            shape = layer.output_shape(shape)
            self.shapes.append(shape)
        if shape != (self.n_classes,):
            raise DimensionError(f"network outputs {shape}, expected ({self.n_classes},)")

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers if not layer.frozen for p in layer.parameters()]

    @property
    def last_layer_index(self) -> int:
        for i in range(len(self.layers) - 1, -1, -1):
            if self.layers[i].has_params:
                return i
        raise ContractError("network has no parametrized layer")

    @property
    def last_layer(self) -> Layer:
        return self.layers[self.last_layer_index]

    @property
    def is_frozen(self) -> bool:
        return all(layer.frozen for layer in self.layers if layer.has_params)

    def freeze(self, frozen: bool = True) -> "Network":
        for layer in self.layers:
            layer.freeze(frozen)
        return self

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def _as_input(self, x) -> Tensor:
        if not isinstance(x, Tensor):
            x = ad.as_tensor(np.asarray(x, dtype=self.dtype))
        if x.shape == self.input_shape:  # single unbatched sample
            x = ad.reshape(x, (1,) + x.shape)
        if x.shape[1:] != self.input_shape:
            raise DimensionError(f"input shape {x.shape[1:]} != network input {self.input_shape}")
        return x

    def forward(self, x, training: bool = False) -> tuple[Tensor, ActivationTrace]:
        """Batched forward pass returning logits and the per-layer trace."""
        a = self._as_input(x)
        trace = ActivationTrace()
        for layer in self.layers:
            trace.inputs.append(a)
            a = layer.forward(a, training)
            trace.outputs.append(a)
        return a, trace

    def __call__(self, x, training: bool = False) -> Tensor:
        return self.forward(x, training)[0]

    def predict_logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        x = np.asarray(x)
        out = []
        with ad.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(x[i:i + batch_size])[0].data)
        if not out:
            return np.zeros((0, self.n_classes), dtype=self.dtype)
        return np.concatenate(out)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {}
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_tensors().items():
                state[f"{i}.{name}"] = t.data
            for name, buf in layer.buffers().items():
                state[f"{i}.{name}"] = buf
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> "Network":
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_tensors().items():
                arr = np.asarray(state[f"{i}.{name}"], dtype=t.dtype)
                if arr.shape != t.shape:
                    raise DimensionError(f"state {i}.{name} has shape {arr.shape}, expected {t.shape}")
                t.data = arr.copy()
            for name in layer.buffers():
                setattr(layer, name, np.asarray(state[f"{i}.{name}"]).copy())
        return self

    def describe(self) -> list[dict]:
        return [{"kind": layer.kind, "config": layer.config(), "frozen": layer.frozen}
                for layer in self.layers]

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"Network(input_shape={self.input_shape}, n_classes={self.n_classes}, [{inner}])"


def forward(net: Network, x, training: bool = False) -> tuple[Tensor, ActivationTrace]:
    return net.forward(x, training)


def build_network(spec: Sequence[dict], input_shape: Sequence[int], n_classes: int,
                  seed: int = 0, dtype=np.float32) -> Network:
    """Build a network from layer descriptors; a final Dense to ``n_classes`` is appended.

    Descriptor kinds: ``conv`` (out, kernel, stride, padding), ``dense`` (out),
    ``relu``, ``avgpool`` (kernel), ``batchnorm``, ``flatten``.  Each ``bias``
    key defaults to true.
    """
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers: list[Layer] = []
    for d in spec:
        kind = d["kind"].lower()
        if kind == "conv":
            layer = Conv2D(shape[0], d["out"], d.get("kernel", 3), d.get("stride", 1),
                           d.get("padding", 1), d.get("bias", True), rng, dtype)
        elif kind == "dense":
            if len(shape) != 1:
                layers.append(Flatten())
                shape = layers[-1].output_shape(shape)
            layer = Dense(shape[0], d["out"], d.get("bias", True), rng, dtype)
        elif kind == "relu":
            layer = ReLU()
        elif kind == "avgpool":
            layer = AvgPool2D(d.get("kernel", 2), d.get("truncate", False))
        elif kind == "batchnorm":
            layer = BatchNorm(shape[0], dtype=dtype)
        elif kind == "flatten":
            layer = Flatten()
        else:
            raise ContractError(f"unknown layer kind {d['kind']!r}")
        layers.append(layer)
        shape = layer.output_shape(shape)
    if len(shape) != 1:
        layers.append(Flatten())
        shape = layers[-1].output_shape(shape)
    layers.append(Dense(shape[0], n_classes, True, rng, dtype))
    return Network(layers, input_shape, n_classes)


def cnn_spec(channels: Sequence[int] = (8, 16), hidden: Sequence[int] = (),
             batchnorm: bool = False, bias: bool = True) -> list[dict]:
    """Conv blocks (3x3 conv, [BN], ReLU, 2x2 mean pool) followed by dense layers."""
    spec = []
    for c in channels:
        spec.append({"kind": "conv", "out": c, "kernel": 3, "padding": 1, "bias": bias})
        if batchnorm:
            spec.append({"kind": "batchnorm"})
        spec += [{"kind": "relu"}, {"kind": "avgpool", "kernel": 2, "truncate": True}]
    for h in hidden:
        spec += [{"kind": "dense", "out": h, "bias": bias}, {"kind": "relu"}]
    return spec


def fuse_batchnorm(net: Network) -> Network:
    """Return an equivalent eval-mode network with each BatchNorm folded into the preceding linear layer."""
    layers: list[Layer] = []
    for layer in net.layers:
        if isinstance(layer, BatchNorm) and layers and isinstance(layers[-1], (Dense, Conv2D)):
            prev = copy.deepcopy(layers[-1])
            scale, shift = (t.data for t in layer.affine())
            wshape = (-1,) + (1,) * (prev.weight.ndim - 1)
            w = prev.weight.data * scale.reshape(wshape)
            b = prev.bias.data if prev.bias is not None else np.zeros_like(scale)
            prev.weight = Tensor(w, requires_grad=True)
            prev.bias = Tensor(b * scale + shift, requires_grad=True)
            prev.bias_enabled = True
            layers[-1] = prev
        else:
            layers.append(copy.deepcopy(layer))
    return Network(layers, net.input_shape, net.n_classes)


# -- optimization ----------------------------------------------------------

def sgd_momentum_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                      velocity: Sequence[np.ndarray] | None, lr: float, momentum: float,
                      clip_norm: float, weight_decay: float = 0.0):
    """One clipped SGD-with-momentum update.

    If the global L2 norm of ``grads`` exceeds ``clip_norm`` they are scaled
    by ``clip_norm / norm``; then ``v <- momentum * v + g`` and
    ``theta <- theta - lr * v``.  Returns ``(new_params, new_velocity, norm)``
    where ``norm`` is the pre-clipping gradient norm.
    """
    if clip_norm <= 0:
        raise ContractError("clip_norm must be positive")
    if len(params) != len(grads):
        raise ContractError("params and grads are not aligned")
    grads = [np.asarray(g) for g in grads]
    for p, g in zip(params, grads):
        if np.shape(p) != g.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {np.shape(p)}")
        if not np.isfinite(g).all():
            raise NumericFaultError("non-finite gradient; step skipped")
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    scale = clip_norm / norm if norm > clip_norm else 1.0
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        g = g * np.asarray(scale, dtype=g.dtype)
        if weight_decay:
            g = g + weight_decay * p
        v = momentum * v + g
        new_velocity.append(v.astype(np.asarray(p).dtype))
        new_params.append((p - lr * v).astype(np.asarray(p).dtype))
    return new_params, new_velocity, norm


class SGDMomentum:
    """Stateful wrapper around :func:`sgd_momentum_step` for parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.01, momentum: float = 0.9,
                 clip_norm: float = 1.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.clip_norm, self.weight_decay = lr, momentum, clip_norm, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.last_norm = 0.0

    def step(self, grads: Sequence[Tensor | np.ndarray]) -> float:
        arrays = [g.data if isinstance(g, Tensor) else g for g in grads]
        new_p, self.velocity, self.last_norm = sgd_momentum_step(
            [p.data for p in self.params], arrays, self.velocity,
            self.lr, self.momentum, self.clip_norm, self.weight_decay)
        for p, arr in zip(self.params, new_p):
            p.data = arr
        return self.last_norm


def copy_and_freeze_last_layer(teacher: Network, student: Network) -> Network:
    """Copy the teacher's final layer parameters into the student and freeze them."""
    t_layer, s_layer = teacher.last_layer, student.last_layer
    t_state, s_state = t_layer.named_tensors(), s_layer.named_tensors()
    if type(t_layer) is not type(s_layer) or t_state.keys() != s_state.keys() or any(
            t_state[k].shape != s_state[k].shape for k in t_state):
        raise DimensionError("teacher and student final layers differ in shape")
    for name, t in t_state.items():
        s_state[name].data = t.data.copy()
    s_layer.freeze(True)
    return student


# -- checkpoints -----------------------------------------------------------

def save_network(net: Network, directory: str | os.PathLike, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` plus one XTSR file per parameter and buffer."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    layers = []
    for i, layer in enumerate(net.layers):
        files = {}
        for name, arr in list(((n, t.data) for n, t in layer.named_tensors().items())) + list(layer.buffers().items()):
            fname = f"layer{i:02d}_{name}.xtsr"
            serialize.save(d / fname, arr)
            files[name] = fname
        layers.append({"kind": layer.kind, "config": layer.config(), "frozen": layer.frozen,
                       "tensors": files})
    manifest = {"format": "xdistill-network", "version": 1, "input_shape": list(net.input_shape),
                "n_classes": net.n_classes, "layers": layers}
    if extra:
        manifest["extra"] = extra
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_network(directory: str | os.PathLike, dtype=np.float32) -> Network:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read network manifest in {d}: {exc}") from exc
    if manifest.get("format") != "xdistill-network":
        raise FormatError(f"{d} is not a network checkpoint")
    layers = []
    for entry in manifest["layers"]:
        cls = LAYER_KINDS.get(entry["kind"])
        if cls is None:
            raise FormatError(f"unknown layer kind {entry['kind']!r}")
        cfg = dict(entry["config"])
        if cls in (Dense, Conv2D, BatchNorm):
            cfg["dtype"] = dtype
        layer = cls(**cfg)
        for name, fname in entry["tensors"].items():
            arr = serialize.load(d / fname).astype(dtype)
            if name in layer.named_tensors():
                layer.named_tensors()[name].data = arr
            else:
                setattr(layer, name, arr)
        layer.freeze(entry.get("frozen", False))
        layers.append(layer)
    return Network(layers, manifest["input_shape"], manifest["n_classes"])
