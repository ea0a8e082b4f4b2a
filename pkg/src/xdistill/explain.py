"""Explanation heatmaps as differentiable graph nodes.

Methods: spatial attention, Grad-CAM, input gradients, Gradient*Input and
LRP-epsilon.  With ``create_graph=True`` the returned heatmap depends on the
network parameters through the graph, so a loss on it can train the network.
With ``create_graph=False`` the heatmap is a constant (teacher side).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import serialize
from .autodiff import Tensor
from .exceptions import ContractError, NumericFaultError
from .nn import AvgPool2D, BatchNorm, Conv2D, Dense, Flatten, Network, ReLU

METHODS = ("lrp", "gradxinput", "inputgrad", "gradcam", "attention")
INPUT_LEVEL = ("lrp", "gradxinput", "inputgrad")


@dataclass
class Heatmap:
    """A batch of explanations.

    ``values`` has shape (B, *input_shape) for input-level methods and
    (B, H, W) for Grad-CAM and attention.  ``relevances`` holds the LRP
    relevance at the input of every layer (last entry: the logit layer).
    """

    values: Tensor
    k: np.ndarray
    method: str
    relevances: list[Tensor] | None = field(default=None, repr=False)

    @property
    def shape(self):
        return self.values.shape

    def numpy(self) -> np.ndarray:
        return self.values.data


def _classes(k, batch: int, n_classes: int) -> np.ndarray:
    k = np.asarray(k)
    if k.ndim == 0:
        k = np.full(batch, int(k))
    if k.shape != (batch,) or not np.issubdtype(k.dtype, np.integer):
        raise ContractError(f"class indices must be {batch} integers")
    if np.any(k < 0) or np.any(k >= n_classes):
        raise ContractError(f"class index out of range [0, {n_classes})")
    return k.astype(np.int64)


def _input_leaf(net: Network, x) -> Tensor:
    data = x.data if isinstance(x, Tensor) else x
    data = np.asarray(data, dtype=net.dtype)
    if data.ndim == len(net.input_shape):
        data = data[None]
    return Tensor(data, requires_grad=True)


def _selected_logit(logits: Tensor, k: np.ndarray) -> Tensor:
    mask = ad.as_tensor(ad.one_hot(k, logits.shape[1], dtype=logits.dtype))
    return (logits * mask).sum()


def input_gradient(net: Network, x, k, create_graph: bool = True) -> Heatmap:
    """Gradient of logit ``k`` with respect to the input."""
    x = _input_leaf(net, x)
    k = _classes(k, x.shape[0], net.n_classes)
    with ad.enable_grad():
        logits, _ = net.forward(x)
        (h,) = ad.grad(_selected_logit(logits, k), [x], create_graph=create_graph)
    return Heatmap(h if create_graph else h.detach(), k, "inputgrad")


def gradient_times_input(net: Network, x, k, create_graph: bool = True) -> Heatmap:
    x = _input_leaf(net, x)
    hm = input_gradient(net, x, k, create_graph)
    with ad.enable_grad() if create_graph else ad.no_grad():
        values = hm.values * ad.as_tensor(x.data)
    return Heatmap(values, hm.k, "gradxinput")


def feature_layer_index(net: Network, layer: int | None = None) -> int:
    """Trace index of a conv block's output (after any BatchNorm/ReLU that follow the conv)."""
    if layer is None:
        convs = [i for i, l in enumerate(net.layers) if isinstance(l, Conv2D)]
        if not convs:
            raise ContractError("network has no convolutional layer")
        layer = convs[-1]
    elif not isinstance(net.layers[layer], Conv2D):
        raise ContractError(f"layer {layer} is not convolutional")
    j = layer
    while j + 1 < len(net.layers) and isinstance(net.layers[j + 1], (BatchNorm, ReLU)):
        j += 1
    return j


def attention(trace, layer: int) -> Tensor:
    """Per-pixel sum over channels of squared activations at trace index ``layer``."""
    y = trace.outputs[layer] if hasattr(trace, "outputs") else ad.as_tensor(trace)
    if y.ndim != 4:
        raise ContractError(f"attention needs a (B, C, H, W) feature map, got {y.shape}")
    return ad.tsum(y * y, axis=1)


def attention_map(net: Network, x, k=None, layer: int | None = None,
                  create_graph: bool = True) -> Heatmap:
    j = feature_layer_index(net, layer)
    x = _input_leaf(net, x).detach()
    with ad.enable_grad() if create_graph else ad.no_grad():
        _, trace = net.forward(x)
        values = attention(trace, j)
    k = np.full(x.shape[0], -1) if k is None else np.broadcast_to(np.asarray(k), (x.shape[0],))
    return Heatmap(values, np.asarray(k), "attention")


def grad_cam(net: Network, x, k, layer: int | None = None, create_graph: bool = True) -> Heatmap:
    """ReLU of the channel sum of feature maps weighted by spatially averaged logit gradients."""
    j = feature_layer_index(net, layer)
    x = _input_leaf(net, x)
    k = _classes(k, x.shape[0], net.n_classes)
    with ad.enable_grad():
        logits, trace = net.forward(x)
        feat = trace.outputs[j]
        (g,) = ad.grad(_selected_logit(logits, k), [feat], create_graph=create_graph)
        with ad.enable_grad() if create_graph else ad.no_grad():
            alpha = ad.mean(g, axis=(2, 3), keepdims=True)
            e = ad.relu(ad.tsum(alpha * (feat if create_graph else feat.detach()), axis=1))
    return Heatmap(e, k, "gradcam")


def _stabilize(z: Tensor, eps) -> Tensor:
    """z + sign(z) * eps with sign(0) = +1; ``eps`` is a scalar or one value per sample."""
    eps = np.asarray(eps, dtype=z.dtype)
    if np.any(eps < 0):
        raise ContractError("epsilon must be non-negative")
    if not np.any(eps):
        return z
    if eps.ndim == 1:
        eps = eps.reshape((-1,) + (1,) * (z.ndim - 1))
    sgn = np.where(z.data >= 0, 1.0, -1.0).astype(z.dtype)
    return z + ad.as_tensor(sgn * eps)


def _ratio(R: Tensor, z: Tensor, eps) -> Tensor:
    """R / (z + sign(z) eps); entries with zero denominator and zero relevance give 0."""
    den = _stabilize(z, eps)
    idle = den.data == 0
    if np.any(idle):
        if np.any(R.data[np.broadcast_to(idle, R.shape)] != 0):
            raise NumericFaultError("relevance reached a neuron with |z| + eps == 0")
        den = den + ad.as_tensor(idle.astype(den.dtype))
    return R / den


def lrp(net: Network, x, k, eps=0.0, create_graph: bool = True) -> Heatmap:
    """LRP-epsilon relevance of logit ``k`` propagated back to the input.

    Relevance starts as the explained logit (zero for the other classes).
    Dense and Conv2D layers use the epsilon rule, AvgPool2D is treated as the
    equivalent fixed-weight linear layer, ReLU and Flatten pass relevance
    through, and an eval-mode BatchNorm is folded into the linear layer before
    it.  Written as forward graph operations (activation times the transposed
    layer applied to relevance/denominator), so it stays differentiable.
    """
    eps_arr = np.asarray(eps, dtype=np.float64)
    if np.any(eps_arr < 0):
        raise ContractError("epsilon must be non-negative")
    x = _input_leaf(net, x).detach()
    k = _classes(k, x.shape[0], net.n_classes)
    if eps_arr.ndim == 1 and eps_arr.shape[0] != x.shape[0]:
        raise ContractError("per-sample epsilon must have one value per sample")
    with ad.enable_grad() if create_graph else ad.no_grad():
        logits, trace = net.forward(x)
        R = logits * ad.as_tensor(ad.one_hot(k, net.n_classes, dtype=logits.dtype))
        relevances = [R]
        pending = None  # (scale, bn output) of a BatchNorm awaiting its linear layer
        for i in range(len(net.layers) - 1, -1, -1):
            layer, a, z = net.layers[i], trace.inputs[i], trace.outputs[i]
            if isinstance(layer, (Dense, Conv2D)):
                if pending is not None:
                    scale, z = pending
                    pending = None
                else:
                    scale = None
                s = _ratio(R, z, eps_arr)
                if scale is not None:
                    s = s * ad.reshape(scale, (1, -1) + (1,) * (s.ndim - 2))
                c = layer.transpose_input(s) if isinstance(layer, Dense) else layer.transpose_input(s, a.shape)
                R = a * c
            elif isinstance(layer, BatchNorm):
                scale, _ = layer.affine()
                if i > 0 and isinstance(net.layers[i - 1], (Dense, Conv2D)):
                    pending = (scale, z)
                else:
                    s = _ratio(R, z, eps_arr)
                    R = a * s * ad.reshape(scale, (1, -1) + (1,) * (s.ndim - 2))
            elif isinstance(layer, AvgPool2D):
                s = _ratio(R, z, eps_arr)
                c = ad.upsample_nearest(s, layer.kernel) * (1.0 / layer.kernel ** 2)
                if c.shape != a.shape:  # truncated pooling: cropped border gets no relevance
                    c = ad.scatter(c, (Ellipsis, slice(0, c.shape[-2]), slice(0, c.shape[-1])), a.shape)
                R = a * c
            elif isinstance(layer, Flatten):
                R = ad.reshape(R, a.shape)
            elif isinstance(layer, ReLU):
                pass
            else:
                raise ContractError(f"no relevance rule for {layer.kind}")
            relevances.append(R)
    relevances.reverse()
    return Heatmap(R, k, "lrp", relevances)


def explain(net: Network, x, k, method: str, eps=0.0, layer: int | None = None,
            create_graph: bool = True) -> Heatmap:
    """Dispatch to one of :data:`METHODS`."""
    if method == "lrp":
        return lrp(net, x, k, eps, create_graph)
    if method == "inputgrad":
        return input_gradient(net, x, k, create_graph)
    if method == "gradxinput":
        return gradient_times_input(net, x, k, create_graph)
    if method == "gradcam":
        return grad_cam(net, x, k, layer, create_graph)
    if method == "attention":
        return attention_map(net, x, k, layer, create_graph)
    raise ContractError(f"unknown explanation method {method!r}")


# -- export ------------------------------------------------------------------

def _to_2d(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 3:
        values = values.sum(axis=0)
    if values.ndim != 2:
        raise ContractError(f"cannot render heatmap of shape {values.shape}")
    return values


def render(values: np.ndarray, colormap: str = "gray") -> np.ndarray:
    """Map a signed 2-D heatmap to uint8 gray (H, W) or a blue-white-red (H, W, 3) image."""
    v = _to_2d(values)
    if colormap == "gray":
        lo, hi = v.min(), v.max()
        span = hi - lo if hi > lo else 1.0
        return np.round((v - lo) / span * 255).astype(np.uint8)
    if colormap == "diverging":
        m = np.abs(v).max() or 1.0
        t = v / m
        pos, neg = np.clip(t, 0, 1), np.clip(-t, 0, 1)
        rgb = np.stack([1 - neg, 1 - pos - neg, 1 - pos], axis=-1)
        return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    raise ContractError(f"unknown colormap {colormap!r}")


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def export_heatmap(values: np.ndarray, stem: str | os.PathLike, fmt: str = "png",
                   colormap: str = "diverging", meta: dict | None = None) -> dict:
    """Write ``stem.{png|pgm}``, ``stem.json`` (min/max sidecar) and ``stem.xtsr``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values)
    img = render(values, "gray" if fmt == "pgm" else colormap)
    image_path = stem.with_suffix("." + fmt)
    if fmt == "pgm":
        write_pgm(image_path, img)
    elif fmt == "png":
        from PIL import Image

        Image.fromarray(img).save(image_path)
    else:
        raise ContractError(f"unknown image format {fmt!r}")
    serialize.save(stem.with_suffix(".xtsr"), values)
    flat = _to_2d(values)
    sidecar = {"min": float(values.min()), "max": float(values.max()),
               "rendered_min": float(flat.min()), "rendered_max": float(flat.max()),
               "shape": list(values.shape), "colormap": "gray" if fmt == "pgm" else colormap,
               "image": image_path.name, "raw": stem.with_suffix(".xtsr").name}
    if meta:
        sidecar.update(meta)
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar
