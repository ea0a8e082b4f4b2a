"""Procedurally generated, fully biased datasets with IID / OOD / shift test splits.

Two generators:

* colored glyphs: grayscale digit-like glyphs (28x28) colorized by class;
* background bias: shapes (64x64) composited over class-correlated textures,
  with foreground masks so backgrounds can be replaced by noise.

Every test split reuses the same foreground instances; only the bias changes.
"""

from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import serialize
from .exceptions import ContractError, DimensionError, FormatError

SPLITS = ("train", "val", "test-iid", "test-ood", "test-shift")
TEST_SPLITS = ("test-iid", "test-ood", "test-shift")

# 5x7 digit bitmaps
_GLYPH_ROWS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}

TRAIN_COLORS = np.array([
    (0.0, 0.4, 1.0),   # 0 azure
    (0.0, 1.0, 0.0),   # 1 green
    (1.0, 1.0, 0.0),   # 2 yellow
    (1.0, 0.0, 0.0),   # 3 red
    (1.0, 0.0, 1.0),   # 4 magenta
    (0.0, 1.0, 1.0),   # 5 cyan
    (1.0, 0.5, 0.0),   # 6 orange
    (0.5, 0.0, 1.0),   # 7 violet
    (1.0, 1.0, 1.0),   # 8 white
    (0.5, 1.0, 0.5),   # 9 mint
])

OOD_COLORS = np.array([
    (0.6, 0.3, 0.1),
    (0.5, 0.5, 0.5),
    (1.0, 0.6, 0.8),
    (0.2, 0.6, 0.4),
    (0.6, 0.6, 0.0),
    (0.3, 0.3, 0.8),
    (0.8, 0.2, 0.4),
    (0.4, 0.8, 0.9),
    (0.9, 0.8, 0.5),
    (0.5, 0.2, 0.5),
])

SHAPES = ("disk", "triangle", "cross", "ring", "tee", "crescent", "square", "diamond")
N_TEXTURES = 16
SHAPE_RADIUS = (0.3, 0.42)             # fraction of the image size


@dataclass
class BiasSpec:
    """Class-to-bias assignment and its test-time variants.

    ``assignment[c]`` is the bias id worn by class ``c`` in training (a row
    of the color table, or a texture id).  In the shift split class ``c``
    wears the training bias of class ``shift[c]``.  OOD samples draw from
    ``ood_pool``, which must not overlap ``assignment``.
    """

    kind: str = "foreground-color"
    n_classes: int = 10
    assignment: list[int] | None = None
    strength: float = 1.0
    shift: list[int] | None = None
    ood_pool: list[int] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("foreground-color", "background-texture"):
            raise ContractError(f"unknown bias kind {self.kind!r}")
        C = self.n_classes
        limit = 10 if self.kind == "foreground-color" else len(SHAPES)
        if not 2 <= C <= limit:
            raise ContractError(f"n_classes must lie in [2, {limit}]")
        if self.assignment is None:
            self.assignment = list(range(C))
        if self.shift is None:
            self.shift = [(c - 1) % C for c in range(C)]
        if self.ood_pool is None:
            if self.kind == "foreground-color":
                self.ood_pool = list(range(len(OOD_COLORS)))
            else:
                self.ood_pool = list(range(C, min(2 * C, N_TEXTURES)))
        if not 0.0 <= self.strength <= 1.0:
            raise ContractError("confounder strength must lie in [0, 1]")
        if len(self.assignment) != C or len(set(self.assignment)) != C:
            raise ContractError("assignment must give each class a distinct bias")
        if sorted(self.shift) != list(range(C)):
            raise ContractError("shift must be a permutation of the classes")
        if any(self.shift[c] == c for c in range(C)):
            raise ContractError("shift permutation has a fixed point")
        if not self.ood_pool:
            raise ContractError("OOD bias pool is empty")
        if self.kind == "background-texture":
            if set(self.ood_pool) & set(self.assignment):
                raise ContractError("OOD textures overlap the training assignment")
            if max(self.assignment + self.ood_pool) >= N_TEXTURES:
                raise ContractError(f"texture ids must be < {N_TEXTURES}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Split:
    images: np.ndarray                 # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray                 # (N,) int64
    bias: np.ndarray                   # (N,) bias id, -1 for a random color
    instances: np.ndarray              # (N,) foreground instance id
    masks: np.ndarray | None = None    # (N, H, W) float32, 1 = foreground
    debiased: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)


@dataclass
class BiasedDataset:
    kind: str
    n_classes: int
    image_shape: tuple
    spec: BiasSpec
    splits: dict[str, Split] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Split:
        return self.splits[name]


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


# -- glyphs -------------------------------------------------------------------

def glyph_bitmap(c: int) -> np.ndarray:
    return np.array([[ch == "1" for ch in row] for row in _GLYPH_ROWS[c]], dtype=np.float64)


def render_glyph(c: int, rng: np.random.Generator, size: int = 28) -> np.ndarray:
    """One jittered, elastically distorted grayscale instance of glyph ``c`` in [0, 1]."""
    cell = 3
    big = np.kron(glyph_bitmap(c), np.ones((cell, cell)))  # 21 x 15
    canvas = np.zeros((size, size))
    r0, c0 = (size - big.shape[0]) // 2, (size - big.shape[1]) // 2
    canvas[r0:r0 + big.shape[0], c0:c0 + big.shape[1]] = big
    angle = np.deg2rad(rng.uniform(-20, 20))
    scale = rng.uniform(0.8, 1.15)
    shear = rng.uniform(-0.3, 0.3)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    mat = rot @ np.array([[1.0, shear], [0.0, 1.0]]) / scale
    center = np.array([size / 2 - 0.5, size / 2 - 0.5])
    shift = rng.uniform(-3.0, 3.0, size=2)
    offset = center - mat @ (center + shift)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    coords = np.einsum("ij,jhw->ihw", mat, np.stack([yy, xx])) + offset[:, None, None]
    # smooth random displacement field
    disp = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(2, size, size)), (0, 4, 4))
    disp *= rng.uniform(1.0, 2.5) / max(np.abs(disp).max(), 1e-8)
    img = ndimage.map_coordinates(canvas, coords + disp, order=1, mode="constant")
    width = rng.integers(0, 3)
    if width == 0:
        img = ndimage.grey_erosion(img, size=(2, 1))
    elif width == 2:
        img = ndimage.grey_dilation(img, size=(2, 2))
    img = ndimage.gaussian_filter(img, rng.uniform(0.4, 1.0))
    img *= rng.uniform(0.7, 1.0) / max(img.max(), 1e-8)
    return np.clip(img, 0.0, 1.0)


def _random_color(rng: np.random.Generator) -> np.ndarray:
    c = rng.uniform(0.0, 1.0, size=3)
    return c / max(c.max(), 1e-8) * rng.uniform(0.5, 1.0)


def _colorize(gray: np.ndarray, color: np.ndarray) -> np.ndarray:
    return (gray[None] * np.asarray(color)[:, None, None]).astype(np.float32)


def _counts(counts) -> dict[str, int]:
    if isinstance(counts, dict):
        out = {"train": counts.get("train", 500), "val": counts.get("val", 100),
               "test": counts.get("test", 100)}
    else:
        train, val, test = counts
        out = {"train": train, "val": val, "test": test}
    if any(v < 0 for v in out.values()):
        raise ContractError("sample counts must be non-negative")
    return out


def gen_colored_glyphs(spec: BiasSpec, counts=(500, 100, 100), mnist=None) -> BiasedDataset:
    """Colored-glyph dataset; ``counts`` are per class for (train, val, test).

    ``mnist`` optionally supplies ``(train_images, train_labels, test_images,
    test_labels)`` grayscale foregrounds in place of procedural glyphs.
    """
    if spec.kind != "foreground-color":
        raise ContractError("gen_colored_glyphs needs a foreground-color spec")
    n = _counts(counts)
    C = spec.n_classes
    pools = None
    if mnist is not None:
        tr_x, tr_y, te_x, te_y = mnist
        pools = {"fit": (np.asarray(tr_x), np.asarray(tr_y)), "test": (np.asarray(te_x), np.asarray(te_y))}
    colors = TRAIN_COLORS[spec.assignment]
    ds = BiasedDataset(spec.kind, C, (3, 28, 28), spec)

    def foregrounds(group: str, per_class: int, first_instance: int):
        grays, labels, inst = [], [], []
        for c in range(C):
            if pools is not None:
                px, py = pools["fit" if group != "test" else "test"]
                idx = np.flatnonzero(py == c)
                offset = n["train"] if group == "val" else 0
                if len(idx) < offset + per_class:
                    raise ContractError(f"not enough MNIST samples of class {c}")
                chosen = idx[offset:offset + per_class]
            for i in range(per_class):
                iid = first_instance + c * per_class + i
                if pools is not None:
                    g = np.asarray(px[chosen[i]], dtype=np.float64)
                else:
                    g = render_glyph(c, _rng(spec.seed, 1, iid))
                grays.append(g)
                labels.append(c)
                inst.append(iid)
        return grays, np.array(labels, dtype=np.int64), np.array(inst, dtype=np.int64)

    offsets = {"train": 0, "val": C * n["train"], "test": C * (n["train"] + n["val"])}
    for group in ("train", "val"):
        grays, labels, inst = foregrounds(group, n[group], offsets[group])
        imgs, bias = [], []
        for g, y, iid in zip(grays, labels, inst):
            r = _rng(spec.seed, 2, int(iid))
            if r.random() < spec.strength:
                imgs.append(_colorize(g, colors[y]))
                bias.append(spec.assignment[y])
            else:
                imgs.append(_colorize(g, _random_color(r)))
                bias.append(-1)
        ds.splits[group] = Split(_stack(imgs, (3, 28, 28)), labels, np.array(bias, dtype=np.int64), inst)

    grays, labels, inst = foregrounds("test", n["test"], offsets["test"])
    iid_imgs = [_colorize(g, colors[y]) for g, y in zip(grays, labels)]
    ds.splits["test-iid"] = Split(_stack(iid_imgs, (3, 28, 28)), labels,
                                  np.array([spec.assignment[y] for y in labels], dtype=np.int64), inst)
    ood_ids = np.array([spec.ood_pool[_rng(spec.seed, 3, int(i)).integers(len(spec.ood_pool))] for i in inst],
                       dtype=np.int64)
    ood_imgs = [_colorize(g, OOD_COLORS[b]) for g, b in zip(grays, ood_ids)]
    ds.splits["test-ood"] = Split(_stack(ood_imgs, (3, 28, 28)), labels, ood_ids + 100, inst)
    shift_src = np.array([spec.shift[y] for y in labels], dtype=np.int64)
    shift_imgs = [_colorize(g, colors[s]) for g, s in zip(grays, shift_src)]
    ds.splits["test-shift"] = Split(_stack(shift_imgs, (3, 28, 28)), labels,
                                    np.array([spec.assignment[s] for s in shift_src], dtype=np.int64), inst)
    return ds


def _stack(items, shape) -> np.ndarray:
    if not items:
        return np.zeros((0,) + tuple(shape), dtype=np.float32)
    return np.stack(items).astype(np.float32)


# -- background bias --------------------------------------------------------------

def shape_mask(kind: str, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Boolean mask of one randomly placed, sized and rotated shape."""
    radius = rng.uniform(*SHAPE_RADIUS) * size
    cy, cx = rng.uniform(radius + size / 32, size - radius - size / 32, size=2)
    angle = np.deg2rad(rng.uniform(-15, 15))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = (yy - cy) / radius, (xx - cx) / radius
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy
    r = np.hypot(u, v)
    if kind == "disk":
        m = r <= 0.9
    elif kind == "square":
        m = np.maximum(abs(u), abs(v)) <= 0.75
    elif kind == "triangle":
        m = (v <= 0.7) & (1.6 * abs(u) <= v + 0.95)
    elif kind == "cross":
        m = ((abs(u) <= 0.28) & (abs(v) <= 0.95)) | ((abs(v) <= 0.28) & (abs(u) <= 0.95))
    elif kind == "ring":
        m = (r <= 0.95) & (r >= 0.55)
    elif kind == "diamond":
        m = abs(u) + abs(v) <= 1.0
    elif kind == "tee":
        m = ((abs(u) <= 0.25) & (v >= -0.5) & (v <= 0.95)) | ((v >= -0.95) & (v <= -0.5) & (abs(u) <= 0.95))
    elif kind == "crescent":
        m = (r <= 0.95) & (np.hypot(u - 0.45, v) > 0.75)
    else:
        raise ContractError(f"unknown shape {kind!r}")
    return m


def _texture_params(tid: int) -> dict:
    r = np.random.default_rng([7919, tid])
    hues = r.permutation(6)[:2]
    palette = np.array([(0.9, 0.2, 0.2), (0.2, 0.8, 0.2), (0.2, 0.3, 0.9),
                        (0.9, 0.8, 0.1), (0.8, 0.2, 0.8), (0.1, 0.8, 0.8)])
    return {
        "pattern": ("stripes", "checker", "dots", "waves")[tid % 4],
        "angle": float(r.uniform(0, np.pi)),
        "period": float(r.uniform(5, 12)),
        "color_a": palette[hues[0]] * r.uniform(0.6, 1.0),
        "color_b": palette[hues[1]] * r.uniform(0.1, 0.5),
    }


def texture(tid: int, rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """(3, size, size) texture of id ``tid``; ``rng`` only sets the phase."""
    p = _texture_params(tid)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    ca, sa = np.cos(p["angle"]), np.sin(p["angle"])
    u = (ca * xx + sa * yy) * 2 * np.pi / p["period"] + phase[0]
    v = (-sa * xx + ca * yy) * 2 * np.pi / p["period"] + phase[1]
    if p["pattern"] == "stripes":
        t = (np.sin(u) > 0).astype(np.float64)
    elif p["pattern"] == "checker":
        t = ((np.sin(u) > 0) ^ (np.sin(v) > 0)).astype(np.float64)
    elif p["pattern"] == "dots":
        t = ((np.sin(u) * np.sin(v)) > 0.5).astype(np.float64)
    else:
        t = 0.5 + 0.5 * np.sin(u + 2.0 * np.sin(v / 2))
    img = t[None] * p["color_a"][:, None, None] + (1 - t[None]) * p["color_b"][:, None, None]
    return img.astype(np.float32)


def _fg_color(rng) -> np.ndarray:
    c = rng.uniform(0.3, 1.0, size=3)
    return c


def gen_background_bias(spec: BiasSpec, counts=(400, 80, 80), size: int = 64,
                        with_debiased: bool = True) -> BiasedDataset:
    """Shapes over class-correlated textures, with masks and noise-background copies."""
    if spec.kind != "background-texture":
        raise ContractError("gen_background_bias needs a background-texture spec")
    if N_TEXTURES < spec.n_classes + len(spec.ood_pool):
        raise ContractError("texture pool too small for classes plus OOD pool")
    n = _counts(counts)
    C = spec.n_classes
    ds = BiasedDataset(spec.kind, C, (3, size, size), spec)
    offsets = {"train": 0, "val": C * n["train"], "test": C * (n["train"] + n["val"])}

    def instance(iid: int, c: int):
        r = _rng(spec.seed, 11, iid)
        m = shape_mask(SHAPES[c], r, size)
        return m, _fg_color(r)

    def compose(mask, color, tid, iid, salt):
        bg = texture(tid, _rng(spec.seed, salt, iid), size)
        fg = np.broadcast_to(color[:, None, None], bg.shape).astype(np.float32)
        return np.where(mask[None], fg, bg).astype(np.float32)

    def finish(name, imgs, labels, bias, inst, masks):
        split = Split(_stack(imgs, (3, size, size)), labels, np.asarray(bias, dtype=np.int64), inst,
                      masks=_stack([m.astype(np.float32) for m in masks], (size, size)))
        if with_debiased:
            split.debiased = np.stack([
                debias_background(x, m, _rng(spec.seed, 17, int(i)))
                for x, m, i in zip(split.images, split.masks, inst)
            ]) if len(inst) else np.zeros_like(split.images)
        ds.splits[name] = split

    for group in ("train", "val"):
        imgs, labels, bias, inst, masks = [], [], [], [], []
        for c in range(C):
            for i in range(n[group]):
                iid = offsets[group] + c * n[group] + i
                m, color = instance(iid, c)
                r = _rng(spec.seed, 12, iid)
                tid = spec.assignment[c] if r.random() < spec.strength else spec.assignment[r.integers(C)]
                imgs.append(compose(m, color, tid, iid, 13))
                labels.append(c), bias.append(tid), inst.append(iid), masks.append(m)
        finish(group, imgs, np.array(labels, dtype=np.int64), bias, np.array(inst, dtype=np.int64), masks)

    base = []
    for c in range(C):
        for i in range(n["test"]):
            iid = offsets["test"] + c * n["test"] + i
            base.append((iid, c) + instance(iid, c))
    labels = np.array([b[1] for b in base], dtype=np.int64)
    inst = np.array([b[0] for b in base], dtype=np.int64)
    masks = [b[2] for b in base]
    variants = {
        "test-iid": [spec.assignment[c] for _, c, _, _ in base],
        "test-ood": [spec.ood_pool[_rng(spec.seed, 14, iid).integers(len(spec.ood_pool))] for iid, *_ in base],
        "test-shift": [spec.assignment[spec.shift[c]] for _, c, _, _ in base],
    }
    for name, tids in variants.items():
        imgs = [compose(m, color, tid, iid, 15) for (iid, _, m, color), tid in zip(base, tids)]
        finish(name, imgs, labels, tids, inst, masks)
    return ds


def debias_background(x, mask, rng: np.random.Generator) -> np.ndarray:
    """Replace background pixels (mask == 0) by i.i.d. uniform noise on [0, 1]."""
    x = np.asarray(x)
    mask = np.asarray(mask)
    if mask.shape != x.shape[-2:] and mask.shape != x.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match image {x.shape}")
    fg = np.broadcast_to(mask.astype(bool), x.shape)
    noise = rng.uniform(0.0, 1.0, size=x.shape).astype(x.dtype)
    return np.where(fg, x, noise)


# -- MNIST IDX ----------------------------------------------------------------------

_IDX_IMAGES, _IDX_LABELS = 0x00000803, 0x00000801


def _read_bytes(path) -> bytes:
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf: bytes, expected_magic: int) -> np.ndarray:
    if len(buf) < 4:
        raise FormatError("IDX header truncated")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise FormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise FormatError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    n = int(np.prod(dims))
    if len(buf) - header != n:
        raise FormatError(f"IDX payload has {len(buf) - header} bytes, header says {n}")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read IDX image/label files (optionally gzipped): images scaled to [0, 1]."""
    images = parse_idx(_read_bytes(images_path), _IDX_IMAGES)
    labels = parse_idx(_read_bytes(labels_path), _IDX_LABELS)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    return images.astype(np.float32) / 255.0, labels.astype(np.int64)


# -- on-disk layout -------------------------------------------------------------------

def save_dataset(ds: BiasedDataset, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name, split in ds.splits.items():
        sd = d / name
        sd.mkdir(exist_ok=True)
        serialize.save(sd / "images.xtsr", split.images)
        serialize.save(sd / "labels.xtsr", split.labels)
        serialize.save(sd / "bias.xtsr", split.bias)
        serialize.save(sd / "instances.xtsr", split.instances)
        files = ["images.xtsr", "labels.xtsr", "bias.xtsr", "instances.xtsr"]
        if split.masks is not None:
            serialize.save(sd / "masks.xtsr", split.masks)
            files.append("masks.xtsr")
        if split.debiased is not None:
            serialize.save(sd / "debiased.xtsr", split.debiased)
            files.append("debiased.xtsr")
        splits[name] = {"count": len(split), "files": files}
    manifest = {"format": "xdistill-dataset", "version": 1, "kind": ds.kind,
                "n_classes": ds.n_classes, "image_shape": list(ds.image_shape),
                "spec": ds.spec.to_dict(), "splits": splits}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_dataset(directory: str | os.PathLike) -> BiasedDataset:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read dataset manifest in {d}: {exc}") from exc
    if manifest.get("format") != "xdistill-dataset":
        raise FormatError(f"{d} is not a dataset directory")
    spec = BiasSpec(**manifest["spec"])
    ds = BiasedDataset(manifest["kind"], manifest["n_classes"], tuple(manifest["image_shape"]), spec)
    for name, info in manifest["splits"].items():
        sd = d / name
        files = set(info["files"])
        split = Split(
            images=serialize.load(sd / "images.xtsr"),
            labels=serialize.load(sd / "labels.xtsr").astype(np.int64),
            bias=serialize.load(sd / "bias.xtsr").astype(np.int64),
            instances=serialize.load(sd / "instances.xtsr").astype(np.int64),
            masks=serialize.load(sd / "masks.xtsr") if "masks.xtsr" in files else None,
            debiased=serialize.load(sd / "debiased.xtsr") if "debiased.xtsr" in files else None,
        )
        if len(split) != info["count"]:
            raise FormatError(f"split {name} has {len(split)} samples, manifest says {info['count']}")
        ds.splits[name] = split
    return ds


def generate(spec: BiasSpec, counts=None, mnist=None) -> BiasedDataset:
    if spec.kind == "foreground-color":
        return gen_colored_glyphs(spec, counts or (500, 100, 100), mnist=mnist)
    return gen_background_bias(spec, counts or (400, 80, 80))
