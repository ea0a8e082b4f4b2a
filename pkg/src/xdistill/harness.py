"""Experiment configuration and the commands behind the CLI."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import biasdata
from .distill import DistillConfig, Distiller
from .estimators import accuracy, distill_student, train_erm
from .exceptions import ContractError, FormatError
from .explain import METHODS, export_heatmap, explain
from .nn import Network, build_network, cnn_spec, copy_and_freeze_last_layer, load_network, save_network

SPLIT_KEYS = {"iid": "test-iid", "ood": "test-ood", "shift": "test-shift"}


@dataclass
class DataConfig:
    kind: str = "foreground-color"
    n_classes: int = 10
    strength: float = 1.0
    counts: list[int] | None = None        # per class: train, val, test
    assignment: list[int] | None = None
    shift: list[int] | None = None
    ood_pool: list[int] | None = None
    mnist_dir: str | None = None

    def bias_spec(self, seed: int) -> biasdata.BiasSpec:
        return biasdata.BiasSpec(kind=self.kind, n_classes=self.n_classes, assignment=self.assignment,
                                 strength=self.strength, shift=self.shift, ood_pool=self.ood_pool, seed=seed)


@dataclass
class TrainConfig:
    channels: list[int] = field(default_factory=lambda: [8, 16])
    hidden: list[int] = field(default_factory=list)
    batchnorm: bool = False
    bias: bool = True
    epochs: int = 20
    lr: float = 0.03
    momentum: float = 0.9
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    batch_size: int = 64
    inputs: str = "images"                  # or "debiased"
    dataset: str | None = None              # defaults to the experiment dataset

    def network(self, input_shape, n_classes, seed) -> Network:
        spec = cnn_spec(tuple(self.channels), tuple(self.hidden), self.batchnorm, self.bias)
        return build_network(spec, input_shape, n_classes, seed=seed)


@dataclass
class ExplainConfig:
    split: str = "test-iid"
    samples: list[int] = field(default_factory=lambda: [0])
    target: int | None = None               # None explains the predicted class
    eps: float = 0.0
    format: str = "png"
    colormap: str = "diverging"


@dataclass
class ExperimentConfig:
    """Everything one pipeline stage needs; loaded from a JSON document.

    Paths are resolved relative to the working directory.  ``seed`` drives
    data generation, the teacher initialization (``seed``) and the student
    initialization and sampling (``seed + 1``).
    """

    seed: int = 0
    out: str = "out"
    dataset: str | None = None
    teacher_checkpoint: str | None = None
    model: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TrainConfig = field(default_factory=TrainConfig)
    student: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=15))
    distill: dict = field(default_factory=dict)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    eval_every: int = 1

    def distill_config(self) -> DistillConfig:
        s = self.student
        base = dict(lr=s.lr, momentum=s.momentum, clip_norm=s.clip_norm, weight_decay=s.weight_decay,
                    epochs=s.epochs, batch_size=s.batch_size, seed=self.seed + 1)
        base.update(self.distill)
        known = {f.name for f in fields(DistillConfig)}
        unknown = set(base) - known
        if unknown:
            raise ContractError(f"unknown distill fields: {sorted(unknown)}")
        return DistillConfig(**base)

    def validate(self):
        for name, t in (("teacher", self.teacher), ("student", self.student)):
            if t.epochs < 0 or t.lr <= 0 or t.batch_size < 1 or t.clip_norm <= 0:
                raise ContractError(f"{name}: epochs >= 0, lr > 0, batch_size >= 1, clip_norm > 0 required")
            if t.inputs not in ("images", "debiased"):
                raise ContractError(f"{name}.inputs must be 'images' or 'debiased'")
            if not t.channels:
                raise ContractError(f"{name}: at least one conv block is required")
        if self.eval_every < 1:
            raise ContractError("eval_every must be >= 1")
        self.distill_config()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"data": DataConfig, "teacher": TrainConfig, "student": TrainConfig, "explain": ExplainConfig}


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ContractError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ContractError(f"unknown {where} fields: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ContractError(f"bad {where}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc)
    sections = {k: _build(cls, doc.pop(k), k) for k, cls in _SECTIONS.items() if k in doc}
    if "student" not in sections:
        sections["student"] = TrainConfig(epochs=15)
    cfg = _build(ExperimentConfig, doc, "config")
    return replace(cfg, **sections)


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a JSON config (or defaults) and apply non-None keyword overrides."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ContractError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = config_from_dict(doc)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    method = overrides.pop("method", None)
    if method is not None:
        cfg.distill = {**cfg.distill, "method": method}
    return replace(cfg, **overrides).validate()


# -- metrics ---------------------------------------------------------------------

@dataclass
class MetricsReport:
    iid: float
    ood: float
    shift: float
    gap_ood: float
    gap_shift: float
    checkpoint: str | None = None
    log: str | None = None
    inputs: str = "images"
    n_samples: dict = field(default_factory=dict)

    @classmethod
    def from_accuracies(cls, iid, ood, shift, **kw) -> "MetricsReport":
        for a in (iid, ood, shift):
            if not 0.0 <= a <= 100.0:
                raise ContractError(f"accuracy {a} outside [0, 100]")
        return cls(iid, ood, shift, iid - ood, iid - shift, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "accuracy", "gap"])
        w.writerow(["iid", repr(self.iid), "0.0"])
        w.writerow(["ood", repr(self.ood), repr(self.gap_ood)])
        w.writerow(["shift", repr(self.shift), repr(self.gap_shift)])
        return buf.getvalue()

    def write(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        (d / "metrics.csv").write_text(self.to_csv())
        return d


def evaluate(net: Network, ds: biasdata.BiasedDataset, inputs: str = "images", **kw) -> MetricsReport:
    """Argmax accuracy on the three test splits; model selection never reaches here."""
    if net.n_classes != ds.n_classes:
        raise ContractError(f"model has {net.n_classes} classes, dataset {ds.n_classes}")
    if tuple(net.input_shape) != tuple(ds.image_shape):
        raise ContractError(f"model expects {net.input_shape}, dataset has {ds.image_shape}")
    acc, counts = {}, {}
    for short, split in SPLIT_KEYS.items():
        s = ds[split]
        x = getattr(s, inputs)
        if x is None:
            raise ContractError(f"split {split} has no {inputs} tensor")
        acc[short] = accuracy(net, x, s.labels)
        counts[short] = len(s)
    return MetricsReport.from_accuracies(acc["iid"], acc["ood"], acc["shift"], inputs=inputs,
                                         n_samples=counts, **kw)


# -- commands --------------------------------------------------------------------

def _require(path, what):
    if path is None:
        raise ContractError(f"{what} path is required")
    if not Path(path).exists():
        raise ContractError(f"{what} {path} does not exist")
    return Path(path)


def _load_mnist(d):
    d = _require(d, "MNIST directory")

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (d / name).exists():
                return d / name
        raise ContractError(f"missing {stem} in {d}")

    tr = biasdata.load_mnist_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    te = biasdata.load_mnist_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    return tr[0], tr[1], te[0], te[1]


def cmd_gen_data(cfg: ExperimentConfig) -> Path:
    spec = cfg.data.bias_spec(cfg.seed)
    mnist = _load_mnist(cfg.data.mnist_dir) if cfg.data.mnist_dir else None
    counts = tuple(cfg.data.counts) if cfg.data.counts else None
    if mnist is not None and spec.kind != "foreground-color":
        raise ContractError("MNIST input only applies to foreground-color data")
    ds = biasdata.generate(spec, counts, mnist=mnist)
    return biasdata.save_dataset(ds, cfg.out)


def _write_model(net, out, best_epoch, history, cfg, log, metrics_ds, inputs="images"):
    out = Path(out)
    ckpt = f"epoch-{best_epoch}"
    save_network(net, out / "checkpoint", extra={"selected": ckpt, "val_history": history,
                                                 "config": cfg.to_dict()})
    report = evaluate(net, metrics_ds, inputs, checkpoint=ckpt, log=str(log))
    report.write(out)
    return report


def cmd_train_teacher(cfg: ExperimentConfig) -> MetricsReport:
    """ERM training on the teacher dataset; metrics on the experiment dataset."""
    t = cfg.teacher
    ds = biasdata.load_dataset(_require(t.dataset or cfg.dataset, "teacher dataset"))
    eval_ds = biasdata.load_dataset(_require(cfg.dataset, "dataset")) if cfg.dataset else ds
    train, val = ds["train"], ds["val"]
    x, xv = getattr(train, t.inputs), getattr(val, t.inputs)
    if x is None or xv is None:
        raise ContractError(f"dataset has no {t.inputs} tensors")
    net = t.network(ds.image_shape, ds.n_classes, cfg.seed)
    log = Path(cfg.out) / "train_log.jsonl"
    best, hist = train_erm(net, x, train.labels, xv, val.labels, epochs=t.epochs, lr=t.lr,
                           momentum=t.momentum, clip_norm=t.clip_norm, weight_decay=t.weight_decay,
                           batch_size=t.batch_size, seed=cfg.seed, log=log, eval_every=cfg.eval_every)
    return _write_model(net, cfg.out, best, hist, cfg, log, eval_ds)


def cmd_distill(cfg: ExperimentConfig) -> MetricsReport:
    """Distill a student from ``teacher_checkpoint`` on the experiment dataset."""
    dcfg = cfg.distill_config()
    teacher = load_network(_require(cfg.teacher_checkpoint, "teacher checkpoint")).freeze()
    ds = biasdata.load_dataset(_require(cfg.dataset, "dataset"))
    if teacher.n_classes != ds.n_classes or teacher.input_shape != tuple(ds.image_shape):
        raise ContractError("teacher does not match the dataset")
    train, val = ds["train"], ds["val"]
    x_teacher = None
    if dcfg.teacher_input == "debiased":
        x_teacher = train.debiased
        if x_teacher is None:
            raise ContractError("debiased teacher inputs requested but dataset has none")
    if dcfg.init_from_teacher:
        student = teacher.clone().freeze(False)
    else:
        student = cfg.student.network(ds.image_shape, ds.n_classes, cfg.seed + 1)
    if not dcfg.dldl and dcfg.method != "output" and dcfg.freeze_last_layer:
        copy_and_freeze_last_layer(teacher, student)
    log = Path(cfg.out) / "train_log.jsonl"
    distiller = Distiller(teacher, student, dcfg)
    best, hist = distill_student(distiller, train.images, x_teacher, val.images, val.labels,
                                 log=log, eval_every=cfg.eval_every)
    return _write_model(student, cfg.out, best, hist, cfg, log, ds)


def cmd_eval(cfg: ExperimentConfig, inputs: str = "images") -> MetricsReport:
    net = load_network(_require(cfg.model, "model"))
    ds = biasdata.load_dataset(_require(cfg.dataset, "dataset"))
    report = evaluate(net, ds, inputs, checkpoint=str(cfg.model))
    report.write(cfg.out)
    return report


def cmd_explain(cfg: ExperimentConfig) -> list[dict]:
    """Heatmaps for selected samples: image, raw XTSR and a min/max sidecar each."""
    e = cfg.explain
    method = cfg.distill.get("method", "lrp")
    if method not in METHODS:
        raise ContractError(f"cannot explain with method {method!r}")
    net = load_network(_require(cfg.model, "model"))
    ds = biasdata.load_dataset(_require(cfg.dataset, "dataset"))
    if e.split not in ds.splits:
        raise ContractError(f"unknown split {e.split!r}")
    split = ds[e.split]
    ids = np.asarray(e.samples, dtype=np.int64)
    if ids.size == 0 or ids.min() < 0 or ids.max() >= len(split):
        raise ContractError(f"sample ids must lie in [0, {len(split)})")
    x = split.images[ids].astype(net.dtype)
    logits = net.predict_logits(x)
    k = logits.argmax(axis=1) if e.target is None else np.full(len(ids), e.target)
    if np.any(k < 0) or np.any(k >= net.n_classes):
        raise ContractError(f"class must lie in [0, {net.n_classes})")
    maps = explain(net, x, k, method, eps=e.eps, create_graph=False).numpy()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, sid in enumerate(ids):
        stem = out / f"{e.split}_{sid}_{method}_class{int(k[i])}"
        meta = {"sample": int(sid), "split": e.split, "method": method, "class": int(k[i]),
                "label": int(split.labels[sid]), "logit": float(logits[i, k[i]])}
        written.append(export_heatmap(maps[i], stem, fmt=e.format, colormap=e.colormap, meta=meta))
    return written
