"""Scikit-learn style wrappers around the training loops."""

from __future__ import annotations

import json
import logging
from dataclasses import fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .distill import DistillConfig, Distiller, LossReport
from .exceptions import ContractError, DimensionError, NumericFaultError
from .explain import METHODS, explain
from .nn import (Network, SGDMomentum, build_network, cnn_spec,
                 copy_and_freeze_last_layer)

logger = logging.getLogger(__name__)


def check_images(X, shape=None, dtype=np.float32) -> np.ndarray:
    """Validate a (N, C, H, W) image batch; optionally match per-sample ``shape``."""
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_min_samples=1)
    if X.ndim != 4:
        raise DimensionError(f"expected (N, C, H, W) images, got shape {X.shape}")
    if shape is not None and tuple(X.shape[1:]) != tuple(shape):
        raise DimensionError(f"expected images of shape {tuple(shape)}, got {X.shape[1:]}")
    return X


def check_labels(y, n, n_classes=None) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ContractError("labels must be integers")
    y = y.astype(np.int64)
    if y.min(initial=0) < 0 or (n_classes is not None and y.max(initial=0) >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    return y


def accuracy(net: Network, X, y, batch_size: int = 256) -> float:
    """Argmax accuracy in percent."""
    if len(y) == 0:
        return float("nan")
    pred = net.predict_logits(np.asarray(X, dtype=net.dtype), batch_size).argmax(axis=1)
    return 100.0 * float(np.mean(pred == np.asarray(y)))


class JsonlLog:
    """Append-only JSON-lines sink; a no-op when ``path`` is None."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict):
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def cross_entropy(logits, y, n_classes: int):
    target = ad.as_tensor(ad.one_hot(y, n_classes, logits.dtype))
    return -ad.tsum(ad.log_softmax(logits) * target) * (1.0 / logits.shape[0])


def _epochs(n, batch_size, rng):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


class _Selector:
    """Keeps the state with the best IID-validation accuracy (first wins ties)."""

    def __init__(self, net: Network, X_val, y_val):
        self.net, self.X_val, self.y_val = net, X_val, y_val
        self.best_state = net.state_dict()
        self.best_epoch = 0
        self.best_acc = self._score()
        self.history = [self.best_acc]

    def _score(self):
        if self.X_val is None or len(self.y_val) == 0:
            return float("nan")
        return accuracy(self.net, self.X_val, self.y_val)

    def update(self, epoch: int):
        acc = self._score()
        self.history.append(acc)
        if np.isnan(self.best_acc) or acc > self.best_acc or self.X_val is None:
            self.best_acc, self.best_epoch = acc, epoch
            self.best_state = self.net.state_dict()
        return acc

    def restore(self):
        self.net.load_state_dict(self.best_state)


def train_erm(net: Network, X, y, X_val=None, y_val=None, *, epochs=30, lr=0.01, momentum=0.9,
              clip_norm=1.0, weight_decay=0.0, batch_size=64, seed=0, log=None, eval_every=1):
    """Softmax cross-entropy training; returns ``(best_epoch, val_history)``.

    The network ends in the state with the best validation accuracy.  Without a
    validation set the last epoch is kept.  A non-finite loss aborts the run.
    """
    log = log if isinstance(log, JsonlLog) else JsonlLog(log)
    rng = np.random.default_rng(seed)
    params = net.trainable_parameters()
    opt = SGDMomentum(params, lr, momentum, clip_norm, weight_decay)
    sel = _Selector(net, X_val, y_val)
    step = 0
    for epoch in range(1, epochs + 1):
        for idx in _epochs(len(X), batch_size, rng):
            step += 1
            try:
                with ad.enable_grad():
                    loss = cross_entropy(net(X[idx], training=True), y[idx], net.n_classes)
                norm = opt.step(ad.grad(loss, params))
            except NumericFaultError as exc:
                log.write({**LossReport(step, None, [], skipped=True, error=str(exc)).to_dict(),
                           "epoch": epoch})
                raise NumericFaultError(f"training diverged at step {step}: {exc}") from exc
            log.write({**LossReport(step, float(loss.item()), [], grad_norm=norm).to_dict(), "epoch": epoch})
        if epoch % eval_every == 0 or epoch == epochs:
            acc = sel.update(epoch)
            log.write({"epoch": epoch, "val_accuracy": acc})
    sel.restore()
    return sel.best_epoch, sel.history


def distill_student(distiller: Distiller, X, X_teacher=None, X_val=None, y_val=None, *,
                    epochs=None, log=None, eval_every=1):
    """Epoch loop over :meth:`Distiller.step`; returns ``(best_epoch, val_history)``."""
    cfg = distiller.cfg
    log = log if isinstance(log, JsonlLog) else JsonlLog(log)
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng([cfg.seed, 1])
    sel = _Selector(distiller.student, X_val, y_val)
    for epoch in range(1, epochs + 1):
        for idx in _epochs(len(X), cfg.batch_size, rng):
            xt = None if X_teacher is None else X_teacher[idx]
            report = distiller.step(X[idx], xt)
            log.write({**report.to_dict(), "epoch": epoch})
        if epoch % eval_every == 0 or epoch == epochs:
            acc = sel.update(epoch)
            log.write({"epoch": epoch, "val_accuracy": acc})
    sel.restore()
    return sel.best_epoch, sel.history


class _NetworkClassifier(ClassifierMixin, BaseEstimator):
    def _check_fitted(self):
        check_is_fitted(self, "network_")

    def predict_logits(self, X):
        self._check_fitted()
        return self.network_.predict_logits(check_images(X, self.network_.input_shape, self.network_.dtype))

    def predict_proba(self, X):
        z = self.predict_logits(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.predict_logits(X).argmax(axis=1)


class ERMClassifier(_NetworkClassifier):
    """Small CNN trained by plain empirical risk minimization.

    ``channels``/``hidden``/``batchnorm`` describe the architecture (see
    :func:`cnn_spec`).  Validation data passed to :meth:`fit` selects the
    checkpoint; it never sees test splits.
    """

    def __init__(self, channels=(8, 16), hidden=(), batchnorm=False, bias=True, n_classes=None,
                 epochs=30, lr=0.01, momentum=0.9, clip_norm=1.0, weight_decay=0.0,
                 batch_size=64, seed=0, dtype="float32", log_path=None):
        self.channels = channels
        self.hidden = hidden
        self.batchnorm = batchnorm
        self.bias = bias
        self.n_classes = n_classes
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.seed = seed
        self.dtype = dtype
        self.log_path = log_path

    def build(self, input_shape, n_classes) -> Network:
        spec = cnn_spec(self.channels, self.hidden, self.batchnorm, self.bias)
        return build_network(spec, input_shape, n_classes, seed=self.seed, dtype=np.dtype(self.dtype))

    def fit(self, X, y, X_val=None, y_val=None):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0, lr > 0 and batch_size >= 1")
        X = check_images(X, dtype=np.dtype(self.dtype))
        n_classes = self.n_classes or int(np.max(y)) + 1
        y = check_labels(y, len(X), n_classes)
        if X_val is not None:
            X_val = check_images(X_val, X.shape[1:], np.dtype(self.dtype))
            y_val = check_labels(y_val, len(X_val), n_classes)
        self.network_ = self.build(X.shape[1:], n_classes)
        self.classes_ = np.arange(n_classes)
        self.best_epoch_, self.val_history_ = train_erm(
            self.network_, X, y, X_val, y_val, epochs=self.epochs, lr=self.lr, momentum=self.momentum,
            clip_norm=self.clip_norm, weight_decay=self.weight_decay, batch_size=self.batch_size,
            seed=self.seed, log=self.log_path)
        return self


_DISTILL_FIELDS = [f.name for f in fields(DistillConfig)]


class ExplanationDistiller(_NetworkClassifier):
    """Student trained to match a frozen teacher's explanations.

    ``teacher`` is a :class:`Network`.  Without DL-DL the teacher's last layer
    is copied into the student and frozen, so only the explanation loss
    shapes the student.  ``y`` is ignored by the loss; validation labels pick
    the checkpoint.
    """

    def __init__(self, teacher=None, method="lrp", channels=(8, 16), hidden=(), batchnorm=False,
                 bias=True, floor=8, eps_lo=1e-3, eps_hi=1e-2, p_top=0.5, dldl=False,
                 output_weight=1.0, temperature=1.0, teacher_input="same", init_from_teacher=False, metric="l1", lr=0.01,
                 momentum=0.9, clip_norm=1.0, weight_decay=0.0, epochs=30, batch_size=64, seed=0,
                 dtype="float32", log_path=None):
        self.teacher = teacher
        self.method = method
        self.channels = channels
        self.hidden = hidden
        self.batchnorm = batchnorm
        self.bias = bias
        self.floor = floor
        self.eps_lo = eps_lo
        self.eps_hi = eps_hi
        self.p_top = p_top
        self.dldl = dldl
        self.output_weight = output_weight
        self.temperature = temperature
        self.teacher_input = teacher_input
        self.init_from_teacher = init_from_teacher
        self.metric = metric
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.dtype = dtype
        self.log_path = log_path

    def distill_config(self) -> DistillConfig:
        params = self.get_params(deep=False)
        return DistillConfig(**{k: params[k] for k in _DISTILL_FIELDS if k in params})

    def fit(self, X, y=None, X_teacher=None, X_val=None, y_val=None):
        if not isinstance(self.teacher, Network):
            raise ContractError("ExplanationDistiller needs a teacher Network")
        cfg = self.distill_config()
        dtype = np.dtype(self.dtype)
        teacher = self.teacher.clone().freeze()
        X = check_images(X, teacher.input_shape, dtype)
        if cfg.teacher_input == "debiased":
            if X_teacher is None:
                raise ContractError("debiased mode needs X_teacher")
        if X_teacher is not None:
            X_teacher = check_images(X_teacher, teacher.input_shape, teacher.dtype)
            if len(X_teacher) != len(X):
                raise DimensionError("X_teacher must align with X")
        if X_val is not None:
            X_val = check_images(X_val, teacher.input_shape, dtype)
            y_val = check_labels(y_val, len(X_val), teacher.n_classes)
        if cfg.init_from_teacher:
            student = teacher.clone().freeze(False)
        else:
            spec = cnn_spec(self.channels, self.hidden, self.batchnorm, self.bias)
            student = build_network(spec, teacher.input_shape, teacher.n_classes, seed=self.seed, dtype=dtype)
        if not cfg.dldl and cfg.method != "output" and cfg.freeze_last_layer:
            copy_and_freeze_last_layer(teacher, student)
        self.network_ = student
        self.classes_ = np.arange(teacher.n_classes)
        self.distiller_ = Distiller(teacher, student, cfg)
        self.best_epoch_, self.val_history_ = distill_student(
            self.distiller_, X, X_teacher, X_val, y_val, log=self.log_path)
        return self


class HeatmapTransformer(TransformerMixin, BaseEstimator):
    """Maps images to explanation heatmaps of a fixed network.

    ``k=None`` explains each sample's predicted class.
    """

    def __init__(self, network=None, method="lrp", eps=0.0, k=None):
        self.network = network
        self.method = method
        self.eps = eps
        self.k = k

    def fit(self, X=None, y=None):
        if not isinstance(self.network, Network):
            raise ContractError("HeatmapTransformer needs a Network")
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}")
        self.network_ = self.network
        return self

    def transform(self, X):
        check_is_fitted(self, "network_")
        net = self.network_
        X = check_images(X, net.input_shape, net.dtype)
        k = self.k
        if k is None:
            k = net.predict_logits(X).argmax(axis=1)
        return explain(net, X, k, self.method, eps=self.eps, create_graph=False).numpy()
