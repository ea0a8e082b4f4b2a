"""Explanation distillation: losses, class and epsilon sampling, and the training step."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractError, DimensionError, NumericFaultError
from .explain import INPUT_LEVEL, METHODS, explain
from .nn import Network, SGDMomentum

logger = logging.getLogger(__name__)

DISTILL_METHODS = METHODS + ("output",)


@dataclass
class DistillConfig:
    """Hyper-parameters of one distillation run.

    ``method`` is an explanation method or ``"output"`` (plain softmax
    distillation).  ``floor`` is the extent of the smallest pyramid scale.
    ``dldl`` trains the last layer only with the output loss (weighted by
    ``output_weight``) and every other layer only with the explanation loss.
    ``teacher_input`` is ``"same"`` or ``"debiased"``.  ``init_from_teacher``
    starts the student as an unfrozen copy of the teacher.
    """

    method: str = "lrp"
    floor: int = 8
    eps_lo: float = 1e-3
    eps_hi: float = 1e-2
    p_top: float = 0.5
    dldl: bool = False
    output_weight: float = 1.0
    temperature: float = 1.0
    teacher_input: str = "same"
    metric: str = "l1"
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    freeze_last_layer: bool = True
    init_from_teacher: bool = False

    def __post_init__(self):
        if self.method not in DISTILL_METHODS:
            raise ContractError(f"unknown method {self.method!r}")
        if not 0 < self.p_top < 1:
            raise ContractError("p_top must lie in (0, 1)")
        if not 0 < self.eps_lo <= self.eps_hi:
            raise ContractError("need 0 < eps_lo <= eps_hi")
        if self.floor < 1:
            raise ContractError("pyramid floor must be >= 1")
        if self.teacher_input not in ("same", "debiased"):
            raise ContractError("teacher_input must be 'same' or 'debiased'")
        if self.metric not in METRICS:
            raise ContractError(f"unknown metric {self.metric!r}")
        if self.temperature <= 0 or self.clip_norm <= 0 or self.lr <= 0:
            raise ContractError("temperature, clip_norm and lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    step: int
    loss: float | None
    per_scale: list[float]
    output_loss: float | None = None
    k: list[int] = field(default_factory=list)
    eps: list[float] = field(default_factory=list)
    grad_norm: float = 0.0
    dropped: int = 0
    skipped: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


# -- dissimilarities ---------------------------------------------------------

def _flat_l1(t: Tensor, batched: bool) -> Tensor:
    a = ad.tabs(t)
    return ad.tsum(a, axis=tuple(range(1, t.ndim))) if batched else ad.tsum(a)


def dissimilarity(gT, gS, batched: bool = False) -> Tensor:
    """L1 distance normalized by the geometric mean of the two L1 norms.

    ``||gT - gS||_1 / sqrt(||gT||_1 ||gS||_1)``; with ``batched=True`` one
    value per leading index.  Two all-zero maps give 0 (with a warning).
    """
    gT, gS = ad.as_tensor(gT), ad.as_tensor(gS)
    if gT.shape != gS.shape:
        raise DimensionError(f"heatmap shapes differ: {gT.shape} vs {gS.shape}")
    num = _flat_l1(gS - gT, batched)
    nT, nS = _flat_l1(gT, batched), _flat_l1(gS, batched)
    prod = nT * nS
    both_zero = (nT.data == 0) & (nS.data == 0)
    if np.any(both_zero):
        logger.warning("both heatmaps are all-zero; dissimilarity defined as 0")
        prod = prod + ad.as_tensor(both_zero.astype(prod.dtype))
    return num / ad.sqrt(prod)


def cosine_dissimilarity(gT, gS, batched: bool = False) -> Tensor:
    """1 - cosine similarity (optional metric)."""
    gT, gS = ad.as_tensor(gT), ad.as_tensor(gS)
    axes = tuple(range(1, gS.ndim)) if batched else None
    dot = ad.tsum(gT * gS, axis=axes)
    norm = ad.sqrt(ad.tsum(gT * gT, axis=axes) * ad.tsum(gS * gS, axis=axes))
    return 1.0 - dot / norm


def euclidean_dissimilarity(gT, gS, batched: bool = False) -> Tensor:
    """Squared Euclidean distance over the element count (optional metric)."""
    gT, gS = ad.as_tensor(gT), ad.as_tensor(gS)
    axes = tuple(range(1, gS.ndim)) if batched else None
    diff = gS - gT
    return ad.mean(diff * diff, axis=axes)


METRICS = {"l1": dissimilarity, "cosine": cosine_dissimilarity, "euclidean": euclidean_dissimilarity}


def pyramid_scales(extent: tuple[int, int] | int, floor: int = 8) -> int:
    """Number of scales M such that halving M-1 times reaches ``floor`` exactly."""
    H, W = (extent, extent) if isinstance(extent, int) else extent
    base = min(H, W)
    ratio = base / floor
    m = round(math.log2(ratio)) if ratio >= 1 else -1
    if m < 0 or floor * 2 ** m != base or H % 2 ** m or W % 2 ** m:
        raise DimensionError(f"extents {(H, W)} cannot be halved down to {floor}")
    return m + 1


def effective_floor(extent: tuple[int, int], floor: int) -> int:
    """Largest valid pyramid floor not above ``floor`` (the extent itself if none)."""
    H, W = extent
    f = min(floor, H, W)
    while f >= 1:
        try:
            pyramid_scales((H, W), f)
            return f
        except DimensionError:
            f -= 1
    return min(H, W)


def pyramidal_loss(gT, gS, floor: int = 8, metric: str = "l1", batched: bool = False):
    """Mean dissimilarity over average-pooled copies with kernels 1, 2, 4, ...

    Pools the last two axes.  Returns ``(loss, per_scale)`` where both are
    scalars, or per-sample vectors when ``batched``.
    """
    gT, gS = ad.as_tensor(gT), ad.as_tensor(gS)
    if gT.shape != gS.shape:
        raise DimensionError(f"heatmap shapes differ: {gT.shape} vs {gS.shape}")
    M = pyramid_scales(gS.shape[-2:], floor)
    d = METRICS[metric]
    per_scale = []
    for m in range(M):
        per_scale.append(d(ad.avg_pool2d(gT, 2 ** m), ad.avg_pool2d(gS, 2 ** m), batched=batched))
    total = per_scale[0]
    for term in per_scale[1:]:
        total = total + term
    return total * (1.0 / M), per_scale


# -- sampling ---------------------------------------------------------------

def select_class(teacher_logits, rng: np.random.Generator, p_top: float = 0.5) -> int:
    """Teacher argmax with probability ``p_top``, else a uniformly drawn other class."""
    logits = np.asarray(getattr(teacher_logits, "data", teacher_logits)).reshape(-1)
    C = logits.shape[0]
    if C < 2:
        raise ContractError("class selection needs at least two classes")
    top = int(np.argmax(logits))
    if rng.random() < p_top:
        return top
    j = int(rng.integers(C - 1))
    return j if j < top else j + 1


def select_classes(teacher_logits, rng: np.random.Generator, p_top: float = 0.5) -> np.ndarray:
    """Vectorized :func:`select_class` over a (B, C) batch."""
    logits = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    B, C = logits.shape
    if C < 2:
        raise ContractError("class selection needs at least two classes")
    top = np.argmax(logits, axis=1)
    take_top = rng.random(B) < p_top
    j = rng.integers(C - 1, size=B)
    other = np.where(j < top, j, j + 1)
    return np.where(take_top, top, other).astype(np.int64)


def sample_epsilon(eps_lo: float, eps_hi: float, rng: np.random.Generator, size=None):
    """Log-uniform draw on [eps_lo, eps_hi]."""
    if not 0 < eps_lo <= eps_hi:
        raise ContractError("need 0 < eps_lo <= eps_hi")
    if eps_lo == eps_hi:
        return eps_lo if size is None else np.full(size, eps_lo)
    return 10.0 ** rng.uniform(np.log10(eps_lo), np.log10(eps_hi), size=size)


# -- output distillation -------------------------------------------------------

def output_distillation_loss(teacher_logits, student_logits, temperature: float = 1.0) -> Tensor:
    """Cross-entropy of the student softmax against the teacher softmax, mean over the batch."""
    if temperature <= 0:
        raise ContractError("temperature must be positive")
    t = np.asarray(getattr(teacher_logits, "data", teacher_logits))
    s = ad.as_tensor(student_logits)
    if t.shape != s.shape:
        raise DimensionError(f"logit shapes differ: {t.shape} vs {s.shape}")
    if not np.isfinite(t).all():
        raise NumericFaultError("non-finite teacher logits")
    t = t.reshape(-1, t.shape[-1]) if t.ndim > 1 else t[None]
    s = ad.reshape(s, t.shape)
    z = t / temperature
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    logq = ad.log_softmax(s * (1.0 / temperature), axis=1)
    return -ad.tsum(ad.as_tensor(p.astype(s.dtype)) * logq) * (1.0 / t.shape[0])


# -- training step ---------------------------------------------------------------

class Distiller:
    """Holds the teacher/student pair, optimizer state and RNG across steps."""

    def __init__(self, teacher: Network, student: Network, cfg: DistillConfig):
        if not teacher.is_frozen:
            raise ContractError("teacher must be frozen before distillation")
        self.teacher, self.student, self.cfg = teacher, student, cfg
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        last = student.last_layer_index
        self.body_params = [p for i, l in enumerate(student.layers) if i != last and not l.frozen
                            for p in l.parameters()]
        self.last_params = [] if student.last_layer.frozen else student.last_layer.parameters()
        self.optimizer = SGDMomentum(self.body_params + self.last_params, cfg.lr, cfg.momentum,
                                     cfg.clip_norm, cfg.weight_decay)
        self.output_weight = cfg.output_weight
        self._calibrated = False
        self.dropped = 0

    def calibrate_output_weight(self, raw_loss: float) -> float:
        """Rescale the DL-DL output weight once so the weighted loss starts in [0.1, 10]."""
        if not self._calibrated and raw_loss > 0:
            weighted = raw_loss * self.output_weight
            if not 0.1 <= weighted <= 10.0:
                self.output_weight = float(np.clip(weighted, 0.1, 10.0) / raw_loss)
                logger.info("output weight calibrated to %g", self.output_weight)
        self._calibrated = True
        return self.output_weight

    def teacher_heatmaps(self, x_teacher, k, eps):
        return explain(self.teacher, x_teacher, k, self.cfg.method, eps=eps, create_graph=False)

    def _drop_degenerate(self, gT: Tensor, gS: Tensor):
        """Remove samples where exactly one of the two maps is all-zero.

        Their dissimilarity is unbounded and, for a ReLU-clamped student map,
        carries no gradient.  Raises if no sample is left.
        """
        axes = tuple(range(1, gS.ndim))
        zT = ~np.any(gT.data != 0, axis=axes)
        zS = ~np.any(gS.data != 0, axis=axes)
        bad = zT ^ zS
        self.dropped = int(bad.sum())
        if not self.dropped:
            return gT, gS
        if bad.all():
            raise NumericFaultError("every heatmap pair in the batch has one all-zero map")
        logger.info("dropping %d degenerate heatmap pairs", self.dropped)
        keep = np.flatnonzero(~bad)
        return ad.as_tensor(gT.data[keep]), gS[keep]

    def losses(self, x, x_teacher, k=None, eps=None):
        """Build the loss graph for one batch.

        Returns ``(explanation_loss or None, output_loss or None, per_scale, k, eps)``.
        """
        cfg = self.cfg
        x = np.asarray(x, dtype=self.student.dtype)
        x_teacher = np.asarray(x_teacher, dtype=self.teacher.dtype)
        t_logits = self.teacher.predict_logits(x_teacher, batch_size=len(x_teacher))
        with ad.enable_grad():
            s_logits = None
            out_loss = None
            if cfg.method == "output" or cfg.dldl:
                s_logits = self.student(x)
                out_loss = output_distillation_loss(t_logits, s_logits, cfg.temperature)
                if cfg.dldl:
                    out_loss = out_loss * self.calibrate_output_weight(float(out_loss.item()))
            if cfg.method == "output":
                return None, out_loss, [], np.zeros(0, dtype=np.int64), np.zeros(0)
            if k is None:
                k = select_classes(t_logits, self.rng, cfg.p_top)
            if eps is None:
                eps = (sample_epsilon(cfg.eps_lo, cfg.eps_hi, self.rng, size=len(x))
                       if cfg.method == "lrp" else np.zeros(len(x)))
            gT = self.teacher_heatmaps(x_teacher, k, eps).values
            gS = explain(self.student, x, k, cfg.method, eps=eps, create_graph=True).values
            gT, gS = self._drop_degenerate(gT, gS)
            floor = effective_floor(gS.shape[-2:], cfg.floor)
            per_sample, per_scale = pyramidal_loss(gT, gS, floor, cfg.metric, batched=True)
            loss = ad.mean(per_sample)
        return loss, out_loss, per_scale, k, eps

    def gradients(self, x, x_teacher, k=None, eps=None):
        """Per-loss gradient maps over ``body_params + last_params``.

        Under DL-DL the explanation loss is differentiated only with respect to
        the body and the output loss only with respect to the last layer; the
        remaining entries are exact zeros.
        """
        cfg = self.cfg
        loss, out_loss, per_scale, k, eps = self.losses(x, x_teacher, k, eps)
        params = self.body_params + self.last_params
        zeros = [np.zeros_like(p.data) for p in params]
        expl_grads, out_grads = list(zeros), list(zeros)
        nb = len(self.body_params)
        if cfg.method == "output":
            out_grads = [g.data for g in ad.grad(out_loss, params)]
        elif cfg.dldl:
            expl_grads[:nb] = [g.data for g in ad.grad(loss, self.body_params)]
            if self.last_params:
                out_grads[nb:] = [g.data for g in ad.grad(out_loss, self.last_params)]
        else:
            expl_grads = [g.data for g in ad.grad(loss, params)]
        return {"explanation": expl_grads, "output": out_grads, "loss": loss,
                "output_loss": out_loss, "per_scale": per_scale, "k": k, "eps": eps}

    def step(self, x, x_teacher=None) -> LossReport:
        cfg = self.cfg
        if x_teacher is None:
            if cfg.teacher_input == "debiased":
                raise ContractError("debiased mode needs teacher inputs")
            x_teacher = x
        self.step_count += 1
        try:
            g = self.gradients(x, x_teacher)
            total = [a + b for a, b in zip(g["explanation"], g["output"])]
            norm = self.optimizer.step(total)
        except NumericFaultError as exc:
            logger.warning("step %d skipped: %s", self.step_count, exc)
            return LossReport(self.step_count, None, [], skipped=True, error=str(exc))
        loss = g["loss"] if g["loss"] is not None else g["output_loss"]
        return LossReport(
            step=self.step_count,
            loss=float(loss.item()),
            per_scale=[float(np.mean(t.data)) for t in g["per_scale"]],
            output_loss=float(g["output_loss"].item()) if g["output_loss"] is not None else None,
            k=[int(v) for v in g["k"]],
            eps=[float(v) for v in g["eps"]],
            grad_norm=norm,
            dropped=self.dropped,
        )


def distill_step(distiller: Distiller, x, x_teacher=None) -> LossReport:
    """One clipped SGD-momentum step on a batch; see :class:`Distiller`."""
    return distiller.step(x, x_teacher)
