"""Self-distillation training of a per-site normality model.

The student sees two global and eight local views of each clip, the teacher
only the global ones. The student is pulled toward the teacher's centered,
sharpened prototype distribution; the teacher follows the student by an
exponential moving average.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import encoder
from .encoder import EncoderConfig, ViewTokens
from .params import ParamMap, check_aligned
from .views import AugConfig, ViewBatch, make_views, sample_clip

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, view_index: int, message: str = ""):
        self.view_index = view_index
        super().__init__(message or f"non-finite distillation loss at view {view_index}")


class TrainingDivergedError(RuntimeError):
    """Training hit a non-finite loss; ``last_good`` holds the last finite student."""

    def __init__(self, step: int, last_good: ParamMap, log_records: list[dict]):
        self.step = step
        self.last_good = last_good
        self.log_records = log_records
        super().__init__(f"training diverged at step {step}")


@dataclass
class DistillState:
    student: ParamMap
    teacher: ParamMap
    center: np.ndarray
    momentum: float = 0.996
    center_momentum: float = 0.9
    tau_student: float = 0.1
    tau_teacher: float = 0.04

    def __post_init__(self):
        check_aligned(self.student, self.teacher)
        self.center = np.asarray(self.center, dtype=np.float64)
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("EMA momentum must lie in [0, 1]")
        if not (0 < self.tau_teacher < self.tau_student):
            raise ValueError("need 0 < tau_teacher < tau_student")
        if not np.all(np.isfinite(self.center)):
            raise ValueError("center must be finite")


@dataclass
class LossResult:
    loss: float
    grads: ParamMap
    teacher_logits: np.ndarray  # (B, n_global, K)
    teacher_entropy: float


def _log_softmax(x: np.ndarray) -> np.ndarray:
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def cross_entropy_terms(teacher_logits, student_logits, center, tau_s, tau_t):
    """Per-pair cross-entropies ``(B, G, V)`` and the masked pair average.

    ``teacher_logits`` is ``(B, G, K)``, ``student_logits`` ``(B, V, K)``
    with the first ``G`` student views being the teacher's global views.
    Pairs that compare a global view with itself are excluded.
    """
    n_global, n_views = teacher_logits.shape[1], student_logits.shape[1]
    p = np.exp(_log_softmax((teacher_logits - center) / tau_t))
    log_q = _log_softmax(student_logits / tau_s)
    ce = -np.einsum("bgk,bvk->bgv", p, log_q)
    mask = np.ones((n_global, n_views), dtype=bool)
    mask[np.arange(n_global), np.arange(n_global)] = False
    return ce, mask, p, log_q


def distill_objective(student: dict, teacher_logits: np.ndarray, summary: ViewTokens,
                      n_views: int, center: np.ndarray, tau_s: float, tau_t: float,
                      tubes) -> tuple[float, dict]:
    """Loss and student gradients for float64 parameter dicts.

    ``summary`` holds ``B * n_views`` student views, clip-major.
    """
    logits, cache = encoder.forward(student, summary, tubes)
    b = len(summary) // n_views
    s = logits.reshape(b, n_views, -1)
    ce, mask, p, log_q = cross_entropy_terms(teacher_logits, s, center, tau_s, tau_t)
    per_view = np.where(mask[None], ce, 0.0).sum(axis=(0, 1))
    bad = np.flatnonzero(~np.isfinite(per_view))
    if bad.size:
        raise NonFiniteLossError(int(bad[0]))
    n_pairs = int(mask.sum())
    loss = float(ce[:, mask].sum() / (b * n_pairs))

    # d loss / d log_q[b, v, k] = -sum_{g != v} p[b, g, k] / (B * n_pairs)
    dlog_q = -np.einsum("gv,bgk->bvk", mask.astype(float), p) / (b * n_pairs)
    q = np.exp(log_q)
    dscaled = dlog_q - q * dlog_q.sum(axis=-1, keepdims=True)
    dlogits = (dscaled / tau_s).reshape(b * n_views, -1)
    return loss, encoder.backward(student, cache, dlogits, tubes)


def _summaries(batches: Sequence[ViewBatch], tubes):
    glob, allv = [], []
    for vb in batches:
        for v in vb.globals:
            glob.append(encoder.view_tokens(v, tubes))
        for v in vb.views:
            allv.append(encoder.view_tokens(v, tubes))
    return ViewTokens.stack(glob), ViewTokens.stack(allv)


def distill_loss(state: DistillState, views: ViewBatch | Sequence[ViewBatch],
                 tubes) -> LossResult:
    """Self-distillation loss of ``state`` on one or more view batches."""
    batches = [views] if isinstance(views, ViewBatch) else list(views)
    n_global = len(batches[0].globals)
    n_views = len(batches[0].views)
    glob, allv = _summaries(batches, tubes)
    t_logits, _ = encoder.forward(state.teacher.to_dict(), glob, tubes)
    t_logits = t_logits.reshape(len(batches), n_global, -1)
    loss, grads = distill_objective(
        state.student.to_dict(), t_logits, allv, n_views, state.center,
        state.tau_student, state.tau_teacher, tubes,
    )
    return LossResult(loss, ParamMap(grads), t_logits,
                      teacher_entropy(t_logits, state.center, state.tau_teacher))


def teacher_entropy(teacher_logits, center, tau_t) -> float:
    """Mean entropy (nats) of the teacher's centered, sharpened distribution."""
    log_p = _log_softmax((teacher_logits - center) / tau_t)
    return float(-(np.exp(log_p) * log_p).sum(-1).mean())


def ema_update(state: DistillState, teacher_output_mean: np.ndarray | None = None) -> DistillState:
    """Move the teacher (and center) toward the student by EMA."""
    check_aligned(state.teacher, state.student)
    m = state.momentum
    teacher = ParamMap({
        k: (m * state.teacher[k].astype(np.float64)
            + (1.0 - m) * state.student[k].astype(np.float64))
        for k in state.teacher
    })
    center = state.center
    if teacher_output_mean is not None:
        cm = state.center_momentum
        center = cm * center + (1.0 - cm) * np.asarray(teacher_output_mean, dtype=np.float64)
    return DistillState(teacher=teacher, center=center, student=state.student,
                        momentum=state.momentum, center_momentum=state.center_momentum,
                        tau_student=state.tau_student, tau_teacher=state.tau_teacher)


def cosine_lr(step: int, total_steps: int, lr_init: float, lr_min: float = 0.0,
              warmup_steps: int = 0) -> float:
    """Cosine decay from ``lr_init`` at step 0 to ``lr_min`` at ``total_steps``."""
    if warmup_steps and step < warmup_steps:
        return lr_init * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    frac = min(max(step - warmup_steps, 0) / span, 1.0)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 12
    lr_init: float = 0.02
    lr_min: float = 0.0
    warmup_steps: int = 0
    seed: int = 0
    init_seed: int = 0
    clip_frames: int = 32
    clip_rate: int = 1
    tau_student: float = 0.1
    tau_teacher: float = 0.04
    ema_momentum: float = 0.996
    center_momentum: float = 0.9
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    aug: AugConfig = field(default_factory=AugConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        d["aug"] = self.aug.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        enc = EncoderConfig.from_dict(d.pop("encoder", {}))
        aug = AugConfig.from_dict(d.pop("aug", {}))
        return cls(encoder=enc, aug=aug, **d)


@dataclass
class TrainResult:
    student: ParamMap
    teacher: ParamMap
    log: list[dict]


def _views_for(video: np.ndarray, cfg: TrainConfig, epoch: int, index: int) -> ViewBatch:
    rng = np.random.default_rng([cfg.seed, epoch, index])
    clip = sample_clip(video, cfg.clip_frames, cfg.clip_rate, rng)
    return make_views(clip, cfg.aug, rng)


def train_site(videos: Sequence[np.ndarray], cfg: TrainConfig,
               init: ParamMap | None = None) -> TrainResult:
    """Train one site's student on healthy ``videos``; bit-deterministic in ``cfg``.

    Each clip's views come from an RNG seeded by ``(seed, epoch, clip index)``.
    """
    if len(videos) == 0:
        raise ValueError("cannot train on an empty dataset")
    tubes = cfg.encoder.tubes
    student = init if init is not None else encoder.init_params(cfg.encoder, cfg.init_seed)
    state = DistillState(student, student, np.zeros(cfg.encoder.n_prototypes),
                         cfg.ema_momentum, cfg.center_momentum,
                         cfg.tau_student, cfg.tau_teacher)
    n = len(videos)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    records: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch, 0x5EED]).permutation(n)
        entropies, losses = [], []
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            batches = [_views_for(videos[i], cfg, epoch, int(i)) for i in idx]
            if step == 0:
                # start centered; a zero center would take ~1/(1-c_m) steps to catch up
                glob, _ = _summaries(batches, tubes)
                t0, _ = encoder.forward(state.teacher.to_dict(), glob, tubes)
                state.center = t0.mean(0)
            try:
                res = distill_loss(state, batches, tubes)
            except NonFiniteLossError as exc:
                raise TrainingDivergedError(step, state.student, records) from exc
            lr = cosine_lr(step, total, cfg.lr_init, cfg.lr_min, cfg.warmup_steps)
            student = ParamMap({
                k: state.student[k].astype(np.float64) - lr * res.grads[k].astype(np.float64)
                for k in state.student
            })
            if not all(np.all(np.isfinite(v)) for v in student.values()):
                raise TrainingDivergedError(step, state.student, records)
            state.student = student
            state = ema_update(state, res.teacher_logits.reshape(-1, res.teacher_logits.shape[-1]).mean(0))
            records.append({"type": "step", "step": step, "epoch": epoch, "loss": res.loss,
                            "lr": lr, "teacher_entropy": res.teacher_entropy})
            entropies.append(res.teacher_entropy)
            losses.append(res.loss)
            step += 1
        records.append({"type": "epoch", "epoch": epoch, "loss": float(np.mean(losses)),
                        "teacher_entropy": float(np.mean(entropies))})
        log.debug("epoch %d loss %.4f teacher entropy %.4f", epoch, records[-1]["loss"],
                  records[-1]["teacher_entropy"])
    return TrainResult(state.student, state.teacher, records)
