"""AdamW, one-cycle schedule, teacher training and teacher-to-student distillation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from . import autodiff as ad
from . import dataio
from .autodiff import Tensor
from .backbone import STUDENT, TEACHER, BackboneConfig, ModelParams, clone_params, embed, init_backbone
from .dataio import DISTILL_AUGMENT, TEACHER_AUGMENT, AugmentConfig, LabeledImages, UnlabeledImages
from .errors import ConfigError, DomainError, NumericError
from .losses import ABS, LOSS_TERMS, LossWeights, TripletConfig, loss_total, mine_triplets, triplet_loss

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "epoch", "lr", "loss_abs", "loss_rel_ts", "loss_rel_ss", "loss_total")
INIT_MODES = ("teacher_large", "teacher_small", "fresh")


# -- optimizer ----------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float) -> None:
    """In-place AdamW update with decay decoupled from the moment estimates."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NumericError(f"non-finite gradient for {name!r} at step {state.step + 1} ({bad} entries)")
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p
        p -= (lr * update).astype(p.dtype)


@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.3
    start_div: float = 25.0
    final_div: float = 1e4

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))


def onecycle_lr(step: int, schedule: OneCycleSchedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise DomainError(f"step {step} outside [0, {schedule.total_steps}]")
    start = schedule.max_lr / schedule.start_div
    final = schedule.max_lr / schedule.final_div
    warm = schedule.warmup_steps
    if step <= warm and warm > 0:
        frac = step / warm
        return start + (schedule.max_lr - start) * (1 - math.cos(math.pi * frac)) / 2
    span = schedule.total_steps - warm
    frac = (step - warm) / span if span > 0 else 1.0
    return final + (schedule.max_lr - final) * (1 + math.cos(math.pi * frac)) / 2


# -- configs ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Teacher-training knobs. Defaults are the desk profile."""
    epochs: int = 40
    batch_classes: int = 8
    batch_per_class: int = 4
    examples_per_epoch: int = 8000
    max_lr: float = 3e-3
    weight_decay: float = 0.01
    seed: int = 0
    resolution_factor: float = 1.0
    triplet: TripletConfig = TripletConfig()
    augment: AugmentConfig = TEACHER_AUGMENT

    @property
    def batch_size(self) -> int:
        return self.batch_classes * self.batch_per_class


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 40
    batch_size: int = 32
    examples_per_epoch: int = 8000
    augmentations: int = 8
    scale_factor: float = 0.5
    weights: LossWeights = LossWeights()
    terms: tuple[str, ...] = LOSS_TERMS
    coupled: bool = True
    init_mode: str = "teacher_large"
    max_lr: float = 6e-3
    weight_decay: float = 0.01
    seed: int = 0
    augment: AugmentConfig = DISTILL_AUGMENT
    check_frozen: bool = False

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.augmentations < 1:
            raise ConfigError("augmentations must be >= 1")
        if not 0 < self.scale_factor <= 1:
            raise ConfigError(f"scale_factor must lie in (0, 1], got {self.scale_factor}")
        object.__setattr__(self, "terms", tuple(t for t in LOSS_TERMS if t in set(self.terms)))


@dataclass
class TraceRow:
    step: int
    epoch: int
    lr: float
    loss_abs: float = 0.0
    loss_rel_ts: float = 0.0
    loss_rel_ss: float = 0.0
    loss_total: float = 0.0


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[TraceRow]
    max_teacher_grad: float | None = None
    teacher_digest_before: str | None = None
    teacher_digest_after: str | None = None


def write_trace(trace: Iterable[TraceRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            w.writerow([r.step, r.epoch, repr(r.lr), repr(r.loss_abs), repr(r.loss_rel_ts),
                        repr(r.loss_rel_ss), repr(r.loss_total)])


def read_trace(path) -> list[TraceRow]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TraceRow(int(r["step"]), int(r["epoch"]), float(r["lr"]), float(r["loss_abs"]),
                     float(r["loss_rel_ts"]), float(r["loss_rel_ss"]), float(r["loss_total"])) for r in rows]


# -- loops --------------------------------------------------------------------

def _class_balanced_batches(labels: np.ndarray, config: TrainConfig, rng: np.random.Generator):
    """P classes × K images per batch; every image appears once per epoch where possible."""
    classes = np.unique(labels)
    pools = {c: list(rng.permutation(np.flatnonzero(labels == c))) for c in classes}
    budget = min(len(labels), config.examples_per_epoch)
    batches = []
    used = 0
    while used + config.batch_size <= budget:
        live = [c for c in classes if len(pools[c]) >= config.batch_per_class]
        if len(live) < max(2, min(config.batch_classes, len(classes))):
            break
        chosen = rng.choice(live, size=min(config.batch_classes, len(live)), replace=False)
        batch = []
        for c in chosen:
            batch.extend(pools[c][:config.batch_per_class])
            pools[c] = pools[c][config.batch_per_class:]
        batches.append(np.asarray(batch))
        used += len(batch)
    return batches


def _grads(weights: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in weights.items()}


def _steps_per_epoch_distill(n: int, config: DistillConfig) -> int:
    return max(1, min(n, config.examples_per_epoch) // config.batch_size)


def train_teacher(data: LabeledImages, backbone: BackboneConfig, config: TrainConfig) -> TrainResult:
    """Triplet loss with distance-weighted negative mining under AdamW + one-cycle."""
    images, labels = data.images, np.asarray(data.labels)
    params = init_backbone(backbone, config.seed, role=TEACHER)
    base = images.shape[-1]
    out_res = dataio.scaled_resolution(base, config.resolution_factor)
    probe = _class_balanced_batches(labels, config, np.random.default_rng([config.seed, 0]))
    if not probe:
        raise ConfigError("training split too small for one class-balanced batch")
    total = len(probe) * config.epochs
    schedule = OneCycleSchedule(config.max_lr, total)
    state = AdamWState(weight_decay=config.weight_decay)
    trace = []
    step = 0
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        batches = probe if epoch == 0 else _class_balanced_batches(labels, config, rng)
        mine_rng = np.random.default_rng([config.seed, epoch, 1])
        for bi, batch in enumerate(batches[: len(probe)]):
            aug_cfg = replace(config.augment, batch_size=len(batch))
            views = []
            for pos, idx in enumerate(batch):
                r = dataio.image_rng(config.seed, epoch, int(idx), stream=7)
                p = dataio.sample_augmentation(r, pos, aug_cfg, images[idx].shape)
                views.append(dataio.apply_augmentation(images[idx], p, base))
            x = np.stack(views)
            if out_res != base:
                x = np.stack([dataio.downsample_r(v, config.resolution_factor) for v in x])
            weights = params.tensors(requires_grad=True)
            emb = embed(weights, backbone, Tensor(x))
            triplets = mine_triplets(emb.data, labels[batch], config.triplet, mine_rng)
            a, p_, n = (ad.index_rows(emb, triplets[:, i]) for i in range(3))
            loss = triplet_loss(a, p_, n, config.triplet.margin)
            _check_loss(loss.item(), step)
            ad.backward(loss, inputs=weights.values())
            lr = onecycle_lr(step, schedule)
            adamw_step(params.weights, _grads(weights), state, lr)
            params.version += 1
            trace.append(TraceRow(step, epoch, lr, loss_total=loss.item()))
            step += 1
        log.debug("teacher epoch %d loss %.4f", epoch, trace[-1].loss_total)
    return TrainResult(params, trace)


def _check_loss(value: float, step: int):
    if not math.isfinite(value):
        raise NumericError(f"non-finite loss at step {step}")


def init_student(teacher: ModelParams, mode: str, seed: int, small_teacher: ModelParams | None = None) -> ModelParams:
    if mode == "teacher_large":
        return clone_params(teacher, STUDENT)
    if mode == "teacher_small":
        if small_teacher is None:
            raise ConfigError("init_mode teacher_small needs a teacher trained at the small resolution")
        return clone_params(small_teacher, STUDENT)
    return init_backbone(teacher.config, seed=10_000 + seed, role=STUDENT)


def effective_terms(config: DistillConfig) -> tuple[str, ...]:
    """Relational terms need two views of a source; with one view only ``abs`` remains."""
    if config.augmentations >= 2:
        return config.terms
    terms = tuple(t for t in config.terms if t == ABS)
    if not terms:
        raise ConfigError("relational-only loss mask needs at least 2 augmentations per image")
    return terms


def distill_student(teacher: ModelParams, data: UnlabeledImages, config: DistillConfig,
                    small_teacher: ModelParams | None = None) -> TrainResult:
    """Align a student at the small resolution to a frozen teacher at the large one; no labels."""
    if not isinstance(data, UnlabeledImages):
        raise TypeError("distillation takes UnlabeledImages; labels must not reach this path")
    images = data.images
    cfg = teacher.config
    digest_before = teacher.digest()
    student = init_student(teacher, config.init_mode, config.seed, small_teacher)
    terms = effective_terms(config)
    steps_per_epoch = _steps_per_epoch_distill(len(images), config)
    schedule = OneCycleSchedule(config.max_lr, steps_per_epoch * config.epochs)
    state = AdamWState(weight_decay=config.weight_decay)
    teacher_w = teacher.tensors(requires_grad=config.check_frozen)
    trace = []
    max_teacher_grad = 0.0 if config.check_frozen else None
    step = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch, 3]).permutation(len(images))
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            t_views, s_views = dataio.build_batch_views(images, idx, config.augmentations, config.seed, epoch,
                                                        config.scale_factor, config.augment, config.coupled)
            t_emb = embed(teacher_w, cfg, Tensor(t_views))
            student_w = student.tensors(requires_grad=True)
            s_emb = embed(student_w, cfg, Tensor(s_views))
            loss, parts = loss_total(t_emb.detach(), s_emb, config.augmentations, config.weights, terms)
            _check_loss(parts.total, step)
            ad.backward(loss, inputs=student_w.values())
            if config.check_frozen:
                grads = [np.abs(t.grad).max() if t.grad is not None else 0.0 for t in teacher_w.values()]
                max_teacher_grad = max(max_teacher_grad, float(max(grads)))
            lr = onecycle_lr(step, schedule)
            adamw_step(student.weights, _grads(student_w), state, lr)
            student.version += 1
            trace.append(TraceRow(step, epoch, lr, parts.abs, parts.rel_ts, parts.rel_ss, parts.total))
            step += 1
        log.debug("distill epoch %d loss %.5f", epoch, trace[-1].loss_total)
    digest_after = teacher.digest()
    return TrainResult(student, trace, max_teacher_grad, digest_before, digest_after)
