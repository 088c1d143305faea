import math

import numpy as np
import pytest

from raml.backbone import BackboneConfig, init_backbone, forward_embed
from raml.dataio import SyntheticDatasetSpec, gen_synthetic_dataset
from raml.errors import ConfigError, DomainError, NumericError
from raml.losses import ABS, REL_SS, REL_TS
from raml.retrieval import make_setup, evaluate_setup
from raml.trainer import (AdamWState, DistillConfig, OneCycleSchedule, TrainConfig, adamw_step, distill_student,
                          effective_terms, onecycle_lr, read_trace, train_teacher, write_trace)

TINY_BB = BackboneConfig(channels=(4, 8), embed_dim=8)
TINY_DATA = SyntheticDatasetSpec(num_classes=4, images_per_class=6, base_resolution=32, seed=3)


@pytest.fixture(scope="module")
def tiny_split():
    return gen_synthetic_dataset(TINY_DATA).split()


def tiny_teacher_config(**kw):
    return TrainConfig(**{"epochs": 2, "batch_classes": 2, "batch_per_class": 3, **kw})


def tiny_distill_config(**kw):
    return DistillConfig(**{"epochs": 2, "batch_size": 4, "augmentations": 2, **kw})


# -- AdamW --------------------------------------------------------------------

def reference_adamw(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta = theta - lr * (mhat / (math.sqrt(vhat) + eps) + wd * theta)
        out.append(theta)
    return out


def test_adamw_zero_grad_no_decay_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamWState(weight_decay=0.0), 0.1)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adamw_zero_grad_pure_decay():
    p = {"w": np.array([1.0, -2.0])}
    adamw_step(p, {"w": np.zeros(2)}, AdamWState(weight_decay=0.05), 0.1)
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0]) * (1 - 0.1 * 0.05), rtol=0, atol=1e-15)


def test_adamw_matches_scalar_reference_over_100_steps():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=100).tolist()
    p = {"w": np.array([0.7])}
    state = AdamWState(weight_decay=0.01)
    traj = []
    for g in grads:
        adamw_step(p, {"w": np.array([g])}, state, 1e-2)
        traj.append(float(p["w"][0]))
    ref = reference_adamw(0.7, grads, 1e-2, 0.01)
    assert max(abs(a - b) for a, b in zip(traj, ref)) <= 1e-10
    assert state.step == 100 and state.m["w"].shape == (1,)


def test_adamw_rejects_non_finite():
    p = {"w": np.zeros(3)}
    with pytest.raises(NumericError, match="'w'"):
        adamw_step(p, {"w": np.array([0.0, np.nan, 1.0])}, AdamWState(), 0.1)


def test_adamw_rejects_shape_mismatch():
    with pytest.raises(ConfigError):
        adamw_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, AdamWState(), 0.1)


# -- schedule -----------------------------------------------------------------

def test_onecycle_endpoints():
    s = OneCycleSchedule(max_lr=3e-3, total_steps=100)
    assert onecycle_lr(0, s) == pytest.approx(3e-3 / 25, rel=1e-12)
    assert onecycle_lr(s.warmup_steps, s) == pytest.approx(3e-3, rel=1e-12)
    assert onecycle_lr(100, s) == pytest.approx(3e-3 / 1e4, rel=1e-12)
    assert s.warmup_steps == 30


def test_onecycle_shape():
    s = OneCycleSchedule(max_lr=1.0, total_steps=50)
    lrs = [onecycle_lr(i, s) for i in range(51)]
    w = s.warmup_steps
    assert all(b >= a for a, b in zip(lrs[:w], lrs[1:w + 1]))
    assert all(b <= a for a, b in zip(lrs[w:], lrs[w + 1:]))


def test_onecycle_out_of_range():
    s = OneCycleSchedule(max_lr=1.0, total_steps=10)
    for bad in (-1, 11):
        with pytest.raises(DomainError):
            onecycle_lr(bad, s)


# -- teacher ------------------------------------------------------------------

def test_teacher_training_deterministic(tiny_split):
    train, _ = tiny_split
    a = train_teacher(train, TINY_BB, tiny_teacher_config())
    b = train_teacher(train, TINY_BB, tiny_teacher_config())
    assert a.params.digest() == b.params.digest()
    c = train_teacher(train, TINY_BB, tiny_teacher_config(seed=1))
    assert a.params.digest() != c.params.digest()
    assert len(a.trace) > 0 and all(r.loss_abs == 0.0 for r in a.trace)


def test_teacher_loss_decreases(quick_teacher):
    trace = quick_teacher.trace
    epochs = sorted({r.epoch for r in trace})
    k = max(1, len(epochs) // 10)
    def mean_of(es):
        vals = [r.loss_total for r in trace if r.epoch in es]
        return sum(vals) / len(vals)
    assert mean_of(set(epochs[-k:])) < mean_of(set(epochs[:k]))


def test_teacher_prefers_its_training_resolution(quick_teacher, desk_split):
    _, test = desk_split
    full = evaluate_setup(quick_teacher.params, None, test.images, test.labels, make_setup("teacher_symmetric", 64, 1.0))
    low = evaluate_setup(quick_teacher.params, None, test.images, test.labels, make_setup("teacher_symmetric", 64, 0.35))
    assert full.map > low.map


def test_within_class_similarity_drops_at_low_resolution(quick_teacher, desk_split):
    from raml.retrieval import prepare_images
    _, test = desk_split
    def within(res):
        e = forward_embed(quick_teacher.params, prepare_images(test.images, res)).vectors.astype(np.float64)
        s = e @ e.T
        same = test.labels[:, None] == test.labels[None, :]
        np.fill_diagonal(same, False)
        return s[same].mean()
    assert within(22) < within(64)


def test_small_resolution_teacher_trains(tiny_split):
    train, _ = tiny_split
    res = train_teacher(train, TINY_BB, tiny_teacher_config(resolution_factor=0.5))
    assert np.all(np.isfinite([r.loss_total for r in res.trace]))


def test_teacher_needs_a_batch():
    data = gen_synthetic_dataset(SyntheticDatasetSpec(num_classes=2, images_per_class=2, base_resolution=16))
    with pytest.raises(ConfigError):
        train_teacher(data, TINY_BB, TrainConfig(epochs=1, batch_classes=2, batch_per_class=4))


# -- distillation -------------------------------------------------------------

def test_distill_frozen_teacher_and_determinism(tiny_split):
    train, _ = tiny_split
    teacher = init_backbone(TINY_BB, 0)
    cfg = tiny_distill_config(check_frozen=True)
    a = distill_student(teacher, train.unlabeled(), cfg)
    assert a.max_teacher_grad == 0.0
    assert a.teacher_digest_before == a.teacher_digest_after == teacher.digest()
    b = distill_student(teacher, train.unlabeled(), cfg)
    assert a.params.digest() == b.params.digest()
    assert a.params.digest() != teacher.digest()


def test_distill_step_zero_loss_vanishes_at_identity_scale(tiny_split):
    train, _ = tiny_split
    teacher = init_backbone(TINY_BB, 0)
    res = distill_student(teacher, train.unlabeled(), tiny_distill_config(scale_factor=1.0, epochs=1))
    assert res.trace[0].loss_total < 1e-6


def test_distill_rejects_labeled_input(tiny_split):
    train, _ = tiny_split
    with pytest.raises(TypeError):
        distill_student(init_backbone(TINY_BB, 0), train, tiny_distill_config())


def test_distill_mask_zeroes_trace_columns(tiny_split):
    train, _ = tiny_split
    res = distill_student(init_backbone(TINY_BB, 0), train.unlabeled(), tiny_distill_config(terms=(ABS,)))
    assert all(r.loss_rel_ts == 0.0 and r.loss_rel_ss == 0.0 for r in res.trace)
    assert all(r.loss_total == r.loss_abs for r in res.trace)


def test_single_view_keeps_only_absolute_term():
    assert effective_terms(DistillConfig(augmentations=1)) == (ABS,)
    assert effective_terms(DistillConfig(augmentations=2)) == (ABS, REL_TS, REL_SS)
    with pytest.raises(ConfigError):
        effective_terms(DistillConfig(augmentations=1, terms=(REL_SS,)))


def test_distill_init_modes(tiny_split):
    train, _ = tiny_split
    teacher = init_backbone(TINY_BB, 0)
    with pytest.raises(ConfigError):
        distill_student(teacher, train.unlabeled(), tiny_distill_config(init_mode="teacher_small"))
    small = init_backbone(TINY_BB, 5)
    res = distill_student(teacher, train.unlabeled(), tiny_distill_config(init_mode="teacher_small", epochs=1),
                          small_teacher=small)
    assert res.params.role == "student"
    fresh = distill_student(teacher, train.unlabeled(), tiny_distill_config(init_mode="fresh", epochs=1))
    assert np.isfinite(fresh.trace[-1].loss_total)
    with pytest.raises(ConfigError):
        DistillConfig(init_mode="random")


def test_distill_loss_descends(quick_teacher, desk_split):
    train, _ = desk_split
    cfg = DistillConfig(epochs=3, augmentations=4)
    trace = distill_student(quick_teacher.params, train.unlabeled(), cfg).trace
    k = max(1, len(trace) // 10)
    first = np.median([r.loss_total for r in trace[:k]])
    last = np.median([r.loss_total for r in trace[-k:]])
    assert last < first


def test_trace_roundtrip(tmp_path, tiny_split):
    train, _ = tiny_split
    res = distill_student(init_backbone(TINY_BB, 0), train.unlabeled(), tiny_distill_config(epochs=1))
    write_trace(res.trace, tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "step,epoch,lr,loss_abs,loss_rel_ts,loss_rel_ss,loss_total"
    assert read_trace(tmp_path / "t.csv") == res.trace
