"""Losses, budget sampling, warmup and the elastic training loop contracts."""
import math

import numpy as np
import pytest

from elastic_hybrid import autograd as ag
from elastic_hybrid.autograd import Tensor
from elastic_hybrid.corpus import stage_specs
from elastic_hybrid.importance import ImportanceRanking
from elastic_hybrid.model import HybridModel, ModelConfig, stack_forward
from elastic_hybrid.router import MODE1, MODE2, BudgetSpec, RouterBank, default_budgets
from elastic_hybrid.training import (
    FROZEN, METRIC_COLUMNS, TRAINABLE, BudgetSampler, StageConfig, TrainConfig, ce_loss, kd_loss,
    sample_budget, task_loss, total_loss, train, train_step, warmup_lr,
)

TINY = ModelConfig(d_e=8, d_int=16, n_h=2, d_h=4, m_h=4, m_d=4, g=2, d_s=4, pattern=("M", "A", "F", "M"))


def _setup(seed=0, dtype=np.float32):
    model = HybridModel.init(TINY, seed=seed, dtype=dtype)
    bank = RouterBank.create(TINY, seed=seed)
    return model, bank, ImportanceRanking.identity(TINY)


def _cfg(s1_steps=4, s2_steps=2, **kw):
    s2 = StageConfig(32, 32 * 2 * s2_steps, 2) if s2_steps is not None else None
    return TrainConfig(stage1=StageConfig(16, 16 * 4 * s1_steps, 4), stage2=s2, warmup_steps=3, **kw)


def _corpus():
    return stage_specs(16, 32, seed=0)


# ----- losses


def _np_log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def test_ce_examples():
    targets = np.array([[3, 7, 1]])
    sharp = np.full((1, 3, 256), -1e4)
    sharp[0, np.arange(3), targets[0]] = 0.0
    assert float(ce_loss(Tensor(sharp), targets).data) == pytest.approx(0.0, abs=1e-12)
    assert float(ce_loss(Tensor(np.zeros((1, 3, 256))), targets).data) == pytest.approx(math.log(256))
    rng = np.random.default_rng(0)
    z = rng.standard_normal((2, 5, 11))
    t = rng.integers(0, 11, (2, 5))
    t[0, 2] = t[1, 4] = -1
    lp = _np_log_softmax(z)
    want = -np.mean([lp[b, i, t[b, i]] for b in range(2) for i in range(5) if t[b, i] >= 0])
    assert float(ce_loss(Tensor(z), t).data) == pytest.approx(want, rel=1e-12)


def test_ce_rejects_all_padding():
    with pytest.raises(ValueError):
        ce_loss(Tensor(np.zeros((1, 2, 4))), np.full((1, 2), -1))


def test_kd_examples():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((2, 3, 6))
    assert float(kd_loss(Tensor(z), Tensor(z)).data) == pytest.approx(0.0, abs=1e-12)
    pt = np.array([1 / (1 + math.exp(-10)), 1 - 1 / (1 + math.exp(-10))])
    want = float(np.sum(pt * (np.log(pt) - np.log(0.5))))
    got = float(kd_loss(Tensor(np.zeros((1, 1, 2))), Tensor(np.array([[[10.0, 0.0]]]))).data)
    assert got == pytest.approx(want, rel=1e-12)
    assert got == pytest.approx(0.6927, abs=1e-4)
    for _ in range(100):
        s, t = rng.standard_normal((2, 4, 5)) * 3
        assert float(kd_loss(Tensor(s), Tensor(t), rng.uniform(0.5, 3)).data) >= -1e-12


def test_kd_is_forward_kl_with_teacher_first():
    s = np.array([[[2.0, 0.0, -1.0]]])
    t = np.array([[[0.0, 1.0, 0.5]]])
    ps, pt = np.exp(_np_log_softmax(s / 2)), np.exp(_np_log_softmax(t / 2))
    want = np.sum(pt * np.log(pt / ps))
    assert float(kd_loss(Tensor(s), Tensor(t), 2.0).data) == pytest.approx(want, rel=1e-12)


def test_total_loss_examples():
    assert total_loss(2.0, 0.5, 1.0) == 2.5
    assert total_loss(1.25, 0.0, 3.0) == 1.25
    assert TrainConfig().lam == 1.0


# ----- task loss and gradient routing


def test_frozen_teacher_at_full_budget_with_equal_weights_is_zero():
    model, bank, _ = _setup(dtype=np.float64)
    x = np.random.default_rng(0).integers(0, 256, (2, 9))
    loss = task_loss(stack_forward(model, None, x), x, x, bank.budget(0), FROZEN, teacher=model.copy())
    assert float(loss.data) == pytest.approx(0.0, abs=1e-12)


def test_frozen_teacher_receives_no_gradient():
    student, bank, _ = _setup(dtype=np.float64)
    teacher = HybridModel.init(TINY, seed=9, dtype=np.float64)
    teacher.requires_grad_(True)  # even a gradient-enabled teacher is evaluated off-graph
    student.requires_grad_(True)
    x = np.random.default_rng(0).integers(0, 256, (2, 9))
    grads = ag.backward(task_loss(stack_forward(student, None, x), x, x, bank.budget(1), FROZEN, teacher=teacher))
    assert not any(p in grads for p in teacher.parameters())
    assert any(p in grads for p in student.parameters())


def test_trainable_teacher_is_kd_plus_weighted_ce():
    model, bank, _ = _setup(dtype=np.float64)
    rng = np.random.default_rng(2)
    x = rng.integers(0, 256, (2, 9))
    y = rng.integers(0, 256, (2, 9))
    student_logits = stack_forward(model, None, x) * 0.5
    got = float(task_loss(student_logits, x, y, bank.budget(2), TRAINABLE, student=model, alpha_ce=0.1).data)
    full = stack_forward(model, None, x)
    want = float(kd_loss(student_logits, full).data) + 0.1 * float(ce_loss(full, y).data)
    assert got == pytest.approx(want, rel=1e-12)


def test_trainable_teacher_full_budget_gets_both_gradients():
    model, bank, _ = _setup(dtype=np.float64)
    model.requires_grad_(True)
    x = np.random.default_rng(3).integers(0, 256, (1, 6))
    head = model.params["head"]
    g_both = ag.backward(task_loss(stack_forward(model, None, x) * 0.5, x, x, bank.budget(2), TRAINABLE,
                                   student=model, alpha_ce=0.1))[head]
    g_ce = ag.backward(0.1 * ce_loss(stack_forward(model, None, x), x))[head]
    assert not np.allclose(g_both, g_ce)  # the KD term also reaches the full path


def test_trainable_self_distillation_guard():
    model, bank, _ = _setup()
    x = np.zeros((1, 4), int)
    with pytest.raises(ValueError, match="itself"):
        task_loss(stack_forward(model, None, x), x, x, bank.budget(0), TRAINABLE, student=model, alpha_ce=0.0)


# ----- sampling and schedules


def test_sampler_frequencies():
    budgets = default_budgets(TINY)
    rng = np.random.default_rng(0)
    for stage, want in ((1, [1 / 3] * 3), (2, [0.5, 0.3, 0.2])):
        sampler = BudgetSampler.for_stage(stage, budgets, (0.5, 0.3, 0.2))
        ids = np.array([sample_budget(sampler, rng).id for _ in range(30_000)])
        freq = np.bincount(ids, minlength=3) / len(ids)
        assert np.all(np.abs(freq - want) <= 0.01), freq


def test_single_budget_is_always_drawn():
    b = BudgetSpec(0, 10.0, "only")
    sampler = BudgetSampler.for_stage(2, [b], (1.0,))
    rng = np.random.default_rng(0)
    assert all(sample_budget(sampler, rng) is b for _ in range(50))


def test_sampler_weights_must_sum_to_one():
    with pytest.raises(ValueError):
        BudgetSampler(2, default_budgets(TINY), [0.5, 0.3, 0.3])


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(alpha=(0.5, 0.5, 0.0))
    with pytest.raises(ValueError):
        TrainConfig(stage2=StageConfig(64, 1000, 2))
    with pytest.raises(ValueError):
        TrainConfig(lam=0.0)


def test_warmup_formula():
    assert [warmup_lr(1.0, s, 4) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]


# ----- training loop


def test_warmup_applies_to_both_parameter_groups():
    model, bank, ranking = _setup()
    cfg = _cfg(5, None)
    rows = train(model, bank, ranking, cfg, corpus=_corpus()).metrics
    for r in rows:
        s = r["step"]
        if s < cfg.warmup_steps:
            assert r["lr_model"] == cfg.lr_model * (s + 1) / cfg.warmup_steps
            assert r["lr_router"] == cfg.lr_router * (s + 1) / cfg.warmup_steps
        else:
            assert (r["lr_model"], r["lr_router"]) == (cfg.lr_model, cfg.lr_router)


def test_only_the_sampled_budget_influences_the_loss():
    model, bank, ranking = _setup()
    x = np.random.default_rng(4).integers(0, 256, (2, 16))
    cfg = _cfg()
    teacher = model.copy()
    a, _ = train_step(model, bank, ranking, x, x, bank.budget(1), cfg, np.random.default_rng(7), teacher)
    for axis in bank.params:
        w1 = bank.params[axis]["W1"].data
        w1[:, [0, 2]] += np.random.default_rng(5).standard_normal((w1.shape[0], 2)) * 10
    b, _ = train_step(model, bank, ranking, x, x, bank.budget(1), cfg, np.random.default_rng(7), teacher)
    assert float(a.data) == float(b.data)


@pytest.mark.parametrize("integration", [MODE2, MODE1])
def test_router_receives_gradient_early(integration):
    model, bank, ranking = _setup()
    seen = []
    train(model, bank, ranking, _cfg(10, None, integration=integration), corpus=_corpus(),
          callback=lambda step, stage, res: seen.append(res.router_grad_norm))
    assert len(seen) == 10 and max(seen) > 0


def test_frozen_teacher_is_bitwise_unchanged():
    model, bank, ranking = _setup()
    teacher = model.copy()
    before = {k: v.copy() for k, v in teacher.state_dict().items()}
    train(model, bank, ranking, _cfg(), teacher=teacher, corpus=_corpus())
    after = teacher.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert not all(np.array_equal(before[k], model.state_dict()[k]) for k in before)


def test_zero_steps_leave_parameters_untouched():
    model, bank, ranking = _setup()
    init_m = {k: v.copy() for k, v in model.state_dict().items()}
    init_r = [p.data.copy() for p in bank.parameters()]
    res = train(model, bank, ranking, _cfg(0, 0), corpus=_corpus())
    assert res.steps == 0 and res.metrics == []
    assert all(np.array_equal(init_m[k], v) for k, v in model.state_dict().items())
    assert all(np.array_equal(a, p.data) for a, p in zip(init_r, bank.parameters()))


def test_disabled_stage_two_ends_on_the_stage_one_schedule():
    model, bank, ranking = _setup()
    cfg = _cfg(6, None)
    res = train(model, bank, ranking, cfg, corpus=_corpus())
    assert {r["stage"] for r in res.metrics} == {1}
    assert bank.tau == pytest.approx(0.05) and bank.logit_scale == pytest.approx(10.0)


def test_stage_two_uses_its_own_length_and_sampler():
    model, bank, ranking = _setup()
    lengths = []
    res = train(model, bank, ranking, _cfg(3, 3), corpus=_corpus(),
                callback=lambda s, st, r: lengths.append((st, r.masks is not None)))
    assert [r["stage"] for r in res.metrics] == [1, 1, 1, 2, 2, 2]


def test_metrics_csv_is_deterministic(tmp_path):
    outs = []
    for run in range(2):
        model, bank, ranking = _setup()
        path = tmp_path / f"m{run}.csv"
        res = train(model, bank, ranking, _cfg(4, 2), corpus=_corpus(), metrics_path=path)
        outs.append(path.read_bytes())
        assert res.metrics_csv().encode() == outs[-1]
    assert outs[0] == outs[1]
    assert outs[0].decode().splitlines()[0] == ",".join(METRIC_COLUMNS)


def test_non_finite_loss_aborts_with_step_context():
    model, bank, ranking = _setup()
    model.params["head"].data[0, 0] = np.nan
    with pytest.raises(FloatingPointError, match="step 0"):
        train(model, bank, ranking, _cfg(), corpus=_corpus())
