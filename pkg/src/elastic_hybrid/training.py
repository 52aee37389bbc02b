"""Losses, budget sampling, optimisers and the two-stage elastic training loop."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import IGNORE, BatchStream, CorpusSpec, stage_specs
from .importance import ImportanceRanking
from .model import HybridModel, MaskSet, stack_forward
from .router import (
    MODE1, MODE2, AnnealSchedule, BudgetSpec, RouterBank, expected_cost, generate_masks,
    option_matrices, route, router_loss,
)

FROZEN, TRAINABLE = "frozen", "trainable"
METRIC_COLUMNS = (
    "step", "stage", "budget_label", "task_loss", "router_loss", "total_loss",
    "tau", "logit_scale", "lr_model", "lr_router",
)


# ---------------------------------------------------------------------------
# losses


def ce_loss(logits, targets: np.ndarray, ignore_index: int = IGNORE) -> Tensor:
    """Mean next-token negative log-likelihood over positions not equal to ``ignore_index``."""
    targets = np.asarray(targets)
    valid = targets != ignore_index
    n = int(valid.sum())
    if n == 0:
        raise ValueError("every target position is padding")
    logp = ag.log_softmax(logits, axis=-1)
    safe = np.where(valid, targets, 0)
    picked = ag.take_along(logp, safe[..., None], axis=-1).reshape(targets.shape)
    return ag.mul(ag.sum_(ag.mul(picked, valid.astype(logp.dtype))), -1.0 / n)


def kd_loss(student, teacher, temperature: float = 1.0) -> Tensor:
    """Forward KL(p_teacher || p_student) at ``temperature``, averaged over positions."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    s = ag.as_tensor(student)
    t = ag.as_tensor(teacher)
    if s.shape != t.shape:
        raise ValueError(f"student logits {s.shape} and teacher logits {t.shape} differ in shape")
    inv = 1.0 / temperature
    log_ps = ag.log_softmax(ag.mul(s, inv), axis=-1)
    log_pt = ag.log_softmax(ag.mul(t, inv), axis=-1)
    pt = ag.exp(log_pt)
    per_pos = ag.sum_(ag.mul(pt, ag.sub(log_pt, log_ps)), axis=-1)
    return ag.mean(per_pos)


def total_loss(task, router, lam: float = 1.0):
    return task + lam * router


# ---------------------------------------------------------------------------
# budget sampling


@dataclass
class BudgetSampler:
    stage: int
    budgets: list[BudgetSpec]
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.budgets),):
            raise ValueError(f"{len(self.weights)} weights for {len(self.budgets)} budgets")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"sampling weights must be nonnegative and sum to 1, got {self.weights}")

    @classmethod
    def for_stage(cls, stage: int, budgets: list[BudgetSpec], alpha=None) -> "BudgetSampler":
        if stage == 1 or alpha is None:
            return cls(stage, budgets, np.full(len(budgets), 1.0 / len(budgets)))
        return cls(stage, budgets, np.asarray(alpha, dtype=np.float64))


def sample_budget(sampler: BudgetSampler, rng: np.random.Generator) -> BudgetSpec:
    if len(sampler.budgets) == 1:
        return sampler.budgets[0]
    return sampler.budgets[int(rng.choice(len(sampler.budgets), p=sampler.weights))]


# ---------------------------------------------------------------------------
# optimisers


def warmup_lr(base: float, step: int, warmup: int) -> float:
    """Linear warmup: base * (step + 1) / warmup before ``warmup``, then base."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    return base


class SGDMomentum:
    def __init__(self, params: list[Tensor], momentum: float = 0.9, clip: float | None = None):
        self.params = params
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        scale = _clip_scale(grads, self.clip)
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v += g * scale
            p.data -= (lr * v).astype(p.data.dtype)
            p.grad = None


class Adam:
    def __init__(self, params: list[Tensor], betas=(0.9, 0.99), eps: float = 1e-8, clip: float | None = 1.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        scale = _clip_scale(grads, self.clip)
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            g = g * scale
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
            p.grad = None


def _clip_scale(grads, clip):
    if clip is None:
        return 1.0
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    return 1.0 if norm <= clip or norm == 0 else clip / norm


# ---------------------------------------------------------------------------
# configuration


@dataclass
class StageConfig:
    seq_len: int
    tokens: int
    batch_size: int

    @property
    def steps(self) -> int:
        return self.tokens // (self.seq_len * self.batch_size)


@dataclass
class TrainConfig:
    stage1: StageConfig = field(default_factory=lambda: StageConfig(64, 1_500_000, 8))
    stage2: StageConfig | None = field(default_factory=lambda: StageConfig(256, 1_000_000, 2))
    alpha: tuple[float, ...] = (0.5, 0.3, 0.2)
    lr_model: float = 1e-3
    lr_router: float = 1e-2
    warmup_steps: int = 60
    lam: float = 1.0
    kd_temperature: float = 1.0
    teacher_mode: str = FROZEN
    alpha_ce: float = 0.1
    integration: str = MODE2
    momentum: float = 0.9
    grad_clip: float | None = 1.0
    anneal_steps: int | None = None  # default: the Stage-1 step count
    log_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.alpha) - 1.0) > 1e-9 or any(a <= 0 for a in self.alpha):
            raise ValueError(f"stage-2 weights must be positive and sum to 1, got {self.alpha}")
        if self.stage2 is not None and self.stage2.seq_len <= self.stage1.seq_len:
            raise ValueError("stage-2 sequence length must exceed stage 1's")
        if self.lam <= 0:
            raise ValueError(f"router weight must be positive, got {self.lam}")
        if self.teacher_mode not in (FROZEN, TRAINABLE):
            raise ValueError(f"unknown teacher mode {self.teacher_mode!r}")
        if self.integration not in (MODE1, MODE2):
            raise ValueError(f"unknown integration mode {self.integration!r}")

    @property
    def horizon(self) -> int:
        return self.stage1.steps if self.anneal_steps is None else self.anneal_steps


# ---------------------------------------------------------------------------
# one step


def full_logits(model: HybridModel, inputs: np.ndarray) -> np.ndarray:
    with ag.no_grad():
        return stack_forward(model, None, inputs).data


def task_loss(
    student_logits,
    inputs: np.ndarray,
    targets: np.ndarray,
    budget: BudgetSpec,
    teacher_mode: str,
    *,
    teacher: HybridModel | None = None,
    student: HybridModel | None = None,
    full_budget_id: int = 0,
    kd_temperature: float = 1.0,
    alpha_ce: float = 0.1,
) -> Tensor:
    """Distillation loss for the sampled budget.

    FROZEN distils from a separate teacher with no gradient path. TRAINABLE
    distils from the student's own full network, which also takes an
    ``alpha_ce``-weighted CE term; both terms feed gradients into it.
    """
    if teacher_mode == FROZEN:
        if teacher is None:
            raise ValueError("frozen teacher mode needs a teacher model")
        return kd_loss(student_logits, full_logits(teacher, inputs), kd_temperature)
    if teacher_mode == TRAINABLE:
        if student is None:
            raise ValueError("trainable teacher mode needs the student model")
        if budget.id == full_budget_id and alpha_ce == 0:
            raise ValueError("trainable teacher at the full budget without CE would distil into itself")
        full = stack_forward(student, None, inputs)
        return kd_loss(student_logits, full, kd_temperature) + alpha_ce * ce_loss(full, targets)
    raise ValueError(f"unknown teacher mode {teacher_mode!r}")


@dataclass
class StepResult:
    task: float
    router: float
    total: float
    masks: MaskSet
    budget: BudgetSpec
    router_grad_norm: float = 0.0


def train_step(
    student: HybridModel,
    bank: RouterBank,
    ranking: ImportanceRanking,
    inputs: np.ndarray,
    targets: np.ndarray,
    budget: BudgetSpec,
    cfg: TrainConfig,
    rng: np.random.Generator,
    teacher: HybridModel | None,
    matrices: dict | None = None,
) -> tuple[Tensor, StepResult]:
    """Forward both losses and backpropagate; parameters are not updated here."""
    routes = route(bank, budget, rng)
    masks, _sel = generate_masks(bank, ranking, routes, cfg.integration, training=True,
                                 dtype=student.dtype, matrices=matrices)
    logits = stack_forward(student, masks, inputs)
    task = task_loss(
        logits, inputs, targets, budget, cfg.teacher_mode, teacher=teacher, student=student,
        kd_temperature=cfg.kd_temperature, alpha_ce=cfg.alpha_ce,
    )
    rl = router_loss(expected_cost(bank, ranking, routes, cfg.integration), budget)
    total = total_loss(ag.cast(task, np.float64), rl, cfg.lam)
    ag.backward(total)
    gnorm = math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in bank.parameters() if p.grad is not None))
    return total, StepResult(float(task.data), float(rl.data), float(total.data), masks, budget, gnorm)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: HybridModel
    bank: RouterBank
    ranking: ImportanceRanking
    metrics: list[dict]
    steps: int

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def metrics_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


def train(
    student: HybridModel,
    bank: RouterBank,
    ranking: ImportanceRanking,
    cfg: TrainConfig,
    *,
    teacher: HybridModel | None = None,
    corpus: tuple[CorpusSpec, CorpusSpec] | None = None,
    metrics_path: str | Path | None = None,
    callback=None,
) -> TrainResult:
    """Two-stage elastic training of ``student`` and ``bank`` (both updated in place).

    ``ranking`` must describe ``student``'s current parameter order (after
    re-sorting, its width orders are identities). ``callback(step, stage,
    result)`` runs after every update when given.
    """
    if cfg.teacher_mode == FROZEN and teacher is None:
        teacher = student.copy()
    corpus = corpus or stage_specs(cfg.stage1.seq_len, cfg.stage2.seq_len if cfg.stage2 else 4 * cfg.stage1.seq_len, cfg.seed)
    bank.schedule = replace(bank.schedule, horizon=cfg.horizon)
    student.requires_grad_(True)
    bank.requires_grad_(True)
    if teacher is not None and teacher is not student:
        teacher.requires_grad_(False)
    opt_model = SGDMomentum(student.parameters(), cfg.momentum, cfg.grad_clip)
    opt_router = SGDMomentum(bank.parameters(), cfg.momentum, cfg.grad_clip)
    rng_budget = np.random.default_rng([cfg.seed, 1])
    rng_gumbel = np.random.default_rng([cfg.seed, 2])
    matrices = option_matrices(bank, ranking)

    out_file = None
    if metrics_path is not None:
        out_file = open(metrics_path, "w", newline="")
        out_file.write(",".join(METRIC_COLUMNS) + "\n")
    rows: list[dict] = []
    stages = [(1, cfg.stage1, corpus[0], BudgetSampler.for_stage(1, bank.budgets))]
    if cfg.stage2 is not None and cfg.stage2.steps > 0:
        stages.append((2, cfg.stage2, corpus[1], BudgetSampler.for_stage(2, bank.budgets, cfg.alpha)))
    step = 0
    try:
        for stage, scfg, spec, sampler in stages:
            stream = BatchStream(replace(spec, seq_len=scfg.seq_len), scfg.batch_size, cfg.seed + 1000 * stage)
            for _ in range(scfg.steps):
                bank.set_step(step)
                budget = sample_budget(sampler, rng_budget)
                inputs, targets = stream.next()
                total, res = train_step(student, bank, ranking, inputs, targets, budget, cfg, rng_gumbel,
                                        teacher, matrices)
                if not np.isfinite(res.total):
                    raise FloatingPointError(
                        f"non-finite loss at step {step} (stage {stage}, budget {budget.label}): "
                        f"task={res.task} router={res.router}"
                    )
                lr_m = warmup_lr(cfg.lr_model, step, cfg.warmup_steps)
                lr_r = warmup_lr(cfg.lr_router, step, cfg.warmup_steps)
                opt_model.step(lr_m)
                opt_router.step(lr_r)
                if step % cfg.log_every == 0:
                    row = {
                        "step": step, "stage": stage, "budget_label": budget.label,
                        "task_loss": res.task, "router_loss": res.router, "total_loss": res.total,
                        "tau": bank.tau, "logit_scale": bank.logit_scale, "lr_model": lr_m, "lr_router": lr_r,
                    }
                    rows.append(row)
                    if out_file is not None:
                        out_file.write(",".join(_fmt(row[c]) for c in METRIC_COLUMNS) + "\n")
                if callback is not None:
                    callback(step, stage, res)
                step += 1
        bank.set_step(step)
    finally:
        if out_file is not None:
            out_file.close()
        student.requires_grad_(False)
    return TrainResult(student, bank, ranking, rows, step)


# ---------------------------------------------------------------------------
# pre-elastification training of the full model


def pretrain(
    model: HybridModel,
    specs: list[CorpusSpec],
    steps: int,
    batch_sizes: list[int],
    lr: float = 3e-3,
    warmup: int = 50,
    seed: int = 0,
    log=None,
) -> list[float]:
    """Plain CE training of the full model with Adam, cycling over ``specs``.

    Produces the capable base network that calibration ranks and that serves
    as the frozen teacher. Returns the loss per step.
    """
    model.requires_grad_(True)
    opt = Adam(model.parameters())
    streams = [BatchStream(s, b, seed + 17 * i) for i, (s, b) in enumerate(zip(specs, batch_sizes))]
    losses = []
    try:
        for step in range(steps):
            inputs, targets = streams[step % len(streams)].next()
            loss = ce_loss(stack_forward(model, None, inputs), targets)
            ag.backward(loss)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite pretraining loss at step {step}")
            cos = 0.5 * (1 + math.cos(math.pi * min(step / max(steps, 1), 1.0)))
            opt.step(warmup_lr(lr, step, warmup) * (0.1 + 0.9 * cos))
            losses.append(float(loss.data))
            if log is not None:
                log(step, losses[-1])
    finally:
        model.requires_grad_(False)
    return losses


# ---------------------------------------------------------------------------
# evaluation helpers


def eval_ce(model: HybridModel, masks: MaskSet | None, inputs: np.ndarray, targets: np.ndarray,
            batch_size: int = 8) -> float:
    """Mean CE over non-ignored targets (graph-free)."""
    total, count = 0.0, 0
    plain = masks.detached() if masks is not None else None
    with ag.no_grad():
        for s in range(0, len(inputs), batch_size):
            t = targets[s : s + batch_size]
            n = int((t != IGNORE).sum())
            if n == 0:
                continue
            loss = ce_loss(stack_forward(model, plain, inputs[s : s + batch_size]), t)
            total += float(loss.data) * n
            count += n
    if count == 0:
        raise ValueError("every target position is padding")
    return total / count


def eval_kd(student: HybridModel, teacher: HybridModel, masks: MaskSet, inputs: np.ndarray,
            temperature: float = 1.0, batch_size: int = 8) -> float:
    plain = masks.detached()
    vals = []
    with ag.no_grad():
        for s in range(0, len(inputs), batch_size):
            x = inputs[s : s + batch_size]
            vals.append(float(kd_loss(stack_forward(student, plain, x), full_logits(teacher, x), temperature).data) * len(x))
    return sum(vals) / len(inputs)


def training_masks(bank: RouterBank, ranking: ImportanceRanking, budget, integration: str = MODE2,
                   dtype=np.float32) -> MaskSet:
    """Noise-free masks at the bank's current temperature and scale, as used in training."""
    with ag.no_grad():
        routes = route(bank, budget, deterministic=True)
        masks, _ = generate_masks(bank, ranking, routes, integration, training=True, dtype=dtype)
    return masks.detached()
