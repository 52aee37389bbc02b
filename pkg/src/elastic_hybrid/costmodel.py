"""Closed-form training-token and deployment-memory costs for model families."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

MINITRON, ELASTIC, PRETRAIN = "minitron", "elastic", "pretrain"
SEPARATE, NESTED = "separate", "nested"
GB = 1e9


@dataclass(frozen=True)
class FamilyPlan:
    """How a family of ``n`` models is produced and stored.

    Minitron-style compression pays ``tokens_explore + tokens_kd`` per model;
    elastic training pays ``tokens_elastic_kd`` once; pretraining pays each
    entry of ``tokens_pretrain``. ``sizes`` are parameter counts.
    """

    method: str
    n: int = 0
    tokens_explore: float | None = None
    tokens_kd: float | None = None
    tokens_elastic_kd: float | None = None
    tokens_pretrain: tuple[float, ...] = ()
    sizes: tuple[float, ...] = field(default_factory=tuple)
    dtype_bytes: int = 2
    eps_router: float = 0.0

    def __post_init__(self):
        if self.method not in (MINITRON, ELASTIC, PRETRAIN):
            raise ValueError(f"unknown method {self.method!r}")
        nums = [self.n, self.dtype_bytes, self.eps_router, *self.sizes, *self.tokens_pretrain]
        nums += [v for v in (self.tokens_explore, self.tokens_kd, self.tokens_elastic_kd) if v is not None]
        if any(v < 0 for v in nums):
            raise ValueError("family plan counts must be nonnegative")
        if self.eps_router >= 0.02:
            raise ValueError(f"router overhead must stay below 2%, got {self.eps_router}")


def tokens_required(plan: FamilyPlan) -> float:
    if plan.method == MINITRON:
        if plan.tokens_explore is None or plan.tokens_kd is None:
            raise ValueError("minitron plan needs tokens_explore and tokens_kd")
        return plan.n * (plan.tokens_explore + plan.tokens_kd)
    if plan.method == ELASTIC:
        if plan.tokens_elastic_kd is None:
            raise ValueError("elastic plan needs tokens_elastic_kd")
        return plan.tokens_elastic_kd
    if not plan.tokens_pretrain:
        raise ValueError("pretrain plan needs per-model tokens_pretrain")
    return float(sum(plan.tokens_pretrain))


def deployment_memory(plan: FamilyPlan, layout: str | None = None) -> float:
    """Bytes needed to serve every model of the family.

    ``layout`` defaults to nested for elastic plans and separate otherwise.
    """
    if not plan.sizes:
        raise ValueError("deployment memory needs at least one model size")
    layout = layout or (NESTED if plan.method == ELASTIC else SEPARATE)
    if layout == SEPARATE:
        return float(sum(plan.sizes)) * plan.dtype_bytes
    if layout == NESTED:
        return max(plan.sizes) * plan.dtype_bytes * (1.0 + plan.eps_router)
    raise ValueError(f"unknown memory layout {layout!r}")


# reference plans reproducing the published token and memory tables
TOKENS_EXPLORE_PER_MODEL = 240e9
TOKENS_KD_PER_MODEL = 135e9
TOKENS_ELASTIC_KD = 110e9


def reference_token_table() -> dict[str, float]:
    return {
        MINITRON: tokens_required(FamilyPlan(MINITRON, n=2, tokens_explore=TOKENS_EXPLORE_PER_MODEL,
                                             tokens_kd=TOKENS_KD_PER_MODEL)),
        ELASTIC: tokens_required(FamilyPlan(ELASTIC, n=2, tokens_elastic_kd=TOKENS_ELASTIC_KD)),
    }


def reference_memory_table() -> dict[str, float]:
    return {
        NESTED: deployment_memory(FamilyPlan(ELASTIC, n=3, sizes=(6e9, 9e9, 12e9)), NESTED),
        SEPARATE: deployment_memory(FamilyPlan(MINITRON, n=2, sizes=(9e9, 12e9)), SEPARATE),
    }


def sweep(n_max: int = 10, sizes_of=None, dtype_bytes: int = 2, eps_router: float = 0.0) -> list[dict]:
    """Family-size sweep rows (n, method, tokens, memory_bytes) for n = 1..n_max.

    ``sizes_of(n)`` gives the parameter counts of an n-model family; the
    default spaces n sizes evenly up to a 12e9 parent.
    """
    sizes_of = sizes_of or (lambda n: tuple(12e9 * (i + 1) / n for i in range(n)))
    rows = []
    for n in range(1, n_max + 1):
        sizes = sizes_of(n)
        mini = FamilyPlan(MINITRON, n=n, tokens_explore=TOKENS_EXPLORE_PER_MODEL, tokens_kd=TOKENS_KD_PER_MODEL,
                          sizes=sizes, dtype_bytes=dtype_bytes)
        elas = FamilyPlan(ELASTIC, n=n, tokens_elastic_kd=TOKENS_ELASTIC_KD, sizes=sizes,
                          dtype_bytes=dtype_bytes, eps_router=eps_router)
        rows.append({"n": n, "method": MINITRON, "tokens": tokens_required(mini), "memory_bytes": deployment_memory(mini)})
        rows.append({"n": n, "method": ELASTIC, "tokens": tokens_required(elas), "memory_bytes": deployment_memory(elas)})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["n", "method", "tokens", "memory_bytes"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "tokens": f"{r['tokens']:.0f}", "memory_bytes": f"{r['memory_bytes']:.0f}"})
    return buf.getvalue()
