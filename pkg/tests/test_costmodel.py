import csv
import io

import pytest
from hypothesis import given, strategies as st

from elastic_hybrid import costmodel as cm
from elastic_hybrid.costmodel import ELASTIC, MINITRON, NESTED, PRETRAIN, SEPARATE, FamilyPlan


def test_minitron_two_models_total():
    # published aggregates: 480B exploratory plus 270B final distillation
    plan = FamilyPlan(MINITRON, n=2, tokens_explore=240e9, tokens_kd=135e9)
    assert cm.tokens_required(plan) == 480e9 + 270e9 == 750e9


@pytest.mark.parametrize("n", [0, 1, 2, 7])
def test_elastic_tokens_ignore_family_size(n):
    assert cm.tokens_required(FamilyPlan(ELASTIC, n=n, tokens_elastic_kd=110e9)) == 110e9


def test_minitron_zero_models_costs_nothing():
    assert cm.tokens_required(FamilyPlan(MINITRON, n=0, tokens_explore=240e9, tokens_kd=135e9)) == 0


def test_pretrain_sums_per_model_tokens():
    assert cm.tokens_required(FamilyPlan(PRETRAIN, tokens_pretrain=(1e12, 2.5e12))) == 3.5e12


def test_reference_token_table_and_ratio():
    t = cm.reference_token_table()
    assert t == {MINITRON: 750e9, ELASTIC: 110e9}
    assert round(t[MINITRON] / t[ELASTIC], 1) == 6.8


def test_reference_memory_table_and_saving():
    m = cm.reference_memory_table()
    assert m == {NESTED: 24e9, SEPARATE: 42e9}
    assert round(1 - m[NESTED] / m[SEPARATE], 2) == 0.43


def test_memory_examples():
    assert cm.deployment_memory(FamilyPlan(ELASTIC, sizes=(6e9, 9e9, 12e9))) == 24e9
    assert cm.deployment_memory(FamilyPlan(MINITRON, sizes=(9e9, 12e9))) == 42e9
    assert cm.deployment_memory(FamilyPlan(ELASTIC, sizes=(12e9,), eps_router=0.01)) == pytest.approx(24.24e9)
    assert cm.deployment_memory(FamilyPlan(ELASTIC, sizes=(1e9,), dtype_bytes=4)) == 4e9


@given(st.floats(1e6, 1e11), st.integers(1, 4))
def test_single_model_layouts_agree(size, dtype_bytes):
    plan = FamilyPlan(ELASTIC, n=1, sizes=(size,), dtype_bytes=dtype_bytes)
    assert cm.deployment_memory(plan, NESTED) == cm.deployment_memory(plan, SEPARATE)


@given(st.lists(st.floats(1e6, 1e10), min_size=1, max_size=6), st.floats(0, 0.019))
def test_nested_memory_ignores_smaller_models(sizes, eps):
    big = max(sizes)
    base = cm.deployment_memory(FamilyPlan(ELASTIC, sizes=(big,), eps_router=eps))
    assert cm.deployment_memory(FamilyPlan(ELASTIC, sizes=tuple(sizes), eps_router=eps)) == base


def test_sweep_elastic_constant_minitron_linear():
    rows = cm.sweep(10)
    assert [r["n"] for r in rows] == [n for n in range(1, 11) for _ in range(2)]
    mini = [r for r in rows if r["method"] == MINITRON]
    elas = [r for r in rows if r["method"] == ELASTIC]
    assert {r["tokens"] for r in elas} == {110e9}
    assert [r["tokens"] for r in mini] == [n * 375e9 for n in range(1, 11)]
    assert {r["memory_bytes"] for r in elas} == {24e9}
    assert all(b["memory_bytes"] > a["memory_bytes"] for a, b in zip(mini, mini[1:]))


def test_sweep_csv_columns():
    rows = list(csv.DictReader(io.StringIO(cm.sweep_csv(cm.sweep(3)))))
    assert list(rows[0]) == ["n", "method", "tokens", "memory_bytes"]
    assert rows[0] == {"n": "1", "method": MINITRON, "tokens": "375000000000", "memory_bytes": "24000000000"}
    assert len(rows) == 6


@pytest.mark.parametrize("kw", [
    {"method": "other"},
    {"method": MINITRON, "n": -1},
    {"method": ELASTIC, "sizes": (-1.0,)},
    {"method": ELASTIC, "eps_router": 0.02},
    {"method": ELASTIC, "eps_router": -0.01},
])
def test_invalid_plans_rejected(kw):
    with pytest.raises(ValueError):
        FamilyPlan(**kw)


@pytest.mark.parametrize("plan", [
    FamilyPlan(MINITRON, n=2, tokens_explore=1.0),
    FamilyPlan(ELASTIC, n=2),
    FamilyPlan(PRETRAIN),
])
def test_missing_fields_rejected(plan):
    with pytest.raises(ValueError, match="needs"):
        cm.tokens_required(plan)


def test_memory_needs_sizes_and_known_layout():
    with pytest.raises(ValueError, match="size"):
        cm.deployment_memory(FamilyPlan(ELASTIC))
    with pytest.raises(ValueError, match="layout"):
        cm.deployment_memory(FamilyPlan(ELASTIC, sizes=(1.0,)), "shared")
