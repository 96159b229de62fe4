from __future__ import annotations

import random

import pytest
from oracles import rank_by_count, union_selection

from vocabprune.corpus import FrequencyTable
from vocabprune.spmodel import Piece, PieceKind, SpModel
from vocabprune.vocab import (
    MB,
    Group,
    ModelDims,
    SelectionParams,
    VocabPlan,
    default_specials,
    predict_param_reduction,
    select_vocabulary,
    top_k,
)

MT5_BASE = ModelDims(v_old=250112, d_model=768, n_vocab_matrices=2, total_params_old=582_401_280, bytes_per_param=4)


def toy_model(v: int) -> SpModel:
    pieces = [Piece("<unk>", 0.0, PieceKind.UNKNOWN)] + [Piece(f"<s{i}>", -float(i)) for i in range(1, v)]
    return SpModel(tuple(pieces))


def tbl(counts: dict[int, int], v: int) -> FrequencyTable:
    return FrequencyTable.from_mapping(counts, v)


def test_top_k():
    t = tbl({7: 5, 2: 5, 9: 1}, 10)
    assert top_k(t, 0) == []
    assert top_k(t, 2) == [2, 7]
    assert top_k(t, 99) == [2, 7, 9]


def test_worked_selection_example():
    model = toy_model(10)
    params = SelectionParams(n_total=5, n_top_original=2, n_secondary=1, specials=("<s9>",))
    target = tbl({8: 10, 3: 9, 7: 8, 5: 1}, 10)
    secondary = tbl({7: 4, 2: 1}, 10)
    plan = select_vocabulary(params, target, secondary, model)
    assert plan.new_to_old == (0, 1, 7, 8, 9)
    assert plan.groups == (Group.ORIGINAL_TOP, Group.ORIGINAL_TOP, Group.SECONDARY, Group.TARGET, Group.SPECIAL)
    assert plan.complete and plan.v_old == 10


def test_identity_plan():
    model = toy_model(6)
    params = SelectionParams(n_total=6, n_top_original=0, n_secondary=0, specials=())
    target = tbl({i: 10 - i for i in range(6)}, 6)
    plan = select_vocabulary(params, target, FrequencyTable.empty(6), model)
    assert plan.new_to_old == tuple(range(6))


def test_short_plan_is_flagged(caplog):
    model = toy_model(10)
    params = SelectionParams(n_total=8, n_top_original=2, n_secondary=0, specials=())
    plan = select_vocabulary(params, tbl({5: 1}, 10), FrequencyTable.empty(10), model)
    assert plan.new_to_old == (0, 1, 5)
    assert not plan.complete
    assert "budget unreachable" in caplog.text


def test_missing_special_raises():
    with pytest.raises(KeyError, match="<nope>"):
        select_vocabulary(
            SelectionParams(n_total=3, n_top_original=1, n_secondary=0, specials=("<nope>",)),
            FrequencyTable.empty(4), FrequencyTable.empty(4), toy_model(4),
        )


def test_params_invariant():
    with pytest.raises(ValueError, match="exceeds"):
        SelectionParams(n_total=10, n_top_original=5, n_secondary=5, specials=("a",))
    p = SelectionParams()
    assert (p.n_total, p.n_top_original, p.n_secondary, len(p.specials)) == (30000, 1000, 10000, 103)
    assert p.specials[:3] == ("<pad>", "</s>", "<unk>") and p.specials[-1] == "<extra_id_99>"


def test_extra_id_convention():
    model = toy_model(10)
    params = SelectionParams(n_total=6, n_top_original=2, n_secondary=0,
                             specials=("<extra_id_0>", "<extra_id_2>"), extra_ids=3)
    plan = select_vocabulary(params, tbl({4: 3, 6: 2}, 10), FrequencyTable.empty(10), model)
    # <extra_id_0> -> 10 + 3 - 1 - 0 = 12, <extra_id_2> -> 10
    assert plan.new_to_old == (0, 1, 4, 6, 10, 12)
    assert plan.v_old == 13
    assert plan.pieces[-2:] == ("<extra_id_2>", "<extra_id_0>")


def test_frequency_ranked_originals():
    model = toy_model(10)
    params = SelectionParams(n_total=4, n_top_original=2, n_secondary=0, specials=(), top_original="frequency")
    plan = select_vocabulary(params, tbl({5: 3, 8: 1}, 10), tbl({5: 1, 3: 9}, 10), model)
    assert dict(zip(plan.new_to_old, plan.groups)) == {
        3: Group.ORIGINAL_TOP, 5: Group.ORIGINAL_TOP, 8: Group.TARGET,
    }


def test_plan_json_round_trip(tmp_path):
    plan = VocabPlan((0, 2, 5), (Group.SPECIAL, Group.TARGET, Group.TARGET), v_old=9, n_total=3, pieces=("a", "b", "c"))
    plan.save(tmp_path / "plan.json")
    assert VocabPlan.load(tmp_path / "plan.json") == plan
    with pytest.raises(ValueError, match="increasing"):
        VocabPlan((2, 1), (Group.TARGET, Group.TARGET), v_old=3, n_total=2)


@pytest.mark.parametrize("seed", range(100))
def test_budget_exactness_against_union_oracle(seed):
    rng = random.Random(seed)
    v = rng.randint(14, 60)
    n_top = rng.randint(0, 4)
    n_sec = rng.randint(0, 6)
    specials = rng.sample(range(v), rng.randint(0, 3))
    n_total = rng.randint(n_top + n_sec + len(specials) + 1, v)
    # Target uses every id, so candidates always suffice.
    target = {i: rng.randint(1, 30) for i in range(v)}
    secondary = {i: rng.randint(0, 30) for i in rng.sample(range(v), rng.randint(0, v))}
    model = toy_model(v)
    params = SelectionParams(n_total=n_total, n_top_original=n_top, n_secondary=n_sec,
                             specials=tuple(model.pieces[i].text for i in specials))
    plan = select_vocabulary(params, tbl(target, v), tbl(secondary, v), model)

    kept, groups = union_selection(
        n_total, range(n_top), rank_by_count(secondary)[:n_sec], specials, rank_by_count(target)
    )
    assert len(plan.new_to_old) == n_total
    assert list(plan.new_to_old) == kept
    assert [g.value for g in plan.groups] == groups
    assert set(specials) <= set(plan.new_to_old)
    assert all(a < b for a, b in zip(plan.new_to_old, plan.new_to_old[1:]))
    assert select_vocabulary(params, tbl(target, v), tbl(secondary, v), model) == plan


# -- estimator ---------------------------------------------------------------


def test_estimator_identity():
    e = predict_param_reduction(MT5_BASE, MT5_BASE.v_old)
    assert e.params_removed == 0 and e.reduction_fraction == 0.0


def test_estimator_toy_arithmetic():
    e = predict_param_reduction(ModelDims(100, 4, 2, 1000, 4), 50)
    assert (e.params_removed, e.params_new) == (400, 600)
    assert e.reduction_fraction == pytest.approx(0.4)


def test_estimator_mt5_base():
    e = predict_param_reduction(MT5_BASE, 30000)
    # 2 * (250112 - 30000) * 768 = 338,092,032 removed
    assert e.params_removed == 338_092_032
    assert e.params_new == 244_309_248
    assert e.bytes_old / MB == pytest.approx(2329.605, abs=1e-3)
    assert e.bytes_new / MB == pytest.approx(977.237, abs=1e-3)
    assert e.reduction_fraction == pytest.approx(0.5805, abs=1e-4)


def test_estimator_rejects_growth():
    with pytest.raises(ValueError):
        predict_param_reduction(MT5_BASE, MT5_BASE.v_old + 1)


def test_estimator_monotone():
    prev = None
    for v in range(0, 250112, 12503):
        e = predict_param_reduction(MT5_BASE, v)
        if prev is not None:
            assert e.params_new > prev.params_new and e.reduction_fraction < prev.reduction_fraction
        prev = e


def test_default_specials():
    assert len(default_specials()) == 103


# -- properties --------------------------------------------------------------

from hypothesis import given, settings  # noqa: E402
from hypothesis import strategies as st  # noqa: E402


@st.composite
def selection_cases(draw):
    v = draw(st.integers(10, 40))
    counts = st.dictionaries(st.integers(0, v - 1), st.integers(0, 20), max_size=v)
    target, secondary = draw(counts), draw(counts)
    specials = draw(st.lists(st.integers(0, v - 1), max_size=3, unique=True))
    n_top = draw(st.integers(0, 3))
    n_sec = draw(st.integers(0, 3))
    n_total = draw(st.integers(n_top + n_sec + len(specials), v))
    mode = draw(st.sampled_from(["lowest_id", "frequency"]))
    return v, target, secondary, specials, n_top, n_sec, n_total, mode


@settings(max_examples=150, deadline=None)
@given(selection_cases())
def test_selection_properties(case):
    v, target, secondary, specials, n_top, n_sec, n_total, mode = case
    model = toy_model(v)
    params = SelectionParams(n_total=n_total, n_top_original=n_top, n_secondary=n_sec,
                             specials=tuple(model.pieces[i].text for i in specials), top_original=mode)
    plan = select_vocabulary(params, tbl(target, v), tbl(secondary, v), model)
    assert select_vocabulary(params, tbl(target, v), tbl(secondary, v), model) == plan
    assert all(a < b for a, b in zip(plan.new_to_old, plan.new_to_old[1:]))
    assert set(specials) <= set(plan.new_to_old)
    assert plan.v_new <= n_total
    # Short only when every candidate is already in.
    if not plan.complete:
        used = {i for i, c in target.items() if c > 0}
        assert used <= set(plan.new_to_old)
    assert VocabPlan.from_json(plan.to_json()) == plan


@settings(max_examples=200)
@given(st.integers(1, 250_111))
def test_estimator_strictly_monotone(v_new):
    a, b = predict_param_reduction(MT5_BASE, v_new - 1), predict_param_reduction(MT5_BASE, v_new)
    assert b.params_new > a.params_new
    assert b.reduction_fraction < a.reduction_fraction
