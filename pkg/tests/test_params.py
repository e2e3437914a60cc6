import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedklpr.params import (
    DegenerateModel,
    Layer,
    MaskLayer,
    ParamVector,
    PruneMask,
    StructuralMismatch,
    apply_mask,
    linear_combine,
    pruning_ratio,
)


def pv(*vals, prunable=True):
    return ParamVector([Layer(f"l{i}", (len(v),), np.array(v, float), prunable) for i, v in enumerate(vals)])


def mask_for(p, *bits):
    return PruneMask([MaskLayer(l.name, np.array(b, bool), l.prunable) for l, b in zip(p.layers, bits)])


def test_apply_mask_identity():
    p = pv([1.0, -2.0, 3.0])
    out = apply_mask(p, PruneMask.ones_like(p))
    assert np.array_equal(out.flat(), p.flat())


def test_apply_mask_elementwise():
    p = pv([1.0, 2.0])
    assert apply_mask(p, mask_for(p, [1, 0])).flat().tolist() == [1.0, 0.0]


def test_apply_mask_no_negative_zero():
    p = pv([-1.0])
    out = apply_mask(p, mask_for(p, [0]))
    assert np.signbit(out.flat()).tolist() == [False]


def test_apply_mask_structural_mismatch():
    p = pv([1.0], [2.0])
    m = PruneMask([MaskLayer("l0", [True], True)])
    with pytest.raises(StructuralMismatch):
        apply_mask(p, m)


def test_pruning_ratio_cases():
    p = pv([0.0] * 10)
    assert pruning_ratio(PruneMask.ones_like(p)) == 0.0
    assert pruning_ratio(mask_for(p, [0] * 7 + [1] * 3)) == 0.7


def test_pruning_ratio_ignores_nonprunable_layers():
    p = ParamVector([Layer("w", (2, 2), np.zeros(4), True), Layer("b", (2,), np.zeros(2), False)])
    m = PruneMask([MaskLayer("w", [0, 1, 1, 1], True), MaskLayer("b", [1, 1], False)])
    assert pruning_ratio(m) == 0.25


def test_pruning_ratio_degenerate():
    p = pv([1.0, 2.0], prunable=False)
    with pytest.raises(DegenerateModel):
        pruning_ratio(PruneMask.ones_like(p))


def test_linear_combine_cases():
    p = pv([1.5, -2.0])
    assert np.array_equal(linear_combine([(1.0, p)]).flat(), p.flat())
    assert np.array_equal(linear_combine([(0.5, p), (0.5, p)]).flat(), p.flat())
    assert linear_combine([(0.25, pv([4.0])), (0.75, pv([0.0]))]).flat().tolist() == [1.0]


def test_linear_combine_errors():
    with pytest.raises(ValueError):
        linear_combine([])
    with pytest.raises(StructuralMismatch):
        linear_combine([(1.0, pv([1.0])), (1.0, pv([1.0, 2.0]))])


vectors = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=40)


@given(vectors, st.data())
def test_apply_mask_idempotent(vals, data):
    p = pv(vals)
    bits = data.draw(st.lists(st.booleans(), min_size=len(vals), max_size=len(vals)))
    m = mask_for(p, bits)
    once = apply_mask(p, m)
    assert apply_mask(once, m).bitwise_equal(once)


@given(st.integers(1, 200), st.data())
def test_pruning_ratio_exact_count(n, data):
    k = data.draw(st.integers(0, n))
    p = pv([0.0] * n)
    bits = np.ones(n, bool)
    bits[data.draw(st.permutations(range(n)))[:k]] = False
    assert pruning_ratio(mask_for(p, bits)) == k / n


@settings(max_examples=50)
@given(vectors, st.lists(st.floats(0.01, 1.0), min_size=1, max_size=6))
def test_linear_combine_convex_identity(vals, raw_w):
    w = np.array(raw_w) / np.sum(raw_w)
    p = pv(vals)
    out = linear_combine([(wi, p) for wi in w])
    assert np.max(np.abs(out.flat() - p.flat())) <= 1e-12
