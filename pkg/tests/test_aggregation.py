import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nodecorr.aggregation import (
    AfaParams,
    GateMask,
    afa,
    afa_backward,
    aggregate,
    channel_descriptor,
    gate,
    parameterized_descriptor,
)
from nodecorr.exceptions import NumericError, ShapeError, StateError
from nodecorr.ndcore import ParamStore
from nodecorr.verify import (
    PermutationMatrix,
    apply_perm,
    gradcheck_afa,
    oracle_afa,
    random_afa_params,
)


def test_channel_descriptor_examples():
    assert channel_descriptor([[1.0, 2.0], [3.0, 4.0]]).tolist() == [2.0, 3.0]
    assert channel_descriptor([[5.0, -1.0]]).tolist() == [5.0, -1.0]
    with pytest.raises(ShapeError):
        channel_descriptor(np.zeros((0, 3)))


def test_channel_descriptor_permutation_invariant():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(30, 8))
    perm = PermutationMatrix.random(30, rng)
    assert np.allclose(channel_descriptor(apply_perm(perm, v)), channel_descriptor(v),
                       atol=1e-15, rtol=0)


def test_parameterized_descriptor_zero_mlp():
    store = ParamStore()
    p = AfaParams.create(store, "afa", 8, 2)
    assert not parameterized_descriptor(np.ones(8), p.mlp1).any()


def test_gate_examples():
    m = gate(np.zeros(4), np.zeros(4))
    assert np.all(m.m1 == 0.5) and np.all(m.m2 == 0.5)
    m = gate([math.log(3)], [0.0])
    assert abs(m.m1[0] - 0.75) <= 1e-15


# |z1 - z2| <= 30 keeps both masks representably inside (0, 1); past about 37
# the smaller exponential drops below half an ulp of 1 and m1 rounds to 1.0
finite = st.floats(-15, 15, allow_nan=False, allow_infinity=False)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, 16, elements=finite), arrays(np.float64, 16, elements=finite))
def test_gate_complementary_and_open(z1, z2):
    m = gate(z1, z2)
    assert np.max(np.abs(m.m1 + m.m2 - 1)) <= 1e-15
    assert np.all((m.m1 > 0) & (m.m1 < 1))


def test_gate_saturates_in_float64_for_extreme_gaps():
    m = gate([40.0], [0.0])
    assert m.m1[0] == 1.0 and 0 < m.m2[0] < 1e-17


def test_gate_rejects_bad_input():
    with pytest.raises(NumericError):
        gate([np.nan], [0.0])
    with pytest.raises(ShapeError):
        gate(np.zeros(2), np.zeros(3))


def test_aggregate_endpoints():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert np.array_equal(aggregate(a, b, GateMask(np.ones(3), np.zeros(3))), a)
    assert np.array_equal(aggregate(a, b, GateMask(np.zeros(3), np.ones(3))), b)
    assert np.array_equal(aggregate(a, a, GateMask(np.full(3, 0.3), np.full(3, 0.7))),
                          0.3 * a + 0.7 * a)
    with pytest.raises(ShapeError):
        aggregate(a, b[:4], GateMask(np.ones(3), np.zeros(3)))


def test_afa_matches_oracle_both_forms():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.normal(size=(10, 8)), rng.normal(size=(10, 8))
        p = random_afa_params(8, 4, rng)
        for params in (p, None):
            assert np.max(np.abs(afa(a, b, params) - oracle_afa(a, b, params))) <= 1e-12


def test_afa_equivariance():
    rng = np.random.default_rng(3)
    p = random_afa_params(16, 4, rng)
    a, b = rng.normal(size=(50, 16)), rng.normal(size=(50, 16))
    for _ in range(10):
        perm = PermutationMatrix.random(50, rng)
        lhs = afa(apply_perm(perm, a), apply_perm(perm, b), p)
        assert np.max(np.abs(lhs - apply_perm(perm, afa(a, b, p)))) <= 1e-9


def test_afa_of_identical_inputs_is_identity():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(6, 8))
    assert np.allclose(afa(a, a, random_afa_params(8, 2, rng)), a, atol=1e-15, rtol=0)


def test_afa_gradients():
    rng = np.random.default_rng(5)
    for _ in range(3):
        assert gradcheck_afa(rng) <= 1e-5
        assert gradcheck_afa(rng, parameter_free=True) <= 1e-5


def test_afa_backward_requires_cache():
    with pytest.raises(StateError):
        afa_backward(np.zeros((2, 2)), None)


def test_afa_reduction_must_divide_channels():
    with pytest.raises(ShapeError):
        AfaParams.create(ParamStore(), "afa", 10, 4)
