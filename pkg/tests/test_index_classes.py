import numpy as np
import pytest

from poquim.errors import ConfigError, EnumerationBudgetError
from poquim.index_classes import (class_coefficients_ml, class_coefficients_reml, classify_quadruples,
                                  classify_triples)
from poquim.likelihood import ml_score_parts, reml_score_parts
from poquim.model import VarianceComponents, balanced_one_way, intercept_slope, one_way, two_way_crossed
from poquim.oracle import brute_force_class_means, brute_force_partition, brute_force_triple_means


def _same(part, brute):
    assert part.L == len(brute)
    for key, (bkey, bcount), h in zip(part.keys, brute, part.cardinalities):
        assert np.allclose(key.coeff, bkey)
        assert h == bcount


def test_oneway_two_by_two_cardinalities():
    part = classify_quadruples(balanced_one_way(2, 2))
    assert part.L == 2
    assert part.cardinalities.tolist() == [28, 4]
    assert [k.coeff for k in part.keys] == [(0.0, 1.0), (1.0, 1.0)]


@pytest.mark.parametrize("engine", ["enumerate", "factor"])
@pytest.mark.parametrize("model", [balanced_one_way(3, 2), two_way_crossed(2, 3), one_way([1, 2, 3])],
                         ids=["oneway", "crossed", "unbalanced"])
def test_engines_match_brute_force(model, engine):
    _same(classify_quadruples(model, engine=engine), brute_force_partition(model, 4))
    _same(classify_triples(model, engine=engine), brute_force_partition(model, 3))


def test_intercept_slope_classes():
    model = intercept_slope([1.0, 2.0, 3.5])
    part = classify_quadruples(model)
    _same(part, brute_force_partition(model, 4))
    assert part.L == 3 + 2


def test_factor_engine_refuses_real_loadings():
    with pytest.raises(ConfigError):
        classify_quadruples(intercept_slope([1.0, 2.0]), engine="factor")


def test_budget_guard():
    with pytest.raises(EnumerationBudgetError):
        classify_quadruples(two_way_crossed(6, 6), engine="enumerate", budget=100)


def test_crossed_cardinality_formulas():
    for m, n in [(2, 3), (4, 3), (5, 5)]:
        part = classify_quadruples(two_way_crossed(m, n))
        h = {k.coeff: int(c) for k, c in zip(part.keys, part.cardinalities)}
        assert h[(0.0, 1.0, 0.0)] == m * n * (n ** 3 - 1)
        assert h[(0.0, 0.0, 1.0)] == n * m * (m ** 3 - 1)
        assert h[(1.0, 1.0, 1.0)] == m * n


def test_class_coefficients_match_dense_means():
    model = one_way([2, 3, 2])
    th = VarianceComponents(1.4, [0.8])
    part = classify_quadruples(model)
    B = reml_score_parts(th, model)
    for j in range(2):
        for k in range(2):
            got = class_coefficients_reml(part, B, j, k)
            assert np.allclose(got, brute_force_class_means(model, B.B[j], B.B[k]), rtol=1e-12, atol=1e-16)
    C = ml_score_parts(th, model)
    c1, c2 = class_coefficients_ml(classify_triples(model), part, C, 0, 1)
    assert np.allclose(c1, brute_force_triple_means(model, C.q[:, 0], C.C[1]), rtol=1e-12, atol=1e-16)
    assert np.allclose(c2, brute_force_class_means(model, C.C[0], C.C[1]), rtol=1e-12, atol=1e-16)


def test_power_sums():
    model = balanced_one_way(3, 2)
    u = np.array([0.5, -1.0, 2.0, 0.3, -0.7, 1.1])
    pw = classify_quadruples(model).power_sums(u)
    g = u.reshape(3, 2)
    full = np.sum(g.sum(1) ** 4)
    diag = np.sum(u ** 4)
    assert pw == pytest.approx([full - diag, diag])
