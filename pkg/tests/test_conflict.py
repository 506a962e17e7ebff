import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objsoup.conflict import (
    ConflictReport,
    GradientAccumulator,
    cosine,
    detect_conflicting_layers,
    pairwise_matrix,
)
from objsoup.param_space import Backbone, GradientMatrix, Layout, ParamVector, StructureError, Supervised


A, B = Backbone(0), Backbone(1)
OBJ2 = (Supervised(0, 0), Supervised(0, 1))
OBJ3 = OBJ2 + (Supervised(1, 0),)


def pv(x):
    return ParamVector(Layout((A,), (len(x),)), np.asarray(x, float))


def two_layer_matrix(rows_a, rows_b, objectives):
    layout = Layout((A, B), (len(rows_a[0]), len(rows_b[0])))
    return GradientMatrix(objectives, layout, np.hstack([np.asarray(rows_a, float), np.asarray(rows_b, float)]))


def test_cosine_examples():
    g = pv([1.0, -2.0, 0.5])
    assert cosine(g, pv(-g.data)) == pytest.approx(-1.0, abs=1e-15)
    assert cosine(g, g) == pytest.approx(1.0, abs=1e-15)
    c = cosine(pv([1, 0]), pv([0, 1]))
    assert c == 0.0 and not c < 0


def test_cosine_degenerate_flag():
    assert cosine(pv([0.0, 0.0]), pv([1.0, 0.0]), with_flag=True) == (0.0, True)
    assert cosine(pv([1e-16, 0.0]), pv([1.0, 0.0]), with_flag=True) == (0.0, True)
    assert cosine(pv([1.0, 0.0]), pv([1.0, 1.0]), with_flag=True)[1] is False


def test_cosine_filter_and_structure_errors():
    layout = Layout((A, B), (1, 1))
    x = ParamVector(layout, [1.0, 1.0])
    y = ParamVector(layout, [-1.0, 1.0])
    assert cosine(x, y, {A}) == pytest.approx(-1.0)
    assert cosine(x, y, {B}) == pytest.approx(1.0)
    with pytest.raises(StructureError):
        cosine(x, pv([1.0, 0.0, 0.0]))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_cosine_scale_invariance_and_antisymmetry(dim, seed, c):
    rng = np.random.default_rng(seed)
    gi, gj = pv(rng.standard_normal(dim)), pv(rng.standard_normal(dim))
    base = cosine(gi, gj)
    assert -1.0 <= base <= 1.0
    assert abs(cosine(pv(c * gi.data), gj) - base) <= 1e-12
    assert abs(cosine(pv(-gi.data), gj) + base) <= 1e-12


def test_pairwise_matrix_examples():
    g = [0.3, -1.2]
    assert np.allclose(pairwise_matrix([pv(g), pv([-x for x in g])]), [[1, -1], [-1, 1]], atol=1e-15)
    assert np.allclose(pairwise_matrix([pv(g)] * 3), np.ones((3, 3)), atol=1e-15)
    C = pairwise_matrix([pv([1, 0]), pv([1, 1])])
    assert C[0, 1] == pytest.approx(1 / np.sqrt(2), abs=1e-15)
    with pytest.raises(ValueError):
        pairwise_matrix([pv(g)])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_pairwise_matrix_invariants(m, dim, seed):
    rows = np.random.default_rng(seed).standard_normal((m, dim))
    C = pairwise_matrix([pv(r) for r in rows])
    assert np.array_equal(C, C.T)
    assert np.all(np.diag(C) == 1.0)
    assert np.all(np.abs(C) <= 1.0)
    # entries agree with the scalar cosine
    for i in range(m):
        for j in range(m):
            if i != j:
                assert abs(C[i, j] - cosine(pv(rows[i]), pv(rows[j]))) <= 1e-12


def accumulate(G, epochs=1, window=20):
    acc = GradientAccumulator(G.objectives, G.layout, window)
    for e in range(epochs):
        acc.add(e, G)
    return acc


def test_detect_example_layer_a_conflicts():
    G = two_layer_matrix([[1, 0], [-1, 0]], [[1, 0], [1, 0]], OBJ2)
    rep = detect_conflicting_layers(accumulate(G))
    assert rep.conflicting_layers == {A}
    assert rep.conflicting_pairs[A] == {(0, 1)}
    assert rep.conflicting_pairs[B] == frozenset()
    assert rep.mode == "literal"


def test_detect_identical_gradients_no_conflict():
    G = two_layer_matrix([[1, 2]] * 3, [[0.5, -1]] * 3, OBJ3)
    assert detect_conflicting_layers(accumulate(G)).conflicting_layers == frozenset()


def three_objective_layer(c01, c02, c12):
    """Rows with prescribed pairwise cosines (Cholesky of the Gram matrix)."""
    C = np.array([[1, c01, c02], [c01, 1, c12], [c02, c12, 1]])
    return np.linalg.cholesky(C)


def test_stated_cosine_triple_is_not_realisable():
    # (-0.5, 0.9, 0.9) is not a Gram matrix of unit vectors: it has a
    # negative eigenvalue, so the detection test uses (-0.5, 0.4, 0.4)
    C = np.array([[1, -0.5, 0.9], [-0.5, 1, 0.9], [0.9, 0.9, 1]])
    assert np.linalg.eigvalsh(C).min() < 0


def test_detect_three_objectives_one_negative_pair():
    rows = three_objective_layer(-0.5, 0.4, 0.4)
    C = rows @ rows.T
    # enumerate pairs and apply the literal rule by hand
    negative = [C[i, j] for i in range(3) for j in range(i + 1, 3) if C[i, j] < 0]
    literal = bool(negative) and np.mean(negative) < 0
    assert literal
    layout = Layout((A,), (3,))
    rep = detect_conflicting_layers(accumulate(GradientMatrix(OBJ3, layout, rows)))
    assert rep.conflicting_layers == {A}
    assert rep.conflicting_pairs[A] == {(0, 1)}
    # the all-pairs mean is positive, so threshold mode at tau=0 does not flag it
    thr = detect_conflicting_layers(accumulate(GradientMatrix(OBJ3, layout, rows)), mode="threshold", tau=0.0)
    assert thr.conflicting_layers == frozenset()
    assert thr.mode == "threshold"
    assert detect_conflicting_layers(accumulate(GradientMatrix(OBJ3, layout, rows)), mode="threshold",
                                     tau=0.5).conflicting_layers == {A}


def test_detect_errors():
    G = two_layer_matrix([[1, 0]], [[1, 0]], OBJ2[:1])
    with pytest.raises(ValueError):
        detect_conflicting_layers(GradientAccumulator(G.objectives, G.layout))
    with pytest.raises(ValueError):
        detect_conflicting_layers(accumulate(G))
    with pytest.raises(ValueError):
        detect_conflicting_layers(accumulate(two_layer_matrix([[1], [2]], [[1], [2]], OBJ2)), mode="bogus")


def test_dead_layer_never_conflicts():
    G = two_layer_matrix([[0, 0], [0, 0]], [[1, 0], [-1, 0]], OBJ2)
    rep = detect_conflicting_layers(accumulate(G))
    assert rep.conflicting_layers == {B}
    assert A in rep.degenerate_layers


def test_accumulator_window_and_mean():
    layout = Layout((A,), (2,))
    acc = GradientAccumulator(OBJ2, layout, window=2)
    g = lambda v: GradientMatrix(OBJ2, layout, v)  # noqa: E731
    assert acc.add(0, g([[1, 0], [0, 1]]))
    assert acc.add(1, g([[3, 0], [0, 3]]))
    assert not acc.add(2, g([[100, 0], [0, 100]]))
    assert acc.count == 2 and acc.epochs_observed == 2 and acc.full
    assert np.array_equal(acc.mean().array, [[2, 0], [0, 2]])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(range(5)))
def test_detection_invariant_to_epoch_order(seed, order):
    rng = np.random.default_rng(seed)
    layout = Layout((A, B), (3, 2))
    mats = [GradientMatrix(OBJ3, layout, rng.standard_normal((3, 5))) for _ in range(5)]
    a = GradientAccumulator(OBJ3, layout, window=5)
    b = GradientAccumulator(OBJ3, layout, window=5)
    for e in range(5):
        a.add(e, mats[e])
    for e in order:
        b.add(e, mats[e])
    ra, rb = detect_conflicting_layers(a), detect_conflicting_layers(b)
    assert ra.conflicting_layers == rb.conflicting_layers
    assert np.array_equal(ra.global_cosine, rb.global_cosine)
    for blk in (A, B):
        assert np.array_equal(ra.per_layer_cosine[blk], rb.per_layer_cosine[blk])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_report_invariants(seed):
    rng = np.random.default_rng(seed)
    layout = Layout((A, B), (3, 2))
    rep = detect_conflicting_layers(accumulate(GradientMatrix(OBJ3, layout, rng.standard_normal((3, 5)))))
    for blk, C in rep.per_layer_cosine.items():
        assert np.allclose(C, C.T, atol=1e-12)
        assert np.allclose(np.diag(C), 1.0, atol=1e-12)
        assert np.all(np.abs(C) <= 1 + 1e-12)
        expected = {(i, j) for i in range(3) for j in range(i + 1, 3) if C[i, j] < 0}
        assert rep.conflicting_pairs[blk] == expected


def test_csv_rows_are_symmetric_and_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    layout = Layout((A, B), (3, 2))
    rep = detect_conflicting_layers(accumulate(GradientMatrix(OBJ3, layout, rng.standard_normal((3, 5)))))
    text = rep.to_csv(per_layer=True)
    lines = text.strip().split("\n")
    assert lines[0] == "layer_id,obj_i,obj_j,cosine,conflicting"
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == 3 * 6
    vals = {(r[0], r[1], r[2]): (float(r[3]), int(r[4])) for r in rows}
    for (layer, i, j), (c, flag) in vals.items():
        assert vals[(layer, j, i)][0] == c
        assert flag == int(c < 0)
    assert float(rows[0][3]) == rep.rows()[0]["cosine"]
    assert len(rep.to_csv(per_layer=False).strip().split("\n")) == 1 + 6

    back = ConflictReport.from_json(rep.to_json())
    assert back.conflicting_layers == rep.conflicting_layers
    assert back.objective_ids == rep.objective_ids
    assert np.array_equal(back.global_cosine, rep.global_cosine)
    for blk in rep.per_layer_cosine:
        assert np.array_equal(back.per_layer_cosine[blk], rep.per_layer_cosine[blk])
    assert json.loads(back.to_json()) == json.loads(rep.to_json())


def test_accumulator_npz_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    layout = Layout((A, B), (3, 2))
    acc = GradientAccumulator(OBJ3, layout, window=3)
    for e in range(3):
        acc.add(e, GradientMatrix(OBJ3, layout, rng.standard_normal((3, 5))))
    acc.to_npz(tmp_path / "acc.npz")
    back = GradientAccumulator.from_npz(tmp_path / "acc.npz")
    assert back.objectives == acc.objectives
    assert back.count == acc.count and back.window == acc.window
    assert np.array_equal(back.mean().array, acc.mean().array)
