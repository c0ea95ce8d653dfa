import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hetmoe.core import DimensionError
from hetmoe.experts import ExpertOutput
from hetmoe.fusion import (CheckpointError, ClassifierHead, FusionError, ModelSettings, ProjectionLayer, classify,
                           classify_logit, classify_rows, concat_fuse, load_checkpoint, project, save_checkpoint,
                           weighted_fuse, zero_model)
from hetmoe.router import RoutingDecision
from hetmoe.trainer import init_model


def _decision(pairs, n=3):
    return RoutingDecision(tuple(pairs), np.full(n, 1.0 / n), "hard")


def _layer(W, b):
    return ProjectionLayer([np.asarray(W, float)], [np.asarray(b, float)])


def test_project_examples():
    assert project(ExpertOutput(0, np.array([1.0, 2.0])), _layer(np.eye(2), [0, 0])).tolist() == [1, 2]
    assert project(ExpertOutput(0, np.array([5.0, -7.0])), _layer(np.zeros((2, 2)), [3, 3])).tolist() == [3, 3]
    # hand multiply: (1 + 3, 2)
    out = project(ExpertOutput(0, np.array([1.0, 2.0, 3.0])), _layer([[1, 0, 1], [0, 1, 0]], [0, 0]))
    assert out.tolist() == [4.0, 2.0]


def test_project_errors():
    layer = _layer(np.eye(2), [0, 0])
    with pytest.raises(FusionError):
        project(ExpertOutput(1, np.ones(2)), layer)
    with pytest.raises(FusionError):
        project(ExpertOutput(0, np.ones(3)), layer)
    with pytest.raises(DimensionError):
        ProjectionLayer([np.eye(2), np.eye(3)], [np.zeros(2), np.zeros(3)])


def test_project_l2_option():
    layer = ProjectionLayer([np.eye(2)], [np.zeros(2)], l2_normalize=True)
    assert np.allclose(project(ExpertOutput(0, np.array([3.0, 4.0])), layer), [0.6, 0.8])


def test_concat_examples():
    f = concat_fuse(_decision([(0, 0.5), (2, 0.5)]), {0: np.array([1.0, 0.0]), 2: np.array([0.0, 2.0])}, 2)
    assert f.z.tolist() == [0.5, 0.0, 0.0, 1.0] and list(f.slot_ids) == [0, 2]
    f = concat_fuse(_decision([(1, 1.0)]), {1: np.array([3.0, 4.0])}, 1)
    assert f.z.tolist() == [3.0, 4.0]
    f = concat_fuse(_decision([(1, 1.0)]), {1: np.array([3.0, 4.0])}, 2)
    assert f.z.tolist() == [3.0, 4.0, 0.0, 0.0] and f.slot_gates == (1.0, 0.0)


def test_concat_slots_follow_expert_id_not_gate():
    f = concat_fuse(_decision([(2, 0.9), (0, 0.1)]), {0: np.ones(2), 2: np.ones(2)}, 2)
    assert f.slot_ids == (0, 2) and f.slot_gates == (0.1, 0.9)


def test_concat_errors():
    with pytest.raises(FusionError):
        concat_fuse(_decision([(0, 0.5), (1, 0.5)]), {0: np.ones(2)}, 2)
    with pytest.raises(FusionError):
        concat_fuse(_decision([(0, 0.5), (1, 0.5)]), {0: np.ones(2), 1: np.ones(2)}, 1)
    with pytest.raises(FusionError):
        weighted_fuse(_decision([(2, 1.0)]), {0: np.ones(2)})


def test_concat_without_gate_scaling():
    f = concat_fuse(_decision([(0, 0.25), (1, 0.75)]), {0: np.ones(2), 1: 2 * np.ones(2)}, 2, gate_scaling=False)
    assert f.z.tolist() == [1.0, 1.0, 2.0, 2.0]


def test_weighted_examples():
    h = {0: np.array([2.0, 0.0]), 1: np.array([0.0, 2.0])}
    assert weighted_fuse(_decision([(0, 0.5), (1, 0.5)]), h).tolist() == [1.0, 1.0]
    assert weighted_fuse(_decision([(1, 1.0)]), h).tolist() == [0.0, 2.0]
    h = {0: np.array([4.0, 0.0]), 1: np.array([0.0, 4.0])}
    assert weighted_fuse(_decision([(0, 0.75), (1, 0.25)]), h).tolist() == [3.0, 1.0]


def test_interference_regression():
    h = np.array([1.5, -2.0, 0.5])
    proj = {0: h, 1: -h}
    d = _decision([(0, 0.5), (1, 0.5)])
    assert np.array_equal(weighted_fuse(d, proj), np.zeros(3))
    assert np.linalg.norm(concat_fuse(d, proj, 2).z) > 0


def test_classify_examples():
    head = ClassifierHead(np.zeros((4, 2)), np.zeros(4), np.zeros((1, 4)), np.zeros(1))
    assert classify(np.array([1.0, -1.0]), head) == 0.5
    head = ClassifierHead(np.zeros((4, 2)), np.zeros(4), np.zeros((1, 4)), np.array([50.0]))
    assert abs(classify(np.array([1.0, -1.0]), head) - 1.0) < 1e-12
    head = ClassifierHead(np.array([[1.0, 1.0]]), np.zeros(1), np.array([[1.0]]), np.zeros(1))
    assert classify(np.array([1.0, 1.0]), head) == pytest.approx(1 / (1 + math.exp(-2.0)), abs=1e-15)
    assert classify(np.array([1.0, 1.0]), head) == pytest.approx(0.8808, abs=1e-4)
    with pytest.raises(DimensionError):
        classify(np.ones(3), head)


vec = st.integers(1, 5).flatmap(lambda d: st.tuples(
    arrays(np.float64, d, elements=st.floats(-10, 10)), arrays(np.float64, d, elements=st.floats(-10, 10))))


@given(vec, st.floats(0.0, 1.0))
def test_concat_norm_decomposition(hs, g):
    h0, h1 = hs
    f = concat_fuse(_decision([(0, g), (1, 1 - g)]), {0: h0, 1: h1}, 2)
    expected = g * g * h0.dot(h0) + (1 - g) ** 2 * h1.dot(h1)
    assert abs(f.z.dot(f.z) - expected) <= 1e-9 * max(1.0, expected)


@given(vec, st.integers(0, 2))
def test_k1_equivalence(hs, e):
    h = hs[0]
    d = _decision([(e, 1.0)])
    assert np.array_equal(weighted_fuse(d, {e: h}), concat_fuse(d, {e: h}, 1).z)


@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)), arrays(np.float64, 2, elements=st.floats(-3, 3)),
       st.floats(-20, 20), st.floats(0, 20))
def test_classify_monotone_in_bias(Wp, z, bc, step):
    head = ClassifierHead(Wp, np.zeros(3), np.ones((1, 3)), np.array([bc]))
    lo = classify(z, head)
    head.bc = np.array([bc + step])
    assert classify(z, head) >= lo


def test_classify_rows_matches_single():
    model = init_model(ModelSettings(), [32, 48, 64], seed=4)
    Z = np.random.default_rng(1).normal(size=(9, model.settings.fused_width))
    rows = classify_rows(Z, model.head)
    assert all(rows[i] == classify_logit(Z[i], model.head) for i in range(9))


def test_checkpoint_roundtrip(tmp_path):
    model = init_model(ModelSettings(strategy="soft", fusion="weighted", tau=0.3, rule_table={"ID": 1}),
                       [32, 48, 64], seed=9)
    path = tmp_path / "m.bin"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.settings == model.settings
    assert [n for n, _ in back.arrays()] == [n for n, _ in model.arrays()]
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(back.arrays(), model.arrays()))
    save_checkpoint(back, tmp_path / "again.bin")
    assert (tmp_path / "again.bin").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    good = tmp_path / "good.bin"
    save_checkpoint(zero_model(ModelSettings(), [4, 5, 6]), good)
    p.write_bytes(good.read_bytes() + b"x")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
