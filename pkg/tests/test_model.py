import itertools
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from djds.benchmarks import ten_room_model, ten_room_region, tiny_model
from djds.errors import (
    DimensionMismatch, EmptyInputSet, EtaExceedsSpan, ModelFileError, TauMismatch,
)
from djds.model import (
    HistorySegment, InputSpace, LinearDjdsModel, OperatingRegion, QuantizedInputSet,
    lipschitz_constants, load_model_file, parse_model_document, quantize, sup_distance,
)

from helpers import scalar_model, zero_model

MODELS = os.path.join(os.path.dirname(__file__), os.pardir, "models")


# ---------------------------------------------------------------- LinearDjdsModel

def test_tau_is_max_delay():
    m = scalar_model(tau1=1.0, tau2=3.0, tau3=2.0)
    assert m.tau == 3.0
    assert m.r_bar == 1 and m.r_tilde == 1


def test_model_arrays_are_frozen():
    m = tiny_model()
    with pytest.raises(ValueError):
        m.A1[0, 0] = 5.0


def test_dimension_checks():
    with pytest.raises(DimensionMismatch):
        LinearDjdsModel(np.eye(2), np.eye(3), np.zeros((2, 1)))
    with pytest.raises(DimensionMismatch):
        LinearDjdsModel([[0.0]], [[0.0]], [[1.0]], R=[[[1.0]]], lam=[-1.0])
    with pytest.raises(DimensionMismatch):
        LinearDjdsModel([[0.0]], [[0.0]], [[1.0]], tau1=-1.0)
    with pytest.raises(DimensionMismatch):
        LinearDjdsModel([[0.0]], [[0.0]], [[1.0]], R=[[[1.0]]], lam=[1.0, 2.0])


def test_noiseless_flag():
    assert zero_model().noiseless
    assert not tiny_model().noiseless
    # resets with zero rate do nothing
    assert scalar_model(r=0.5, lam=0.0).noiseless


def test_hash_is_stable_and_content_based():
    assert ten_room_model().hash() == ten_room_model().hash()
    assert ten_room_model().hash() != ten_room_model({"lam": 0.2}).hash()


# ---------------------------------------------------------------- quantize

def test_explicit_set_is_kept_with_zero_eta():
    q = quantize(InputSpace.from_points([(1, 0), (0, 1), (0, 0)]), 0.7)
    assert len(q) == 3
    assert q.eta == 0.0
    np.testing.assert_array_equal(q.points, [[1, 0], [0, 1], [0, 0]])


def test_unit_interval_lattice():
    q = quantize(InputSpace.from_boxes([((0.0,), (1.0,))]), 1.0)
    np.testing.assert_array_equal(q.points[:, 0], [0.0, 1.0])


def test_unit_square_matches_brute_force_scan():
    q = quantize(InputSpace.from_boxes([((0.0, 0.0), (1.0, 1.0))]), 0.5)
    step = 0.5 / math.sqrt(2)
    scan = [(i * step, j * step) for i in range(-10, 11) for j in range(-10, 11)
            if 0 <= i * step <= 1 and 0 <= j * step <= 1]
    assert len(q) == len(scan) == 9
    np.testing.assert_allclose(q.points, sorted(scan))


def test_quantize_errors():
    box = InputSpace.from_boxes([((0.0,), (1.0,))])
    with pytest.raises(EtaExceedsSpan):
        quantize(box, 1.5)
    with pytest.raises(EtaExceedsSpan):
        quantize(box, 0.0)
    with pytest.raises(EmptyInputSet):
        InputSpace.from_points([])
    with pytest.raises(EmptyInputSet):
        InputSpace.from_boxes([((1.0,), (0.0,))])


def test_span_is_smallest_side():
    box = InputSpace.from_boxes([((0.0, 0.0), (2.0, 0.5)), ((3.0, 3.0), (4.0, 4.0))])
    assert box.span() == 0.5
    assert math.isinf(InputSpace.from_points([(0.0,)]).span())


@settings(max_examples=30, deadline=None)
@given(eta=st.floats(0.05, 1.0), lo=st.floats(-2, 2), width=st.floats(1.0, 3.0),
       seed=st.integers(0, 2**31))
def test_quantization_covers_the_box(eta, lo, width, seed):
    box = InputSpace.from_boxes([((lo, lo), (lo + width, lo + width))])
    q = quantize(box, eta)
    assert all(box.contains(p) for p in q.points)
    u = np.random.default_rng(seed).uniform(lo, lo + width, size=(200, 2))
    d = np.linalg.norm(u[:, None, :] - q.points[None], axis=2).min(axis=1)
    assert np.all(d <= eta + 1e-12)


def test_index_of_and_sup_norm():
    q = QuantizedInputSet(0.0, [[0.0, 0.0], [3.0, 4.0]])
    assert q.index_of([3.0, 4.0]) == 1
    assert q.sup_norm() == 5.0
    with pytest.raises(KeyError):
        q.index_of([1.0, 1.0])


# ---------------------------------------------------------------- Lipschitz constants

def test_lipschitz_zero_model():
    assert lipschitz_constants(zero_model()) == (0.0, 0.0, 0.0, 0.0)


def test_lipschitz_scalar_model():
    m = scalar_model(a1=-1.0, a2=0.5, b=2.0, g=0.1, gbar=0.05, r=0.2, rbar=0.0)
    np.testing.assert_allclose(lipschitz_constants(m), (1.5, 2.0, 0.15, 0.2), rtol=1e-12)


def test_lipschitz_ten_room_random_audit():
    m = ten_room_model()
    _, _, Lg, Lr = lipschitz_constants(m)
    np.testing.assert_allclose((Lg, Lr), (10 * (2e-3 + 1e-4), 10 * 1e-3), rtol=1e-10)
    region = ten_room_region()
    rng = np.random.default_rng(0)
    lo, hi = np.array(region.lo), np.array(region.hi)
    x, z, x2, z2 = (rng.uniform(lo, hi, size=(10_000, 10)) for _ in range(4))
    dist = np.maximum(np.linalg.norm(x - x2, axis=1), np.linalg.norm(z - z2, axis=1))

    def stacked(mats, bars, a, b):
        return np.einsum("rij,bj->bri", mats, a) + np.einsum("rij,bj->bri", bars, b)

    dG = stacked(m.G, m.Gbar, x, z) - stacked(m.G, m.Gbar, x2, z2)
    dR = stacked(m.R, m.Rbar, x, z) - stacked(m.R, m.Rbar, x2, z2)
    assert np.all(np.linalg.norm(dG, axis=(1, 2)) <= Lg * dist + 1e-12)
    assert np.all(np.linalg.norm(dR, axis=(1, 2)) <= Lr * dist + 1e-12)


# ---------------------------------------------------------------- history segments

def test_segment_exact_at_nodes_and_linear_between():
    seg = HistorySegment([[0.0], [2.0], [1.0]], 0.5, 1.0)
    np.testing.assert_array_equal(seg.evaluate(seg.nodes), seg.values)
    np.testing.assert_allclose(seg.evaluate(-0.75), [1.0])
    np.testing.assert_allclose(seg.evaluate(-0.25), [1.5])
    # clamped outside [-tau, 0]
    np.testing.assert_allclose(seg.evaluate(-3.0), [0.0])


def test_segment_validation():
    with pytest.raises(ValueError):
        HistorySegment([[0.0], [1.0]], 0.3, 1.0)
    with pytest.raises(ValueError):
        HistorySegment([[0.0], [1.0], [2.0]], 1.0, 1.0)


def test_sup_distance_examples():
    a = HistorySegment.constant([1.0, 0.0], 2.0, 0.5)
    b = HistorySegment.constant([0.0, 0.0], 2.0, 0.25)
    assert sup_distance(a, a) == 0.0
    assert sup_distance(a, b) == 1.0
    with pytest.raises(TauMismatch):
        sup_distance(a, HistorySegment.constant([0.0, 0.0], 1.0, 0.5))


def test_sup_distance_merged_grid_oracle():
    rng = np.random.default_rng(1)
    a = HistorySegment(rng.normal(size=(4, 2)), 1.0, 3.0)    # nodes every 1
    b = HistorySegment(rng.normal(size=(7, 2)), 0.5, 3.0)    # nodes every 0.5
    c = HistorySegment(rng.normal(size=(11, 2)), 0.3, 3.0)   # nodes every 0.3
    for x, y in ((a, b), (a, c), (b, c)):
        grid = np.union1d(x.nodes, y.nodes)
        brute = max(np.linalg.norm(x.evaluate(t) - y.evaluate(t)) for t in grid)
        assert sup_distance(x, y) == pytest.approx(brute, rel=1e-14)
        # no dense sample exceeds the merged-grid value
        dense = np.linspace(-3.0, 0.0, 3001)
        assert np.max(np.linalg.norm(x.evaluate(dense) - y.evaluate(dense), axis=1)) \
            <= sup_distance(x, y) + 1e-12


seg_values = st.lists(st.floats(-10, 10), min_size=5, max_size=5)


@settings(max_examples=50, deadline=None)
@given(seg_values, seg_values, seg_values)
def test_sup_distance_is_a_metric(u, v, w):
    a, b, c = (HistorySegment(np.array(x)[:, None], 0.25, 1.0) for x in (u, v, w))
    assert sup_distance(a, a) == 0.0
    assert sup_distance(a, b) == sup_distance(b, a)
    assert sup_distance(a, c) <= sup_distance(a, b) + sup_distance(b, c) + 1e-12
    if sup_distance(a, b) == 0.0:
        np.testing.assert_array_equal(a.values, b.values)


def test_region():
    r = OperatingRegion.uniform(15.0, 25.0, 10)
    assert r.diameter() == pytest.approx(10 * math.sqrt(10))
    with pytest.raises(ValueError):
        OperatingRegion((1.0,), (0.0,))


# ---------------------------------------------------------------- model files

def test_shipped_model_files_match_builders():
    m, space, region = load_model_file(os.path.join(MODELS, "ten_room.toml"))
    assert m.hash() == ten_room_model().hash()
    assert len(quantize(space, 0.0)) == 3
    assert region == ten_room_region()
    m, _, _ = load_model_file(os.path.join(MODELS, "tiny.toml"))
    assert m.hash() == tiny_model().hash()


def _doc(**model):
    base = {"n": 1, "m": 1, "A1": [[-1.0]], "B": [[1.0]]}
    base.update(model)
    return {"model": base, "input": {"points": [[0.0], [1.0]]}}


def test_parser_minimal_and_shorthand():
    m, space, region = parse_model_document(_doc(G_diag=[0.1], R_diag=[0.2], **{"lambda": 0.5}))
    assert region is None
    np.testing.assert_array_equal(m.G, [[[0.1]]])
    np.testing.assert_array_equal(m.lam, [0.5])
    assert space.explicit_points == ((0.0,), (1.0,))


def test_parser_rejects_unknown_keys():
    with pytest.raises(ModelFileError):
        parse_model_document(_doc(A3=[[1.0]]))
    doc = _doc()
    doc["extra"] = {}
    with pytest.raises(ModelFileError):
        parse_model_document(doc)
    doc = _doc()
    doc["input"]["eta"] = 0.1
    with pytest.raises(ModelFileError):
        parse_model_document(doc)


def test_parser_rejects_bad_shapes(tmp_path):
    with pytest.raises(ModelFileError):
        parse_model_document(_doc(A1=[[1.0, 2.0]]))
    with pytest.raises(ModelFileError):
        parse_model_document({"model": _doc()["model"], "input": {"points": [[0.0, 1.0]]}})
    bad = tmp_path / "bad.toml"
    bad.write_text("[model\n")
    with pytest.raises(ModelFileError):
        load_model_file(str(bad))
    with pytest.raises(ModelFileError):
        load_model_file(str(tmp_path / "missing.toml"))


def test_box_inputs_from_file():
    doc = _doc()
    doc["input"] = {"boxes": [[[0.0], [1.0]]]}
    _, space, _ = parse_model_document(doc)
    assert space.span() == 1.0
    assert [tuple(p) for p in quantize(space, 0.5).points] == [(0.0,), (0.5,), (1.0,)]


def test_all_product_inputs_are_contained():
    box = InputSpace.from_boxes([((0.0, 0.0), (1.0, 1.0))])
    for p in itertools.product([0.0, 0.5, 1.0], repeat=2):
        assert box.contains(p)
    assert not box.contains((1.5, 0.0))
