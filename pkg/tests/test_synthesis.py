import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from djds.abstraction import (
    AbstractionParams, AbstractState, ShiftAbstraction, decode, output_map, successor_index,
)
from djds.benchmarks import tiny_model
from djds.errors import ConfigError, EmptyContractedZone, EmptyController, NoMatch
from djds.model import HistorySegment, QuantizedInputSet, sup_distance
from djds.simulate import SimConfig
from djds.synthesis import (
    Controller, SafetySpec, allowed_masks, controller_bytes, extract_controller, input_schedule,
    label_safe, match_initial, maximal_invariant, pick_input, popcount, read_bitmap,
    read_controller, run_closed_loop, write_bitmap, write_controller, write_input_csv,
)

from helpers import noiseless, tiny_params, zero_model


def brute_invariant(bitmap, q, N):
    """Backward iteration on the explicit successor graph."""
    S = {i for i in range(q ** N) if bitmap[i]}
    while True:
        keep = {s for s in S if any(successor_index(s, u, q, N) in S for u in range(q))}
        if keep == S:
            return S
        S = keep


def _params(q, N):
    pts = QuantizedInputSet(0.0, np.arange(q, dtype=float)[:, None])
    return AbstractionParams(1.0, N, HistorySegment.constant([0.0], 0.0), pts)


# ---------------------------------------------------------------- fixed point

def test_invariant_trivial_cases():
    q, N = 3, 3
    full = np.ones(q ** N, bool)
    np.testing.assert_array_equal(maximal_invariant(full, q, N), full)
    assert not maximal_invariant(np.zeros(q ** N, bool), q, N).any()
    with pytest.raises(ConfigError):
        maximal_invariant(np.ones(5, bool), q, N)


def test_invariant_matches_explicit_graph():
    rng = np.random.default_rng(0)
    for _ in range(100):
        bm = rng.random(8) < rng.uniform(0.2, 0.9)
        got = maximal_invariant(bm, 2, 3)
        assert set(np.flatnonzero(got)) == brute_invariant(bm, 2, 3)


@settings(max_examples=60, deadline=None)
@given(q=st.integers(1, 4), N=st.integers(1, 6), seed=st.integers(0, 2**31),
       density=st.floats(0.1, 1.0))
def test_invariant_is_a_fixed_point_inside_the_bitmap(q, N, seed, density):
    bm = np.random.default_rng(seed).random(q ** N) < density
    inv = maximal_invariant(bm, q, N)
    assert not np.any(inv & ~bm)
    np.testing.assert_array_equal(maximal_invariant(inv, q, N), inv)
    # every kept state has a successor inside
    for s in np.flatnonzero(inv):
        assert any(inv[successor_index(int(s), u, q, N)] for u in range(q))


@pytest.mark.parametrize("N", [2, 5, 8])
def test_controller_closure_exhaustive(N):
    q = 3
    bm = np.random.default_rng(N).random(q ** N) < 0.8
    inv = maximal_invariant(bm, q, N)
    ctrl = extract_controller(inv, _params(q, N))
    idx = np.flatnonzero(ctrl.safe)
    for u in range(q):
        ok = ((ctrl.allowed[idx] >> u) & 1).astype(bool)
        assert np.all(ctrl.safe[successor_index(idx[ok], u, q, N)])
        # inputs left out really do leave the invariant
        assert not np.any(ctrl.safe[successor_index(idx[~ok], u, q, N)])
    assert np.all(ctrl.allowed[idx] > 0)
    assert not ctrl.allowed[~ctrl.safe].any()


def test_closure_sampling():
    q, N = 3, 10
    inv = maximal_invariant(np.random.default_rng(1).random(q ** N) < 0.9, q, N)
    ctrl = extract_controller(inv, _params(q, N))
    rng = np.random.default_rng(2)
    s = rng.choice(np.flatnonzero(ctrl.safe), size=100_000)
    u = rng.integers(0, q, size=s.size)
    keep = ((ctrl.allowed[s] >> u) & 1).astype(bool)
    assert keep.sum() > 0
    assert np.all(ctrl.safe[successor_index(s[keep], u[keep], q, N)])


def test_extract_all_safe_counts():
    q, N = 3, 4
    ctrl = extract_controller(np.ones(q ** N, bool), _params(q, N))
    assert ctrl.num_states == q ** N
    assert ctrl.num_transitions == q ** (N + 1)
    assert ctrl.allowed_inputs(7) == [0, 1, 2]
    with pytest.raises(EmptyController):
        extract_controller(np.zeros(q ** N, bool), _params(q, N))


def test_masks_widen_for_large_alphabets():
    q, N = 10, 2
    inv = np.ones(q ** N, bool)
    m = allowed_masks(inv, q, N)
    assert m.dtype == np.uint16
    assert np.all(popcount(m, q) == q)


# ---------------------------------------------------------------- safety spec

def test_contracted_zone():
    spec = SafetySpec.uniform(18.0, 21.0, 2, contraction=0.31)
    lo, hi = spec.contracted()
    np.testing.assert_allclose(lo, 18.31)
    np.testing.assert_allclose(hi, 20.69)
    with pytest.raises(EmptyContractedZone):
        SafetySpec.uniform(18.0, 21.0, 2, contraction=1.5).contracted()
    with pytest.raises(ConfigError):
        SafetySpec.uniform(1.0, 0.0, 2)


@settings(max_examples=200, deadline=None)
@given(c=st.floats(0.0, 1.4), seed=st.integers(0, 2**31))
def test_contraction_is_sound(c, seed):
    spec = SafetySpec.uniform(18.0, 21.0, 3, contraction=c)
    lo, hi = spec.contracted()
    rng = np.random.default_rng(seed)
    p = rng.uniform(lo, hi)
    d = rng.normal(size=3)
    q = p + d / np.linalg.norm(d) * c * rng.uniform(0, 1)
    assert np.all(q >= spec.lo - 1e-12) and np.all(q <= spec.hi + 1e-12)


# ---------------------------------------------------------------- labeling

def _tiny_abstraction(N=3, h=2.0, zeta_s=0.2, dt=0.02, model=None):
    p = tiny_params(N=N, h=h, zeta_s=zeta_s, dt=dt)
    m = tiny_model() if model is None else model
    return ShiftAbstraction(m, p, SimConfig(dt)), p


def test_zero_dynamics_all_safe():
    m = zero_model(tau=1.0)
    p = AbstractionParams(1.0, 3, HistorySegment.constant([0.5], 1.0, 0.25),
                          QuantizedInputSet(0.0, [[0.0], [1.0]]))
    ab = ShiftAbstraction(m, p, SimConfig(0.25))
    assert label_safe(ab, SafetySpec.uniform(0.0, 1.0, 1)).all()


def test_source_outside_W_gives_no_safe_state():
    ab, p = _tiny_abstraction(N=2, h=0.2, zeta_s=5.0)
    safe = label_safe(ab, SafetySpec.uniform(-1.0, 1.0, 1))
    assert not safe.any()
    for i in range(4):
        seg = output_map(ab.model, AbstractState(i, 2, 2), p, SimConfig(0.02))
        assert np.any(np.abs(seg.values) > 1.0)


@pytest.mark.parametrize("c", [0.0, 0.05, 0.1])
def test_labels_match_exhaustive_direct_check(c):
    ab, p = _tiny_abstraction()
    spec = SafetySpec.uniform(0.1, 0.6, 1, contraction=c)
    safe = label_safe(ab, spec)
    lo, hi = spec.contracted()
    for i in range(8):
        seg = output_map(ab.model, AbstractState(i, 3, 2), p, SimConfig(0.02))
        assert safe[i] == bool(np.all((seg.values >= lo) & (seg.values <= hi)))
    assert 0 < safe.sum() < 8


def test_larger_contraction_never_enlarges_safe_set():
    ab, _ = _tiny_abstraction(N=5)
    prev = None
    for c in np.linspace(0.0, 0.24, 13):
        safe = label_safe(ab, SafetySpec.uniform(0.1, 0.6, 1, contraction=c))
        if prev is not None:
            assert not np.any(safe & ~prev)
        prev = safe


# ---------------------------------------------------------------- files

def _tiny_controller(N=3, contraction=0.0):
    ab, p = _tiny_abstraction(N=N)
    spec = SafetySpec.uniform(0.1, 0.6, 1, contraction=contraction)
    inv = maximal_invariant(label_safe(ab, spec), p.q, p.N)
    return extract_controller(inv, p, spec, 0.05, 0.05, "abc"), ab, p


def test_controller_roundtrip(tmp_path):
    ctrl, _, p = _tiny_controller(N=5)
    path = tmp_path / "c.bin"
    write_controller(path, ctrl)
    back, head = read_controller(path, lambda h: p)
    np.testing.assert_array_equal(back.safe, ctrl.safe)
    np.testing.assert_array_equal(back.allowed, ctrl.allowed)
    assert head["controller_transitions"] == ctrl.num_transitions
    assert head["abstraction_transitions"] == 2 ** 6
    assert back.spec.to_dict() == ctrl.spec.to_dict()
    assert controller_bytes(back) == controller_bytes(ctrl) == path.read_bytes()
    (tmp_path / "junk.bin").write_bytes(b"nope")
    with pytest.raises(ConfigError):
        read_controller(tmp_path / "junk.bin", lambda h: p)


def test_bitmap_roundtrip(tmp_path):
    bm = np.random.default_rng(0).random(1001) < 0.5
    write_bitmap(tmp_path / "b.bin", bm)
    np.testing.assert_array_equal(read_bitmap(tmp_path / "b.bin"), bm)
    assert (tmp_path / "b.bin").stat().st_size == 8 + (1001 + 7) // 8


# ---------------------------------------------------------------- initial state

def test_match_exact_output():
    ctrl, ab, _ = _tiny_controller(N=5)
    for s in np.flatnonzero(ctrl.safe)[:5]:
        st_, d = match_initial(ab.output(int(s)), ctrl, ab, epsilon=1e-9)
        assert d <= 1e-12
        assert sup_distance(ab.output(st_.index), ab.output(int(s))) <= 1e-12


def test_match_agrees_with_brute_force():
    ctrl, ab, _ = _tiny_controller(N=6)
    safe = np.flatnonzero(ctrl.safe)
    for z in (0.2, 0.3, 0.45, 0.55):
        zeta0 = HistorySegment.constant([z], ab.model.tau, 0.1)
        dists = [sup_distance(zeta0, ab.output(int(s))) for s in safe]
        st_, d = match_initial(zeta0, ctrl, ab, epsilon=10.0)
        assert d == pytest.approx(min(dists), abs=1e-12)
        assert ctrl.safe[st_.index]


def test_match_far_away_fails():
    ctrl, ab, _ = _tiny_controller()
    with pytest.raises(NoMatch):
        match_initial(HistorySegment.constant([50.0], ab.model.tau, 0.1), ctrl, ab)
    with pytest.raises(ConfigError):
        match_initial(HistorySegment.constant([0.3], 2.0, 0.1), ctrl, ab)


# ---------------------------------------------------------------- closed loop

def test_tie_breaks():
    ctrl = extract_controller(np.ones(8, bool), _params(2, 3))
    assert pick_input(ctrl, 0) == 0
    assert pick_input(ctrl, 0, "min-norm") == 0
    assert pick_input(ctrl, 0, lambda i, allowed: allowed[-1]) == 1
    with pytest.raises(ConfigError):
        pick_input(ctrl, 0, "random")


def test_single_allowed_input_gives_constant_trace():
    q, N = 3, 3
    inv = np.zeros(q ** N, bool)
    inv[[0, 13, 26]] = True  # the three constant words
    ctrl = extract_controller(maximal_invariant(inv, q, N), _params(q, N))
    for start, u in ((0, 0), (13, 1), (26, 2)):
        ids, states = input_schedule(ctrl, start, 20)
        assert set(ids) == {u}
        assert set(states) == {start}


def test_noise_free_closed_loop_stays_in_W():
    ab, p = _tiny_abstraction(N=4, model=noiseless(tiny_model()))
    spec = SafetySpec.uniform(0.1, 0.6, 1)
    inv = maximal_invariant(label_safe(ab, spec), p.q, p.N)
    ctrl = extract_controller(inv, p, spec, 1e-9, 0.0)
    cfg = SimConfig(0.02, seed=1)
    steps = cfg.steps(p.h)
    for s in np.flatnonzero(ctrl.safe):
        zeta0 = ab.output(int(s))
        res = run_closed_loop(ab.model, ctrl, ab, zeta0, 30, cfg, trials=2, box=(spec.lo, spec.hi))
        assert res.initial_state.index == s
        nodes = res.path.states[::steps]
        assert np.all((nodes >= 0.1) & (nodes <= 0.6))
        assert not res.distance.estimate.any()
        for k in range(len(res.input_ids)):
            assert ctrl.safe[res.abstract_states[k]]


def test_input_csv(tmp_path):
    pts = np.array([[0.0, 1.0], [1.0, 0.0]])
    write_input_csv(tmp_path / "u.csv", [1, 0], pts, 30.0)
    assert (tmp_path / "u.csv").read_text().splitlines() == [
        "step,time,input_id,input_vector", "0,0.0,1,1.0 0.0", "1,30.0,0,0.0 1.0"]


@pytest.mark.slow
def test_ten_room_N14_labeling(ten_room, ten_room_params, ten_room_cfg):
    """Labeling against W contracted by 0.31 at N = 14 (reference benchmark setting)."""
    p = ten_room_params.with_N(14)
    ab = ShiftAbstraction(ten_room, p, ten_room_cfg)
    safe = label_safe(ab, SafetySpec.uniform(18.0, 21.0, 10, contraction=0.31))
    inv = maximal_invariant(safe, 3, 14)
    assert safe.any()
    assert inv.any()
    ctrl = extract_controller(inv, p, None, 0.31, 0.31)
    assert isinstance(ctrl, Controller)
    st_, d = match_initial(HistorySegment.constant(np.full(10, 19.0), 15.0, 15.0), ctrl, ab,
                           epsilon=0.31)
    assert d <= 0.31
    assert decode(st_.index, 3, 14) == st_.word()
