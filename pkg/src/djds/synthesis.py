"""Safety synthesis on the shift-register abstraction."""
import heapq
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .abstraction import AbstractState, successor_index
from .errors import ConfigError, EmptyContractedZone, EmptyController, NoMatch
from .model import HistorySegment
from .simulate import mc_moment, simulate_stochastic

MAGIC = b"DJDSCTRL"


@dataclass(frozen=True)
class SafetySpec:
    lo: np.ndarray
    hi: np.ndarray
    contraction: float = 0.0

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float)).copy()
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float)).copy()
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ConfigError("comfort zone needs lo < hi per coordinate")
        if self.contraction < 0:
            raise ConfigError("contraction must be nonnegative")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def uniform(cls, lo, hi, n, contraction=0.0):
        return cls(np.full(n, float(lo)), np.full(n, float(hi)), contraction)

    def contracted(self):
        """W shrunk by the contraction in every coordinate."""
        c = self.contraction
        if np.any(self.hi - self.lo <= 2 * c):
            raise EmptyContractedZone(
                f"W shrunk by eps_total={c:.4g} is empty (smallest side {np.min(self.hi - self.lo):.4g})")
        return self.lo + c, self.hi - c

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "contraction": self.contraction}


def label_safe(abstraction, spec):
    """States whose whole output window lies in the contracted comfort zone."""
    lo, hi = spec.contracted()
    n = abstraction.model.n
    if lo.shape != (n,):
        lo = np.broadcast_to(lo, (n,))
        hi = np.broadcast_to(hi, (n,))
    safe = np.zeros(abstraction.q ** abstraction.N, dtype=bool)
    for start, blk in abstraction.iter_blocks():
        ok = np.all((blk >= lo) & (blk <= hi), axis=(1, 2))
        safe[start:start + len(ok)] = ok
    return safe


def maximal_invariant(bitmap, q, N):
    """Greatest S within bitmap such that every state in S has a successor in S."""
    S = np.asarray(bitmap, dtype=bool).copy()
    if S.shape != (q ** N,):
        raise ConfigError("bitmap size does not match q^N")
    while True:
        # states with the same N-1 low digits share their successor set
        has = S.reshape(q ** (N - 1), q).any(axis=1)
        S_new = S & np.tile(has, q)
        if np.array_equal(S_new, S):
            return S
        S = S_new


def _mask_dtype(q):
    if q <= 8:
        return np.uint8
    if q <= 16:
        return np.uint16
    if q <= 32:
        return np.uint32
    return np.uint64


def allowed_masks(inv, q, N):
    grouped = inv.reshape(q ** (N - 1), q)
    dt = _mask_dtype(q)
    masks = np.zeros(q ** (N - 1), dtype=dt)
    for u in range(q):
        masks |= (grouped[:, u].astype(dt) << dt(u))
    full = np.tile(masks, q)
    full[~inv] = 0
    return full


def popcount(masks, q):
    total = np.zeros(masks.shape, dtype=np.int64)
    for u in range(q):
        total += (masks >> u) & 1
    return total


@dataclass
class Controller:
    params: object
    safe: np.ndarray
    allowed: np.ndarray
    epsilon: float = 0.0
    eps_total: float = 0.0
    model_hash: str = ""
    spec: SafetySpec = None
    initial_candidates: list = field(default_factory=list)

    @property
    def q(self):
        return self.params.q

    @property
    def N(self):
        return self.params.N

    @property
    def num_states(self):
        return int(self.safe.sum())

    @property
    def num_transitions(self):
        return int(popcount(self.allowed[self.safe], self.q).sum())

    def allowed_inputs(self, index):
        m = int(self.allowed[index])
        return [u for u in range(self.q) if (m >> u) & 1]

    def header(self):
        q, N = self.q, self.N
        return {
            "format": 1, "model_hash": self.model_hash, "params": self.params.to_dict(),
            "epsilon": self.epsilon, "eps_total": self.eps_total,
            "spec": None if self.spec is None else self.spec.to_dict(),
            "abstraction_states": q ** N, "abstraction_transitions": q ** (N + 1),
            "controller_states": self.num_states,
            "controller_transitions": self.num_transitions,
        }


def extract_controller(inv, params, spec=None, epsilon=0.0, eps_total=None, model_hash=""):
    inv = np.asarray(inv, dtype=bool)
    if not inv.any():
        raise EmptyController("the maximal invariant set is empty")
    allowed = allowed_masks(inv, params.q, params.N)
    if eps_total is None:
        eps_total = 0.0 if spec is None else spec.contraction
    return Controller(params, inv.copy(), allowed, float(epsilon), float(eps_total),
                      model_hash, spec)


# ---------------------------------------------------------------- persistence

def _blob(b):
    return struct.pack("<Q", len(b)) + b


def controller_bytes(ctrl):
    head = json.dumps(ctrl.header(), sort_keys=True, separators=(",", ":")).encode()
    bits = np.packbits(ctrl.safe, bitorder="little").tobytes()
    masks = ctrl.allowed[ctrl.safe].astype(ctrl.allowed.dtype.newbyteorder("<")).tobytes()
    return (MAGIC + _blob(head) + struct.pack("<Q", len(ctrl.safe)) + _blob(bits)
            + _blob(masks))


def write_controller(path, ctrl):
    with open(path, "wb") as fh:
        fh.write(controller_bytes(ctrl))


def read_controller(path, params_factory):
    """Read a controller file; params_factory(header) rebuilds the AbstractionParams."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ConfigError(f"{path} is not a controller file")
    pos = len(MAGIC)

    def take():
        nonlocal pos
        (ln,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        out = data[pos:pos + ln]
        pos += ln
        return out

    head = json.loads(take())
    (num,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    safe = np.unpackbits(np.frombuffer(take(), dtype=np.uint8), bitorder="little")[:num].astype(bool)
    params = params_factory(head)
    dt = np.dtype(_mask_dtype(params.q)).newbyteorder("<")
    allowed = np.zeros(num, dtype=_mask_dtype(params.q))
    allowed[safe] = np.frombuffer(take(), dtype=dt)
    spec = None
    if head.get("spec"):
        s = head["spec"]
        spec = SafetySpec(s["lo"], s["hi"], s["contraction"])
    return Controller(params, safe, allowed, head["epsilon"], head["eps_total"],
                      head["model_hash"], spec), head


def write_bitmap(path, bitmap):
    """Length-prefixed bit array (little-endian bit order)."""
    bits = np.packbits(np.asarray(bitmap, dtype=bool), bitorder="little").tobytes()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(bitmap)) + bits)


def read_bitmap(path):
    with open(path, "rb") as fh:
        data = fh.read()
    (num,) = struct.unpack_from("<Q", data, 0)
    return np.unpackbits(np.frombuffer(data[8:], dtype=np.uint8), bitorder="little")[:num].astype(bool)


# ---------------------------------------------------------------- initial state

def match_initial(zeta0, controller, abstraction, epsilon=None):
    """Safe abstract state whose output is closest to zeta0 in sup-distance.

    Best-first branch and bound over the prefix tree. The lower bound for a
    prefix subtracts, node by node, the largest possible contribution of the
    unfilled slots from the current residual (triangle inequality).
    Raises NoMatch when the best distance exceeds epsilon.
    """
    eps = controller.epsilon if epsilon is None else epsilon
    ab = abstraction
    q, N, v = ab.q, ab.N, ab.v
    if abs(zeta0.tau - ab.model.tau) > 1e-9:
        raise ConfigError("initial segment has the wrong tau")
    nodes = ab.nodes
    if ab.model.tau > 0:
        nodes = np.unique(np.concatenate([nodes, zeta0.nodes]))

    def on_nodes(vals):
        if ab.model.tau == 0:
            return vals
        seg = HistorySegment(vals, ab.wstep, ab.model.tau)
        return seg.evaluate(nodes)

    same = len(nodes) == ab.K + 1
    z = zeta0.evaluate(nodes) if ab.model.tau > 0 else zeta0.values
    if same:
        F, M, T = ab.free, ab.M, ab.suffix_table()
    else:
        F = on_nodes(ab.free)
        M = np.array([[on_nodes(ab.M[d, u]) for u in range(q)] for d in range(N + 1)])
        T = np.array([on_nodes(t) for t in ab.suffix_table()])
    mnorm = np.linalg.norm(M, axis=3).max(axis=1)  # (N+1, nodes)
    # rem[j] = bound on the contribution of the N - j unfilled slots
    rem = np.zeros((N + 1, len(nodes)))
    for j in range(N - 1, -1, -1):
        rem[j] = rem[j + 1] + mnorm[N - j]
    safe = controller.safe
    # any-safe flags per prefix depth
    levels = {}
    arr = safe
    for j in range(N, -1, -1):
        levels[j] = arr
        if j > 0:
            arr = arr.reshape(-1, q).any(axis=1)

    counter = 0
    heap = [(0.0, 0, counter, 0, 0, z - F)]  # (key, kind, tiebreak, depth, prefix, residual)
    leaf_depth = N - v
    size = q ** v
    while heap:
        key, kind, _, depth, prefix, resid = heapq.heappop(heap)
        if key > eps:
            break
        if kind == 1:
            st = AbstractState(prefix, N, q)
            controller.initial_candidates = [st]
            return st, key
        if depth == leaf_depth:
            blk = resid[None] - T
            d = np.linalg.norm(blk, axis=2).max(axis=1)
            ok = safe[prefix * size:(prefix + 1) * size]
            d = np.where(ok, d, np.inf)
            i = int(np.argmin(d))
            if np.isfinite(d[i]) and d[i] <= eps:
                counter += 1
                heapq.heappush(heap, (float(d[i]), 1, counter, N, prefix * size + i, None))
            continue
        slot = N - depth  # M index of the next symbol
        for u in range(q):
            p2 = prefix * q + u
            if not levels[depth + 1][p2]:
                continue
            r2 = resid - M[slot, u]
            lb = float(np.max(np.linalg.norm(r2, axis=1) - rem[depth + 1]))
            lb = max(lb, 0.0)
            if lb <= eps:
                counter += 1
                heapq.heappush(heap, (lb, 0, counter, depth + 1, p2, r2))
    raise NoMatch(f"no safe abstract state within eps={eps:.4g} of the initial segment")


# ---------------------------------------------------------------- closed loop

def pick_input(controller, index, tie_break="lowest"):
    allowed = controller.allowed_inputs(index)
    if not allowed:
        raise EmptyController(f"state {index} has no allowed input")
    if tie_break == "lowest":
        return allowed[0]
    if tie_break == "min-norm":
        pts = controller.params.inputs.points
        return min(allowed, key=lambda u: (float(np.linalg.norm(pts[u])), u))
    if callable(tie_break):
        return int(tie_break(index, allowed))
    raise ConfigError(f"unknown tie_break {tie_break!r}")


def input_schedule(controller, start, horizon_steps, tie_break="lowest"):
    """Input ids chosen along the abstract run from ``start``."""
    q, N = controller.q, controller.N
    s = int(start)
    ids, states = [], []
    for _ in range(horizon_steps):
        u = pick_input(controller, s, tie_break)
        ids.append(u)
        states.append(s)
        s = successor_index(s, u, q, N)
    return np.array(ids, dtype=np.int64), np.array(states, dtype=np.int64)


@dataclass
class ClosedLoopResult:
    initial_state: AbstractState
    match_distance: float
    input_ids: np.ndarray
    abstract_states: np.ndarray
    path: object
    distance: object  # MomentEstimate of the squared distance to W per time


def run_closed_loop(model, controller, abstraction, zeta0, horizon_steps, cfg,
                    tie_break="lowest", trials=1, box=None, stride=1):
    """Refined closed loop: the abstract state picks the input, the concrete
    system integrates it for h. The input sequence depends only on the
    abstract run, so all realizations share it."""
    st, dist = match_initial(zeta0, controller, abstraction)
    ids, states = input_schedule(controller, st.index, horizon_steps, tie_break)
    word = controller.params.inputs.points[ids]
    h = controller.params.h
    path = simulate_stochastic(model, zeta0, word, h, cfg, trial=0)
    est = None
    if box is not None and trials >= 2:
        est = mc_moment(model, zeta0, word, h, cfg, trials, "box", box=box, stride=stride)
    return ClosedLoopResult(st, dist, ids, states, path, est)


def write_input_csv(path, ids, points, h):
    with open(path, "w", newline="") as fh:
        fh.write("step,time,input_id,input_vector\n")
        for k, u in enumerate(ids):
            vec = " ".join(repr(float(v)) for v in points[u])
            fh.write(f"{k},{float(k * h)!r},{int(u)},{vec}\n")
