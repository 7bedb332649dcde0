"""Shift-register abstraction: precision bounds and the word-indexed output map.

Abstract states are input words (u_1, ..., u_N) encoded big-endian in base
q = |inputs| with u_1 the most significant digit. A transition under u drops
u_1 and appends u. The output of a word is the last-tau window of the
noiseless trajectory started at the source segment zeta_s and driven by the
word over [0, N h].
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, Infeasible, RegionMissing
from .model import HistorySegment, LinearDjdsModel, lipschitz_constants, sup_distance
from .simulate import Engine, check_config, mc_moment, simulate_deterministic

EPS_BISECT_TOL = 1e-6


@dataclass(frozen=True)
class AbstractionParams:
    h: float
    N: int
    zeta_s: HistorySegment
    inputs: object  # QuantizedInputSet
    eta: float = None

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigError("h must be positive")
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError("N must be a positive integer")
        if len(self.inputs) < 1:
            raise ConfigError("the input alphabet is empty")
        if self.eta is None:
            object.__setattr__(self, "eta", float(self.inputs.eta))

    @property
    def q(self):
        return len(self.inputs)

    @property
    def num_states(self):
        return self.q ** self.N

    def with_N(self, N):
        return AbstractionParams(self.h, int(N), self.zeta_s, self.inputs, self.eta)

    def to_dict(self):
        return {"h": self.h, "N": self.N, "eta": self.eta, "q": self.q,
                "inputs": self.inputs.points.tolist(),
                "zeta_s": {"tau": self.zeta_s.tau, "grid_step": self.zeta_s.grid_step,
                           "values": self.zeta_s.values.tolist()}}


# ---------------------------------------------------------------- words and states

def encode(word, q):
    idx = 0
    for u in word:
        if not 0 <= u < q:
            raise ValueError(f"symbol {u} outside alphabet of size {q}")
        idx = idx * q + int(u)
    return idx


def decode(index, q, N):
    word = []
    for _ in range(N):
        index, r = divmod(int(index), q)
        word.append(r)
    return tuple(reversed(word))


def decode_array(indices, q, N):
    """Vectorized decode; returns an (len, N) array of symbols."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty(indices.shape + (N,), dtype=np.int64)
    rest = indices.copy()
    for j in range(N - 1, -1, -1):
        out[..., j] = rest % q
        rest //= q
    return out


@dataclass(frozen=True)
class AbstractState:
    index: int
    N: int
    q: int

    def __post_init__(self):
        if not 0 <= self.index < self.q ** self.N:
            raise ValueError("state index out of range")

    def word(self):
        return decode(self.index, self.q, self.N)

    @classmethod
    def from_word(cls, word, q):
        return cls(encode(word, q), len(word), q)


def successor_index(index, u, q, N):
    """Works on ints and on numpy integer arrays."""
    return (index % q ** (N - 1)) * q + u


def successor(state, u, params=None):
    if not 0 <= u < state.q:
        raise ValueError(f"input id {u} outside alphabet of size {state.q}")
    return AbstractState(successor_index(state.index, u, state.q, state.N), state.N, state.q)


def count_transitions(params, chunk=1 << 22):
    """Enumerate every (state, input) pair and count valid successors."""
    q, N = params.q, params.N
    total_states = q ** N
    total = 0
    for start in range(0, total_states, chunk):
        idx = np.arange(start, min(start + chunk, total_states), dtype=np.int64)
        for u in range(q):
            succ = successor_index(idx, u, q, N)
            total += int(np.count_nonzero((succ >= 0) & (succ < total_states)))
    return total_states, total


# ---------------------------------------------------------------- sigma bound

@dataclass
class SigmaBound:
    """Data for the bound on the second-moment gap between noisy and noiseless runs."""
    kappa: float
    lambda_min_P: float
    Pbar_norm: float
    gamma_tilde_slope: float
    envelope: object
    zeta_norm: float
    u_sup: float
    n: int
    r_bar: int
    lam_sum: float
    tau: float
    dq: float = 0.1

    def integrand(self, s):
        e = self.envelope
        return e.beta_tilde(self.zeta_norm ** 2, s) + e.gamma(self.u_sup)

    def _hat_on(self, grid, Lg, Lr):
        """sigma_hat at every point of an increasing grid starting at 0."""
        f = self.integrand(grid)
        ds = np.diff(grid)
        I1 = np.concatenate([[0.0], np.cumsum(0.5 * ds * (f[1:] + f[:-1]))])
        g = self.gamma_tilde_slope * Lr * np.sqrt(f)
        I2 = np.concatenate([[0.0], np.cumsum(0.5 * ds * (g[1:] + g[:-1]))])
        decay = np.exp(-self.kappa * grid)
        inner = (0.5 * self.Pbar_norm * self.n * min(self.n, self.r_bar) * Lg ** 2 * decay * I1
                 + self.lam_sum * decay * I2)
        return 2.0 * inner / self.lambda_min_P

    def grid_to(self, t):
        k = int(math.floor(t / self.dq + 1e-9))
        g = self.dq * np.arange(k + 1)
        if t - g[-1] > 1e-12 * max(1.0, t):
            g = np.append(g, t)
        return g


def make_sigma_bound(cert, envelope, model, region, zeta_s, inputs, dq=0.1):
    if region is None:
        raise RegionMissing("an operating region is needed for the gamma-tilde slope")
    P_norm = cert.lambda_max_P
    return SigmaBound(
        kappa=cert.kappa, lambda_min_P=cert.lambda_min_P, Pbar_norm=P_norm,
        gamma_tilde_slope=P_norm * region.diameter(), envelope=envelope,
        zeta_norm=zeta_s.sup_norm(), u_sup=inputs.sup_norm(), n=model.n,
        r_bar=model.r_bar, lam_sum=float(np.sum(model.lam)), tau=model.tau, dq=dq)


def sigma_hat(bound, Lg, Lr, t):
    """Composite-trapezoid evaluation at step dq (last step shortened to hit t)."""
    if bound is None:
        raise RegionMissing("sigma bound is unavailable without an operating region")
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return 0.0
    return float(bound._hat_on(bound.grid_to(t), Lg, Lr)[-1])


def sigma(bound, Lg, Lr, t):
    """Nonincreasing envelope theta(max(t - tau, 0)).

    theta is the running sup of sigma_hat from the right on the dq grid
    (global max up to the peak, sigma_hat itself afterwards), read at the
    grid node at or below the argument.
    """
    if bound is None:
        raise RegionMissing("sigma bound is unavailable without an operating region")
    s0 = max(t - bound.tau, 0.0)
    # past 1/kappa sigma_hat is decreasing, so the suffix max is attained before it
    horizon = max(s0, 1.0 / bound.kappa) + 2 * bound.dq
    k_end = int(math.ceil(horizon / bound.dq))
    grid = bound.dq * np.arange(k_end + 1)
    vals = bound._hat_on(grid, Lg, Lr)
    suffix = np.maximum.accumulate(vals[::-1])[::-1]
    a = int(math.floor(s0 / bound.dq + 1e-9))
    return float(suffix[min(a, len(suffix) - 1)])


# ---------------------------------------------------------------- Z constants

def compute_Z(model, params, cfg, k=2):
    """max_u sup_distance(noiseless one-period run from zeta_s under u, zeta_s)^k."""
    best = 0.0
    for u in params.inputs.points:
        seg, _ = simulate_deterministic(model, params.zeta_s, [u], params.h, cfg, record=False)
        best = max(best, sup_distance(seg, params.zeta_s) ** k)
    return best


def compute_Z_tilde(model, params, cfg, trials=1000, k=2):
    """Monte Carlo max_u E[sup_distance(one-period run, zeta_s)^k]; returns (value, stderr)."""
    if trials < 100:
        raise ConfigError("compute_Z_tilde needs at least 100 trials")
    if model.noiseless:
        return compute_Z(model, params, cfg, k), 0.0
    best, best_se = -1.0, 0.0
    for i, u in enumerate(params.inputs.points):
        # each input gets its own seed stream
        sub = type(cfg)(cfg.dt, (int(cfg.seed) * 1000003 + i) & 0xFFFFFFFFFFFFFFFF)
        est = mc_moment(model, params.zeta_s, [u], params.h, sub, trials, "sup_distance",
                        reference=params.zeta_s, k=k)
        if est.estimate > best:
            best, best_se = est.estimate, est.stderr
    return best, best_se


# ---------------------------------------------------------------- precision

@dataclass
class PrecisionBudget:
    epsilon: float
    quant_term: float
    total: float
    k: int = 2
    mode: str = "noiseless"
    N: int = None
    h: float = None
    terms: tuple = ()  # (eps term, sigma term, Z term) at epsilon
    Z: float = None
    Z_stderr: float = 0.0

    @property
    def lhs(self):
        return float(sum(self.terms))

    def to_dict(self):
        return {"epsilon": self.epsilon, "quant_term": self.quant_term, "total": self.total,
                "k": self.k, "mode": self.mode, "N": self.N, "h": self.h,
                "terms": list(self.terms), "lhs": self.lhs, "Z": self.Z,
                "Z_stderr": self.Z_stderr}


def inequality_terms(envelope, bound, Lg, Lr, h, N, Z, eps, mode, k=2):
    """The three summands of the precision inequality (sigma term 0 in stochastic mode)."""
    t_eps = float(envelope.beta_tilde(eps ** k, h)) ** (1.0 / k)
    if mode == "noiseless":
        t_sig = sigma(bound, Lg, Lr, (N + 1) * h) ** (1.0 / k)
    elif mode == "stochastic":
        t_sig = 0.0
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    t_z = float(envelope.beta_tilde(Z, N * h)) ** (1.0 / k)
    return t_eps, t_sig, t_z


def min_epsilon(model, params, bound, mode="noiseless", *, envelope, cfg=None, Z=None,
                Z_stderr=0.0, Lg=None, Lr=None, trials=1000, tol=EPS_BISECT_TOL, k=2):
    """Smallest epsilon (to ``tol``) satisfying the precision inequality.

    Z is computed when not supplied (noiseless runs in noiseless mode, Monte
    Carlo in stochastic mode). The returned epsilon always satisfies the
    inequality; the bisection keeps the feasible end of the bracket.
    """
    if Lg is None or Lr is None:
        _, _, Lg0, Lr0 = lipschitz_constants(model)
        Lg = Lg0 if Lg is None else Lg
        Lr = Lr0 if Lr is None else Lr
    if Z is None:
        if cfg is None:
            raise ConfigError("cfg is required to compute Z")
        if mode == "stochastic":
            Z, Z_stderr = compute_Z_tilde(model, params, cfg, trials, k)
        else:
            Z = compute_Z(model, params, cfg, k)
    if mode == "noiseless" and bound is None:
        raise RegionMissing("noiseless mode needs the sigma bound")
    h, N = params.h, params.N

    def lhs(e):
        return sum(inequality_terms(envelope, bound, Lg, Lr, h, N, Z, e, mode, k))

    a = float(envelope.beta_tilde(1.0, h)) ** (1.0 / k)
    if a >= 1.0:
        raise Infeasible(f"beta_tilde term: (beta_tilde(eps^{k}, h))^(1/{k}) = {a:.4g} * eps "
                         f">= eps for every eps; the sampling time h={h} is too small")
    lo, hi = 1e-9, 1.0
    if lhs(lo) <= lo:
        eps = lo
    else:
        while lhs(hi) > hi:
            hi *= 2.0
            if hi > 1e300:
                raise Infeasible("no finite epsilon satisfies the inequality")
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if lhs(mid) <= mid:
                hi = mid
            else:
                lo = mid
        eps = hi
    quant = float(envelope.gamma(params.eta)) ** (1.0 / k) if params.eta > 0 else 0.0
    terms = inequality_terms(envelope, bound, Lg, Lr, h, N, Z, eps, mode, k)
    return PrecisionBudget(eps, quant, eps + quant, k, mode, N, h, terms, Z, Z_stderr)


def min_horizon(model, params, bound, epsilon, mode="noiseless", *, envelope, cfg=None,
                Z=None, Z_stderr=0.0, Lg=None, Lr=None, trials=1000, N_max=1000, k=2):
    """Smallest N >= 1 whose minimal epsilon is at most ``epsilon``."""
    if Z is None:
        if mode == "stochastic":
            Z, Z_stderr = compute_Z_tilde(model, params, cfg, trials, k)
        else:
            Z = compute_Z(model, params, cfg, k)
    a = float(envelope.beta_tilde(1.0, params.h)) ** (1.0 / k)
    if a >= 1.0:
        raise Infeasible(f"beta_tilde term: sampling time h={params.h} is too small")
    for N in range(1, N_max + 1):
        b = min_epsilon(model, params.with_N(N), bound, mode, envelope=envelope, Z=Z,
                        Z_stderr=Z_stderr, Lg=Lg, Lr=Lr, k=k)
        if b.epsilon <= epsilon:
            return N, b
    raise Infeasible(f"no horizon N <= {N_max} reaches epsilon={epsilon}")


# ---------------------------------------------------------------- output map

class ShiftAbstraction:
    """Output map of the shift-register abstraction by superposition.

    The Euler scheme is linear in (initial segment, inputs, offset), so the
    output of a word equals the free response from zeta_s plus, for every
    slot, the zero-history response to that slot's input:

        H(u_1..u_N) = F + sum_j M[N - j + 1][u_j]

    where M[d][u] is the window d periods after a single period of input u.
    Outputs of words sharing a prefix share the partial sum, which is how
    blocks of states are produced (prefix accumulator + suffix table).
    """

    def __init__(self, model, params, cfg, suffix_levels=8):
        check_config(model, cfg, params.h)
        self.model, self.params, self.cfg = model, params, cfg
        q, N = params.q, params.N
        self.q, self.N = q, N
        steps = cfg.steps(params.h)
        eng = Engine(model, cfg.dt)
        self.K, self.wstep = eng.K, eng.wstep
        zero = np.zeros((1, model.m))
        _, kk, _, snaps = eng.run(params.zeta_s, np.repeat(zero, N, axis=0), steps,
                                  snapshots=[N * steps])
        self.free = snaps[N * steps][:, 0, :]  # (K+1, n)
        lin = LinearDjdsModel(model.A1, model.A2, model.B, tau1=model.tau1,
                              tau2=model.tau2, tau3=model.tau3)
        leng = Engine(lin, cfg.dt)
        z0 = HistorySegment.constant(np.zeros(model.n), model.tau,
                                     params.zeta_s.grid_step if model.tau else None)
        M = np.zeros((N + 1, q, self.K + 1, model.n))
        for u in range(q):
            pt = params.inputs.points[u]
            if not np.any(pt):
                continue
            word = np.vstack([pt[None, :], np.repeat(zero, N - 1, axis=0)])
            _, _, _, snaps = leng.run(z0, word, steps,
                                      snapshots=[d * steps for d in range(1, N + 1)])
            for d in range(1, N + 1):
                M[d, u] = snaps[d * steps][:, 0, :]
        self.M = M
        self.v = min(N, suffix_levels)
        self._suffix = None

    @property
    def nodes(self):
        return -self.model.tau + self.wstep * np.arange(self.K + 1)

    def suffix_table(self):
        """(q^v, K+1, n) sums of the last v slots, indexed like the low digits."""
        if self._suffix is None:
            v = self.v
            T = np.zeros((1, self.K + 1, self.model.n))
            for j in range(v, 0, -1):  # digit for slot d = j, most significant first
                T = (T[:, None] + self.M[j][None, :]).reshape(-1, self.K + 1, self.model.n)
            self._suffix = T
        return self._suffix

    def prefix_acc(self, prefix):
        """F plus the contributions of the first N - v symbols."""
        N, v = self.N, self.v
        acc = self.free.copy()
        digits = decode(prefix, self.q, N - v) if N > v else ()
        for j, u in enumerate(digits, start=1):
            acc = acc + self.M[N - j + 1, u]
        return acc

    def iter_blocks(self):
        """Yield (first index, outputs of q^v consecutive states)."""
        T = self.suffix_table()
        size = self.q ** self.v
        for p in range(self.q ** (self.N - self.v)):
            yield p * size, self.prefix_acc(p)[None] + T

    def output_values(self, index):
        word = decode(index, self.q, self.N)
        acc = self.free.copy()
        for j, u in enumerate(word, start=1):
            acc = acc + self.M[self.N - j + 1, u]
        return acc

    def output(self, index):
        return HistorySegment(self.output_values(index), self.wstep, self.model.tau)


def output_map(model, state, params, cfg, mode="noiseless", *, trials=1000, reference=None):
    """Output of one abstract state by direct simulation of its word.

    noiseless: last-tau window of the noiseless run from zeta_s over [0, N h].
    stochastic-mc: Monte Carlo E[sup_distance(window, reference)^2].
    """
    word = params.inputs.points[list(state.word())]
    if mode == "noiseless":
        seg, _ = simulate_deterministic(model, params.zeta_s, word, params.h, cfg, record=False)
        return seg
    if mode == "stochastic-mc":
        if reference is None:
            raise ConfigError("stochastic-mc output needs a reference segment")
        return mc_moment(model, params.zeta_s, word, params.h, cfg, trials, "sup_distance",
                         reference=reference)
    raise ConfigError(f"unknown output mode {mode!r}")
