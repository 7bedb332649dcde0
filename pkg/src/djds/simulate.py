"""Euler(-Maruyama) integration of linear DJDS with delay ring buffers.

One engine serves both the noiseless system (diffusion and resets dropped)
and the stochastic one. Paths are simulated in batches; every path owns an
independent Philox stream keyed by (seed, trial index), so results do not
depend on batch size, chunking or thread count.
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import HistorySegment

CHUNK = 256


@dataclass(frozen=True)
class SimConfig:
    dt: float
    seed: int = 0
    scheme: str = "euler-maruyama"

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError("dt must be positive")
        if self.scheme != "euler-maruyama":
            raise ConfigError("only the euler-maruyama scheme is available")

    @classmethod
    def for_sampling(cls, h, seed=0, substeps=100):
        return cls(h / substeps, seed)

    def steps(self, h):
        """Integer number of steps per sampling period; dt must divide h."""
        s = h / self.dt
        k = int(round(s))
        if k < 1 or abs(s - k) > 1e-9 * max(1.0, s):
            raise ConfigError(f"dt={self.dt} does not divide h={h}")
        return k


def check_config(model, cfg, h=None):
    delays = [t for t in (model.tau1, model.tau2, model.tau3) if t > 0]
    if delays and cfg.dt > min(delays) / 4 * (1 + 1e-12):
        raise ConfigError(f"dt={cfg.dt} exceeds a quarter of the smallest delay {min(delays)}")
    if h is not None:
        cfg.steps(h)


@dataclass
class SamplePath:
    times: np.ndarray
    states: np.ndarray
    jump_counts: np.ndarray


def path_rng(seed, trial):
    """Counter-based stream for one Monte Carlo trial."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(trial),))
    return np.random.Generator(np.random.Philox(ss))


def window_grid(tau, dt):
    """Grid step used for output windows: dt when it divides tau."""
    if tau == 0:
        return 0, 1.0
    k = tau / dt
    K = int(round(k))
    if abs(k - K) <= 1e-9 * max(1.0, k):
        return K, dt
    K = int(math.ceil(k))
    return K, tau / K


class _Lag:
    def __init__(self, tau, dt):
        d = tau / dt
        lo = int(math.floor(d + 1e-9))
        frac = d - lo
        if abs(frac) < 1e-9:
            frac = 0.0
        self.lo, self.frac = lo, frac


class Engine:
    """Batch integrator for one model and step size."""

    def __init__(self, model, dt):
        self.model = model
        self.dt = float(dt)
        n = model.n
        self.n = n
        self.lags = [_Lag(t, dt) for t in (model.tau1, model.tau2, model.tau3)]
        self.K, self.wstep = window_grid(model.tau, dt)
        need = max([lg.lo + 2 for lg in self.lags] + [self.K + 2])
        self.L = need + 1
        self.A1T = np.ascontiguousarray(model.A1.T)
        self.A2T = np.ascontiguousarray(model.A2.T)
        self.BT = np.ascontiguousarray(model.B.T)
        self.has_delay_drift = bool(np.any(model.A2))
        self.noisy = not model.noiseless
        rb, rt = model.r_bar, model.r_tilde
        self.rb, self.rt = rb, rt

        def stackT(mats):
            if len(mats) == 0:
                return np.zeros((n, 0))
            return np.ascontiguousarray(np.concatenate([m.T for m in mats], axis=1))

        self.GT, self.GbT = stackT(model.G), stackT(model.Gbar)
        self.RT, self.RbT = stackT(model.R), stackT(model.Rbar)
        self.has_Gbar = bool(np.any(model.Gbar))
        self.has_Rbar = bool(np.any(model.Rbar))
        self.sqdt = math.sqrt(self.dt)
        self.lam_dt = np.asarray(model.lam) * self.dt

    # -- buffer helpers
    def init_buffer(self, zeta0, batch):
        if zeta0.tau != self.model.tau and abs(zeta0.tau - self.model.tau) > 1e-9:
            raise ConfigError(f"initial segment covers tau={zeta0.tau}, model needs {self.model.tau}")
        t = -self.dt * np.arange(self.L - 1, -1, -1)
        vals = zeta0.evaluate(t)  # (L, n), clamped before -tau
        buf = np.empty((self.L, batch, self.n))
        # slot of step index j is j mod L; steps -(L-1)..0 hold the history
        for i, j in enumerate(range(-(self.L - 1), 1)):
            buf[j % self.L] = vals[i]
        return buf

    def delayed(self, buf, k, lag):
        i = k - lag.lo
        if lag.frac == 0.0:
            return buf[i % self.L]
        return (1.0 - lag.frac) * buf[i % self.L] + lag.frac * buf[(i - 1) % self.L]

    def window(self, buf, k):
        """Last-tau window at step k as an array (K+1, batch, n)."""
        if self.model.tau == 0:
            return buf[k % self.L][None]
        if self.wstep == self.dt:
            idx = [(k - self.K + j) % self.L for j in range(self.K + 1)]
            return buf[idx]
        out = []
        for j in range(self.K + 1):
            s = (-self.model.tau + j * self.wstep) / self.dt  # offset in steps, <= 0
            lo = int(math.floor(s + 1e-9))
            fr = s - lo
            if abs(fr) < 1e-9:
                out.append(buf[(k + lo) % self.L])
            else:
                out.append((1 - fr) * buf[(k + lo) % self.L] + fr * buf[(k + lo + 1) % self.L])
        return np.stack(out)

    def window_segment(self, buf, k, b=0):
        return HistorySegment(self.window(buf, k)[:, b, :], self.wstep, self.model.tau)

    # -- integration
    def run(self, zeta0, inputs, steps_per, batch=1, rngs=None, observe=None, snapshots=None):
        """Integrate ``len(inputs)`` sampling periods.

        inputs: (segments, m) input values held for ``steps_per`` steps each.
        rngs: list of per-path generators (None for the noiseless system).
        observe(k, x, counts): called after each step with the new state batch.
        snapshots: step indices at which the last-tau window is stored.
        Returns (buffer, final step index, cumulative jump counts, windows).
        """
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        buf = self.init_buffer(zeta0, batch)
        counts = np.zeros((batch, self.rt), dtype=np.int64)
        stochastic = self.noisy and rngs is not None
        lag1, lag2, lag3 = self.lags
        k = 0
        snaps = {}
        want = set() if snapshots is None else set(int(v) for v in snapshots)
        if 0 in want:
            snaps[0] = self.window(buf, 0).copy()
        if observe is not None:
            observe(0, buf[0], counts)
        for u in inputs:
            bu = u @ self.BT + self.model.offset
            if stochastic:
                z = np.stack([g.standard_normal((steps_per, self.rb)) for g in rngs], axis=1)
                dN = np.stack([g.poisson(self.lam_dt, size=(steps_per, self.rt)) for g in rngs], axis=1)
            for s in range(steps_per):
                x = buf[k % self.L]
                drift = x @ self.A1T + bu
                if self.has_delay_drift:
                    drift = drift + self.delayed(buf, k, lag1) @ self.A2T
                x_new = x + self.dt * drift
                if stochastic:
                    if self.rb:
                        g = x @ self.GT
                        if self.has_Gbar:
                            g = g + self.delayed(buf, k, lag2) @ self.GbT
                        g = g.reshape(batch, self.rb, self.n)
                        x_new = x_new + self.sqdt * np.einsum("brn,br->bn", g, z[s])
                    if self.rt:
                        jumps = dN[s]
                        rows = np.flatnonzero(jumps.any(axis=1))
                        if rows.size:
                            r = x[rows] @ self.RT
                            if self.has_Rbar:
                                r = r + self.delayed(buf, k, lag3)[rows] @ self.RbT
                            r = r.reshape(rows.size, self.rt, self.n)
                            x_new[rows] += np.einsum("brn,br->bn", r, jumps[rows].astype(float))
                            counts += jumps
                k += 1
                buf[k % self.L] = x_new
                if k in want:
                    snaps[k] = self.window(buf, k).copy()
                if observe is not None:
                    observe(k, x_new, counts)
        return buf, k, counts, snaps


def _as_inputs(word, m):
    word = np.asarray(word, dtype=float)
    if word.ndim == 1:
        word = word.reshape(-1, m)
    if word.ndim != 2 or word.shape[1] != m:
        raise ConfigError(f"word must have shape (segments, {m})")
    return word


def simulate_deterministic(model, zeta0, word, h, cfg, record=True):
    """Noiseless trajectory under a piecewise-constant word.

    Returns (final last-tau window, SamplePath or None).
    """
    check_config(model, cfg, h)
    steps = cfg.steps(h)
    eng = Engine(model, cfg.dt)
    inputs = _as_inputs(word, model.m)
    states = [] if record else None

    def obs(k, x, counts):
        states.append(x[0].copy())

    buf, k, _, _ = eng.run(zeta0, inputs, steps, 1, None, obs if record else None)
    final = eng.window_segment(buf, k)
    if not record:
        return final, None
    S = len(states)
    path = SamplePath(cfg.dt * np.arange(S), np.array(states),
                      np.zeros((S, model.r_tilde), dtype=np.int64))
    return final, path


def simulate_stochastic(model, zeta0, word, h, cfg, trial=0):
    """One Euler-Maruyama sample path, reproducible from (cfg.seed, trial)."""
    check_config(model, cfg, h)
    steps = cfg.steps(h)
    eng = Engine(model, cfg.dt)
    inputs = _as_inputs(word, model.m)
    states, jumps = [], []

    def obs(k, x, counts):
        states.append(x[0].copy())
        jumps.append(counts[0].copy())

    eng.run(zeta0, inputs, steps, 1, [path_rng(cfg.seed, trial)], obs)
    S = len(states)
    return SamplePath(cfg.dt * np.arange(S), np.array(states),
                      np.array(jumps, dtype=np.int64).reshape(S, model.r_tilde))


# ---------------------------------------------------------------- Monte Carlo

@dataclass
class MomentEstimate:
    estimate: object
    stderr: object
    trials: int
    times: np.ndarray = None


def _threads():
    try:
        return max(1, int(os.environ.get("DJDS_THREADS", "1")))
    except ValueError:
        return 1


def _chunks(trials, chunk=CHUNK):
    return [(s, min(s + chunk, trials)) for s in range(0, trials, chunk)]


def _map_chunks(fn, trials):
    # results are indexed by chunk, so the reduction order never depends on
    # which worker finishes first
    chunks = _chunks(trials)
    nt = _threads()
    if nt > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(nt) as pool:
            return list(pool.map(fn, chunks))
    return [fn(c) for c in chunks]


def _mean_stderr(total, total_sq, trials):
    mean = total / trials
    var = np.maximum(total_sq / trials - mean * mean, 0.0) * trials / (trials - 1)
    return mean, np.sqrt(var / trials)


def box_sq_distance(x, lo, hi):
    """Squared Euclidean distance of each row of x to the box [lo, hi]."""
    d = x - np.clip(x, lo, hi)
    return np.einsum("...i,...i->...", d, d)


def mc_moment(model, zeta0, word, h, cfg, trials, statistic, *, reference=None, box=None,
              k=2, zeta_hat=None, word_hat=None, stride=1):
    """Seeded Monte Carlo estimate of a path statistic.

    statistic:
      "endpoint"      E ||x(T)||^k
      "sup_distance"  E sup_distance(final window, reference)^k
      "jump_count"    E total number of Poisson events over the run
      "box"           per-time E dist(x(t), box)^2, box = (lo, hi)
      "paired"        per-time E ||x(t) - xhat(t)||^2 with common noise, where
                      xhat starts from zeta_hat under word_hat
    """
    if trials < 2:
        raise ConfigError("trials must be at least 2")
    check_config(model, cfg, h)
    steps = cfg.steps(h)
    eng = Engine(model, cfg.dt)
    inputs = _as_inputs(word, model.m)
    per_time = statistic in ("box", "paired")
    if statistic == "box":
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), (model.n,)) for b in box)
    if statistic == "sup_distance" and reference is None:
        raise ConfigError("sup_distance needs a reference segment")
    if statistic == "paired":
        inputs_hat = _as_inputs(word if word_hat is None else word_hat, model.m)
        zeta_hat = zeta0 if zeta_hat is None else zeta_hat
    total_steps = steps * len(inputs)
    rec = np.arange(0, total_steps + 1, stride)

    def run_chunk(bounds):
        a, b = bounds
        batch = b - a
        if statistic == "paired":
            tr = np.zeros((total_steps + 1, batch))
            store = {}

            def obs_a(kk, x, c):
                store[kk] = x.copy()

            def obs_b(kk, x, c):
                d = store.pop(kk) - x
                tr[kk] = np.einsum("bi,bi->b", d, d)

            eng.run(zeta0, inputs, steps, batch, [path_rng(cfg.seed, t) for t in range(a, b)], obs_a)
            # second pass consumes the same per-path streams: common random numbers
            if len(inputs_hat) != len(inputs):
                raise ConfigError("paired words must have equal length")
            eng.run(zeta_hat, inputs_hat, steps, batch,
                    [path_rng(cfg.seed, t) for t in range(a, b)], obs_b)
            vals = tr[rec]
            return vals.sum(axis=1), (vals * vals).sum(axis=1)
        if statistic == "box":
            tr = np.zeros((len(rec), batch))
            pos = {int(s): i for i, s in enumerate(rec)}

            def obs(kk, x, c):
                i = pos.get(kk)
                if i is not None:
                    tr[i] = box_sq_distance(x, lo, hi)

            eng.run(zeta0, inputs, steps, batch, [path_rng(cfg.seed, t) for t in range(a, b)], obs)
            return tr.sum(axis=1), (tr * tr).sum(axis=1)
        buf, kk, counts, _ = eng.run(zeta0, inputs, steps, batch,
                                     [path_rng(cfg.seed, t) for t in range(a, b)])
        if statistic == "jump_count":
            v = counts.sum(axis=1).astype(float)
        elif statistic == "endpoint":
            v = np.linalg.norm(buf[kk % eng.L], axis=1) ** k
        elif statistic == "sup_distance":
            win = eng.window(buf, kk)  # (K+1, batch, n)
            ref = reference.resample(eng.wstep) if reference.tau else reference
            if ref.values.shape[0] != win.shape[0]:
                raise ConfigError("reference grid does not match the output window")
            v = np.max(np.linalg.norm(win - ref.values[:, None, :], axis=2), axis=0) ** k
        else:
            raise ConfigError(f"unknown statistic {statistic!r}")
        return np.array([v.sum()]), np.array([(v * v).sum()])

    parts = _map_chunks(run_chunk, trials)
    total = sum(p[0] for p in parts)
    total_sq = sum(p[1] for p in parts)
    mean, se = _mean_stderr(total, total_sq, trials)
    if per_time:
        return MomentEstimate(mean, se, trials, cfg.dt * rec)
    return MomentEstimate(float(mean[0]), float(se[0]), trials)


# ---------------------------------------------------------------- CSV export

def write_path_csv(path, sample):
    n = sample.states.shape[1]
    r = sample.jump_counts.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["time"] + [f"x{i + 1}" for i in range(n)] + [f"N{i + 1}" for i in range(r)]) + "\n")
        for t, x, c in zip(sample.times, sample.states, sample.jump_counts):
            fh.write(",".join([repr(float(t))] + [repr(float(v)) for v in x] + [str(int(v)) for v in c]) + "\n")


def write_mc_csv(path, est):
    with open(path, "w", newline="") as fh:
        fh.write("time,mean,stderr\n")
        for t, m, s in zip(est.times, est.estimate, est.stderr):
            fh.write(f"{float(t)!r},{float(m)!r},{float(s)!r}\n")
