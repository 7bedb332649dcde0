"""Quadratic incremental-stability certificates for linear DJDS.

With V(x, x') = 1/2 (x - x')^T P (x - x'), the model is incrementally
input-to-state stable in the second moment whenever the block inequality
assembled below holds for constants c1 > c2 + c3 + c4, c5 > 0. Block order
is (x, x(t-tau1), x(t-tau2), x(t-tau3), u).
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, Infeasible
from .jacobi import eigvalsh

DEFAULT_TOL_REL = 1e-8


def _sym(M):
    return 0.5 * (M + M.T)


def assemble_inequality(model, P):
    """Return (LHS, rhs) where rhs(c) builds diag(-c1 P, c2 P, c3 P, c4 P, c5 I)."""
    P = np.asarray(P, dtype=float)
    n, m = model.n, model.m
    if P.shape != (n, n):
        raise DimensionMismatch(f"P must be {n}x{n}, got {P.shape}")
    if not np.allclose(P, P.T, atol=1e-12 * max(1.0, np.abs(P).max())):
        raise DimensionMismatch("P must be symmetric")
    P = _sym(P)
    A1, A2, B = model.A1, model.A2, model.B
    delta = P @ A1 + A1.T @ P
    x_tau2 = np.zeros((n, n))
    d_tau2 = np.zeros((n, n))
    for Gi, Gbi in zip(model.G, model.Gbar):
        delta += Gi.T @ P @ Gi
        x_tau2 += Gi.T @ P @ Gbi
        d_tau2 += Gbi.T @ P @ Gbi
    x_tau3 = np.zeros((n, n))
    d_tau3 = np.zeros((n, n))
    for lam, Ri, Rbi in zip(model.lam, model.R, model.Rbar):
        delta += lam * (P @ Ri + Ri.T @ P + Ri.T @ P @ Ri)
        x_tau3 += lam * (P @ Rbi + Ri.T @ P @ Rbi)
        d_tau3 += lam * (Rbi.T @ P @ Rbi)

    size = 4 * n + m
    L = np.zeros((size, size))
    sl = [slice(k * n, (k + 1) * n) for k in range(4)] + [slice(4 * n, size)]
    L[sl[0], sl[0]] = delta
    L[sl[0], sl[1]] = P @ A2
    L[sl[0], sl[2]] = x_tau2
    L[sl[0], sl[3]] = x_tau3
    L[sl[0], sl[4]] = P @ B
    L[sl[2], sl[2]] = d_tau2
    L[sl[3], sl[3]] = d_tau3
    # mirror the upper off-diagonal blocks, then symmetrize the diagonal ones
    for k in range(1, 5):
        L[sl[k], sl[0]] = L[sl[0], sl[k]].T
    L = _sym(L)

    def rhs(c):
        c1, c2, c3, c4, c5 = [float(v) for v in c]
        R = np.zeros((size, size))
        R[sl[0], sl[0]] = -c1 * P
        R[sl[1], sl[1]] = c2 * P
        R[sl[2], sl[2]] = c3 * P
        R[sl[3], sl[3]] = c4 * P
        R[sl[4], sl[4]] = c5 * np.eye(m)
        return R

    return L, rhs


class CheckResult:
    """Outcome of a certificate check; truthy iff the certificate is valid."""

    def __init__(self, ok, reason, min_eig=float("nan"), tol=0.0):
        self.ok = bool(ok)
        self.reason = reason
        self.min_eig = float(min_eig)
        self.tol = float(tol)

    def __bool__(self):
        return self.ok

    def __repr__(self):
        return f"CheckResult(ok={self.ok}, reason={self.reason!r}, min_eig={self.min_eig:.3e})"


def check_certificate(model, P, c, tol=None):
    """Eigenvalue test of RHS(c) - LHS(P) >= -tol with the side conditions.

    ``tol`` defaults to 1e-8 * ||RHS - LHS||_F. Reason codes: "ok",
    "nonpositive-c", "c1-too-small", "P-not-pd", "not-symmetric",
    "inequality".
    """
    c = np.asarray(c, dtype=float)
    P = np.asarray(P, dtype=float)
    if c.shape != (5,) or np.any(c <= 0):
        return CheckResult(False, "nonpositive-c")
    if c[0] <= c[1] + c[2] + c[3]:
        return CheckResult(False, "c1-too-small")
    if P.shape != (model.n, model.n) or not np.allclose(P, P.T, atol=1e-12 * max(1.0, np.abs(P).max())):
        return CheckResult(False, "not-symmetric")
    if eigvalsh(P)[0] <= 0:
        return CheckResult(False, "P-not-pd")
    L, rhs = assemble_inequality(model, P)
    M = rhs(c) - L
    if tol is None:
        tol = DEFAULT_TOL_REL * np.linalg.norm(M)
    w = eigvalsh(M)
    if w[0] < -tol:
        return CheckResult(False, "inequality", w[0], tol)
    return CheckResult(True, "ok", w[0], tol)


# ---------------------------------------------------------------- certificates

@dataclass
class StabilityCertificate:
    P: np.ndarray
    c: np.ndarray
    tol: float = None
    k: int = 2
    check: CheckResult = field(default=None, repr=False)

    def __post_init__(self):
        self.P = _sym(np.asarray(self.P, dtype=float))
        self.c = np.asarray(self.c, dtype=float)
        w = eigvalsh(self.P)
        self.lambda_min_P = float(w[0])
        self.lambda_max_P = float(w[-1])

    @property
    def kappa0(self):
        return float(self.c[1] + self.c[2] + self.c[3])

    @property
    def kappa(self):
        return float((self.c[0] - self.kappa0) / (1.0 + self.kappa0))

    @classmethod
    def validated(cls, model, P, c, tol=None):
        res = check_certificate(model, P, c, tol)
        if not res:
            raise Infeasible(f"certificate rejected: {res.reason} (min eig {res.min_eig:.3e})")
        return cls(P, c, res.tol, 2, res)

    def to_dict(self):
        return {
            "P": self.P.tolist(), "c": self.c.tolist(),
            "kappa": self.kappa, "kappa0": self.kappa0,
            "lambda_min_P": self.lambda_min_P, "lambda_max_P": self.lambda_max_P,
            "k": self.k, "tol": self.tol,
            "min_eig": None if self.check is None else self.check.min_eig,
        }


@dataclass(frozen=True)
class KlEnvelope:
    """beta(s,t) = ratio e^{-kappa t} s, gamma(s) = gamma_coeff s^2, and the
    delayed envelope beta_tilde(s,t) = e^{-(t-tau)} s + beta(s, max(0, t-tau))."""
    kappa: float
    ratio: float
    gamma_coeff: float
    tau: float
    c5: float = 0.0

    def beta(self, s, t):
        return self.ratio * np.exp(-self.kappa * np.asarray(t, dtype=float)) * s

    def gamma(self, s):
        return self.gamma_coeff * np.asarray(s, dtype=float) ** 2

    def beta_tilde(self, s, t):
        t = np.asarray(t, dtype=float)
        return np.exp(-(t - self.tau)) * s + self.beta(s, np.maximum(0.0, t - self.tau))

    def beta_tilde_coeff(self, t):
        """beta_tilde is linear in s; this is its slope at time t."""
        return float(self.beta_tilde(1.0, t))

    def phi(self, s):
        return 0.5 * self.c5 * np.asarray(s, dtype=float) ** 2

    def to_dict(self):
        return {"kappa": self.kappa, "ratio": self.ratio,
                "gamma_coeff": self.gamma_coeff, "tau": self.tau, "c5": self.c5}


def derive_envelope(cert, tau):
    if not cert.kappa > 0:
        raise Infeasible("certificate has nonpositive kappa")
    ratio = cert.lambda_max_P / cert.lambda_min_P
    gamma_coeff = cert.c[4] / (cert.lambda_min_P * math.e * cert.kappa)
    return KlEnvelope(cert.kappa, ratio, gamma_coeff, float(tau), float(cert.c[4]))


# ---------------------------------------------------------------- V-K search

def default_grid(model, points=20):
    scale = np.linalg.norm(model.A1, 2)
    if not scale > 0:
        scale = 1.0
    return np.logspace(-6, 2, points) * scale


class _Schur:
    """Closed-form c1 for fixed (P, c2..c5) via the Schur complement.

    The delayed and input blocks of RHS - LHS are block diagonal, so RHS - LHS
    is PSD iff those blocks are PD and c1 P <= S(c2..c5); the largest c1 is
    then the smallest generalized eigenvalue of (S, P).
    """

    def __init__(self, model, P):
        self.model = model
        self.P = _sym(np.asarray(P, dtype=float))
        n = model.n
        L, _ = assemble_inequality(model, self.P)
        b = [slice(k * n, (k + 1) * n) for k in range(4)] + [slice(4 * n, 4 * n + model.m)]
        self.delta = L[b[0], b[0]]
        self.X = [L[b[0], b[k]] for k in (1, 2, 3)]
        self.D = [L[b[k], b[k]] for k in (1, 2, 3)]
        self.PB = L[b[0], b[4]]
        Lc = np.linalg.cholesky(self.P)
        self.Linv = np.linalg.inv(Lc)

    def c1_max(self, c2, c3, c4, c5):
        S = -self.delta
        for X, D, ck in zip(self.X, self.D, (c2, c3, c4)):
            K = ck * self.P - D
            wK = np.linalg.eigvalsh(_sym(K))
            if wK[0] <= 0:
                return -math.inf
            if np.any(X):
                S = S - X @ np.linalg.solve(K, X.T)
        if math.isfinite(c5):
            S = S - self.PB @ self.PB.T / c5
        T = _sym(self.Linv @ S @ self.Linv.T)
        return float(np.linalg.eigvalsh(T)[0])

    def objective(self, c2, c3, c4, c5):
        return self.c1_max(c2, c3, c4, c5) - (c2 + c3 + c4)


def _refine_log(f, lo, hi, iters=40):
    # ternary search in log space on a unimodal slice
    a, b = math.log(lo), math.log(hi)
    for _ in range(iters):
        m1 = a + (b - a) / 3
        m2 = b - (b - a) / 3
        if f(math.exp(m1)) < f(math.exp(m2)):
            a = m1
        else:
            b = m2
    return math.exp(0.5 * (a + b))


def _c_step(schur, grid, c5_loss=0.01):
    """Maximize c1 - (c2 + c3 + c4) for fixed P.

    Coordinate search over the log grid for c2..c4 (with c5 -> inf), local
    log-space refinement, then c5 is the smallest value that keeps the
    objective within ``c5_loss`` (relative) of the c5 -> inf optimum.
    """
    grid = np.asarray(grid, dtype=float)
    best = [grid[0]] * 3
    inf = math.inf

    def obj(cs, c5=inf):
        return schur.objective(cs[0], cs[1], cs[2], c5)

    best_val = obj(best)
    for _ in range(10):
        improved = False
        for i in range(3):
            vals = []
            for g in grid:
                trial = list(best)
                trial[i] = g
                vals.append(obj(trial))
            j = int(np.argmax(vals))
            if vals[j] > best_val + 1e-15:
                best[i] = grid[j]
                best_val = vals[j]
                improved = True
        if not improved:
            break
    if not math.isfinite(best_val) or best_val <= 0:
        return None
    # refine each coordinate between its grid neighbours
    for _ in range(3):
        for i in range(3):
            j = int(np.searchsorted(grid, best[i]))
            lo = grid[max(j - 1, 0)]
            hi = grid[min(j + 1, len(grid) - 1)]
            if lo >= hi:
                continue

            def f(v, i=i):
                trial = list(best)
                trial[i] = v
                return obj(trial)

            v = _refine_log(f, lo, hi)
            if f(v) > best_val:
                best[i] = v
                best_val = f(v)
    target = best_val - c5_loss * abs(best_val)
    if target <= 0:
        return None
    lo, hi = 1e-12, 1.0
    while obj(best, hi) < target:
        hi *= 2.0
        if hi > 1e300:
            return None
    lo = hi / 2 if hi > 1.0 else lo
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if obj(best, mid) >= target:
            hi = mid
        else:
            lo = mid
        if hi / lo < 1 + 1e-10:
            break
    c5 = hi
    c1 = schur.c1_max(*best, c5)
    # step inside the boundary so the eigenvalue test is not decided by rounding
    c1 -= 1e-9 * max(abs(c1), 1e-12)
    return np.array([c1, best[0], best[1], best[2], c5])


def _objective(c):
    return float(c[0] - c[1] - c[2] - c[3])


def vk_search(model, P_init=None, iterations=5, grid=None, c5_loss=0.01, tol=None):
    """Alternating search over c (P fixed) and diagonal scalings of P (c fixed).

    ``iterations`` bounds the number of P-steps; 0 keeps P = P_init.
    Raises Infeasible when no grid point yields a valid certificate.
    """
    n = model.n
    P = np.eye(n) if P_init is None else _sym(np.asarray(P_init, dtype=float))
    if eigvalsh(P)[0] <= 0:
        raise Infeasible("P_init is not positive definite")
    if grid is None:
        grid = default_grid(model)
    c = _c_step(_Schur(model, P), grid, c5_loss)
    if c is None or not check_certificate(model, P, c, tol):
        raise Infeasible("no (c1..c5) on the search grid satisfies the inequality "
                         "with c1 > c2 + c3 + c4")
    best_val = _objective(c)
    factors = (0.5, 0.8, 0.95, 1.05, 1.25, 2.0)
    for _ in range(iterations):
        # P-step: with (c2..c5) fixed, rescale one diagonal entry of P at a time
        # (congruence with a diagonal matrix) and keep the best closed-form c1
        cand_P = P.copy()
        cand_val = best_val
        for i in range(n):
            for f in factors:
                d = np.ones(n)
                d[i] = math.sqrt(f)
                Pt = cand_P * np.outer(d, d)
                Pt = Pt / np.max(np.abs(Pt))
                val = _Schur(model, Pt).objective(c[1], c[2], c[3], c[4])
                if val > cand_val + 1e-12:
                    cand_P, cand_val = Pt, val
        if cand_val <= best_val + 1e-12:
            break
        c_new = _c_step(_Schur(model, cand_P), grid, c5_loss)
        if c_new is None or not check_certificate(model, cand_P, c_new, tol):
            break
        improvement = _objective(c_new) - best_val
        if improvement <= 0:
            break
        P, c, best_val = cand_P, c_new, _objective(c_new)
        if improvement < 1e-6:
            break
    return StabilityCertificate.validated(model, P, c, tol)
