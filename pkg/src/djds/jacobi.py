"""Cyclic Jacobi eigensolver for real symmetric matrices.

Rotations are applied in round-robin (tournament) order so that each sweep
is a sequence of n-1 rounds of disjoint (p, q) pairs, vectorized with numpy.
"""
import numpy as np


def _tournament(n):
    # round-robin schedule over an even number of players; a dummy index n
    # pads odd sizes and its pairs are dropped
    players = list(range(n)) + ([n] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            arr = np.array(pairs, dtype=np.intp)
            rounds.append((arr[:, 0], arr[:, 1]))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _off(a):
    # summed directly: ||a||^2 - ||diag a||^2 cancels once the off part is small
    o = a - np.diag(np.diag(a))
    return np.sqrt(np.sum(o * o))


def jacobi_eigh(M, rel_tol=1e-12, max_sweeps=100):
    """Eigen-decomposition of a symmetric matrix.

    Returns (w, V) with ascending eigenvalues w and orthonormal columns V,
    so that M = V diag(w) V^T. Iteration stops once the off-diagonal
    Frobenius mass drops below rel_tol * ||M||_F.
    """
    a = np.array(M, dtype=float, copy=True)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("jacobi_eigh expects a square matrix")
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    V = np.eye(n)
    if n <= 1:
        return np.diag(a).copy(), V
    fro = np.linalg.norm(a)
    thresh = rel_tol * fro
    rounds = _tournament(n)
    for _ in range(max_sweeps):
        if _off(a) <= thresh:
            break
        for p, q in rounds:
            apq = a[p, q]
            # pivots far below the threshold are left alone (avoids overflow in theta)
            active = np.abs(apq) > 1e-3 * thresh / n
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            sgn = np.where(theta >= 0.0, 1.0, -1.0)
            t = sgn / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # columns then rows; the pairs are disjoint so the update is exact
            ap, aq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = c * ap - s * aq
            a[:, q] = s * ap + c * aq
            ap, aq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * ap - s[:, None] * aq
            a[q, :] = s[:, None] * ap + c[:, None] * aq
            vp, vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = c * vp - s * vq
            V[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def eigvalsh(M, rel_tol=1e-12):
    return jacobi_eigh(M, rel_tol)[0]


def spectral_norm(M):
    """Largest singular value, from the Jacobi spectrum of M^T M."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    w = eigvalsh(M.T @ M)
    return float(np.sqrt(max(w[-1], 0.0)))
