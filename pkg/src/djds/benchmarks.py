"""Reference models used by the tests, the acceptance suite and the CLI examples."""
import numpy as np

from .model import HistorySegment, InputSpace, LinearDjdsModel, OperatingRegion

# ten-room building: heaters sit in rooms 2 and 5 (0-based 1 and 4)
TEN_ROOM_EDGES = [(1, 2), (2, 7), (2, 9), (2, 3), (3, 4), (4, 5), (5, 8), (5, 10), (5, 6)]
TEN_ROOM = dict(
    alpha=5e-2, alpha_e=5e-3, alpha_e_heated=8e-3, alpha_h=3.6e-3,
    t_e=15.0, t_h=100.0, alpha_tau=1e-4, g=2e-3, g_tau=1e-4, r=1e-3, lam=0.1,
    tau1=15.0, tau2=10.0, tau3=0.0,
)
TEN_ROOM_HEATED = (1, 4)


def ten_room_matrices(p=None):
    p = dict(TEN_ROOM, **(p or {}))
    n = 10
    A1 = np.zeros((n, n))
    for i, j in TEN_ROOM_EDGES:
        i, j = i - 1, j - 1
        A1[i, j] += p["alpha"]
        A1[j, i] += p["alpha"]
        A1[i, i] -= p["alpha"]
        A1[j, j] -= p["alpha"]
    alpha_e = np.full(n, p["alpha_e"])
    alpha_e[list(TEN_ROOM_HEATED)] = p["alpha_e_heated"]
    A1 -= np.diag(alpha_e)
    B = np.zeros((n, 2))
    for k, room in enumerate(TEN_ROOM_HEATED):
        # alpha_H (T_H - x) u = alpha_H T_H u - alpha_H x u; the bilinear part is
        # taken at u = 1 as an extra loss on the heated rooms
        B[room, k] = p["alpha_h"] * p["t_h"]
        A1[room, room] -= p["alpha_h"]
    A2 = -p["alpha_tau"] * np.eye(n)
    offset = alpha_e * p["t_e"]
    E = np.eye(n)
    G = [p["g"] * np.outer(E[i], E[i]) for i in range(n)]
    Gbar = [p["g_tau"] * np.outer(E[i], E[i]) for i in range(n)]
    R = [p["r"] * np.outer(E[i], E[i]) for i in range(n)]
    Rbar = [np.zeros((n, n)) for _ in range(n)]
    lam = [p["lam"]] * n
    return dict(A1=A1, A2=A2, B=B, G=G, Gbar=Gbar, R=R, Rbar=Rbar, lam=lam,
                tau1=p["tau1"], tau2=p["tau2"], tau3=p["tau3"], offset=offset)


def ten_room_model(p=None):
    return LinearDjdsModel(**ten_room_matrices(p))


def ten_room_inputs():
    return InputSpace.from_points([(1.0, 0.0), (0.0, 1.0), (0.0, 0.0)])


def ten_room_region():
    # operating region for the gamma-tilde slope: a band around the comfort zone
    return OperatingRegion.uniform(15.0, 25.0, 10)


TEN_ROOM_SETUP = dict(h=30.0, zeta_s=17.0, zeta0=19.0, W=(18.0, 21.0),
                      table_N=(15, 14, 13, 11, 9),
                      table_transitions=(43046721, 14348907, 4782969, 531441, 59049),
                      table_epsilon=(0.26, 0.31, 0.38, 0.55, 0.8), kappa=0.0129)


def ten_room_source(tau=15.0, grid_step=None):
    return HistorySegment.constant(TEN_ROOM_SETUP["zeta_s"], tau, grid_step, n=10)


def tiny_model():
    """Scalar certified instance with delays, diffusion and jumps."""
    return LinearDjdsModel(
        A1=[[-1.0]], A2=[[0.1]], B=[[1.0]],
        G=[[[0.05]]], Gbar=[[[0.02]]], R=[[[0.05]]], Rbar=[[[0.0]]], lam=[0.5],
        tau1=0.5, tau2=0.5, tau3=0.0)


def tiny_inputs():
    return InputSpace.from_points([(0.0,), (0.5,)])


def tiny_region():
    return OperatingRegion((-2.0,), (2.0,))
